// Copyright 2026 The SoSN Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "sosn/model.hpp"

#include <cmath>
#include <random>
#include <string>

namespace sosn {
namespace {

constexpr std::size_t kEncoderBlocks = 4;
constexpr std::size_t kPooledEncoderBlocks = 2;
constexpr std::size_t kSimilarityBlocks = 2;

std::string enc_prefix(std::size_t block) { return "enc." + std::to_string(block) + "."; }
std::string sim_prefix(std::size_t stream) { return "sim." + std::to_string(stream) + "."; }

std::size_t stream_count(const ModelConfig& c) {
  return c.perm.multi_stream ? c.perm.count : 1;
}

std::size_t stream_channels(const ModelConfig& c) {
  return c.perm.multi_stream ? c.descriptor_slices()
                             : c.descriptor_slices() * c.perm.count;
}

std::size_t similarity_side(std::size_t d) { return d / 2 / 2; }

Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

void add_conv_block(ParamStore& store, const std::string& prefix, std::size_t in,
                    std::size_t out, std::mt19937_64& rng) {
  store.add_parameter(prefix + "w", uniform_init({out, in, 3, 3}, in * 9, rng));
  store.add_parameter(prefix + "bn_gamma", Tensor({out}, 1.0));
  store.add_parameter(prefix + "bn_beta", Tensor({out}, 0.0));
  store.add_buffer(prefix + "bn_mean", Tensor({out}, 0.0));
  store.add_buffer(prefix + "bn_var", Tensor({out}, 1.0));
}

ParamStore initial_params(const ModelConfig& c, std::mt19937_64& rng) {
  ParamStore store;
  std::size_t in = c.channels_in;
  for (std::size_t b = 0; b < kEncoderBlocks; ++b) {
    add_conv_block(store, enc_prefix(b), in, c.encoder_filters, rng);
    in = c.encoder_filters;
  }
  const std::size_t side = similarity_side(c.descriptor_side());
  const std::size_t flat = c.similarity_filters * side * side;
  for (std::size_t s = 0; s < stream_count(c); ++s) {
    const std::string p = sim_prefix(s);
    std::size_t sin = stream_channels(c);
    for (std::size_t b = 0; b < kSimilarityBlocks; ++b) {
      add_conv_block(store, p + std::to_string(b) + ".", sin, c.similarity_filters, rng);
      sin = c.similarity_filters;
    }
    store.add_parameter(p + "fc1.w", uniform_init({c.similarity_hidden, flat}, flat, rng));
    store.add_parameter(p + "fc1.b", Tensor({c.similarity_hidden}, 0.0));
    store.add_parameter(p + "fc2.w",
                        uniform_init({1, c.similarity_hidden}, c.similarity_hidden, rng));
    store.add_parameter(p + "fc2.b", Tensor({1}, 0.0));
  }
  return store;
}

bool same_pn(const pn::PowerNormSpec& a, const pn::PowerNormSpec& b) {
  return a.kind == b.kind && a.gamma == b.gamma && a.eta == b.eta && a.lambda == b.lambda &&
         a.rho == b.rho && a.alpha_soft == b.alpha_soft && a.beta_shift == b.beta_shift &&
         a.gamma_grad_cap == b.gamma_grad_cap && a.trace_input == b.trace_input;
}

Tensor stack_images(const Episode& e) {
  const Shape& img = e.queries.front().shape();
  const std::size_t per = shape_size(img);
  const std::size_t count = e.ways() * e.shots() + e.queries.size();
  Shape shape{count};
  shape.insert(shape.end(), img.begin(), img.end());
  Tensor out(shape);
  std::size_t at = 0;
  auto put = [&](const Tensor& t) {
    std::copy(t.storage().begin(), t.storage().end(), out.storage().begin() + at * per);
    ++at;
  };
  for (const auto& cls : e.supports)
    for (const auto& t : cls) put(t);
  for (const auto& t : e.queries) put(t);
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (image_size == 0 || channels_in == 0) {
    throw ConfigError("model: image_size and channels_in must be positive");
  }
  if (encoder_filters == 0 || similarity_filters == 0 || similarity_hidden == 0) {
    throw ConfigError("model: layer widths must be positive");
  }
  if (ways < 2) throw ConfigError("model: ways must be at least 2");
  if (shots < 1) throw ConfigError("model: shots must be at least 1");
  if (queries_per_class < 1) throw ConfigError("model: queries_per_class must be at least 1");
  if (perm.count < 1) throw ConfigError("model: permutation count must be at least 1");
  pn.validate();
  if ((pn.kind == pn::PnKind::kGamma || pn.kind == pn::PnKind::kMaxExp) &&
      pn.beta_shift > 0.0) {
    throw ConfigError("model: " + std::string(pn::to_string(pn.kind)) +
                      " needs non-negative inputs, so beta_shift must be 0");
  }
  if (feature_side() == 0) {
    throw ConfigError("model: image_size " + std::to_string(image_size) +
                      " leaves no spatial extent after the encoder");
  }
  if (similarity_side(descriptor_side()) == 0) {
    throw ConfigError("model: descriptor side " + std::to_string(descriptor_side()) +
                      " is below the similarity network minimum of 4");
  }
}

std::size_t ModelConfig::feature_side() const {
  std::size_t s = image_size;
  for (std::size_t b = 0; b < kEncoderBlocks; ++b) {
    if (s + 2 * encoder_padding < 3) return 0;
    s = s + 2 * encoder_padding - 2;
    if (b < kPooledEncoderBlocks) s /= 2;
    if (s == 0) return 0;
  }
  return s;
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return image_size == o.image_size && channels_in == o.channels_in &&
         encoder_filters == o.encoder_filters && encoder_padding == o.encoder_padding &&
         similarity_filters == o.similarity_filters &&
         similarity_hidden == o.similarity_hidden && op == o.op && same_pn(pn, o.pn) &&
         perm.count == o.perm.count && perm.multi_stream == o.perm.multi_stream;
}

// One forward pass. `buffers` is the model's own store in training phase
// and null otherwise.
struct SosnModel::Pass {
  const SosnModel& model;
  Binding& binding;
  Phase phase;
  ParamStore* buffers;

  const ModelConfig& cfg() const { return model.config_; }

  ad::Var block(const std::string& prefix, const ad::Var& x, std::size_t padding,
                bool pool) const {
    // No conv bias: the batchnorm shift that follows subsumes it.
    ad::Var y = ad::conv2d(x, binding(prefix + "w"), nullptr, padding);
    ad::BatchNormBuffers buf;
    ad::BatchNormMode mode = ad::BatchNormMode::kEvaluation;
    if (phase == Phase::kTrain) {
      mode = ad::BatchNormMode::kTraining;
      buf.running_mean = &buffers->value(prefix + "bn_mean");
      buf.running_var = &buffers->value(prefix + "bn_var");
    } else {
      // Evaluation mode only reads the running statistics.
      buf.running_mean = const_cast<Tensor*>(&model.params_.value(prefix + "bn_mean"));
      buf.running_var = const_cast<Tensor*>(&model.params_.value(prefix + "bn_var"));
    }
    y = ad::batchnorm(y, binding(prefix + "bn_gamma"), binding(prefix + "bn_beta"), mode, buf);
    y = ad::relu(y);
    return pool ? ad::maxpool2x2(y) : y;
  }

  ad::Var encode(const ad::Var& images) const {
    const Tensor& v = images->value;
    const ModelConfig& c = cfg();
    if (v.rank() != 4 || v.dim(1) != c.channels_in || v.dim(2) != c.image_size ||
        v.dim(3) != c.image_size) {
      throw ShapeError("encode: expected [B, " + std::to_string(c.channels_in) + ", " +
                       std::to_string(c.image_size) + ", " + std::to_string(c.image_size) +
                       "] images, got " + to_string(v.shape()));
    }
    ad::Var x = images;
    for (std::size_t b = 0; b < kEncoderBlocks; ++b) {
      x = block(enc_prefix(b), x, c.encoder_padding, b < kPooledEncoderBlocks);
    }
    return ad::reshape(x, {v.dim(0), c.encoder_filters, c.spatial_count()});
  }

  ad::Var stream(std::size_t s, const ad::Var& x) const {
    const std::string p = sim_prefix(s);
    ad::Var y = x;
    for (std::size_t b = 0; b < kSimilarityBlocks; ++b) {
      y = block(p + std::to_string(b) + ".", y, 1, true);
    }
    const std::size_t batch = y->value.dim(0);
    y = ad::reshape(y, {batch, y->value.size() / batch});
    y = ad::relu(ad::linear(y, binding(p + "fc1.w"), binding(p + "fc1.b")));
    y = ad::linear(y, binding(p + "fc2.w"), binding(p + "fc2.b"));
    return ad::reshape(ad::sigmoid(y), {batch});
  }

  ad::Var similarity(const ad::Var& descriptors, bool permute) const {
    const Tensor& v = descriptors->value;
    const ModelConfig& c = cfg();
    const std::size_t q = c.descriptor_slices(), d = c.descriptor_side();
    if (v.rank() != 4 || v.dim(1) != q || v.dim(2) != d || v.dim(3) != d) {
      throw ShapeError("similarity: expected [B, " + std::to_string(q) + ", " +
                       std::to_string(d) + ", " + std::to_string(d) + "] descriptors, got " +
                       to_string(v.shape()));
    }
    if (!permute) {
      if (c.perm.count != 1) {
        throw ConfigError("similarity: the unpermuted path needs a single permutation");
      }
      return stream(0, descriptors);
    }
    const auto scores = streams(descriptors);
    ad::Var total = scores.front();
    for (std::size_t p = 1; p < scores.size(); ++p) total = ad::add(total, scores[p]);
    if (scores.size() == 1) return total;
    return ad::scale(total, 1.0 / static_cast<double>(scores.size()));
  }

  std::vector<ad::Var> streams(const ad::Var& descriptors) const {
    const Tensor& v = descriptors->value;
    const ModelConfig& c = cfg();
    const std::size_t q = c.descriptor_slices(), d = c.descriptor_side();
    const ad::Var stacked = permute_stack_batch(descriptors, model.perms_);
    if (!c.perm.multi_stream) return {stream(0, stacked)};

    const std::size_t batch = v.dim(0), p_count = c.perm.count, area = d * d;
    std::vector<ad::Var> out;
    for (std::size_t p = 0; p < p_count; ++p) {
      std::vector<std::size_t> index;
      index.reserve(batch * q * area);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < q; ++s) {
          const std::size_t base = (b * p_count * q + p * q + s) * area;
          for (std::size_t i = 0; i < area; ++i) index.push_back(base + i);
        }
      out.push_back(stream(p, ad::gather(stacked, std::move(index), {batch, q, d, d})));
    }
    return out;
  }

  ad::Var episode(const Episode& e) const {
    e.validate();
    const ModelConfig& c = cfg();
    const std::size_t ways = e.ways(), shots = e.shots(), nq = e.queries.size();
    const std::size_t k = c.encoder_filters, n = c.spatial_count();
    const std::size_t n_support = ways * shots;

    ad::Var feats = encode(ad::constant(stack_images(e)));
    feats = mean_shift_batch(feats, c.pn.beta_shift);

    ad::Var desc;
    if (c.op == OperatorKind::kFull) {
      // Pair (q, c): rows 0..K-1 hold the class supports side by side, rows
      // K..2K-1 repeat the query once per support.
      const std::size_t cols = shots * n;
      std::vector<std::size_t> index;
      index.reserve(nq * ways * 2 * k * cols);
      for (std::size_t qi = 0; qi < nq; ++qi)
        for (std::size_t ci = 0; ci < ways; ++ci) {
          for (std::size_t r = 0; r < k; ++r)
            for (std::size_t z = 0; z < shots; ++z)
              for (std::size_t col = 0; col < n; ++col)
                index.push_back(((ci * shots + z) * k + r) * n + col);
          for (std::size_t r = 0; r < k; ++r)
            for (std::size_t z = 0; z < shots; ++z)
              for (std::size_t col = 0; col < n; ++col)
                index.push_back(((n_support + qi) * k + r) * n + col);
        }
      const ad::Var joint = ad::gather(feats, std::move(index), {nq * ways, 2 * k, cols});
      const ad::Var m = pn::apply_pn(autocorrelate_batch(joint), c.pn);
      desc = ad::reshape(m, {nq * ways, 1, 2 * k, 2 * k});
    } else {
      ad::Var support_side;
      if (c.op == OperatorKind::kRank) {
        std::vector<std::size_t> index;
        index.reserve(n_support * k * n);
        for (std::size_t ci = 0; ci < ways; ++ci)
          for (std::size_t r = 0; r < k; ++r)
            for (std::size_t z = 0; z < shots; ++z)
              for (std::size_t col = 0; col < n; ++col)
                index.push_back(((ci * shots + z) * k + r) * n + col);
        support_side = ad::gather(feats, std::move(index), {ways, k, shots * n});
      } else {
        const ad::Var flat = ad::reshape(ad::slice0(feats, 0, n_support), {n_support, k * n});
        Tensor averaging({ways, n_support}, 0.0);
        for (std::size_t ci = 0; ci < ways; ++ci)
          for (std::size_t z = 0; z < shots; ++z)
            averaging.at(ci, ci * shots + z) = 1.0 / static_cast<double>(shots);
        support_side = ad::reshape(ad::matmul(ad::constant(std::move(averaging)), flat),
                                   {ways, k, n});
      }
      const ad::Var sm = pn::apply_pn(autocorrelate_batch(support_side), c.pn);
      const ad::Var qm =
          pn::apply_pn(autocorrelate_batch(ad::slice0(feats, n_support, n_support + nq)), c.pn);
      const ad::Var both = ad::concat0({sm, qm});  // [L + nq, K, K]
      const std::size_t area = k * k;
      std::vector<std::size_t> index;
      index.reserve(nq * ways * 2 * area);
      for (std::size_t qi = 0; qi < nq; ++qi)
        for (std::size_t ci = 0; ci < ways; ++ci) {
          for (std::size_t i = 0; i < area; ++i) index.push_back(ci * area + i);
          for (std::size_t i = 0; i < area; ++i) index.push_back((ways + qi) * area + i);
        }
      desc = ad::gather(both, std::move(index), {nq * ways, 2, k, k});
    }
    return ad::reshape(similarity(desc, true), {nq, ways});
  }
};

SosnModel::SosnModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), perms_(PermutationSet::identity(1)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  perms_ = PermutationSet::random(config_.descriptor_side(), config_.perm.count, rng);
  params_ = initial_params(config_, rng);
}

SosnModel::SosnModel(const ModelConfig& config, PermutationSet perms, ParamStore params)
    : config_(config), perms_(std::move(perms)), params_(std::move(params)) {
  config_.validate();
  if (perms_.dim() != config_.descriptor_side() || perms_.count() != config_.perm.count) {
    throw ConfigError("model: stored permutations do not match the configuration");
  }
  std::mt19937_64 rng(0);
  const ParamStore expected = initial_params(config_, rng);
  if (expected.parameter_names() != params_.parameter_names() ||
      expected.buffer_names() != params_.buffer_names()) {
    throw ConfigError("model: stored parameter names do not match the configuration");
  }
  for (const auto& names : {expected.parameter_names(), expected.buffer_names()}) {
    for (const auto& name : names) {
      if (expected.value(name).shape() != params_.value(name).shape()) {
        throw ConfigError("model: parameter '" + name + "' has shape " +
                          to_string(params_.value(name).shape()) + ", expected " +
                          to_string(expected.value(name).shape()));
      }
    }
  }
}

ad::Var SosnModel::encode_batch(Binding& binding, const ad::Var& images, Phase phase) {
  return Pass{*this, binding, phase, &params_}.encode(images);
}

FeatureMap SosnModel::encode(Binding& binding, const Tensor& image) const {
  Shape shape{1};
  shape.insert(shape.end(), image.shape().begin(), image.shape().end());
  const ad::Var out =
      Pass{*this, binding, Phase::kEval, nullptr}.encode(ad::constant(image.reshaped(shape)));
  return FeatureMap(ad::reshape(out, {config_.encoder_filters, config_.spatial_count()}));
}

ad::Var SosnModel::similarity_batch(Binding& binding, const ad::Var& descriptors, Phase phase,
                                    bool permute) {
  return Pass{*this, binding, phase, &params_}.similarity(descriptors, permute);
}

ad::Var SosnModel::similarity(Binding& binding, const RelationDescriptor& d) const {
  const ad::Var batched = ad::reshape(d.data, {1, d.q_slices(), d.dim(), d.dim()});
  return Pass{*this, binding, Phase::kEval, nullptr}.similarity(batched, true);
}

Tensor SosnModel::stream_scores(const RelationDescriptor& d) const {
  Binding binding(params_, false);
  const ad::Var batched = ad::reshape(d.data, {1, d.q_slices(), d.dim(), d.dim()});
  Pass pass{*this, binding, Phase::kEval, nullptr};
  pass.similarity(batched, true);  // shape validation
  const auto scores = pass.streams(batched);
  Tensor out({scores.size()});
  for (std::size_t p = 0; p < scores.size(); ++p) out[p] = scores[p]->value.item();
  return out;
}

ad::Var SosnModel::score_episode(Binding& binding, const Episode& episode, Phase phase) {
  return Pass{*this, binding, phase, &params_}.episode(episode);
}

Tensor SosnModel::predict(const Episode& episode) const {
  Binding binding(params_, false);
  return Pass{*this, binding, Phase::kEval, nullptr}.episode(episode)->value;
}

Tensor SosnModel::predict_reference(const Episode& episode) const {
  episode.validate();
  Binding binding(params_, false);
  const double beta = config_.pn.beta_shift;
  std::vector<std::vector<FeatureMap>> supports;
  for (const auto& cls : episode.supports) {
    std::vector<FeatureMap> maps;
    for (const auto& img : cls) maps.push_back(mean_shift(encode(binding, img), beta));
    supports.push_back(std::move(maps));
  }
  Tensor out({episode.queries.size(), episode.ways()});
  for (std::size_t q = 0; q < episode.queries.size(); ++q) {
    const FeatureMap query = mean_shift(encode(binding, episode.queries[q]), beta);
    for (std::size_t c = 0; c < episode.ways(); ++c) {
      const RelationDescriptor d = describe(config_.op, supports[c], query, config_.pn);
      out.at(q, c) = similarity(binding, d)->value.item();
    }
  }
  return out;
}

ad::Var episode_loss(const ad::Var& scores, std::span<const std::size_t> query_labels) {
  const Tensor& v = scores->value;
  if (v.rank() != 2 || v.dim(0) == 0) {
    throw DataError("episode_loss: expected [nq, L] scores with at least one query, got " +
                    to_string(v.shape()));
  }
  if (query_labels.size() != v.dim(0)) {
    throw ShapeError("episode_loss: " + std::to_string(query_labels.size()) +
                     " labels for " + std::to_string(v.dim(0)) + " queries");
  }
  Tensor target(v.shape(), 0.0);
  for (std::size_t q = 0; q < query_labels.size(); ++q) {
    if (query_labels[q] >= v.dim(1)) {
      throw DataError("episode_loss: label " + std::to_string(query_labels[q]) +
                      " outside [0, " + std::to_string(v.dim(1)) + ")");
    }
    target.at(q, query_labels[q]) = 1.0;
  }
  const ad::Var diff = ad::sub(scores, ad::constant(std::move(target)));
  return ad::sum(ad::mul(diff, diff));
}

ad::Var episode_loss(SosnModel& model, Binding& binding, const Episode& episode) {
  return episode_loss(model.score_episode(binding, episode, Phase::kTrain),
                      episode.query_labels);
}

std::size_t classify(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

double episode_accuracy(const Tensor& scores, std::span<const std::size_t> query_labels) {
  if (scores.rank() != 2 || scores.dim(0) != query_labels.size() || query_labels.empty()) {
    throw ShapeError("episode_accuracy: scores " + to_string(scores.shape()) + " for " +
                     std::to_string(query_labels.size()) + " labels");
  }
  const std::size_t ways = scores.dim(1);
  std::size_t correct = 0;
  for (std::size_t q = 0; q < query_labels.size(); ++q) {
    const std::span<const double> row(scores.storage().data() + q * ways, ways);
    if (classify(row) == query_labels[q]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(query_labels.size());
}

}  // namespace sosn
