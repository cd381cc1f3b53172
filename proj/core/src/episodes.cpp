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

#include "sosn/episodes.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>

#include "json.hpp"

#include "sosn/config.hpp"
#include "sosn/episode.hpp"

namespace sosn {

void Episode::validate() const {
  if (queries.empty()) throw DataError("episode: empty query set");
  if (supports.empty() || supports.front().empty()) {
    throw DataError("episode: no support images");
  }
  if (query_labels.size() != queries.size()) {
    throw DataError("episode: " + std::to_string(query_labels.size()) + " labels for " +
                    std::to_string(queries.size()) + " queries");
  }
  const Shape& shape = queries.front().shape();
  for (const auto& cls : supports) {
    if (cls.size() != shots()) throw DataError("episode: classes differ in shot count");
    for (const auto& img : cls) {
      if (img.shape() != shape) {
        throw DataError("episode: support image " + to_string(img.shape()) +
                        " differs from query image " + to_string(shape));
      }
    }
  }
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i].shape() != shape) throw DataError("episode: query images differ in shape");
    if (query_labels[i] >= ways()) {
      throw DataError("episode: query label " + std::to_string(query_labels[i]) +
                      " outside [0, " + std::to_string(ways()) + ")");
    }
  }
}

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t uniform_below(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(rng);
}

// First `count` entries of a uniform random permutation of 0..n-1.
std::vector<std::size_t> choose(std::mt19937_64& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(idx[i], idx[i + uniform_below(rng, n - i)]);
  }
  idx.resize(count);
  return idx;
}

bool is_square(const Tensor& image) {
  return image.rank() == 3 && image.dim(1) == image.dim(2);
}

const std::vector<ProtocolSpec>& protocol_table() {
  static const std::vector<ProtocolSpec> table = {
      {"omniglot-5w1s", 5, 1, 19, 1, 20000, 600, Augmentation::kClassExpansion},
      {"omniglot-5w5s", 5, 5, 15, 5, 20000, 600, Augmentation::kClassExpansion},
      {"miniimagenet-5w1s", 5, 1, 5, 3, 20000, 600, Augmentation::kNone},
      {"miniimagenet-5w5s", 5, 5, 5, 3, 20000, 600, Augmentation::kNone},
  };
  return table;
}

json state_json(const TrainState& s) {
  return json{{"episode", s.episode},
              {"moving_accuracy", s.moving_accuracy},
              {"interval_loss", s.interval_loss},
              {"interval_count", s.interval_count}};
}

void check_finite_gradients(const GradMap& grads, std::size_t episode) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) {
      throw NumericError("non-finite gradient of " + name + " at episode " +
                         std::to_string(episode) + "; last checkpoint kept");
    }
  }
}

// Drops metric records past `episode` so a resumed run does not repeat them.
void trim_metrics(const fs::path& path, std::size_t episode) {
  std::vector<std::string> kept;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json rec;
      try {
        rec = json::parse(line);
      } catch (const json::parse_error&) {
        throw DataError("malformed metrics record in " + path.string());
      }
      if (rec.value("episode", std::size_t{0}) <= episode) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& line : kept) out << line << '\n';
}

}  // namespace

std::string_view to_string(Augmentation a) {
  switch (a) {
    case Augmentation::kNone:
      return "none";
    case Augmentation::kClassExpansion:
      return "class_expansion";
    case Augmentation::kRandom:
      return "random";
  }
  return "none";
}

Augmentation parse_augmentation(std::string_view name) {
  if (name == "none") return Augmentation::kNone;
  if (name == "class_expansion") return Augmentation::kClassExpansion;
  if (name == "random") return Augmentation::kRandom;
  throw ConfigError("unknown augmentation \"" + std::string(name) +
                    "\" (expected none, class_expansion or random)");
}

void ProtocolSpec::validate() const {
  if (ways < 2) throw ConfigError("protocol " + name + ": ways must be at least 2");
  if (shots == 0) throw ConfigError("protocol " + name + ": shots must be positive");
  if (train_queries == 0 || test_queries == 0) {
    throw ConfigError("protocol " + name + ": query counts must be positive");
  }
  if (eval_episodes < kMinEvalEpisodes) {
    throw ConfigError("protocol " + name + ": eval_episodes must be at least " +
                      std::to_string(kMinEvalEpisodes));
  }
}

std::vector<std::string> builtin_protocol_names() {
  std::vector<std::string> names;
  for (const auto& p : protocol_table()) names.push_back(p.name);
  return names;
}

ProtocolSpec builtin_protocol(std::string_view name) {
  for (const auto& p : protocol_table()) {
    if (p.name == name) return p;
  }
  throw ConfigError("unknown protocol \"" + std::string(name) + "\"");
}

void apply_protocol_flag(ProtocolSpec& spec, std::string_view flag) {
  for (const auto& p : protocol_table()) {
    if (p.name == flag) {
      spec = p;
      return;
    }
  }
  const std::string f(flag);
  const auto w = f.find('w');
  std::size_t ways = 0;
  std::size_t shots = 0;
  bool ok = w != std::string::npos && w > 0 && f.size() > w + 2 && f.back() == 's';
  if (ok) {
    const std::string a = f.substr(0, w);
    const std::string b = f.substr(w + 1, f.size() - w - 2);
    ok = std::all_of(a.begin(), a.end(), ::isdigit) && std::all_of(b.begin(), b.end(), ::isdigit);
    if (ok) {
      ways = std::stoul(a);
      shots = std::stoul(b);
    }
  }
  if (!ok) {
    throw ConfigError("protocol flag \"" + f + "\" is neither a built-in protocol nor <L>w<Z>s");
  }
  spec.name = f;
  spec.ways = ways;
  spec.shots = shots;
  spec.validate();
}

std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ index);
}

Episode sample_episode(const ImageDataset& data, std::size_t ways, std::size_t shots,
                       std::size_t queries_per_class, std::mt19937_64& rng,
                       bool random_rotation) {
  if (ways == 0 || shots == 0 || queries_per_class == 0) {
    throw DataError("episode: ways, shots and queries must be positive");
  }
  if (data.class_count() < ways) {
    throw DataError("episode: " + std::to_string(ways) + "-way episode from " +
                    std::to_string(data.class_count()) + " classes");
  }
  const std::size_t need = shots + queries_per_class;
  for (std::size_t c = 0; c < data.class_count(); ++c) {
    if (data.images[c].size() < need) {
      const std::string name = c < data.class_names.size() ? data.class_names[c]
                                                           : std::to_string(c);
      throw DataError("class \"" + name + "\" has " + std::to_string(data.images[c].size()) +
                      " images; an episode needs " + std::to_string(need));
    }
  }
  auto take = [&](const Tensor& image) {
    if (!random_rotation) return image;
    if (!is_square(image)) throw DataError("rotation requires square images");
    return ad::rotate90(image, static_cast<int>(uniform_below(rng, 4)));
  };

  Episode ep;
  ep.class_ids = choose(rng, data.class_count(), ways);
  ep.supports.resize(ways);
  for (std::size_t l = 0; l < ways; ++l) {
    const auto& pool = data.images[ep.class_ids[l]];
    const auto picks = choose(rng, pool.size(), need);
    for (std::size_t i = 0; i < shots; ++i) ep.supports[l].push_back(take(pool[picks[i]]));
    for (std::size_t i = shots; i < need; ++i) {
      ep.queries.push_back(take(pool[picks[i]]));
      ep.query_labels.push_back(l);
    }
  }
  return ep;
}

ImageDataset augment_rotations(const ImageDataset& data) {
  ImageDataset out;
  out.image_size = data.image_size;
  out.channels = data.channels;
  for (std::size_t c = 0; c < data.class_count(); ++c) {
    for (const auto& image : data.images[c]) {
      if (!is_square(image)) {
        throw DataError("rotation requires square images; class \"" + data.class_names[c] +
                        "\" has " + to_string(image.shape()));
      }
    }
    for (int k = 0; k < 4; ++k) {
      out.class_names.push_back(k == 0 ? data.class_names[c]
                                       : data.class_names[c] + "/rot" + std::to_string(90 * k));
      std::vector<Tensor> rotated;
      rotated.reserve(data.images[c].size());
      for (const auto& image : data.images[c]) rotated.push_back(ad::rotate90(image, k));
      out.images.push_back(std::move(rotated));
    }
  }
  return out;
}

EvalResult summarize(std::vector<double> accuracies) {
  EvalResult r;
  r.episodes = accuracies.size();
  if (accuracies.empty()) return r;
  const double n = static_cast<double>(accuracies.size());
  double sum = 0.0;
  for (double a : accuracies) sum += a;
  r.mean = sum / n;
  if (accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : accuracies) ss += (a - r.mean) * (a - r.mean);
    r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  r.accuracies = std::move(accuracies);
  return r;
}

EvalResult evaluate(const EpisodeScorer& scorer, const ImageDataset& data,
                    const EvalOptions& options) {
  if (options.episodes == 0) throw ConfigError("evaluation needs at least one episode");
  std::vector<double> acc(options.episodes, 0.0);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mu;

  auto work = [&] {
    try {
      for (std::size_t i = next++; i < options.episodes && !failed; i = next++) {
        std::mt19937_64 rng(episode_seed(options.seed, i));
        const Episode ep =
            sample_episode(data, options.ways, options.shots, options.queries, rng);
        const Tensor scores = scorer(ep);
        if (scores.shape() != Shape{ep.queries.size(), ep.ways()}) {
          throw ShapeError("scorer returned " + to_string(scores.shape()) + " for " +
                           std::to_string(ep.queries.size()) + " queries and " +
                           std::to_string(ep.ways()) + " classes");
        }
        acc[i] = episode_accuracy(scores, ep.query_labels);
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mu);
      if (!error) error = std::current_exception();
      failed = true;
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, options.episodes);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return summarize(std::move(acc));
}

EvalResult evaluate(const SosnModel& model, const ImageDataset& data,
                    const EvalOptions& options) {
  return evaluate([&model](const Episode& ep) { return model.predict(ep); }, data, options);
}

TrainResult train(SosnModel& model, const ImageDataset& data, const TrainOptions& options,
                  TrainState start) {
  if (options.log_interval == 0 || options.checkpoint_interval == 0) {
    throw ConfigError("train: log and checkpoint intervals must be positive");
  }
  const bool write = !options.output_dir.empty();
  fs::path checkpoint_path;
  fs::path metrics_path;
  if (write) {
    fs::create_directories(options.output_dir);
    checkpoint_path = fs::path(options.output_dir) / kCheckpointFile;
    metrics_path = fs::path(options.output_dir) / kMetricsFile;
    if (start.episode == 0) {
      std::ofstream truncate(metrics_path, std::ios::trunc);
      if (!truncate) throw DataError("cannot write " + metrics_path.string());
    } else {
      trim_metrics(metrics_path, start.episode);
    }
  }
  auto checkpoint = [&](const TrainState& s) {
    if (write) save_checkpoint(checkpoint_path.string(), model, s, options.config_json);
  };

  TrainResult result;
  TrainState& state = result.state;
  state = start;
  if (start.episode == 0) checkpoint(state);

  std::size_t last_saved = state.episode;
  while (state.episode < options.episodes) {
    const std::size_t e = state.episode;
    std::mt19937_64 rng(episode_seed(options.seed, e));
    const Episode ep = sample_episode(data, options.ways, options.shots, options.queries, rng,
                                      options.random_rotation);
    Binding binding(model.params());
    ad::Var scores = model.score_episode(binding, ep, Phase::kTrain);
    ad::Var loss = episode_loss(scores, ep.query_labels);
    const double value = loss->value.item();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss at episode " + std::to_string(e) +
                         "; last checkpoint kept");
    }
    ad::backward(loss);
    const GradMap grads = binding.gradients();
    check_finite_gradients(grads, e);
    adam_step(model.params(), grads, options.adam);

    const double acc = episode_accuracy(scores->value, ep.query_labels);
    state.moving_accuracy = e == 0 ? acc
                                   : kMovingAccuracyDecay * state.moving_accuracy +
                                         (1.0 - kMovingAccuracyDecay) * acc;
    state.interval_loss += value;
    state.interval_count += 1;
    state.episode = e + 1;

    if (state.episode % options.log_interval == 0) {
      MetricRecord rec{state.episode, state.interval_loss / double(state.interval_count),
                       state.moving_accuracy};
      result.log.push_back(rec);
      if (write) {
        std::ofstream out(metrics_path, std::ios::app);
        out << metric_to_json(rec) << '\n';
        if (!out) throw DataError("cannot write " + metrics_path.string());
      }
      state.interval_loss = 0.0;
      state.interval_count = 0;
    }
    if (state.episode % options.checkpoint_interval == 0) {
      checkpoint(state);
      last_saved = state.episode;
    }
  }
  if (last_saved != state.episode) checkpoint(state);
  return result;
}

void save_checkpoint(const std::string& path, const SosnModel& model, const TrainState& state,
                     const std::string& config_json) {
  json perms = json::array();
  for (const auto& p : model.permutations().perms()) perms.push_back(p);
  TensorArchive archive;
  archive.header_json = json{{"format", "sosn-checkpoint"},
                             {"model", json::parse(model_config_to_json(model.config()))},
                             {"permutations", perms},
                             {"state", state_json(state)},
                             {"run_config", config_json}}
                            .dump();
  store_to_archive(model.params(), archive);
  // Write then rename, so an interrupted save leaves the previous file intact.
  const std::string tmp = path + ".tmp";
  save_archive(tmp, archive);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint to " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  const TensorArchive archive = load_archive(path);
  json header;
  try {
    header = json::parse(archive.header_json);
  } catch (const json::parse_error& e) {
    throw DataError("checkpoint " + path + ": malformed header: " + e.what());
  }
  if (header.value("format", std::string()) != "sosn-checkpoint") {
    throw DataError("checkpoint " + path + ": not a SoSN checkpoint");
  }
  Checkpoint ck;
  try {
    ck.config = model_config_from_json(header.at("model").dump());
    ck.perms = PermutationSet(header.at("permutations").get<std::vector<std::vector<std::size_t>>>());
    const json& s = header.at("state");
    ck.state.episode = s.at("episode").get<std::size_t>();
    ck.state.moving_accuracy = s.at("moving_accuracy").get<double>();
    ck.state.interval_loss = s.at("interval_loss").get<double>();
    ck.state.interval_count = s.at("interval_count").get<std::size_t>();
    ck.config_json = header.at("run_config").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path + ": " + e.what());
  }
  // A fresh model provides the expected parameter names and shapes.
  SosnModel skeleton(ck.config, 0);
  ck.params = skeleton.params();
  store_from_archive(ck.params, archive);
  return ck;
}

SosnModel restore_model(const Checkpoint& checkpoint, const ModelConfig& expected) {
  if (!expected.same_architecture(checkpoint.config)) {
    throw ConfigError("checkpoint model " + model_config_to_json(checkpoint.config) +
                      " does not match configured model " + model_config_to_json(expected));
  }
  return SosnModel(expected, checkpoint.perms, checkpoint.params);
}

std::string metric_to_json(const MetricRecord& record) {
  return json{{"episode", record.episode}, {"loss", record.loss}, {"moving_acc", record.moving_acc}}
      .dump();
}

std::string eval_to_json(const std::string& protocol, const EvalResult& result) {
  return json{{"protocol", protocol},
              {"mean", result.mean},
              {"ci95", result.ci95},
              {"episodes", result.episodes}}
      .dump();
}

}  // namespace sosn
