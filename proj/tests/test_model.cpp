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

#include <cmath>

#include "doctest.h"
#include "sosn/model.hpp"
#include "test_util.hpp"

using namespace sosn;
using sosn::testutil::random_tensor;

namespace {

// 8x8 inputs give a 2x2 feature map; K = 4 gives the smallest descriptor the
// similarity network accepts.
ModelConfig toy_config(OperatorKind op, pn::PnKind kind) {
  ModelConfig c;
  c.image_size = 8;
  c.encoder_filters = 4;
  c.similarity_filters = 3;
  c.similarity_hidden = 4;
  c.op = op;
  c.pn = pn::default_spec(kind, 4);
  if (kind == pn::PnKind::kGamma || kind == pn::PnKind::kMaxExp) c.pn.beta_shift = 0.0;
  c.perm.count = 2;
  c.ways = 2;
  return c;
}

Episode random_episode(const ModelConfig& c, std::size_t ways, std::size_t shots,
                       std::size_t queries_per_class, std::mt19937_64& rng) {
  Episode e;
  const Shape img{c.channels_in, c.image_size, c.image_size};
  for (std::size_t w = 0; w < ways; ++w) {
    e.class_ids.push_back(w);
    std::vector<Tensor> cls;
    for (std::size_t z = 0; z < shots; ++z) cls.push_back(random_tensor(img, rng, 0.0, 1.0));
    e.supports.push_back(std::move(cls));
    for (std::size_t q = 0; q < queries_per_class; ++q) {
      e.queries.push_back(random_tensor(img, rng, 0.0, 1.0));
      e.query_labels.push_back(w);
    }
  }
  return e;
}

}  // namespace

TEST_CASE("encoder output sizes") {
  ModelConfig c;
  CHECK(c.spatial_count() == 49);
  SosnModel m28(c, 1);
  Binding b(m28.params(), false);
  const FeatureMap f = m28.encode(b, Tensor({1, 28, 28}, 0.5));
  CHECK(f.k() == 64);
  CHECK(f.n() == 49);

  c.image_size = 84;
  CHECK(c.spatial_count() == 441);
  SosnModel m84(c, 1);
  Binding b84(m84.params(), false);
  CHECK(m84.encode(b84, Tensor({1, 84, 84}, 0.5)).n() == 441);

  CHECK_THROWS_AS(m84.encode(b84, Tensor({1, 28, 28})), ShapeError);
  CHECK_THROWS_AS(m84.encode(b84, Tensor({3, 84, 84})), ShapeError);
}

TEST_CASE("zero images stay finite in both phases") {
  ModelConfig c = toy_config(OperatorKind::kAvg, pn::PnKind::kSigmE);
  c.image_size = 28;
  SosnModel model(c, 3);
  Binding frozen(model.params(), false);
  CHECK(model.encode(frozen, Tensor({1, 28, 28}, 0.0)).value().all_finite());
  Binding train(model.params());
  const ad::Var out = model.encode_batch(train, ad::constant(Tensor({3, 1, 28, 28}, 0.0)),
                                         Phase::kTrain);
  CHECK(out->value.all_finite());
}

TEST_CASE("configuration validation") {
  ModelConfig c = toy_config(OperatorKind::kAvg, pn::PnKind::kSigmE);
  c.ways = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config(OperatorKind::kAvg, pn::PnKind::kSigmE);
  c.image_size = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config(OperatorKind::kAvg, pn::PnKind::kSigmE);
  c.encoder_filters = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config(OperatorKind::kAvg, pn::PnKind::kGamma);
  c.pn.beta_shift = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config(OperatorKind::kAvg, pn::PnKind::kSigmE);
  c.perm.count = 25;  // 4! = 24 distinct orderings
  CHECK_THROWS_AS(SosnModel(c, 1), ConfigError);
}

TEST_CASE("restoring checks parameters against the configuration") {
  const ModelConfig c = toy_config(OperatorKind::kRank, pn::PnKind::kSigmE);
  SosnModel model(c, 5);
  CHECK_NOTHROW(SosnModel(c, model.permutations(), model.params()));
  ModelConfig wider = c;
  wider.similarity_filters = 5;
  CHECK_THROWS_AS(SosnModel(wider, model.permutations(), model.params()), ConfigError);
  ModelConfig full = c;
  full.op = OperatorKind::kFull;
  CHECK_THROWS_AS(SosnModel(full, model.permutations(), model.params()), ConfigError);
  CHECK(c.same_architecture(c));
  ModelConfig other_ways = c;
  other_ways.ways = 7;
  CHECK(c.same_architecture(other_ways));
  CHECK_FALSE(c.same_architecture(wider));
}

TEST_CASE("scores lie in [0, 1] and batched scoring matches the per-pair path") {
  std::mt19937_64 rng(7);
  for (OperatorKind op : {OperatorKind::kAvg, OperatorKind::kRank, OperatorKind::kFull}) {
    for (bool multi : {false, true}) {
      CAPTURE(to_string(op));
      CAPTURE(multi);
      ModelConfig c = toy_config(op, pn::PnKind::kMaxExpPM);
      c.perm.multi_stream = multi;
      c.ways = 3;
      c.shots = 2;
      SosnModel model(c, 11);
      const Episode e = random_episode(c, 3, 2, 2, rng);
      const Tensor batched = model.predict(e);
      const Tensor reference = model.predict_reference(e);
      CHECK(batched.shape() == Shape{6, 3});
      CHECK(max_abs_diff(batched, reference) < 1e-10);
      for (double v : batched.storage()) CHECK((v >= 0.0 && v <= 1.0));
    }
  }
}

TEST_CASE("a single multi-stream permutation equals the single-stream network") {
  std::mt19937_64 rng(8);
  ModelConfig single = toy_config(OperatorKind::kAvg, pn::PnKind::kSigmE);
  single.perm.count = 1;
  ModelConfig multi = single;
  multi.perm.multi_stream = true;
  SosnModel a(single, 13), b(multi, 13);
  const Episode e = random_episode(single, 2, 1, 2, rng);
  CHECK(a.predict(e).storage() == b.predict(e).storage());
}

TEST_CASE("identity permutation path equals the unpermuted path") {
  std::mt19937_64 rng(9);
  ModelConfig c = toy_config(OperatorKind::kRank, pn::PnKind::kSigmETrace);
  c.perm.count = 1;
  SosnModel model(c, 17);
  const Tensor desc = random_tensor({5, 2, 4, 4}, rng);
  for (Phase phase : {Phase::kEval, Phase::kTrain}) {
    Binding b1(model.params(), false), b2(model.params(), false);
    const Tensor permuted = model.similarity_batch(b1, ad::constant(desc), phase, true)->value;
    const Tensor plain = model.similarity_batch(b2, ad::constant(desc), phase, false)->value;
    CHECK(max_abs_diff(permuted, plain) <= 1e-12);
  }
  ModelConfig three = c;
  three.perm.count = 3;
  SosnModel m3(three, 17);
  Binding b3(m3.params(), false);
  CHECK_THROWS_AS(m3.similarity_batch(b3, ad::constant(desc), Phase::kEval, false), ConfigError);
  CHECK_THROWS_AS(m3.similarity_batch(b3, ad::constant(Tensor({1, 1, 4, 4})), Phase::kEval),
                  ShapeError);
}

TEST_CASE("multi-stream score lies in the hull of the stream scores") {
  std::mt19937_64 rng(10);
  ModelConfig c = toy_config(OperatorKind::kAvg, pn::PnKind::kSigmE);
  c.perm.count = 3;
  c.perm.multi_stream = true;
  SosnModel model(c, 19);
  for (int trial = 0; trial < 10; ++trial) {
    const RelationDescriptor d{ad::constant(random_tensor({2, 4, 4}, rng))};
    const Tensor streams = model.stream_scores(d);
    CHECK(streams.size() == 3);
    Binding b(model.params(), false);
    const double score = model.similarity(b, d)->value.item();
    const auto [lo, hi] = std::minmax_element(streams.storage().begin(), streams.storage().end());
    CHECK(score >= *lo);
    CHECK(score <= *hi);
    CHECK(score == doctest::Approx((streams[0] + streams[1] + streams[2]) / 3.0));
  }
}

TEST_CASE("support and query roles are not symmetric") {
  std::mt19937_64 rng(11);
  ModelConfig c = toy_config(OperatorKind::kAvg, pn::PnKind::kNone);
  SosnModel model(c, 23);
  const Tensor s = random_tensor({4, 4}, rng), q = random_tensor({4, 4}, rng);
  Binding b(model.params(), false);
  const auto make = [](const Tensor& x, const Tensor& y) {
    return RelationDescriptor{ad::stack({ad::constant(x), ad::constant(y)})};
  };
  CHECK(model.similarity(b, make(s, q))->value.item() !=
        model.similarity(b, make(q, s))->value.item());

  const Tensor img = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
  const FeatureMap f = model.encode(b, img);
  const RelationDescriptor same = op_avg({f}, f, c.pn);
  CHECK(same.slice(0)->value.storage() == same.slice(1)->value.storage());
}

TEST_CASE("episode loss by hand") {
  const std::vector<std::size_t> labels = {0, 1};
  const ad::Var half = ad::constant(Tensor({2, 2}, 0.5));
  CHECK(episode_loss(half, labels)->value.item() == doctest::Approx(1.0));
  const ad::Var perfect = ad::constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  CHECK(episode_loss(perfect, labels)->value.item() == 0.0);

  // Relabelling classes permutes score columns and labels together.
  std::mt19937_64 rng(12);
  const Tensor scores = random_tensor({3, 3}, rng, 0.0, 1.0);
  const std::vector<std::size_t> lab = {2, 0, 1};
  const std::vector<std::size_t> relabel = {1, 2, 0};
  Tensor moved({3, 3});
  for (std::size_t q = 0; q < 3; ++q)
    for (std::size_t c = 0; c < 3; ++c) moved.at(q, relabel[c]) = scores.at(q, c);
  const std::vector<std::size_t> moved_lab = {relabel[2], relabel[0], relabel[1]};
  CHECK(episode_loss(ad::constant(scores), lab)->value.item() ==
        doctest::Approx(episode_loss(ad::constant(moved), moved_lab)->value.item()));

  CHECK_THROWS_AS(episode_loss(ad::constant(Tensor({0, 2})), {}), DataError);
  CHECK_THROWS_AS(episode_loss(half, std::vector<std::size_t>{0, 2}), DataError);
}

TEST_CASE("classification rule") {
  CHECK(classify(std::vector<double>{0.9, 0.1}) == 0);
  CHECK(classify(std::vector<double>{0.1, 0.9}) == 1);
  CHECK(classify(std::vector<double>{0.4, 0.7, 0.7}) == 1);
  CHECK(classify(std::vector<double>{0.5, 0.5}) == 0);
  const Tensor scores = Tensor::matrix(2, 2, {0.9, 0.1, 0.6, 0.6});
  CHECK(episode_accuracy(scores, std::vector<std::size_t>{0, 1}) == 0.5);
}

TEST_CASE("episodes are validated") {
  std::mt19937_64 rng(13);
  const ModelConfig c = toy_config(OperatorKind::kAvg, pn::PnKind::kSigmE);
  SosnModel model(c, 29);
  Episode e = random_episode(c, 2, 1, 1, rng);
  e.queries.clear();
  e.query_labels.clear();
  CHECK_THROWS_AS(model.predict(e), DataError);
  e = random_episode(c, 2, 1, 1, rng);
  e.query_labels[0] = 2;
  CHECK_THROWS_AS(model.predict(e), DataError);
}

TEST_CASE("end-to-end gradcheck for every operator and power normalization") {
  std::mt19937_64 rng(14);
  for (OperatorKind op : {OperatorKind::kAvg, OperatorKind::kRank, OperatorKind::kFull}) {
    for (pn::PnKind kind : {pn::PnKind::kNone, pn::PnKind::kGamma, pn::PnKind::kMaxExp,
                            pn::PnKind::kAsinhE, pn::PnKind::kSigmE, pn::PnKind::kSigmETrace,
                            pn::PnKind::kMaxExpPM}) {
      CAPTURE(to_string(op));
      CAPTURE(pn::to_string(kind));
      ModelConfig c = toy_config(op, kind);
      c.perm.multi_stream = op == OperatorKind::kRank;
      SosnModel model(c, 31);
      const Episode e = random_episode(c, 2, 2, 1, rng);
      const auto names = model.params().parameter_names();
      std::vector<Tensor> inputs;
      for (const auto& n : names) inputs.push_back(model.params().value(n));
      ad::GradcheckOptions opts;
      opts.max_entries = 60;
      const auto r = ad::gradcheck(
          [&](const std::vector<ad::Var>& v) {
            Binding b(model.params());
            for (std::size_t i = 0; i < names.size(); ++i) b.set(names[i], v[i]);
            return episode_loss(model, b, e);
          },
          inputs, opts);
      CHECK(r.passed);
      CHECK(r.max_relative_error < 1e-4);
    }
  }
}

TEST_CASE("a few optimizer steps reduce the loss on a fixed episode") {
  std::mt19937_64 rng(15);
  const ModelConfig c = toy_config(OperatorKind::kAvg, pn::PnKind::kSigmE);
  SosnModel model(c, 37);
  const Episode e = random_episode(c, 2, 1, 3, rng);
  AdamConfig adam;
  adam.learning_rate = 1e-2;
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 30; ++step) {
    Binding b(model.params());
    const ad::Var loss = episode_loss(model, b, e);
    ad::backward(loss);
    if (step == 0) first = loss->value.item();
    last = loss->value.item();
    adam_step(model.params(), b.gradients(), adam);
  }
  CHECK(last < first);
}
