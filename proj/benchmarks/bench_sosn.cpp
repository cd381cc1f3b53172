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

#include <random>

#include <benchmark/benchmark.h>

#include "sosn/datasets.hpp"
#include "sosn/episodes.hpp"
#include "sosn/model.hpp"
#include "sosn/power_norm.hpp"
#include "sosn/relation_ops.hpp"
#include "sosn/second_order.hpp"

namespace {

using namespace sosn;

Tensor uniform(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = u(rng);
  return t;
}

// K x N feature map: K filters over a 7 x 7 grid.
void BM_Autocorrelate(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  const FeatureMap f = FeatureMap::constant(uniform({k, 49}, 1));
  for (auto _ : state) benchmark::DoNotOptimize(autocorrelate(mean_shift(f, 0.5)).value());
}
BENCHMARK(BM_Autocorrelate)->Arg(16)->Arg(64);

void BM_PowerNorm(benchmark::State& state) {
  const auto kind = static_cast<pn::PnKind>(state.range(0));
  const pn::PowerNormSpec spec = pn::default_spec(kind, 49);
  const SecondOrderMatrix m = autocorrelate(FeatureMap::constant(uniform({64, 49}, 2)));
  for (auto _ : state) benchmark::DoNotOptimize(normalize(m, spec).value());
  state.SetLabel(std::string(pn::to_string(kind)));
}
BENCHMARK(BM_PowerNorm)
    ->Arg(static_cast<int>(pn::PnKind::kSigmE))
    ->Arg(static_cast<int>(pn::PnKind::kAsinhE))
    ->Arg(static_cast<int>(pn::PnKind::kMaxExpPM));

void BM_DescribeAndPermute(benchmark::State& state) {
  const std::size_t k = 64;
  const std::vector<FeatureMap> s = {FeatureMap::constant(uniform({k, 49}, 3)),
                                     FeatureMap::constant(uniform({k, 49}, 4))};
  const FeatureMap q = FeatureMap::constant(uniform({k, 49}, 5));
  const auto spec = pn::default_spec(pn::PnKind::kSigmE, 49);
  std::mt19937_64 rng(6);
  const PermutationSet perms = PermutationSet::random(k, 3, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(permute_stack(op_avg(s, q, spec), perms).vectorized());
  }
}
BENCHMARK(BM_DescribeAndPermute);

ModelConfig desk_model(std::size_t filters) {
  ModelConfig c;
  c.encoder_filters = filters;
  c.similarity_filters = filters;
  c.pn = pn::default_spec(pn::PnKind::kSigmE, c.spatial_count());
  return c;
}

Episode desk_episode(std::size_t queries) {
  SyntheticSpec spec;
  spec.classes = 10;
  static const ImageDataset data = generate_synthetic(spec);
  std::mt19937_64 rng(7);
  return sample_episode(data, 5, 1, queries, rng);
}

// 5-way 1-shot inference, one query per class.
void BM_Predict(benchmark::State& state) {
  const SosnModel model(desk_model(static_cast<std::size_t>(state.range(0))), 1);
  const Episode ep = desk_episode(1);
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(ep));
}
BENCHMARK(BM_Predict)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

// Forward, backward and Adam for one 5-way 1-shot episode with 5 queries per class.
void BM_TrainStep(benchmark::State& state) {
  SosnModel model(desk_model(16), 1);
  const Episode ep = desk_episode(5);
  const AdamConfig adam;
  for (auto _ : state) {
    Binding binding(model.params());
    ad::Var loss = episode_loss(model.score_episode(binding, ep, Phase::kTrain), ep.query_labels);
    ad::backward(loss);
    adam_step(model.params(), binding.gradients(), adam);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
