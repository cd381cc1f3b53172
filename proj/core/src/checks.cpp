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

#include "sosn/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>

#include "sosn/autodiff.hpp"
#include "sosn/model.hpp"
#include "sosn/power_norm.hpp"
#include "sosn/relation_ops.hpp"
#include "sosn/second_order.hpp"

namespace sosn::checks {

namespace {

constexpr double kGradTolerance = 1e-4;

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

// X X^T / k: symmetric PSD, so |m_ij| <= trace and trace-normalized members
// stay inside [-1, 1]. Positive X keeps every entry non-negative.
Tensor gram(std::size_t k, std::mt19937_64& rng, bool positive) {
  const Tensor x = positive ? uniform({k, k}, rng, 0.1, 1.0) : uniform({k, k}, rng);
  Tensor m({k, k});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += x.at(i, l) * x.at(j, l);
      m.at(i, j) = s / double(k);
    }
  return m;
}

using Fn = std::function<ad::Var(const std::vector<ad::Var>&)>;

CheckRow grad_row(const std::string& name, const Fn& fn, const std::vector<Tensor>& inputs,
                  std::size_t max_entries = 0) {
  ad::GradcheckOptions opts;
  opts.tolerance = kGradTolerance;
  opts.max_entries = max_entries;
  const auto r = ad::gradcheck(fn, inputs, opts);
  return {name, r.max_relative_error, kGradTolerance,
          r.passed && r.max_relative_error < kGradTolerance};
}

SuiteReport appendix_suite() {
  SuiteReport rep{"appendix", {}, 0.0};
  for (int n = 1; n <= 6; ++n) {
    double worst = 0.0;
    // 9 x 9 grid of (p, q) with p + q <= 1.
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) {
        const pn::TrialModel t{n, i / 16.0, j / 16.0};
        worst = std::max(worst, std::abs(pn::maxexp_pm_closed(t) - pn::maxexp_pm_enumerate(t)));
      }
    rep.rows.push_back({"N=" + std::to_string(n) + " closed vs enumerated", worst, 1e-12,
                        worst <= 1e-12});
  }
  return rep;
}

SuiteReport prop1_suite() {
  SuiteReport rep{"prop1", {}, 0.0};
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> extent(2, 6);
  for (int r = 1; r <= 3; ++r) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t k = extent(rng);
      const Tensor a = uniform({k, extent(rng)}, rng);
      const Tensor b = uniform({k, extent(rng)}, rng);
      const KernelCheck c = kernel_linearization_check(a, b, r);
      const double scale = std::max({std::abs(c.lhs), std::abs(c.rhs), 1e-300});
      worst = std::max(worst, std::abs(c.lhs - c.rhs) / scale);
    }
    rep.rows.push_back({"r=" + std::to_string(r) + " relative gap, 100 instances", worst, 1e-10,
                        worst <= 1e-10});
  }
  return rep;
}

SuiteReport gradcheck_suite() {
  SuiteReport rep{"gradcheck", {}, 0.0};
  std::mt19937_64 rng(202);
  auto& rows = rep.rows;

  rows.push_back(grad_row("matmul", [](const auto& v) { return ad::matmul(v[0], v[1]); },
                          {uniform({3, 4}, rng), uniform({4, 2}, rng)}));
  rows.push_back(grad_row("trace", [](const auto& v) { return ad::trace(v[0]); },
                          {uniform({3, 3}, rng)}));
  rows.push_back(grad_row("linear", [](const auto& v) { return ad::linear(v[0], v[1], v[2]); },
                          {uniform({2, 5}, rng), uniform({3, 5}, rng), uniform({3}, rng)}));
  rows.push_back(grad_row(
      "conv2d", [](const auto& v) { return ad::conv2d(v[0], v[1], v[2], 1); },
      {uniform({2, 2, 5, 4}, rng), uniform({3, 2, 3, 3}, rng), uniform({3}, rng)}));
  rows.push_back(grad_row("maxpool2x2", [](const auto& v) { return ad::maxpool2x2(v[0]); },
                          {uniform({2, 2, 4, 6}, rng)}));
  rows.push_back(grad_row(
      "batchnorm",
      [](const auto& v) {
        return ad::batchnorm(v[0], v[1], v[2], ad::BatchNormMode::kTraining);
      },
      {uniform({3, 2, 3, 3}, rng), uniform({2}, rng, 0.5, 1.5), uniform({2}, rng)}));
  rows.push_back(grad_row("sigmoid", [](const auto& v) { return ad::sigmoid(v[0]); },
                          {uniform({3, 3}, rng, -4.0, 4.0)}));
  rows.push_back(grad_row("relu", [](const auto& v) { return ad::relu(v[0]); },
                          {uniform({3, 3}, rng)}));
  rows.push_back(grad_row("concat_mode", [](const auto& v) { return ad::concat_mode(v[0], v[1], 3); },
                          {uniform({3, 3}, rng), uniform({3, 3}, rng)}));

  rows.push_back(grad_row(
      "mean_shift+autocorrelate",
      [](const auto& v) { return autocorrelate(mean_shift(FeatureMap(v[0]), 0.5)).data; },
      {uniform({3, 5}, rng)}));

  for (pn::PnKind kind : {pn::PnKind::kNone, pn::PnKind::kGamma, pn::PnKind::kMaxExp,
                          pn::PnKind::kAsinhE, pn::PnKind::kSigmE, pn::PnKind::kSigmETrace,
                          pn::PnKind::kMaxExpPM}) {
    const pn::PowerNormSpec spec = pn::default_spec(kind, 9);
    const bool positive = kind == pn::PnKind::kGamma || kind == pn::PnKind::kMaxExp;
    rows.push_back(grad_row("pn " + std::string(pn::to_string(kind)),
                            [spec](const auto& v) { return pn::apply_pn(v[0], spec); },
                            {gram(4, rng, positive)}));
  }

  const PermutationSet perms = PermutationSet::random(3, 3, rng);
  const pn::PowerNormSpec sigme = pn::default_spec(pn::PnKind::kSigmE, 4);
  for (OperatorKind op : {OperatorKind::kFull, OperatorKind::kRank, OperatorKind::kAvg}) {
    rows.push_back(grad_row(
        "operator " + std::string(to_string(op)) + "+permute_stack",
        [&, op](const auto& v) {
          const std::vector<FeatureMap> s = {FeatureMap(v[0]), FeatureMap(v[1])};
          const RelationDescriptor d = describe(op, s, FeatureMap(v[2]), sigme);
          if (op == OperatorKind::kFull) return d.vectorized();
          return permute_stack(d, perms).vectorized();
        },
        {uniform({3, 4}, rng), uniform({3, 4}, rng), uniform({3, 4}, rng)}));
  }

  // encode -> op_avg -> permute_stack -> similarity -> loss at toy size.
  ModelConfig c;
  c.image_size = 8;
  c.encoder_filters = 4;
  c.similarity_filters = 3;
  c.similarity_hidden = 4;
  c.perm.count = 2;
  c.pn = pn::default_spec(pn::PnKind::kSigmE, 4);
  c.ways = 2;
  SosnModel model(c, 303);
  Episode ep;
  for (std::size_t w = 0; w < 2; ++w) {
    ep.class_ids.push_back(w);
    ep.supports.push_back({uniform({1, 8, 8}, rng, 0.0, 1.0)});
    ep.queries.push_back(uniform({1, 8, 8}, rng, 0.0, 1.0));
    ep.query_labels.push_back(w);
  }
  const auto names = model.params().parameter_names();
  std::vector<Tensor> inputs;
  for (const auto& n : names) inputs.push_back(model.params().value(n));
  rows.push_back(grad_row(
      "chain encode->avg->permute->similarity",
      [&](const std::vector<ad::Var>& v) {
        Binding b(model.params());
        for (std::size_t i = 0; i < names.size(); ++i) b.set(names[i], v[i]);
        return episode_loss(model, b, ep);
      },
      inputs, 60));
  return rep;
}

SuiteReport fit_suite() {
  SuiteReport rep{"fit", {}, 0.0};
  const std::size_t n = 49;
  const auto grid = pn::uniform_grid(-1.0, 1.0, 1001);
  const pn::SigmeFit fit = pn::fit_sigme(pn::default_spec(pn::PnKind::kMaxExpPM, n), grid);
  rep.rows.push_back({"SigmE vs MaxExpPM sup gap (eta=49)", fit.sup_gap, 0.05, fit.sup_gap < 0.05});
  for (const auto& c : pn::figure_curves(n, true)) {
    // Gamma and MaxExp are one-sided and Gamma' is singular at 0.
    if (c.spec.kind == pn::PnKind::kGamma || c.spec.kind == pn::PnKind::kMaxExp) continue;
    std::vector<double> d;
    for (double x : grid) d.push_back(pn::scalar_derivative(c.spec, x));
    const double ratio = pn::derivative_jump_ratio(d);
    rep.rows.push_back({"smoothed derivative jump ratio " + c.label, ratio, 10.0, ratio <= 10.0});
  }
  return rep;
}

}  // namespace

bool SuiteReport::passed() const { return first_failure() == nullptr; }

const CheckRow* SuiteReport::first_failure() const {
  for (const auto& r : rows) {
    if (!r.passed) return &r;
  }
  return nullptr;
}

std::vector<std::string> suite_names() { return {"prop1", "appendix", "gradcheck", "fit"}; }

SuiteReport run_suite(std::string_view name) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport rep;
  if (name == "appendix") {
    rep = appendix_suite();
  } else if (name == "prop1") {
    rep = prop1_suite();
  } else if (name == "gradcheck") {
    rep = gradcheck_suite();
  } else if (name == "fit") {
    rep = fit_suite();
  } else {
    throw ConfigError("unknown check suite \"" + std::string(name) +
                      "\" (expected prop1, appendix, gradcheck or fit)");
  }
  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace sosn::checks
