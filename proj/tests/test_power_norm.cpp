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
#include <set>
#include <sstream>

#include "doctest.h"
#include "sosn/power_norm.hpp"
#include "test_util.hpp"

using namespace sosn;
using namespace sosn::pn;
using sosn::testutil::random_tensor;

namespace {

PowerNormSpec spec_of(PnKind kind, double eta = 4.0) {
  PowerNormSpec s;
  s.kind = kind;
  s.eta = eta;
  s.alpha_soft = 20.0 * eta;
  return s;
}

// Symmetric matrix with a comfortably positive trace.
Tensor random_symmetric(std::size_t k, std::mt19937_64& rng) {
  Tensor a = random_tensor({k, k}, rng);
  Tensor m({k, k});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) m.at(i, j) = 0.5 * (a.at(i, j) + a.at(j, i));
  for (std::size_t i = 0; i < k; ++i) m.at(i, i) = std::abs(m.at(i, i)) + 1.0;
  return m;
}

}  // namespace

TEST_CASE("odd members vanish at the origin") {
  CHECK(scalar_value(spec_of(PnKind::kSigmE), 0.0) == 0.0);
  CHECK(scalar_value(spec_of(PnKind::kAsinhE), 0.0) == 0.0);
  const Tensor zeros({3, 3}, 0.0);
  const Tensor out = apply_pn(zeros, spec_of(PnKind::kMaxExpPM));
  for (double v : out.storage()) CHECK(std::abs(v) < 1e-15);
}

TEST_CASE("hand-evaluated member values") {
  // 2 / (1 + e^-2) - 1 evaluated directly, independent of the tanh identity.
  const double direct = 2.0 / (1.0 + std::exp(-2.0)) - 1.0;
  CHECK(scalar_value(spec_of(PnKind::kSigmE, 2.0), 1.0) == doctest::Approx(direct).epsilon(1e-14));
  CHECK(direct == doctest::Approx(0.76159).epsilon(1e-5));
  CHECK(scalar_value(spec_of(PnKind::kMaxExp, 2.0), 0.5) == doctest::Approx(0.75));
  PowerNormSpec g = spec_of(PnKind::kGamma);
  g.gamma = 0.5;
  CHECK(scalar_value(g, 0.25) == doctest::Approx(0.5));
  PowerNormSpec a = spec_of(PnKind::kAsinhE);
  a.gamma = 0.7;
  CHECK(scalar_value(a, 0.9) ==
        doctest::Approx(std::log(0.63 + std::sqrt(1.0 + 0.63 * 0.63))).epsilon(1e-14));
}

TEST_CASE("MaxExpPM with a hard maximum") {
  PowerNormSpec s = spec_of(PnKind::kMaxExpPM, 2.0);
  s.rho = 0.5;
  s.alpha_soft = kHardMax;
  // (1 - 0)^2 - (1 - 0.5)^2
  CHECK(scalar_value(s, 1.0) == doctest::Approx(0.75));
  CHECK(scalar_value(s, -1.0) == doctest::Approx(-0.75));
}

TEST_CASE("soft maximum values and bounds") {
  const double a = 7.0;
  CHECK(soft_max(0.0, 0.0, a) == doctest::Approx(std::log(2.0) / a));
  CHECK(std::abs(soft_max(50.0, -50.0, 20.0) - 50.0) < 1e-12);
  const double s = soft_max(-0.1, 0.1, 20.0);
  CHECK(s >= 0.1);
  CHECK(s <= 0.1 + std::log(2.0) / 20.0);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int i = 0; i < 500; ++i) {
    const double x = u(rng), y = u(rng);
    for (double alpha : {0.5, 5.0, 50.0, 5000.0}) {
      const double v = soft_max(x, y, alpha);
      CHECK(v >= std::max(x, y));
      CHECK(v <= std::max(x, y) + std::log(2.0) / alpha + 1e-15);
    }
    CHECK(std::abs(soft_max(x, y, 1e9) - std::max(x, y)) < 1e-9);
  }
}

TEST_CASE("soft_max_pair node matches the scalar form and its gradient") {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({3, 4}, rng), y = random_tensor({3, 4}, rng);
  auto out = soft_max_pair(ad::constant(x), ad::constant(y), 3.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(out->value[i] == doctest::Approx(soft_max(x[i], y[i], 3.0)));
  }
  const auto r = ad::gradcheck(
      [](const auto& v) { return soft_max_pair(v[0], v[1], 3.0); }, {x, y});
  CHECK(r.passed);
  CHECK_THROWS_AS(soft_max_pair(ad::constant(x), ad::constant(y), 0.0), ConfigError);
}

TEST_CASE("closed form of the co-occurrence difference") {
  CHECK(maxexp_pm_closed({1, 0.3, 0.2}) == doctest::Approx(0.1));
  CHECK(maxexp_pm_closed({2, 0.3, 0.2}) == doctest::Approx(0.15));
  CHECK(maxexp_pm_closed({5, 0.25, 0.25}) == 0.0);
}

TEST_CASE("multinomial enumeration oracle") {
  CHECK(maxexp_pm_enumerate({1, 0.3, 0.2}) == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(maxexp_pm_enumerate({2, 0.3, 0.2}) == doctest::Approx(0.15).epsilon(1e-14));
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; i + j < 5; ++j) {
      const TrialModel t{3, 0.2 * i, 0.2 * j};
      CHECK(std::abs(maxexp_pm_enumerate(t) - maxexp_pm_closed(t)) < 1e-12);
    }
  }
  CHECK_THROWS_AS(maxexp_pm_enumerate({13, 0.1, 0.1}), ConfigError);
  CHECK_THROWS_AS(maxexp_pm_closed({2, 0.7, 0.5}), ConfigError);
  CHECK_THROWS_AS(maxexp_pm_closed({0, 0.1, 0.1}), ConfigError);
}

TEST_CASE("closed form equals enumeration for N <= 6") {
  for (int n = 1; n <= 6; ++n) {
    for (int i = 0; i <= 10; ++i) {
      for (int j = 0; i + j <= 10; ++j) {
        const TrialModel t{n, 0.1 * i, 0.1 * j};
        CHECK(std::abs(maxexp_pm_enumerate(t) - maxexp_pm_closed(t)) < 1e-12);
      }
    }
  }
}

TEST_CASE("odd symmetry of signed members") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1, 1);
  PowerNormSpec pm = spec_of(PnKind::kMaxExpPM, 9.0);
  pm.rho = 0.5;
  for (const auto& s : {spec_of(PnKind::kAsinhE), spec_of(PnKind::kSigmE), pm}) {
    for (int i = 0; i < 200; ++i) {
      const double x = u(rng);
      CHECK(scalar_value(s, -x) == doctest::Approx(-scalar_value(s, x)).epsilon(1e-12));
    }
  }
}

TEST_CASE("members are monotone and bounded on their domains") {
  const auto grid = uniform_grid(-1.0, 1.0, 401);
  PowerNormSpec gamma = spec_of(PnKind::kGamma);
  for (const auto& s : {spec_of(PnKind::kAsinhE), spec_of(PnKind::kSigmE),
                        spec_of(PnKind::kMaxExpPM), spec_of(PnKind::kMaxExp), gamma}) {
    const bool nonneg = s.kind == PnKind::kGamma || s.kind == PnKind::kMaxExp;
    double prev = -std::numeric_limits<double>::infinity();
    for (double x : grid) {
      if (nonneg && x < 0.0) continue;
      const double v = scalar_value(s, x);
      CHECK(v >= prev);
      prev = v;
      if (s.kind == PnKind::kSigmE) CHECK((v > -1.0 && v < 1.0));
      if (s.kind == PnKind::kMaxExp) CHECK((v >= 0.0 && v <= 1.0));
      if (s.kind == PnKind::kMaxExpPM) CHECK((v > -1.0 && v < 1.0));
    }
  }
}

TEST_CASE("domain violations and trace requirements") {
  const Tensor neg = Tensor::matrix(2, 2, {-0.1, 0.2, 0.2, 0.3});
  CHECK_THROWS_AS(apply_pn(neg, spec_of(PnKind::kGamma)), DomainError);
  CHECK_THROWS_AS(apply_pn(neg, spec_of(PnKind::kMaxExp)), DomainError);
  const Tensor neg_trace = Tensor::matrix(2, 2, {-1.0, 0.0, 0.0, -1.0});
  CHECK_THROWS_AS(apply_pn(neg_trace, spec_of(PnKind::kSigmETrace)), DomainError);
  PowerNormSpec no_lambda = spec_of(PnKind::kMaxExpPM);
  no_lambda.lambda = 0.0;
  CHECK_THROWS_AS(no_lambda.validate(), ConfigError);
  PowerNormSpec bad_rho = spec_of(PnKind::kSigmE);
  bad_rho.rho = 1.5;
  CHECK_THROWS_AS(bad_rho.validate(), ConfigError);
  PowerNormSpec bad_gamma = spec_of(PnKind::kGamma);
  bad_gamma.gamma = 0.0;
  CHECK_THROWS_AS(bad_gamma.validate(), ConfigError);
  CHECK_THROWS_AS(apply_pn(Tensor({2, 3}), spec_of(PnKind::kSigmE)), ShapeError);
}

TEST_CASE("Gamma backward is capped at zero") {
  PowerNormSpec g = spec_of(PnKind::kGamma);
  g.gamma_grad_cap = 1e3;
  CHECK(scalar_derivative(g, 0.0) == 1e3);
  CHECK(scalar_derivative(g, 1e-12) == 1e3);
  CHECK(scalar_derivative(g, 0.25) == doctest::Approx(0.5 / 0.5));
}

TEST_CASE("every differentiable member passes gradcheck") {
  std::mt19937_64 rng(31);
  for (PnKind kind : {PnKind::kNone, PnKind::kAsinhE, PnKind::kSigmE, PnKind::kSigmETrace,
                      PnKind::kMaxExpPM}) {
    CAPTURE(to_string(kind));
    const PowerNormSpec s = spec_of(kind, 3.0);
    const Tensor m = random_symmetric(4, rng);
    const auto r = ad::gradcheck([&](const auto& v) { return apply_pn(v[0], s); }, {m});
    CHECK(r.passed);
    // Batched [B, K, K] input with a trace per matrix.
    Tensor batch({2, 4, 4});
    const Tensor m2 = random_symmetric(4, rng);
    std::copy(m.storage().begin(), m.storage().end(), batch.storage().begin());
    std::copy(m2.storage().begin(), m2.storage().end(), batch.storage().begin() + 16);
    CHECK(ad::gradcheck([&](const auto& v) { return apply_pn(v[0], s); }, {batch}).passed);
  }
  for (PnKind kind : {PnKind::kGamma, PnKind::kMaxExp}) {
    const PowerNormSpec s = spec_of(kind, 3.0);
    const Tensor m = random_tensor({3, 3}, rng, 0.1, 0.9);
    CHECK(ad::gradcheck([&](const auto& v) { return apply_pn(v[0], s); }, {m}).passed);
  }
}

TEST_CASE("MaxExpPM gradcheck at the default sharpness") {
  std::mt19937_64 rng(32);
  const PowerNormSpec s = default_spec(PnKind::kMaxExpPM, 9);
  CHECK(s.eta == 9.0);
  CHECK(s.alpha_soft == 180.0);
  const Tensor m = random_symmetric(5, rng);
  CHECK(ad::gradcheck([&](const auto& v) { return apply_pn(v[0], s); }, {m}).passed);
}

TEST_CASE("fused trace-normalized SigmE equals the primitive composition") {
  std::mt19937_64 rng(41);
  const Tensor m0 = random_symmetric(4, rng);
  PowerNormSpec s = spec_of(PnKind::kSigmETrace, 2.5);

  auto fused_x = ad::variable(m0);
  auto fused = ad::sum(ad::mul(apply_pn(fused_x, s), ad::constant(m0)));
  ad::backward(fused);

  // 2 / (1 + exp(-eta * m / (tr + lambda))) - 1 from elementary nodes.
  auto x = ad::variable(m0);
  auto den = ad::add_scalar(ad::trace(x), s.lambda);
  auto arg = ad::scale(ad::div(x, den), -s.eta);
  auto composed_pn =
      ad::add_scalar(ad::div(ad::constant(Tensor({1}, 2.0)), ad::add_scalar(ad::exp(arg), 1.0)),
                     -1.0);
  auto composed = ad::sum(ad::mul(composed_pn, ad::constant(m0)));
  ad::backward(composed);

  CHECK(fused->value.item() == doctest::Approx(composed->value.item()).epsilon(1e-12));
  CHECK(max_abs_diff(fused_x->grad, x->grad) < 1e-12);
}

TEST_CASE("sign fault in the SigmE backward is caught by gradcheck") {
  std::mt19937_64 rng(43);
  const Tensor m = random_symmetric(3, rng);
  const PowerNormSpec s = spec_of(PnKind::kSigmE, 2.0);
  testing::set_sigme_backward_fault(true);
  const auto r = ad::gradcheck([&](const auto& v) { return apply_pn(v[0], s); }, {m});
  testing::set_sigme_backward_fault(false);
  CHECK_FALSE(r.passed);
}

TEST_CASE("curve export") {
  const auto grid = uniform_grid(-1.0, 1.0, 1001);
  CHECK(grid.size() == 1001);
  CHECK(grid.front() == -1.0);
  CHECK(grid.back() == 1.0);
  const PowerNormSpec pm = default_spec(PnKind::kMaxExpPM, 49);
  PowerNormSpec maxexp = pm;
  maxexp.kind = PnKind::kMaxExp;
  PowerNormSpec sig = default_spec(PnKind::kSigmE, 49);
  const auto rows = curve_export({{"MaxExpPM", pm}, {"MaxExp", maxexp}, {"SigmE", sig}}, grid);
  std::size_t pm_rows = 0, me_rows = 0, sg_rows = 0;
  for (const auto& r : rows) {
    if (r.function == "MaxExpPM") ++pm_rows;
    if (r.function == "MaxExp") ++me_rows;
    if (r.function == "SigmE") {
      ++sg_rows;
      CHECK(r.value == doctest::Approx(std::tanh(sig.eta * r.x / 2.0)).epsilon(1e-14));
    }
    if (r.x == 0.0 && r.function != "MaxExp") CHECK(std::abs(r.value) < 1e-15);
  }
  CHECK(pm_rows == 1001);
  CHECK(sg_rows == 1001);
  CHECK(me_rows == 501);

  std::ostringstream os;
  write_curves_csv(os, rows);
  CHECK(os.str().rfind("function,x,value,derivative\n", 0) == 0);
}

TEST_CASE("SigmE closely approximates MaxExpPM") {
  const auto grid = uniform_grid(-1.0, 1.0, 1001);
  const PowerNormSpec pm = default_spec(PnKind::kMaxExpPM, 49);
  const SigmeFit fit = fit_sigme(pm, grid);
  CHECK(fit.sup_gap < 0.05);
  // The fitted slope is a local minimum of the squared error.
  auto sse = [&](double eta) {
    double s = 0.0;
    for (double x : grid) {
      const double d = std::tanh(0.5 * eta * x) - scalar_value(pm, x);
      s += d * d;
    }
    return s;
  };
  CHECK(sse(fit.eta) <= sse(fit.eta * 1.01));
  CHECK(sse(fit.eta) <= sse(fit.eta * 0.99));
  CHECK(default_spec(PnKind::kSigmE, 49).eta == doctest::Approx(fit.eta));
}

TEST_CASE("derivative jump detector") {
  const auto grid = uniform_grid(-1.0, 1.0, 1001);
  PowerNormSpec soft = default_spec(PnKind::kMaxExpPM, 49);
  std::vector<double> d;
  for (double x : grid) d.push_back(scalar_derivative(soft, x));
  CHECK(derivative_jump_ratio(d) <= 10.0);

  // An asymmetric split with a hard maximum has a kink at the origin.
  PowerNormSpec kinked = default_spec(PnKind::kMaxExpPM, 4);
  kinked.rho = 0.2;
  kinked.alpha_soft = kHardMax;
  d.clear();
  for (double x : grid) d.push_back(scalar_derivative(kinked, x));
  CHECK(derivative_jump_ratio(d) > 10.0);
  kinked.alpha_soft = 80.0;
  d.clear();
  for (double x : grid) d.push_back(scalar_derivative(kinked, x));
  CHECK(derivative_jump_ratio(d) <= 10.0);
}

TEST_CASE("kind names round trip") {
  for (PnKind k : {PnKind::kNone, PnKind::kGamma, PnKind::kMaxExp, PnKind::kAsinhE,
                   PnKind::kSigmE, PnKind::kSigmETrace, PnKind::kMaxExpPM}) {
    CHECK(parse_kind(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_kind("Sqrt"), ConfigError);
}

TEST_CASE("trace-normalized input for Gamma and MaxExp") {
  const Tensor m = Tensor::matrix(2, 2, {3.0, 1.0, 1.0, 1.0});
  CHECK_THROWS_AS(apply_pn(m, spec_of(PnKind::kGamma)), DomainError);
  for (PnKind kind : {PnKind::kGamma, PnKind::kMaxExp}) {
    PowerNormSpec s = default_spec(kind, 4);
    CHECK(s.trace_input);
    CHECK(s.trace_normalized());
    const Tensor out = apply_pn(m, s);
    const double den = 4.0 + s.lambda;
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(out[i] == doctest::Approx(scalar_value(s, m[i] / den)).epsilon(1e-14));
    }
    CHECK(ad::gradcheck([&](const auto& v) { return apply_pn(v[0], s); }, {m}).passed);
  }
}
