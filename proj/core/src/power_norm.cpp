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

#include "sosn/power_norm.hpp"

#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>

namespace sosn::pn {
namespace {

std::atomic<bool> g_sigme_fault{false};

// Logistic function evaluated without overflow; alpha = inf gives a step
// with value 1/2 at the origin.
double logistic(double alpha, double x) {
  if (std::isinf(alpha)) return x > 0.0 ? 1.0 : (x < 0.0 ? 0.0 : 0.5);
  const double z = alpha * x;
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// b^eta for a base clamped at zero.
double clamped_pow(double base, double eta) {
  return base <= 0.0 ? 0.0 : std::pow(base, eta);
}

double clamped_pow_deriv(double base, double eta) {
  return base <= 0.0 ? 0.0 : eta * std::pow(base, eta - 1.0);
}

void check_domain(const PowerNormSpec& spec, const Tensor& m, std::size_t per,
                  const std::vector<double>& den) {
  if (spec.kind != PnKind::kGamma && spec.kind != PnKind::kMaxExp) return;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double v = m[i] / den[i / per];
    if (v < 0.0 || v > 1.0) {
      throw DomainError(std::string(to_string(spec.kind)) +
                        ": entries must lie in [0, 1], got " + std::to_string(v));
    }
  }
}

struct MatrixLayout {
  std::size_t batch = 1;
  std::size_t side = 0;
};

MatrixLayout layout_of(const Tensor& m) {
  const Shape& s = m.shape();
  if (s.size() == 2 && s[0] == s[1]) return {1, s[0]};
  if (s.size() == 3 && s[1] == s[2]) return {s[0], s[1]};
  throw ShapeError("apply_pn: expected a square matrix or [B, K, K] batch, got " +
                   sosn::to_string(s));
}

// Per-matrix denominators trace(M) + lambda, or 1 when not trace-normalised.
std::vector<double> denominators(const PowerNormSpec& spec, const Tensor& m,
                                 const MatrixLayout& lay) {
  std::vector<double> den(lay.batch, 1.0);
  if (!spec.trace_normalized()) return den;
  for (std::size_t b = 0; b < lay.batch; ++b) {
    double t = 0.0;
    for (std::size_t i = 0; i < lay.side; ++i) {
      t += m[(b * lay.side + i) * lay.side + i];
    }
    den[b] = t + spec.lambda;
    if (!(den[b] > 0.0)) {
      throw DomainError(std::string(to_string(spec.kind)) +
                        ": trace(M) + lambda must be positive, got " +
                        std::to_string(den[b]));
    }
  }
  return den;
}

Tensor forward(const Tensor& m, const PowerNormSpec& spec, const MatrixLayout& lay,
               const std::vector<double>& den) {
  Tensor out(m.shape());
  const std::size_t per = lay.side * lay.side;
  for (std::size_t b = 0; b < lay.batch; ++b) {
    for (std::size_t i = 0; i < per; ++i) {
      out[b * per + i] = scalar_value(spec, m[b * per + i] / den[b]);
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(PnKind kind) {
  switch (kind) {
    case PnKind::kNone: return "None";
    case PnKind::kGamma: return "Gamma";
    case PnKind::kMaxExp: return "MaxExp";
    case PnKind::kAsinhE: return "AsinhE";
    case PnKind::kSigmE: return "SigmE";
    case PnKind::kSigmETrace: return "SigmE_trace";
    case PnKind::kMaxExpPM: return "MaxExpPM";
  }
  return "?";
}

PnKind parse_kind(std::string_view name) {
  for (PnKind k : {PnKind::kNone, PnKind::kGamma, PnKind::kMaxExp, PnKind::kAsinhE,
                   PnKind::kSigmE, PnKind::kSigmETrace, PnKind::kMaxExpPM}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown power normalization '" + std::string(name) + "'");
}

void PowerNormSpec::validate() const {
  auto fail = [](const std::string& what) {
    throw ConfigError("power normalization: " + what);
  };
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("gamma must lie in (0, 1]");
  if (!(eta > 0.0) || std::isinf(eta)) fail("eta must be positive and finite");
  if (!(lambda >= 0.0)) fail("lambda must be non-negative");
  if (!(rho >= 0.0 && rho <= 1.0)) fail("rho must lie in [0, 1]");
  if (!(alpha_soft > 0.0)) fail("alpha_soft must be positive");
  if (!(beta_shift >= 0.0 && beta_shift <= 1.0)) fail("beta_shift must lie in [0, 1]");
  if (!(gamma_grad_cap > 0.0)) fail("gamma_grad_cap must be positive");
  if (trace_normalized() && !(lambda > 0.0)) {
    fail(std::string(to_string(kind)) + " requires lambda > 0");
  }
}

PowerNormSpec default_spec(PnKind kind, std::size_t spatial_count) {
  PowerNormSpec spec;
  spec.kind = kind;
  const double n = static_cast<double>(std::max<std::size_t>(spatial_count, 1));
  spec.eta = n;
  spec.alpha_soft = 20.0 * n;
  spec.trace_input = kind == PnKind::kGamma || kind == PnKind::kMaxExp;
  if (kind == PnKind::kSigmE || kind == PnKind::kSigmETrace) {
    static std::mutex mu;
    static std::map<std::size_t, double> fitted;
    std::lock_guard<std::mutex> lock(mu);
    auto it = fitted.find(spatial_count);
    if (it == fitted.end()) {
      PowerNormSpec target = spec;
      target.kind = PnKind::kMaxExpPM;
      const double eta = fit_sigme(target, uniform_grid(-1.0, 1.0, 1001)).eta;
      it = fitted.emplace(spatial_count, eta).first;
    }
    spec.eta = it->second;
  }
  spec.validate();
  return spec;
}

double soft_max(double x, double y, double alpha) {
  if (std::isinf(alpha)) return std::max(x, y);
  const double hi = std::max(x, y);
  return hi + std::log1p(std::exp(-alpha * std::abs(x - y))) / alpha;
}

ad::Var soft_max_pair(const ad::Var& x, const ad::Var& y, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("soft_max_pair: alpha must be positive");
  if (x->value.shape() != y->value.shape()) {
    throw ShapeError("soft_max_pair: incompatible shapes " +
                     sosn::to_string(x->value.shape()) + " and " +
                     sosn::to_string(y->value.shape()));
  }
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = soft_max(x->value[i], y->value[i], alpha);
  }
  return ad::make_node("soft_max_pair", std::move(out), {x, y}, [alpha](ad::Node& self) {
    ad::Node& px = *self.parents[0];
    ad::Node& py = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double d = px.value[i] - py.value[i];
      if (px.requires_grad) px.grad_buffer()[i] += self.grad[i] * logistic(alpha, d);
      if (py.requires_grad) py.grad_buffer()[i] += self.grad[i] * logistic(alpha, -d);
    }
  });
}

double scalar_value(const PowerNormSpec& spec, double u) {
  switch (spec.kind) {
    case PnKind::kNone:
      return u;
    case PnKind::kGamma:
      return std::pow(u, spec.gamma);
    case PnKind::kMaxExp:
      return 1.0 - std::pow(1.0 - u, spec.eta);
    case PnKind::kAsinhE:
      return std::asinh(spec.gamma * u);
    case PnKind::kSigmE:
    case PnKind::kSigmETrace:
      // 2 / (1 + exp(-eta u)) - 1 == tanh(eta u / 2)
      return std::tanh(0.5 * spec.eta * u);
    case PnKind::kMaxExpPM: {
      const double neg = 1.0 - (1.0 - spec.rho) * soft_max(0.0, -u, spec.alpha_soft);
      const double pos = 1.0 - spec.rho * soft_max(0.0, u, spec.alpha_soft);
      return clamped_pow(neg, spec.eta) - clamped_pow(pos, spec.eta);
    }
  }
  return u;
}

double scalar_derivative(const PowerNormSpec& spec, double u) {
  switch (spec.kind) {
    case PnKind::kNone:
      return 1.0;
    case PnKind::kGamma: {
      if (u <= 0.0) return spec.gamma_grad_cap;
      return std::min(spec.gamma * std::pow(u, spec.gamma - 1.0), spec.gamma_grad_cap);
    }
    case PnKind::kMaxExp:
      return spec.eta * std::pow(1.0 - u, spec.eta - 1.0);
    case PnKind::kAsinhE:
      return spec.gamma / std::sqrt(1.0 + spec.gamma * spec.gamma * u * u);
    case PnKind::kSigmE:
    case PnKind::kSigmETrace: {
      const double t = std::tanh(0.5 * spec.eta * u);
      return 0.5 * spec.eta * (1.0 - t * t);
    }
    case PnKind::kMaxExpPM: {
      const double a = spec.alpha_soft;
      const double neg = 1.0 - (1.0 - spec.rho) * soft_max(0.0, -u, a);
      const double pos = 1.0 - spec.rho * soft_max(0.0, u, a);
      return clamped_pow_deriv(neg, spec.eta) * (1.0 - spec.rho) * logistic(a, -u) +
             clamped_pow_deriv(pos, spec.eta) * spec.rho * logistic(a, u);
    }
  }
  return 1.0;
}

Tensor apply_pn(const Tensor& m, const PowerNormSpec& spec) {
  spec.validate();
  const MatrixLayout lay = layout_of(m);
  const std::vector<double> den = denominators(spec, m, lay);
  check_domain(spec, m, lay.side * lay.side, den);
  return forward(m, spec, lay, den);
}

ad::Var apply_pn(const ad::Var& m, const PowerNormSpec& spec) {
  spec.validate();
  if (spec.kind == PnKind::kNone) return m;
  const MatrixLayout lay = layout_of(m->value);
  std::vector<double> den = denominators(spec, m->value, lay);
  check_domain(spec, m->value, lay.side * lay.side, den);
  Tensor out = forward(m->value, spec, lay, den);
  const bool fault = (spec.kind == PnKind::kSigmE || spec.kind == PnKind::kSigmETrace) &&
                     testing::sigme_backward_fault();
  std::string name = "pn_" + std::string(to_string(spec.kind));
  return ad::make_node(
      std::move(name), std::move(out), {m},
      [spec, lay, den = std::move(den), fault](ad::Node& self) {
        ad::Node& p = *self.parents[0];
        auto& g = p.grad_buffer();
        const std::size_t per = lay.side * lay.side;
        const double sign = fault ? -1.0 : 1.0;
        for (std::size_t b = 0; b < lay.batch; ++b) {
          double coupling = 0.0;
          for (std::size_t i = 0; i < per; ++i) {
            const std::size_t k = b * per + i;
            const double m_ij = p.value[k];
            const double gd = sign * self.grad[k] * scalar_derivative(spec, m_ij / den[b]);
            g[k] += gd / den[b];
            coupling += gd * m_ij;
          }
          if (!spec.trace_normalized()) continue;
          // d(m_ij / (tr + lambda)) / d m_kk contributes -m_ij / den^2.
          const double diag = coupling / (den[b] * den[b]);
          for (std::size_t i = 0; i < lay.side; ++i) {
            g[b * per + i * lay.side + i] -= diag;
          }
        }
      });
}

void TrialModel::validate() const {
  if (n_trials < 1) throw ConfigError("trial model: N must be positive");
  if (!(p >= 0.0 && q >= 0.0 && p + q <= 1.0 + 1e-15)) {
    throw ConfigError("trial model: need p >= 0, q >= 0, p + q <= 1");
  }
}

double maxexp_pm_closed(const TrialModel& t) {
  t.validate();
  return std::pow(1.0 - t.q, t.n_trials) - std::pow(1.0 - t.p, t.n_trials);
}

double maxexp_pm_enumerate(const TrialModel& t) {
  t.validate();
  if (t.n_trials > kMaxEnumeratedTrials) {
    throw ConfigError("maxexp_pm_enumerate: N = " + std::to_string(t.n_trials) +
                      " exceeds " + std::to_string(kMaxEnumeratedTrials));
  }
  const double prob[3] = {1.0 - t.p - t.q, t.p, t.q};  // outcomes 0, +1, -1
  std::int64_t total = 1;
  for (int i = 0; i < t.n_trials; ++i) total *= 3;
  double any_pos = 0.0, any_neg = 0.0;
  for (std::int64_t code = 0; code < total; ++code) {
    double pr = 1.0;
    bool pos = false, neg = false;
    std::int64_t c = code;
    for (int i = 0; i < t.n_trials; ++i, c /= 3) {
      const int outcome = static_cast<int>(c % 3);
      pr *= prob[outcome];
      pos |= outcome == 1;
      neg |= outcome == 2;
    }
    if (pos) any_pos += pr;
    if (neg) any_neg += pr;
  }
  return any_pos - any_neg;
}

std::vector<double> uniform_grid(double lo, double hi, std::size_t points) {
  std::vector<double> grid(points);
  if (points == 1) {
    grid[0] = lo;
    return grid;
  }
  for (std::size_t i = 0; i < points; ++i) {
    grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  }
  return grid;
}

std::vector<CurveRow> curve_export(const std::vector<CurveSpec>& curves,
                                   const std::vector<double>& grid) {
  std::vector<CurveRow> rows;
  for (const auto& c : curves) {
    c.spec.validate();
    const bool non_negative =
        c.spec.kind == PnKind::kGamma || c.spec.kind == PnKind::kMaxExp;
    for (double x : grid) {
      if (non_negative && (x < 0.0 || x > 1.0)) continue;
      rows.push_back({c.label, x, scalar_value(c.spec, x), scalar_derivative(c.spec, x)});
    }
  }
  return rows;
}

std::vector<CurveSpec> figure_curves(std::size_t spatial_count, bool smoothed) {
  std::vector<CurveSpec> curves;
  for (PnKind kind :
       {PnKind::kGamma, PnKind::kMaxExp, PnKind::kAsinhE, PnKind::kSigmE, PnKind::kMaxExpPM}) {
    PowerNormSpec spec = default_spec(kind, spatial_count);
    if (kind == PnKind::kMaxExpPM && !smoothed) spec.alpha_soft = kHardMax;
    curves.push_back({std::string(to_string(kind)), spec});
  }
  return curves;
}

void write_curve_table(std::ostream& os, const std::vector<CurveSpec>& curves,
                       const std::vector<double>& grid, CurveColumn column) {
  for (const auto& c : curves) c.spec.validate();
  os << 'x';
  for (const auto& c : curves) os << ',' << c.label;
  os << '\n' << std::setprecision(17);
  for (double x : grid) {
    os << x;
    for (const auto& c : curves) {
      os << ',';
      const bool non_negative = c.spec.kind == PnKind::kGamma || c.spec.kind == PnKind::kMaxExp;
      if (non_negative && (x < 0.0 || x > 1.0)) continue;
      os << (column == CurveColumn::kValue ? scalar_value(c.spec, x)
                                           : scalar_derivative(c.spec, x));
    }
    os << '\n';
  }
}

void write_curves_csv(std::ostream& os, const std::vector<CurveRow>& rows) {
  os << "function,x,value,derivative\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.function << ',' << r.x << ',' << r.value << ',' << r.derivative << '\n';
  }
}

SigmeFit fit_sigme(const PowerNormSpec& target, const std::vector<double>& grid) {
  target.validate();
  std::vector<double> y(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) y[i] = scalar_value(target, grid[i]);
  auto sse = [&](double log_eta) {
    const double eta = std::exp(log_eta);
    double s = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const double d = std::tanh(0.5 * eta * grid[i]) - y[i];
      s += d * d;
    }
    return s;
  };
  // Coarse scan to bracket the minimum, then Brent refinement.
  double best = std::log(1e-3);
  double best_val = sse(best);
  for (double le = std::log(1e-3); le <= std::log(1e5); le += 0.05) {
    const double v = sse(le);
    if (v < best_val) {
      best_val = v;
      best = le;
    }
  }
  const auto [log_eta, err] = boost::math::tools::brent_find_minima(
      sse, best - 0.05, best + 0.05, std::numeric_limits<double>::digits / 2);
  SigmeFit fit;
  fit.eta = std::exp(log_eta);
  fit.squared_error = err;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    fit.sup_gap = std::max(fit.sup_gap, std::abs(std::tanh(0.5 * fit.eta * grid[i]) - y[i]));
  }
  return fit;
}

double derivative_jump_ratio(const std::vector<double>& d) {
  if (d.size() < 6) return 0.0;
  double scale = 0.0;
  for (double v : d) scale = std::max(scale, std::abs(v));
  const double floor = 1e-12 * (1.0 + scale);
  double worst = 0.0;
  // Neighbouring jumps are taken one step further out so that a discontinuity
  // split over two steps (a midpoint sample at the kink) is still seen.
  for (std::size_t i = 2; i + 3 < d.size(); ++i) {
    const double jump = std::abs(d[i + 1] - d[i]);
    const double neighbours =
        std::max(std::abs(d[i - 1] - d[i - 2]), std::abs(d[i + 3] - d[i + 2]));
    worst = std::max(worst, jump / std::max(neighbours, floor));
  }
  return worst;
}

namespace testing {
void set_sigme_backward_fault(bool enabled) { g_sigme_fault = enabled; }
bool sigme_backward_fault() { return g_sigme_fault; }
}  // namespace testing

}  // namespace sosn::pn
