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

// Power Normalization family for second-order matrices.
//
// Every member is applied elementwise to M (optionally after dividing by
// trace(M) + lambda) and has an analytic derivative. The trace-normalised
// members couple every diagonal entry to the whole matrix; their backward
// includes that term.

#ifndef SOSN_POWER_NORM_HPP_
#define SOSN_POWER_NORM_HPP_

#include <cstddef>
#include <iosfwd>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "sosn/autodiff.hpp"
#include "sosn/tensor.hpp"

namespace sosn::pn {

enum class PnKind { kNone, kGamma, kMaxExp, kAsinhE, kSigmE, kSigmETrace, kMaxExpPM };

std::string_view to_string(PnKind kind);
/// Accepts the names printed by to_string ("None", "Gamma", "MaxExp",
/// "AsinhE", "SigmE", "SigmE_trace", "MaxExpPM").
PnKind parse_kind(std::string_view name);

/// Hard maximum instead of the soft maximum in MaxExpPM.
inline constexpr double kHardMax = std::numeric_limits<double>::infinity();

struct PowerNormSpec {
  PnKind kind = PnKind::kNone;
  double gamma = 0.5;        // Gamma exponent, AsinhE slope
  double eta = 1.0;          // MaxExp/MaxExpPM exponent, SigmE slope
  double lambda = 1e-6;      // trace regulariser
  double rho = 0.5;          // positive/negative co-occurrence split
  double alpha_soft = 20.0;  // soft-max sharpness; kHardMax disables smoothing
  double beta_shift = 0.5;   // partial mean shift of feature columns
  double gamma_grad_cap = 1e6;
  bool trace_input = false;  // Gamma/MaxExp: divide M by trace(M) + lambda first

  /// Throws ConfigError when a field is outside its range.
  void validate() const;
  bool trace_normalized() const {
    return kind == PnKind::kSigmETrace || kind == PnKind::kMaxExpPM ||
           (trace_input && (kind == PnKind::kGamma || kind == PnKind::kMaxExp));
  }
};

/// Spec with the library defaults for a feature map of `spatial_count`
/// columns: eta = N for MaxExp and MaxExpPM, alpha = 20 * eta, and for the
/// SigmE members the slope fitted to MaxExpPM(rho = 0.5, eta = N).
PowerNormSpec default_spec(PnKind kind, std::size_t spatial_count);

/// Smooth maximum (1/alpha) log(exp(alpha x) + exp(alpha y)), evaluated in
/// shifted form. alpha = kHardMax gives max(x, y).
double soft_max(double x, double y, double alpha);
/// Elementwise soft maximum of two equal-shaped nodes.
ad::Var soft_max_pair(const ad::Var& x, const ad::Var& y, double alpha);

/// Value and derivative of the scalar map applied to each (normalised) entry.
double scalar_value(const PowerNormSpec& spec, double u);
double scalar_derivative(const PowerNormSpec& spec, double u);

/// Applies `spec` to a KxK matrix or a [B, K, K] batch (trace per matrix).
ad::Var apply_pn(const ad::Var& m, const PowerNormSpec& spec);
/// Forward-only variant of apply_pn.
Tensor apply_pn(const Tensor& m, const PowerNormSpec& spec);

/// Trials producing +1 with probability p, -1 with q, 0 otherwise.
struct TrialModel {
  int n_trials = 1;
  double p = 0.0;
  double q = 0.0;
  void validate() const;
};

/// (1 - q)^N - (1 - p)^N.
double maxexp_pm_closed(const TrialModel& t);
/// P(at least one +1) - P(at least one -1) summed over all 3^N sequences.
/// Requires N <= 12.
double maxexp_pm_enumerate(const TrialModel& t);

inline constexpr int kMaxEnumeratedTrials = 12;

struct CurveRow {
  std::string function;
  double x = 0.0;
  double value = 0.0;
  double derivative = 0.0;
};

/// Named curve: label plus the function evaluated on normalised inputs.
struct CurveSpec {
  std::string label;
  PowerNormSpec spec;
};

/// Uniform grid of `points` samples over [lo, hi].
std::vector<double> uniform_grid(double lo, double hi, std::size_t points);

/// Rows (function, x, f(x), f'(x)) for every curve over the grid. Members
/// restricted to [0, 1] (Gamma, MaxExp) only emit rows for x >= 0.
std::vector<CurveRow> curve_export(const std::vector<CurveSpec>& curves,
                                   const std::vector<double>& grid);

/// CSV with header `function,x,value,derivative`.
void write_curves_csv(std::ostream& os, const std::vector<CurveRow>& rows);

/// The members drawn in the curve figure at spatial count N: Gamma, MaxExp,
/// AsinhE, SigmE (fitted slope) and MaxExpPM (rho = 0.5, eta = N). With
/// `smoothed` false MaxExpPM uses the hard maximum.
std::vector<CurveSpec> figure_curves(std::size_t spatial_count, bool smoothed);

enum class CurveColumn { kValue, kDerivative };

/// Wide CSV: header `x,<label>,...` then one row per grid point. Members
/// restricted to [0, 1] leave their cells empty outside it.
void write_curve_table(std::ostream& os, const std::vector<CurveSpec>& curves,
                       const std::vector<double>& grid, CurveColumn column);

struct SigmeFit {
  double eta = 0.0;
  double sup_gap = 0.0;
  double squared_error = 0.0;
};

/// Least-squares SigmE slope against `target` over the grid, and the sup-norm
/// gap at that slope.
SigmeFit fit_sigme(const PowerNormSpec& target, const std::vector<double>& grid);

/// Largest jump between adjacent derivative samples relative to the larger of
/// its neighbouring jumps. Values <= 10 indicate no discontinuity.
double derivative_jump_ratio(const std::vector<double>& derivative);

namespace testing {
/// Flips the sign of the SigmE backward. Mutation-testing hook for the
/// gradient-check suite; never enabled in normal operation.
void set_sigme_backward_fault(bool enabled);
bool sigme_backward_fault();
}  // namespace testing

}  // namespace sosn::pn

#endif  // SOSN_POWER_NORM_HPP_
