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

#ifndef SOSN_SECOND_ORDER_HPP_
#define SOSN_SECOND_ORDER_HPP_

#include <cstddef>

#include "sosn/autodiff.hpp"
#include "sosn/power_norm.hpp"
#include "sosn/tensor.hpp"

namespace sosn {

/// K x N matrix whose column n is the feature vector at spatial location n.
class FeatureMap {
 public:
  /// Throws ShapeError unless `data` is a K x N matrix with K, N >= 1.
  explicit FeatureMap(ad::Var data);
  static FeatureMap constant(Tensor data);

  std::size_t k() const { return var_->value.dim(0); }
  std::size_t n() const { return var_->value.dim(1); }
  const ad::Var& var() const { return var_; }
  const Tensor& value() const { return var_->value; }

 private:
  ad::Var var_;
};

/// Symmetric dim x dim autocorrelation matrix; `normalized` once a power
/// normalization has been applied.
struct SecondOrderMatrix {
  ad::Var data;
  bool normalized = false;

  std::size_t dim() const { return data->value.dim(0); }
  const Tensor& value() const { return data->value; }
};

/// Replaces every column phi_n by phi_n - beta * mu, mu being the mean column
/// of this map.
FeatureMap mean_shift(const FeatureMap& f, double beta);

/// M = (1/N) Phi Phi^T.
SecondOrderMatrix autocorrelate(const FeatureMap& f);

/// Power-normalizes M.
SecondOrderMatrix normalize(const SecondOrderMatrix& m, const pn::PowerNormSpec& spec);

// Batched forms over [B, K, N] feature stacks, used by the model so that a
// whole episode is pooled in one node.
ad::Var mean_shift_batch(const ad::Var& features, double beta);
/// [B, K, N] -> [B, K, K], each slice (1/N) Phi_b Phi_b^T.
ad::Var autocorrelate_batch(const ad::Var& features);

struct KernelCheck {
  double lhs = 0.0;
  double rhs = 0.0;
};

/// Evaluates both sides of the polynomial-kernel linearization
///   (1/(N N*)) sum_n sum_n' <phi_n, phi*_n'>^r  =  <Psi_r(A), Psi_r(B)>
/// where Psi_r averages r-fold outer products. r must be 1, 2 or 3.
KernelCheck kernel_linearization_check(const Tensor& a, const Tensor& b, int r);

}  // namespace sosn

#endif  // SOSN_SECOND_ORDER_HPP_
