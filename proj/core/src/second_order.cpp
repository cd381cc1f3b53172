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

#include "sosn/second_order.hpp"

#include <Eigen/Core>

#include <cmath>

namespace sosn {
namespace {

using RowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

struct Stack {
  std::size_t batch, k, n;
};

Stack stack_of(const char* op, const Tensor& t) {
  if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  throw ShapeError(std::string(op) + ": expected K x N or B x K x N, got " +
                   to_string(t.shape()));
}

}  // namespace

FeatureMap::FeatureMap(ad::Var data) : var_(std::move(data)) {
  const Tensor& v = var_->value;
  if (v.rank() != 2 || v.dim(0) == 0 || v.dim(1) == 0) {
    throw ShapeError("FeatureMap: expected a K x N matrix, got " + to_string(v.shape()));
  }
}

FeatureMap FeatureMap::constant(Tensor data) {
  return FeatureMap(ad::constant(std::move(data)));
}

ad::Var mean_shift_batch(const ad::Var& features, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw ConfigError("mean_shift: beta must lie in [0, 1]");
  }
  const Stack s = stack_of("mean_shift", features->value);
  if (beta == 0.0) return features;
  Tensor out = features->value;
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t k = 0; k < s.k; ++k) {
      double* row = out.data().data() + (b * s.k + k) * s.n;
      double mu = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) mu += row[i];
      mu /= static_cast<double>(s.n);
      for (std::size_t i = 0; i < s.n; ++i) row[i] -= beta * mu;
    }
  }
  return ad::make_node("mean_shift", std::move(out), {features}, [s, beta](ad::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < s.batch * s.k; ++r) {
      const double* gr = self.grad.data().data() + r * s.n;
      double total = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) total += gr[i];
      const double shift = beta * total / static_cast<double>(s.n);
      for (std::size_t i = 0; i < s.n; ++i) g[r * s.n + i] += gr[i] - shift;
    }
  });
}

ad::Var autocorrelate_batch(const ad::Var& features) {
  const Stack s = stack_of("autocorrelate", features->value);
  const double inv_n = 1.0 / static_cast<double>(s.n);
  Shape out_shape = features->value.rank() == 2 ? Shape{s.k, s.k} : Shape{s.batch, s.k, s.k};
  Tensor out(out_shape);
  for (std::size_t b = 0; b < s.batch; ++b) {
    ConstMatMap phi(features->value.data().data() + b * s.k * s.n, s.k, s.n);
    MatMap m(out.data().data() + b * s.k * s.k, s.k, s.k);
    m.noalias() = inv_n * phi * phi.transpose();
    // Exact symmetry regardless of GEMM summation order.
    for (std::size_t i = 0; i < s.k; ++i)
      for (std::size_t j = i + 1; j < s.k; ++j) m(j, i) = m(i, j);
  }
  return ad::make_node("autocorrelate", std::move(out), {features}, [s, inv_n](ad::Node& self) {
    ad::Node& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t b = 0; b < s.batch; ++b) {
      ConstMatMap up(self.grad.data().data() + b * s.k * s.k, s.k, s.k);
      ConstMatMap phi(p.value.data().data() + b * s.k * s.n, s.k, s.n);
      MatMap(g.data().data() + b * s.k * s.n, s.k, s.n).noalias() +=
          inv_n * (up + up.transpose()) * phi;
    }
  });
}

FeatureMap mean_shift(const FeatureMap& f, double beta) {
  return FeatureMap(mean_shift_batch(f.var(), beta));
}

SecondOrderMatrix autocorrelate(const FeatureMap& f) {
  return {autocorrelate_batch(f.var()), false};
}

SecondOrderMatrix normalize(const SecondOrderMatrix& m, const pn::PowerNormSpec& spec) {
  return {pn::apply_pn(m.data, spec), spec.kind != pn::PnKind::kNone};
}

KernelCheck kernel_linearization_check(const Tensor& a, const Tensor& b, int r) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("kernel_linearization_check: expected K x N matrices");
  }
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("kernel_linearization_check: K mismatch " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
  if (r < 1 || r > 3) {
    throw ConfigError("kernel_linearization_check: degree must be 1, 2 or 3");
  }
  const std::size_t k = a.dim(0), na = a.dim(1), nb = b.dim(1);
  auto col = [](const Tensor& t, std::size_t i, std::size_t n) { return t.at(i, n); };

  KernelCheck out;
  for (std::size_t n = 0; n < na; ++n) {
    for (std::size_t m = 0; m < nb; ++m) {
      double dot = 0.0;
      for (std::size_t i = 0; i < k; ++i) dot += col(a, i, n) * col(b, i, m);
      out.lhs += std::pow(dot, r);
    }
  }
  out.lhs /= static_cast<double>(na * nb);

  // Psi_r as a dense K^r tensor of averaged r-fold outer products.
  auto psi = [&](const Tensor& t) {
    const std::size_t n_cols = t.dim(1);
    std::size_t len = 1;
    for (int i = 0; i < r; ++i) len *= k;
    std::vector<double> out_t(len, 0.0);
    for (std::size_t n = 0; n < n_cols; ++n) {
      for (std::size_t idx = 0; idx < len; ++idx) {
        double prod = 1.0;
        std::size_t rem = idx;
        for (int d = 0; d < r; ++d, rem /= k) prod *= col(t, rem % k, n);
        out_t[idx] += prod;
      }
    }
    for (double& v : out_t) v /= static_cast<double>(n_cols);
    return out_t;
  };
  const auto pa = psi(a);
  const auto pb = psi(b);
  for (std::size_t i = 0; i < pa.size(); ++i) out.rhs += pa[i] * pb[i];
  return out;
}

}  // namespace sosn
