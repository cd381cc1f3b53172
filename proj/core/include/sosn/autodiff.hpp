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

// Reverse-mode differentiation over dense double tensors.
//
// Every primitive evaluates its forward value eagerly and registers a
// vector-Jacobian product. backward() walks the graph in reverse topological
// order from a scalar root. Nodes that do not depend on any variable carry
// no parents and no backward closure.

#ifndef SOSN_AUTODIFF_HPP_
#define SOSN_AUTODIFF_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sosn/tensor.hpp"

namespace sosn::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // empty until backward() reaches the node
  std::vector<Var> parents;
  std::function<void(Node&)> backward;
  std::string op;
  std::uint64_t id = 0;
  bool requires_grad = false;

  bool has_grad() const { return !grad.empty(); }
  /// Gradient buffer, zero-initialised on first use.
  Tensor& grad_buffer();
};

/// Leaf that does not receive gradients.
Var constant(Tensor value);
/// Leaf that receives gradients.
Var variable(Tensor value);

/// Creates an interior node. Throws NumericError naming the op and node id if
/// the forward value is not finite.
Var make_node(std::string op, Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> backward);

/// Accumulates gradients into every node reachable from a scalar root.
void backward(const Var& root);
/// Clears gradients of every node reachable from root.
void zero_grad(const Var& root);
/// Gradient of v after backward(); zeros if v was not reached.
Tensor grad_of(const Var& v);

// Linear algebra
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var trace(const Var& a);
/// x[B,F] * w[O,F]^T + b[O]; b may be null.
Var linear(const Var& x, const Var& w, const Var& b);

// Convolutional blocks, NCHW layout
/// Stride-1 convolution with zero padding; bias may be null.
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t padding);
/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
Var maxpool2x2(const Var& x);

enum class BatchNormMode { kTraining, kEvaluation };

/// Running statistics updated in training mode; either pointer may be null.
struct BatchNormBuffers {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
};

inline constexpr double kBatchNormMomentum = 0.9;
inline constexpr double kBatchNormEps = 1e-5;

/// Per-channel normalisation over every axis except axis 1. Training mode
/// uses batch statistics and needs a batch extent of at least 2.
Var batchnorm(const Var& x, const Var& gamma, const Var& beta,
              BatchNormMode mode, BatchNormBuffers buffers = {});

// Elementwise
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var power(const Var& x, double exponent);
Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);

// Binary ops accept equal shapes, or a single-element operand on either side.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

// Reductions to shape [1]
Var sum(const Var& x);
Var mean(const Var& x);

// Structure
Var reshape(const Var& x, Shape shape);
Var vectorize(const Var& x);
/// Concatenates along 1-based mode k. k == rank + 1 stacks along a new
/// trailing axis, so two KxK matrices at k = 3 give KxKx2.
Var concat_mode(const Var& a, const Var& b, std::size_t mode);
/// Concatenates along axis 0.
Var concat0(const std::vector<Var>& parts);
/// Stacks equal-shaped tensors along a new leading axis.
Var stack(const std::vector<Var>& parts);
/// Rows [begin, end) along axis 0.
Var slice0(const Var& x, std::size_t begin, std::size_t end);
/// out[i] = x[index[i]] in flat storage order, reshaped to `shape`.
Var gather(const Var& x, std::vector<std::size_t> index, Shape shape);
/// Rotates the last two axes by k quarter turns counter-clockwise.
Var rotate90(const Var& x, int k);

/// Forward-only rotation used for data augmentation.
Tensor rotate90(const Tensor& x, int k);

struct GradcheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  /// Upper bound on perturbed entries per input; 0 checks all.
  std::size_t max_entries = 0;
  std::uint64_t seed = 7;
};

struct GradcheckResult {
  bool passed = true;
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
};

/// Compares reverse-mode gradients with central finite differences. Non-scalar
/// outputs are reduced by a fixed random projection. The error per input is
/// ||analytic - numeric|| / max(||analytic||, ||numeric||), taken over the
/// checked entries.
GradcheckResult gradcheck(
    const std::function<Var(const std::vector<Var>&)>& fn,
    const std::vector<Tensor>& inputs, const GradcheckOptions& options = {});

}  // namespace sosn::ad

#endif  // SOSN_AUTODIFF_HPP_
