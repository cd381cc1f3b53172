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

#include "sosn/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>
#include <unordered_set>
#include <utility>

namespace sosn::ad {
namespace {

using RowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

std::atomic<std::uint64_t> next_id{1};

[[noreturn]] void shape_fail(const std::string& op, const Shape& a,
                             const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a,
                             const std::string& why) {
  throw ShapeError(op + ": shape " + to_string(a) + " " + why);
}

bool wants_grad(const Var& v) { return v && v->requires_grad; }

template <typename Fwd, typename Deriv>
Var unary(const char* name, const Var& x, Fwd fwd, Deriv deriv) {
  Tensor out(x->value.shape());
  const auto& in = x->value.storage();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_node(name, std::move(out), {x}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
    }
  });
}

enum class Broadcast { kSame, kLeftScalar, kRightScalar };

Broadcast classify(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (a.size() == 1) return Broadcast::kLeftScalar;
  if (b.size() == 1) return Broadcast::kRightScalar;
  shape_fail(op, a.shape(), b.shape());
}

// Applies fn(a_i, b_i) and registers partials da(a_i,b_i), db(a_i,b_i).
template <typename Fn, typename Da, typename Db>
Var binary(const char* name, const Var& a, const Var& b, Fn fn, Da da, Db db) {
  const Broadcast mode = classify(name, a->value, b->value);
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  const Shape out_shape =
      mode == Broadcast::kLeftScalar ? bv.shape() : av.shape();
  Tensor out(out_shape);
  auto ai = [&](std::size_t i) {
    return mode == Broadcast::kLeftScalar ? av[0] : av[i];
  };
  auto bi = [&](std::size_t i) {
    return mode == Broadcast::kRightScalar ? bv[0] : bv[i];
  };
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(ai(i), bi(i));
  return make_node(name, std::move(out), {a, b}, [mode, da, db](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto at = [&](const Tensor& t, bool scalar, std::size_t i) {
      return scalar ? t[0] : t[i];
    };
    const bool a_scalar = mode == Broadcast::kLeftScalar;
    const bool b_scalar = mode == Broadcast::kRightScalar;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = at(pa.value, a_scalar, i);
      const double y = at(pb.value, b_scalar, i);
      const double g = self.grad[i];
      if (pa.requires_grad) pa.grad_buffer()[a_scalar ? 0 : i] += g * da(x, y);
      if (pb.requires_grad) pb.grad_buffer()[b_scalar ? 0 : i] += g * db(x, y);
    }
  });
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    shape_fail(op, t.shape(), "must have rank " + std::to_string(rank));
  }
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw, padding;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

// Column buffer for images [first, first + count): rows index (c, ky, kx),
// columns index (image, oy, ox).
void im2col(const ConvGeometry& g, const double* x, std::size_t first,
            std::size_t count, std::vector<double>& col) {
  const std::size_t cols = count * g.pixels();
  col.assign(g.patch() * cols, 0.0);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const std::size_t row = (c * g.kh + ky) * g.kw + kx;
        double* dst = col.data() + row * cols;
        for (std::size_t n = 0; n < count; ++n) {
          const double* img =
              x + ((first + n) * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy + ky) -
                            static_cast<long>(g.padding);
            double* out_row = dst + n * g.pixels() + oy * g.out_w;
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox + kx) -
                              static_cast<long>(g.padding);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              out_row[ox] = img[iy * g.width + ix];
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const std::vector<double>& col,
            std::size_t first, std::size_t count, double* dx) {
  const std::size_t cols = count * g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const std::size_t row = (c * g.kh + ky) * g.kw + kx;
        const double* src = col.data() + row * cols;
        for (std::size_t n = 0; n < count; ++n) {
          double* img = dx + ((first + n) * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy + ky) -
                            static_cast<long>(g.padding);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            const double* in_row = src + n * g.pixels() + oy * g.out_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox + kx) -
                              static_cast<long>(g.padding);
              if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
              img[iy * g.width + ix] += in_row[ox];
            }
          }
        }
      }
    }
  }
}

// Images per im2col chunk, keeping the column buffer near 4M entries.
std::size_t conv_chunk(const ConvGeometry& g) {
  const std::size_t per_image = std::max<std::size_t>(1, g.patch() * g.pixels());
  return std::clamp<std::size_t>((std::size_t{1} << 22) / per_image, 1,
                                 g.batch);
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  node->id = next_id++;
  return node;
}

Var variable(Tensor value) {
  auto node = constant(std::move(value));
  node->op = "variable";
  node->requires_grad = true;
  return node;
}

Var make_node(std::string op, Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->id = next_id++;
  if (!value.all_finite()) {
    throw NumericError(op + " (node #" + std::to_string(node->id) +
                       ") produced a non-finite value");
  }
  node->value = std::move(value);
  node->op = std::move(op);
  node->requires_grad = std::any_of(parents.begin(), parents.end(), wants_grad);
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(backward_fn);
  }
  return node;
}

namespace {

std::vector<Node*> topological_order(const Var& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* child = node->parents[next++].get();
      if (child && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace

void backward(const Var& root) {
  if (root->value.size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " +
                     to_string(root->value.shape()));
  }
  const auto order = topological_order(root);
  for (Node* n : order) {
    if (n->requires_grad) n->grad_buffer();
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->requires_grad && n->backward) n->backward(*n);
  }
}

void zero_grad(const Var& root) {
  for (Node* n : topological_order(root)) n->grad = Tensor();
}

Tensor grad_of(const Var& v) {
  return v->has_grad() ? v->grad : Tensor(v->value.shape(), 0.0);
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(const Var& a, const Var& b) {
  require_rank("matmul", a->value, 2);
  require_rank("matmul", b->value, 2);
  const std::size_t m = a->value.dim(0), k = a->value.dim(1),
                    n = b->value.dim(1);
  if (b->value.dim(0) != k) shape_fail("matmul", a->value.shape(), b->value.shape());
  Tensor out({m, n});
  MatMap(out.data().data(), m, n).noalias() =
      ConstMatMap(a->value.data().data(), m, k) *
      ConstMatMap(b->value.data().data(), k, n);
  return make_node("matmul", std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    ConstMatMap g(self.grad.data().data(), m, n);
    if (pa.requires_grad) {
      MatMap(pa.grad_buffer().data().data(), m, k).noalias() +=
          g * ConstMatMap(pb.value.data().data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MatMap(pb.grad_buffer().data().data(), k, n).noalias() +=
          ConstMatMap(pa.value.data().data(), m, k).transpose() * g;
    }
  });
}

Var transpose(const Var& a) {
  require_rank("transpose", a->value, 2);
  const std::size_t m = a->value.dim(0), n = a->value.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a->value.at(i, j);
  return make_node("transpose", std::move(out), {a}, [m, n](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g.at(i, j) += self.grad.at(j, i);
  });
}

Var trace(const Var& a) {
  require_rank("trace", a->value, 2);
  const std::size_t n = a->value.dim(0);
  if (a->value.dim(1) != n) shape_fail("trace", a->value.shape(), "is not square");
  double t = 0.0;
  for (std::size_t i = 0; i < n; ++i) t += a->value.at(i, i);
  return make_node("trace", Tensor::scalar(t), {a}, [n](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) g.at(i, i) += self.grad[0];
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank("linear", x->value, 2);
  require_rank("linear", w->value, 2);
  const std::size_t batch = x->value.dim(0), in = x->value.dim(1),
                    out_dim = w->value.dim(0);
  if (w->value.dim(1) != in) shape_fail("linear", x->value.shape(), w->value.shape());
  if (b && b->value.size() != out_dim)
    shape_fail("linear", w->value.shape(), b->value.shape());
  Tensor out({batch, out_dim});
  MatMap o(out.data().data(), batch, out_dim);
  o.noalias() = ConstMatMap(x->value.data().data(), batch, in) *
                ConstMatMap(w->value.data().data(), out_dim, in).transpose();
  if (b) {
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) o(r, c) += b->value[c];
  }
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_node(
      "linear", std::move(out), std::move(parents),
      [batch, in, out_dim](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        ConstMatMap g(self.grad.data().data(), batch, out_dim);
        if (px.requires_grad) {
          MatMap(px.grad_buffer().data().data(), batch, in).noalias() +=
              g * ConstMatMap(pw.value.data().data(), out_dim, in);
        }
        if (pw.requires_grad) {
          MatMap(pw.grad_buffer().data().data(), out_dim, in).noalias() +=
              g.transpose() * ConstMatMap(px.value.data().data(), batch, in);
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->grad_buffer();
          for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t c = 0; c < out_dim; ++c) gb[c] += g(r, c);
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t padding) {
  require_rank("conv2d", x->value, 4);
  require_rank("conv2d", w->value, 4);
  ConvGeometry g{};
  g.batch = x->value.dim(0);
  g.channels = x->value.dim(1);
  g.height = x->value.dim(2);
  g.width = x->value.dim(3);
  g.out_channels = w->value.dim(0);
  g.kh = w->value.dim(2);
  g.kw = w->value.dim(3);
  g.padding = padding;
  if (w->value.dim(1) != g.channels) {
    shape_fail("conv2d", x->value.shape(), w->value.shape());
  }
  if (g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw) {
    shape_fail("conv2d", x->value.shape(), w->value.shape());
  }
  if (b && b->value.size() != g.out_channels) {
    shape_fail("conv2d", w->value.shape(), b->value.shape());
  }
  g.out_h = g.height + 2 * padding - g.kh + 1;
  g.out_w = g.width + 2 * padding - g.kw + 1;

  Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
  const std::size_t chunk = conv_chunk(g);
  std::vector<double> col;
  RowMajor prod;
  ConstMatMap wm(w->value.data().data(), g.out_channels, g.patch());
  for (std::size_t first = 0; first < g.batch; first += chunk) {
    const std::size_t count = std::min(chunk, g.batch - first);
    im2col(g, x->value.data().data(), first, count, col);
    prod.noalias() = wm * ConstMatMap(col.data(), g.patch(), count * g.pixels());
    for (std::size_t n = 0; n < count; ++n) {
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        double* dst = out.data().data() +
                      ((first + n) * g.out_channels + o) * g.pixels();
        const double bias = b ? b->value[o] : 0.0;
        for (std::size_t p = 0; p < g.pixels(); ++p) {
          dst[p] = prod(o, n * g.pixels() + p) + bias;
        }
      }
    }
  }

  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_node("conv2d", std::move(out), std::move(parents), [g](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    const std::size_t chunk = conv_chunk(g);
    std::vector<double> col;
    RowMajor gout;
    RowMajor dcol;
    ConstMatMap wm(pw.value.data().data(), g.out_channels, g.patch());
    for (std::size_t first = 0; first < g.batch; first += chunk) {
      const std::size_t count = std::min(chunk, g.batch - first);
      gout.resize(g.out_channels, count * g.pixels());
      for (std::size_t n = 0; n < count; ++n) {
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          const double* src = self.grad.data().data() +
                              ((first + n) * g.out_channels + o) * g.pixels();
          for (std::size_t p = 0; p < g.pixels(); ++p) {
            gout(o, n * g.pixels() + p) = src[p];
          }
        }
      }
      if (pb && pb->requires_grad) {
        auto& gb = pb->grad_buffer();
        for (std::size_t o = 0; o < g.out_channels; ++o) gb[o] += gout.row(o).sum();
      }
      if (pw.requires_grad) {
        im2col(g, px.value.data().data(), first, count, col);
        MatMap(pw.grad_buffer().data().data(), g.out_channels, g.patch())
            .noalias() +=
            gout * ConstMatMap(col.data(), g.patch(), count * g.pixels())
                       .transpose();
      }
      if (px.requires_grad) {
        dcol.noalias() = wm.transpose() * gout;
        std::vector<double> buf(dcol.data(), dcol.data() + dcol.size());
        col2im(g, buf, first, count, px.grad_buffer().data().data());
      }
    }
  });
}

Var maxpool2x2(const Var& x) {
  require_rank("maxpool2x2", x->value, 4);
  const std::size_t batch = x->value.dim(0), ch = x->value.dim(1),
                    h = x->value.dim(2), w = x->value.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) shape_fail("maxpool2x2", x->value.shape(), "is smaller than 2x2");
  Tensor out({batch, ch, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const auto& in = x->value.storage();
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < batch * ch; ++bc) {
    const std::size_t base = bc * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
        std::size_t best = base + 2 * y * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * y + dy) * w + 2 * xx + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        argmax[o] = best;
        out[o] = in[best];
      }
    }
  }
  return make_node("maxpool2x2", std::move(out), {x},
                   [argmax = std::move(argmax)](Node& self) {
                     auto& g = self.parents[0]->grad_buffer();
                     for (std::size_t i = 0; i < argmax.size(); ++i) {
                       g[argmax[i]] += self.grad[i];
                     }
                   });
}

Var batchnorm(const Var& x, const Var& gamma, const Var& beta,
              BatchNormMode mode, BatchNormBuffers buffers) {
  const Tensor& xv = x->value;
  if (xv.rank() < 2) shape_fail("batchnorm", xv.shape(), "must have rank >= 2");
  const std::size_t batch = xv.dim(0), ch = xv.dim(1);
  const std::size_t inner = xv.size() / (batch * ch);
  if (gamma->value.size() != ch || beta->value.size() != ch) {
    shape_fail("batchnorm", xv.shape(), gamma->value.shape());
  }
  const std::size_t count = batch * inner;
  std::vector<double> mu(ch), var(ch);
  if (mode == BatchNormMode::kTraining) {
    if (batch < 2) {
      shape_fail("batchnorm", xv.shape(),
                 "needs a batch extent of at least 2 in training mode");
    }
    for (std::size_t c = 0; c < ch; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = xv.data().data() + (n * ch + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
      }
      mu[c] = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = xv.data().data() + (n * ch + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) v += (p[i] - mu[c]) * (p[i] - mu[c]);
      }
      var[c] = v / static_cast<double>(count);
    }
    const double unbias =
        static_cast<double>(count) / static_cast<double>(std::max<std::size_t>(count - 1, 1));
    if (buffers.running_mean) {
      for (std::size_t c = 0; c < ch; ++c) {
        (*buffers.running_mean)[c] = kBatchNormMomentum * (*buffers.running_mean)[c] +
                                     (1.0 - kBatchNormMomentum) * mu[c];
      }
    }
    if (buffers.running_var) {
      for (std::size_t c = 0; c < ch; ++c) {
        (*buffers.running_var)[c] = kBatchNormMomentum * (*buffers.running_var)[c] +
                                    (1.0 - kBatchNormMomentum) * var[c] * unbias;
      }
    }
  } else {
    if (!buffers.running_mean || !buffers.running_var) {
      throw ShapeError("batchnorm: evaluation mode needs running statistics");
    }
    for (std::size_t c = 0; c < ch; ++c) {
      mu[c] = (*buffers.running_mean)[c];
      var[c] = (*buffers.running_var)[c];
    }
  }

  std::vector<double> inv_std(ch);
  for (std::size_t c = 0; c < ch; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + kBatchNormEps);
  Tensor xhat(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      const std::size_t off = (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double h = (xv[off + i] - mu[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = gamma->value[c] * h + beta->value[c];
      }
    }
  }
  const bool training = mode == BatchNormMode::kTraining;
  return make_node(
      "batchnorm", std::move(out), {x, gamma, beta},
      [batch, ch, inner, count, training, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pbeta = *self.parents[2];
        std::vector<double> sum_dy(ch, 0.0), sum_dy_xhat(ch, 0.0);
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t off = (n * ch + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              sum_dy[c] += self.grad[off + i];
              sum_dy_xhat[c] += self.grad[off + i] * xhat[off + i];
            }
          }
        }
        if (pg.requires_grad) {
          auto& g = pg.grad_buffer();
          for (std::size_t c = 0; c < ch; ++c) g[c] += sum_dy_xhat[c];
        }
        if (pbeta.requires_grad) {
          auto& g = pbeta.grad_buffer();
          for (std::size_t c = 0; c < ch; ++c) g[c] += sum_dy[c];
        }
        if (!px.requires_grad) return;
        auto& gx = px.grad_buffer();
        const double m = static_cast<double>(count);
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t c = 0; c < ch; ++c) {
            const double scale = pg.value[c] * inv_std[c];
            const std::size_t off = (n * ch + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const double dy = self.grad[off + i];
              if (training) {
                gx[off + i] += scale * (dy - sum_dy[c] / m -
                                        xhat[off + i] * sum_dy_xhat[c] / m);
              } else {
                gx[off + i] += scale * dy;
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

Var relu(const Var& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double out) { return out * (1.0 - out); });
}

Var tanh(const Var& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double out) { return 1.0 - out * out; });
}

Var exp(const Var& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double out) { return out; });
}

Var log(const Var& x) {
  for (double v : x->value.storage()) {
    if (!(v > 0.0)) throw DomainError("log: input must be positive");
  }
  return unary(
      "log", x, [](double v) { return std::log(v); },
      [](double in, double) { return 1.0 / in; });
}

Var sqrt(const Var& x) {
  for (double v : x->value.storage()) {
    if (v < 0.0) throw DomainError("sqrt: input must be non-negative");
  }
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double out) { return 0.5 / out; });
}

Var power(const Var& x, double exponent) {
  if (exponent != std::floor(exponent)) {
    for (double v : x->value.storage()) {
      if (v < 0.0) throw DomainError("power: non-integer exponent of a negative value");
    }
  }
  return unary(
      "power", x, [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double in, double) {
        return exponent * std::pow(in, exponent - 1.0);
      });
}

Var scale(const Var& x, double factor) {
  return unary(
      "scale", x, [factor](double v) { return factor * v; },
      [factor](double, double) { return factor; });
}

Var add_scalar(const Var& x, double offset) {
  return unary(
      "add_scalar", x, [offset](double v) { return v + offset; },
      [](double, double) { return 1.0; });
}

Var add(const Var& a, const Var& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  for (double v : b->value.storage()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x->value.storage()) s += v;
  return make_node("sum", Tensor::scalar(s), {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x->value.size());
  return scale(sum(x), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Structure

Var reshape(const Var& x, Shape shape) {
  Tensor out = x->value.reshaped(std::move(shape));
  return make_node("reshape", std::move(out), {x}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var vectorize(const Var& x) { return reshape(x, {x->value.size()}); }

Var concat_mode(const Var& a, const Var& b, std::size_t mode) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  if (mode < 1 || mode > sa.size() + 1 || sa.size() != sb.size()) {
    throw ShapeError("concat_mode(" + std::to_string(mode) +
                     "): incompatible shapes " + to_string(sa) + " and " +
                     to_string(sb));
  }
  const std::size_t axis = mode - 1;
  Shape out_shape = sa;
  std::size_t da = 1, db = 1;
  if (axis == sa.size()) {
    if (sa != sb) shape_fail("concat_mode", sa, sb);
    out_shape.push_back(2);
  } else {
    for (std::size_t i = 0; i < sa.size(); ++i) {
      if (i != axis && sa[i] != sb[i]) shape_fail("concat_mode", sa, sb);
    }
    da = sa[axis];
    db = sb[axis];
    out_shape[axis] = da + db;
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  // With a new trailing axis, each element is its own block of size 1.
  const bool trailing = axis == sa.size();
  if (trailing) inner = 1;

  Tensor out(out_shape);
  auto block = [&](std::size_t o, std::size_t& dst, const Tensor& src,
                   std::size_t extent) {
    const std::size_t len = extent * inner;
    std::copy_n(src.data().begin() + o * len, len, out.data().begin() + dst);
    dst += len;
  };
  std::size_t dst = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    block(o, dst, a->value, da);
    block(o, dst, b->value, db);
  }
  return make_node("concat_mode", std::move(out), {a, b},
                   [outer, inner, da, db](Node& self) {
                     std::size_t src = 0;
                     for (std::size_t o = 0; o < outer; ++o) {
                       for (int side = 0; side < 2; ++side) {
                         Node& p = *self.parents[side];
                         const std::size_t len = (side == 0 ? da : db) * inner;
                         if (p.requires_grad) {
                           auto& g = p.grad_buffer();
                           for (std::size_t i = 0; i < len; ++i) {
                             g[o * len + i] += self.grad[src + i];
                           }
                         }
                         src += len;
                       }
                     }
                   });
}

Var concat0(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat0: no inputs");
  Shape tail(parts[0]->value.shape().begin() + 1, parts[0]->value.shape().end());
  std::size_t rows = 0;
  std::vector<double> data;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape();
    if (s.empty() || Shape(s.begin() + 1, s.end()) != tail) {
      shape_fail("concat0", parts[0]->value.shape(), s);
    }
    rows += s[0];
    data.insert(data.end(), p->value.storage().begin(), p->value.storage().end());
  }
  Shape out_shape = tail;
  out_shape.insert(out_shape.begin(), rows);
  return make_node("concat0", Tensor(std::move(out_shape), std::move(data)), parts,
                   [](Node& self) {
                     std::size_t off = 0;
                     for (auto& p : self.parents) {
                       const std::size_t len = p->value.size();
                       if (p->requires_grad) {
                         auto& g = p->grad_buffer();
                         for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
                       }
                       off += len;
                     }
                   });
}

Var stack(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  std::vector<Var> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    if (p->value.shape() != parts[0]->value.shape()) {
      shape_fail("stack", parts[0]->value.shape(), p->value.shape());
    }
    Shape s = p->value.shape();
    s.insert(s.begin(), 1);
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat0(expanded);
}

Var slice0(const Var& x, std::size_t begin, std::size_t end) {
  const Shape& s = x->value.shape();
  if (s.empty() || begin >= end || end > s[0]) {
    shape_fail("slice0", s,
               "cannot take rows [" + std::to_string(begin) + ", " +
                   std::to_string(end) + ")");
  }
  const std::size_t inner = x->value.size() / s[0];
  Shape out_shape = s;
  out_shape[0] = end - begin;
  std::vector<double> data(x->value.storage().begin() + begin * inner,
                           x->value.storage().begin() + end * inner);
  return make_node("slice0", Tensor(std::move(out_shape), std::move(data)), {x},
                   [offset = begin * inner](Node& self) {
                     auto& g = self.parents[0]->grad_buffer();
                     for (std::size_t i = 0; i < self.grad.size(); ++i) {
                       g[offset + i] += self.grad[i];
                     }
                   });
}

Var gather(const Var& x, std::vector<std::size_t> index, Shape shape) {
  if (shape_size(shape) != index.size()) {
    shape_fail("gather", shape, "does not match index count " + std::to_string(index.size()));
  }
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x->value.size()) {
      shape_fail("gather", x->value.shape(), "indexed out of range");
    }
    out[i] = x->value[index[i]];
  }
  return make_node("gather", std::move(out), {x},
                   [index = std::move(index)](Node& self) {
                     auto& g = self.parents[0]->grad_buffer();
                     for (std::size_t i = 0; i < index.size(); ++i) {
                       g[index[i]] += self.grad[i];
                     }
                   });
}

namespace {

// Flat source index for every output entry of a k-quarter-turn rotation.
std::vector<std::size_t> rotation_index(const Shape& s, int k, Shape& out_shape) {
  if (s.size() < 2) shape_fail("rotate90", s, "must have rank >= 2");
  const int turns = ((k % 4) + 4) % 4;
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  const std::size_t planes = shape_size(s) / (h * w);
  out_shape = s;
  if (turns % 2 == 1) std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  const std::size_t oh = out_shape[s.size() - 2], ow = out_shape[s.size() - 1];
  std::vector<std::size_t> index(shape_size(s));
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t si = i, sj = j;
        switch (turns) {
          case 1: si = j; sj = w - 1 - i; break;
          case 2: si = h - 1 - i; sj = w - 1 - j; break;
          case 3: si = h - 1 - j; sj = i; break;
          default: break;
        }
        index[(p * oh + i) * ow + j] = (p * h + si) * w + sj;
      }
    }
  }
  return index;
}

}  // namespace

Var rotate90(const Var& x, int k) {
  Shape out_shape;
  auto index = rotation_index(x->value.shape(), k, out_shape);
  return gather(x, std::move(index), std::move(out_shape));
}

Tensor rotate90(const Tensor& x, int k) {
  Shape out_shape;
  const auto index = rotation_index(x.shape(), k, out_shape);
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = x[index[i]];
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

GradcheckResult gradcheck(
    const std::function<Var(const std::vector<Var>&)>& fn,
    const std::vector<Tensor>& inputs, const GradcheckOptions& options) {
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(variable(t));
  Var out = fn(vars);
  Tensor projection(out->value.shape());
  for (auto& v : projection.storage()) v = out->value.size() == 1 ? 1.0 : unit(rng);
  auto reduce = [&](const Var& o) {
    return o->value.size() == 1 ? o : sum(mul(o, constant(projection)));
  };
  Var root = reduce(out);
  backward(root);

  auto evaluate = [&](const std::vector<Tensor>& values) {
    std::vector<Var> cs;
    for (const auto& t : values) cs.push_back(constant(t));
    Var o = fn(cs);
    double s = 0.0;
    for (std::size_t i = 0; i < o->value.size(); ++i) {
      s += o->value[i] * (o->value.size() == 1 ? 1.0 : projection[i]);
    }
    return s;
  };

  GradcheckResult result;
  std::vector<Tensor> probe = inputs;
  for (std::size_t in = 0; in < inputs.size(); ++in) {
    const Tensor analytic = grad_of(vars[in]);
    std::vector<std::size_t> entries(inputs[in].size());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (options.max_entries && entries.size() > options.max_entries) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries);
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t e : entries) {
      const double orig = probe[in][e];
      probe[in][e] = orig + options.step;
      const double plus = evaluate(probe);
      probe[in][e] = orig - options.step;
      const double minus = evaluate(probe);
      probe[in][e] = orig;
      const double numeric = (plus - minus) / (2.0 * options.step);
      diff2 += (analytic[e] - numeric) * (analytic[e] - numeric);
      a2 += analytic[e] * analytic[e];
      n2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    const double err = denom < 1e-10 ? std::sqrt(diff2) : std::sqrt(diff2) / denom;
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_input = in;
    }
  }
  result.passed = result.max_relative_error < options.tolerance;
  return result;
}

}  // namespace sosn::ad
