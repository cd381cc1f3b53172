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

#ifndef SOSN_PARAMS_HPP_
#define SOSN_PARAMS_HPP_

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "sosn/autodiff.hpp"
#include "sosn/tensor.hpp"

namespace sosn {

struct AdamState {
  Tensor first_moment;
  Tensor second_moment;
  std::int64_t step = 0;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

using GradMap = std::map<std::string, Tensor>;

/// Named parameters with their Adam moments, plus non-trainable buffers
/// (batchnorm running statistics). Ordered by name.
class ParamStore {
 public:
  void add_parameter(const std::string& name, Tensor value);
  void add_buffer(const std::string& name, Tensor value);

  bool contains(const std::string& name) const;
  bool is_trainable(const std::string& name) const;
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  const AdamState& adam(const std::string& name) const;
  AdamState& adam(const std::string& name);

  std::vector<std::string> parameter_names() const;
  std::vector<std::string> buffer_names() const;
  std::size_t parameter_count() const;

 private:
  struct Entry {
    Tensor value;
    bool trainable = true;
    AdamState adam;
  };
  const Entry& entry(const std::string& name) const;
  Entry& entry(const std::string& name);
  std::map<std::string, Entry> entries_;
};

/// Graph leaves for one forward pass. Each trainable parameter is bound once
/// and its gradient read back after backward().
class Binding {
 public:
  /// With track_gradients false every parameter binds as a constant, so the
  /// graph carries no backward closures (inference).
  explicit Binding(const ParamStore& store, bool track_gradients = true)
      : store_(&store), track_(track_gradients) {}
  ad::Var operator()(const std::string& name);
  /// Binds `name` to an existing node instead of the stored value.
  void set(const std::string& name, ad::Var v);
  GradMap gradients() const;

 private:
  const ParamStore* store_;
  bool track_;
  std::map<std::string, ad::Var> vars_;
};

/// One Adam update over every trainable parameter. Throws if a gradient is
/// missing or mis-shaped.
void adam_step(ParamStore& params, const GradMap& grads, const AdamConfig& config);

/// Binary container of named tensors with a JSON header.
///
///   magic     8 bytes  "SOSNCKPT"
///   version   u32 LE   (currently 1)
///   header    u64 LE length, then UTF-8 JSON text
///   count     u64 LE number of tensors
///   per tensor:
///     name    u64 LE length, then UTF-8 bytes
///     rank    u32 LE
///     dims    rank x u64 LE
///     data    product(dims) x f64 LE
struct TensorArchive {
  std::string header_json;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

void write_archive(std::ostream& os, const TensorArchive& archive);
TensorArchive read_archive(std::istream& is);
void save_archive(const std::string& path, const TensorArchive& archive);
TensorArchive load_archive(const std::string& path);

/// Appends every parameter, its Adam moments and every buffer to the archive
/// under the prefixes "param/", "adam_m/", "adam_v/" and "buffer/". Adam step
/// counts go to "adam_step/" as single-element tensors.
void store_to_archive(const ParamStore& store, TensorArchive& archive);
/// Overwrites values in `store` from the archive. Every entry of the store
/// must be present with a matching shape.
void store_from_archive(ParamStore& store, const TensorArchive& archive);

}  // namespace sosn

#endif  // SOSN_PARAMS_HPP_
