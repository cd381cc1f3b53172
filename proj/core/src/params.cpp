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

#include "sosn/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace sosn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void ParamStore::add_parameter(const std::string& name, Tensor value) {
  Entry e;
  e.adam.first_moment = Tensor(value.shape(), 0.0);
  e.adam.second_moment = Tensor(value.shape(), 0.0);
  e.value = std::move(value);
  e.trainable = true;
  entries_[name] = std::move(e);
}

void ParamStore::add_buffer(const std::string& name, Tensor value) {
  Entry e;
  e.value = std::move(value);
  e.trainable = false;
  entries_[name] = std::move(e);
}

bool ParamStore::contains(const std::string& name) const {
  return entries_.count(name) != 0;
}

bool ParamStore::is_trainable(const std::string& name) const {
  return entry(name).trainable;
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::value(const std::string& name) { return entry(name).value; }
const Tensor& ParamStore::value(const std::string& name) const {
  return entry(name).value;
}
const AdamState& ParamStore::adam(const std::string& name) const {
  return entry(name).adam;
}
AdamState& ParamStore::adam(const std::string& name) { return entry(name).adam; }

std::vector<std::string> ParamStore::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, e] : entries_)
    if (e.trainable) names.push_back(name);
  return names;
}

std::vector<std::string> ParamStore::buffer_names() const {
  std::vector<std::string> names;
  for (const auto& [name, e] : entries_)
    if (!e.trainable) names.push_back(name);
  return names;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_)
    if (e.trainable) n += e.value.size();
  return n;
}

ad::Var Binding::operator()(const std::string& name) {
  auto it = vars_.find(name);
  if (it != vars_.end()) return it->second;
  ad::Var v = track_ && store_->is_trainable(name) ? ad::variable(store_->value(name))
                                         : ad::constant(store_->value(name));
  vars_.emplace(name, v);
  return v;
}

void Binding::set(const std::string& name, ad::Var v) {
  const Tensor& stored = store_->value(name);
  if (stored.shape() != v->value.shape()) {
    throw ShapeError("Binding: '" + name + "' expects " + to_string(stored.shape()) +
                     ", got " + to_string(v->value.shape()));
  }
  vars_[name] = std::move(v);
}

GradMap Binding::gradients() const {
  GradMap grads;
  for (const auto& [name, v] : vars_) {
    if (v->requires_grad) grads.emplace(name, ad::grad_of(v));
  }
  return grads;
}

void adam_step(ParamStore& params, const GradMap& grads, const AdamConfig& config) {
  for (const auto& name : params.parameter_names()) {
    auto it = grads.find(name);
    if (it == grads.end()) {
      throw ConfigError("adam_step: missing gradient for parameter '" + name + "'");
    }
    Tensor& value = params.value(name);
    const Tensor& g = it->second;
    if (!same_shape(value, g)) {
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " +
                       to_string(g.shape()) + ", parameter has " +
                       to_string(value.shape()));
    }
    AdamState& s = params.adam(name);
    ++s.step;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < value.size(); ++i) {
      s.first_moment[i] = config.beta1 * s.first_moment[i] + (1.0 - config.beta1) * g[i];
      s.second_moment[i] =
          config.beta2 * s.second_moment[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = s.first_moment[i] / c1;
      const double v_hat = s.second_moment[i] / c2;
      value[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

namespace {

constexpr char kMagic[8] = {'S', 'O', 'S', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (std::uint64_t{1} << 32)) throw DataError("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw DataError("checkpoint: truncated file");
  return s;
}

}  // namespace

void write_archive(std::ostream& os, const TensorArchive& archive) {
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kArchiveVersion);
  put_string(os, archive.header_json);
  put<std::uint64_t>(os, archive.tensors.size());
  for (const auto& [name, t] : archive.tensors) {
    put_string(os, name);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write failed");
}

TensorArchive read_archive(std::istream& is) {
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kArchiveVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  TensorArchive archive;
  archive.header_json = get_string(is);
  const auto count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = get_string(is);
    const auto rank = get<std::uint32_t>(is);
    if (rank > 16) throw DataError("checkpoint: corrupt rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated data for '" + name + "'");
    archive.tensors.emplace_back(std::move(name), std::move(t));
  }
  return archive;
}

void save_archive(const std::string& path, const TensorArchive& archive) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("checkpoint: cannot open '" + tmp + "' for writing");
    write_archive(os, archive);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw DataError("checkpoint: cannot move '" + tmp + "' to '" + path + "'");
  }
}

TensorArchive load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
  return read_archive(is);
}

void store_to_archive(const ParamStore& store, TensorArchive& archive) {
  for (const auto& name : store.parameter_names()) {
    const AdamState& s = store.adam(name);
    archive.tensors.emplace_back("param/" + name, store.value(name));
    archive.tensors.emplace_back("adam_m/" + name, s.first_moment);
    archive.tensors.emplace_back("adam_v/" + name, s.second_moment);
    archive.tensors.emplace_back("adam_step/" + name,
                                 Tensor::scalar(static_cast<double>(s.step)));
  }
  for (const auto& name : store.buffer_names()) {
    archive.tensors.emplace_back("buffer/" + name, store.value(name));
  }
}

void store_from_archive(ParamStore& store, const TensorArchive& archive) {
  std::map<std::string, const Tensor*> index;
  for (const auto& [name, t] : archive.tensors) index[name] = &t;
  auto fetch = [&](const std::string& key, const Shape& shape) -> const Tensor& {
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError("checkpoint: missing tensor '" + key + "'");
    if (it->second->shape() != shape) {
      throw ConfigError("checkpoint: tensor '" + key + "' has shape " +
                        to_string(it->second->shape()) + ", expected " +
                        to_string(shape));
    }
    return *it->second;
  };
  for (const auto& name : store.parameter_names()) {
    const Shape& shape = store.value(name).shape();
    store.value(name) = fetch("param/" + name, shape);
    AdamState& s = store.adam(name);
    s.first_moment = fetch("adam_m/" + name, shape);
    s.second_moment = fetch("adam_v/" + name, shape);
    s.step = static_cast<std::int64_t>(fetch("adam_step/" + name, {1}).item());
  }
  for (const auto& name : store.buffer_names()) {
    store.value(name) = fetch("buffer/" + name, store.value(name).shape());
  }
}

}  // namespace sosn
