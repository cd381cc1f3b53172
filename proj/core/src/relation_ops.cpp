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

#include "sosn/relation_ops.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <string>

namespace sosn {
namespace {

void check_inputs(const char* op, const std::vector<FeatureMap>& supports,
                  const FeatureMap& query) {
  if (supports.empty()) throw ShapeError(std::string(op) + ": empty support list");
  for (const auto& s : supports) {
    if (s.k() != query.k() || s.n() != query.n()) {
      throw ShapeError(std::string(op) + ": support map " + to_string(s.value().shape()) +
                       " does not match query map " + to_string(query.value().shape()));
    }
  }
}

ad::Var concat_columns(const std::vector<FeatureMap>& maps) {
  ad::Var out = maps.front().var();
  for (std::size_t i = 1; i < maps.size(); ++i) {
    out = ad::concat_mode(out, maps[i].var(), 2);
  }
  return out;
}

RelationDescriptor two_slices(const ad::Var& support_m, const ad::Var& query_m,
                              const pn::PowerNormSpec& pn) {
  const ad::Var both = ad::stack({support_m, query_m});
  return {pn::apply_pn(both, pn)};
}

}  // namespace

std::string_view to_string(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::kFull: return "full";
    case OperatorKind::kRank: return "rank";
    case OperatorKind::kAvg: return "avg";
  }
  return "?";
}

OperatorKind parse_operator(std::string_view name) {
  for (OperatorKind k : {OperatorKind::kFull, OperatorKind::kRank, OperatorKind::kAvg}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown relation operator '" + std::string(name) + "'");
}

ad::Var RelationDescriptor::slice(std::size_t q) const {
  return ad::reshape(ad::slice0(data, q, q + 1), {dim(), dim()});
}

ad::Var RelationDescriptor::vectorized() const { return ad::vectorize(data); }

PermutationSet::PermutationSet(std::vector<std::vector<std::size_t>> perms)
    : perms_(std::move(perms)) {
  if (perms_.empty()) throw ConfigError("PermutationSet: needs at least one permutation");
  const std::size_t dim = perms_.front().size();
  std::vector<std::size_t> ident(dim);
  std::iota(ident.begin(), ident.end(), 0);
  if (perms_.front() != ident) {
    throw ConfigError("PermutationSet: first permutation must be the identity");
  }
  std::set<std::vector<std::size_t>> seen;
  for (const auto& p : perms_) {
    if (p.size() != dim) throw ConfigError("PermutationSet: permutations differ in length");
    std::vector<std::size_t> sorted = p;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != ident) throw ConfigError("PermutationSet: entry is not a bijection");
    if (!seen.insert(p).second) throw ConfigError("PermutationSet: duplicate permutation");
  }
}

PermutationSet PermutationSet::identity(std::size_t dim) {
  std::vector<std::size_t> ident(dim);
  std::iota(ident.begin(), ident.end(), 0);
  return PermutationSet({ident});
}

PermutationSet PermutationSet::random(std::size_t dim, std::size_t count,
                                      std::mt19937_64& rng) {
  if (count == 0) throw ConfigError("PermutationSet: count must be positive");
  double available = 1.0;
  for (std::size_t i = 2; i <= dim && available < 1e9; ++i) available *= static_cast<double>(i);
  if (static_cast<double>(count) > available) {
    throw ConfigError("PermutationSet: " + std::to_string(count) +
                      " distinct permutations of " + std::to_string(dim) +
                      " elements do not exist");
  }
  std::vector<std::vector<std::size_t>> perms;
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::size_t> p(dim);
  std::iota(p.begin(), p.end(), 0);
  perms.push_back(p);
  seen.insert(p);
  while (perms.size() < count) {
    std::shuffle(p.begin(), p.end(), rng);
    if (seen.insert(p).second) perms.push_back(p);
  }
  return PermutationSet(std::move(perms));
}

PermutationSet PermutationSet::inverse() const {
  std::vector<std::vector<std::size_t>> inv;
  for (const auto& p : perms_) {
    std::vector<std::size_t> q(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) q[p[i]] = i;
    inv.push_back(std::move(q));
  }
  return PermutationSet(std::move(inv));
}

RelationDescriptor op_full(const std::vector<FeatureMap>& supports, const FeatureMap& query,
                           const pn::PowerNormSpec& pn) {
  check_inputs("op_full", supports, query);
  std::vector<FeatureMap> pairs;
  for (const auto& s : supports) {
    pairs.emplace_back(ad::concat_mode(s.var(), query.var(), 1));
  }
  const ad::Var joint = concat_columns(pairs);  // 2K x (W N)
  const ad::Var m = autocorrelate_batch(joint);
  const std::size_t d = m->value.dim(0);
  return {pn::apply_pn(ad::reshape(m, {1, d, d}), pn)};
}

ad::Var support_matrix(OperatorKind kind, const std::vector<FeatureMap>& supports) {
  if (supports.empty()) throw ShapeError("support_matrix: empty support list");
  switch (kind) {
    case OperatorKind::kRank:
      return autocorrelate_batch(concat_columns(supports));
    case OperatorKind::kAvg: {
      ad::Var total = supports.front().var();
      for (std::size_t i = 1; i < supports.size(); ++i) {
        total = ad::add(total, supports[i].var());
      }
      if (supports.size() > 1) {
        total = ad::scale(total, 1.0 / static_cast<double>(supports.size()));
      }
      return autocorrelate_batch(total);
    }
    case OperatorKind::kFull:
      break;
  }
  throw ConfigError("support_matrix: the full operator has no separate support term");
}

RelationDescriptor op_rank(const std::vector<FeatureMap>& supports, const FeatureMap& query,
                           const pn::PowerNormSpec& pn) {
  check_inputs("op_rank", supports, query);
  return two_slices(support_matrix(OperatorKind::kRank, supports),
                    autocorrelate_batch(query.var()), pn);
}

RelationDescriptor op_avg(const std::vector<FeatureMap>& supports, const FeatureMap& query,
                          const pn::PowerNormSpec& pn) {
  check_inputs("op_avg", supports, query);
  return two_slices(support_matrix(OperatorKind::kAvg, supports),
                    autocorrelate_batch(query.var()), pn);
}

RelationDescriptor describe(OperatorKind kind, const std::vector<FeatureMap>& supports,
                            const FeatureMap& query, const pn::PowerNormSpec& pn) {
  switch (kind) {
    case OperatorKind::kFull: return op_full(supports, query, pn);
    case OperatorKind::kRank: return op_rank(supports, query, pn);
    case OperatorKind::kAvg: return op_avg(supports, query, pn);
  }
  throw ConfigError("describe: unknown operator");
}

ad::Var permute_stack_batch(const ad::Var& descriptors, const PermutationSet& perms) {
  const Tensor& v = descriptors->value;
  if (v.rank() != 4 || v.dim(2) != v.dim(3)) {
    throw ShapeError("permute_stack: expected [B, Q, dim, dim], got " + to_string(v.shape()));
  }
  const std::size_t batch = v.dim(0), q = v.dim(1), dim = v.dim(2);
  if (perms.dim() != dim) {
    throw ShapeError("permute_stack: permutation length " + std::to_string(perms.dim()) +
                     " does not match descriptor side " + std::to_string(dim));
  }
  const std::size_t p_count = perms.count();
  std::vector<std::size_t> index;
  index.reserve(batch * p_count * q * dim * dim);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < p_count; ++p) {
      const auto& pi = perms.perms()[p];
      for (std::size_t s = 0; s < q; ++s) {
        const std::size_t base = (b * q + s) * dim * dim;
        for (std::size_t i = 0; i < dim; ++i) {
          for (std::size_t j = 0; j < dim; ++j) {
            index.push_back(base + pi[i] * dim + pi[j]);
          }
        }
      }
    }
  }
  return ad::gather(descriptors, std::move(index), {batch, p_count * q, dim, dim});
}

RelationDescriptor permute_stack(const RelationDescriptor& d, const PermutationSet& perms) {
  const std::size_t q = d.q_slices(), dim = d.dim();
  const ad::Var batched = ad::reshape(d.data, {1, q, dim, dim});
  const ad::Var out = permute_stack_batch(batched, perms);
  return {ad::reshape(out, {q * perms.count(), dim, dim})};
}

std::size_t descriptor_dim(OperatorKind kind, std::size_t k) {
  return kind == OperatorKind::kFull ? 2 * k : k;
}

std::size_t descriptor_slices(OperatorKind kind) {
  return kind == OperatorKind::kFull ? 1 : 2;
}

}  // namespace sosn
