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

// Relationship descriptors between a support set and a query.
//
//   full  one 2K x 2K slice from the joint autocorrelation of the support and
//         query maps stacked feature-wise
//   rank  slice 1 from all support columns side by side, slice 2 from the query
//   avg   slice 1 from the mean support map, slice 2 from the query
//
// Descriptors are stored slice-major as [Q, dim, dim] tensors.

#ifndef SOSN_RELATION_OPS_HPP_
#define SOSN_RELATION_OPS_HPP_

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "sosn/autodiff.hpp"
#include "sosn/power_norm.hpp"
#include "sosn/second_order.hpp"

namespace sosn {

enum class OperatorKind { kFull, kRank, kAvg };

std::string_view to_string(OperatorKind kind);
/// Accepts "full", "rank", "avg".
OperatorKind parse_operator(std::string_view name);

struct RelationDescriptor {
  ad::Var data;  // [Q, dim, dim]

  std::size_t q_slices() const { return data->value.dim(0); }
  std::size_t dim() const { return data->value.dim(1); }
  /// Slice q as a dim x dim node.
  ad::Var slice(std::size_t q) const;
  ad::Var vectorized() const;
};

/// P bijections of {0..dim-1}; the first is the identity and all are
/// pairwise distinct. Entry perms()[p][i] is the source index of row/column i.
class PermutationSet {
 public:
  explicit PermutationSet(std::vector<std::vector<std::size_t>> perms);

  static PermutationSet identity(std::size_t dim);
  /// Identity followed by count - 1 distinct random permutations.
  static PermutationSet random(std::size_t dim, std::size_t count, std::mt19937_64& rng);

  std::size_t count() const { return perms_.size(); }
  std::size_t dim() const { return perms_.front().size(); }
  const std::vector<std::vector<std::size_t>>& perms() const { return perms_; }
  PermutationSet inverse() const;

  bool operator==(const PermutationSet&) const = default;

 private:
  std::vector<std::vector<std::size_t>> perms_;
};

RelationDescriptor op_full(const std::vector<FeatureMap>& supports, const FeatureMap& query,
                           const pn::PowerNormSpec& pn);
RelationDescriptor op_rank(const std::vector<FeatureMap>& supports, const FeatureMap& query,
                           const pn::PowerNormSpec& pn);
RelationDescriptor op_avg(const std::vector<FeatureMap>& supports, const FeatureMap& query,
                          const pn::PowerNormSpec& pn);
RelationDescriptor describe(OperatorKind kind, const std::vector<FeatureMap>& supports,
                            const FeatureMap& query, const pn::PowerNormSpec& pn);

/// Raw (un-normalized) support-side matrix of the rank or avg operator.
ad::Var support_matrix(OperatorKind kind, const std::vector<FeatureMap>& supports);

/// Stacks Pi_p^T theta_q Pi_p over (p outer, q inner) into Q * P slices.
RelationDescriptor permute_stack(const RelationDescriptor& d, const PermutationSet& perms);
/// Batched form over [B, Q, dim, dim]; returns [B, P * Q, dim, dim].
ad::Var permute_stack_batch(const ad::Var& descriptors, const PermutationSet& perms);

/// Side length of the descriptor produced by an operator on K-channel maps.
std::size_t descriptor_dim(OperatorKind kind, std::size_t k);
/// Slice count Q of an operator (before permutation stacking).
std::size_t descriptor_slices(OperatorKind kind);

}  // namespace sosn

#endif  // SOSN_RELATION_OPS_HPP_
