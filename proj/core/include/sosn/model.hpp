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

// Second-order similarity network.
//
// encoder     4 x (conv 3x3, batchnorm, ReLU), 2x2 max-pool after blocks 1, 2
// pooling     mean shift, autocorrelation, power normalization
// similarity  2 x (conv 3x3, batchnorm, ReLU, max-pool), FC -> hidden (ReLU),
//             FC -> 1, sigmoid; one network per permutation when multi-stream

#ifndef SOSN_MODEL_HPP_
#define SOSN_MODEL_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sosn/autodiff.hpp"
#include "sosn/episode.hpp"
#include "sosn/params.hpp"
#include "sosn/power_norm.hpp"
#include "sosn/relation_ops.hpp"

namespace sosn {

struct PermutationConfig {
  std::size_t count = 3;
  bool multi_stream = false;
};

struct ModelConfig {
  std::size_t image_size = 28;
  std::size_t channels_in = 1;
  std::size_t encoder_filters = 64;  // K
  std::size_t encoder_padding = 1;
  std::size_t similarity_filters = 64;
  std::size_t similarity_hidden = 8;
  OperatorKind op = OperatorKind::kAvg;
  pn::PowerNormSpec pn = pn::default_spec(pn::PnKind::kSigmE, 49);
  PermutationConfig perm;
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries_per_class = 1;

  /// Throws ConfigError on invalid fields or on sizes that leave no spatial
  /// extent after the encoder or similarity network.
  void validate() const;

  std::size_t feature_side() const;
  std::size_t spatial_count() const { return feature_side() * feature_side(); }  // N
  std::size_t descriptor_side() const { return descriptor_dim(op, encoder_filters); }
  std::size_t descriptor_slices() const { return sosn::descriptor_slices(op); }
  /// True when both configs yield the same parameter set, permutations and
  /// forward function. Episode shape (ways, shots, queries) is ignored.
  bool same_architecture(const ModelConfig& other) const;
};

enum class Phase { kTrain, kEval };

class SosnModel {
 public:
  /// Fresh model: permutations and weights are drawn from `seed`.
  SosnModel(const ModelConfig& config, std::uint64_t seed);
  /// Restores a model; throws ConfigError if the parameters or permutations
  /// do not fit the config.
  SosnModel(const ModelConfig& config, PermutationSet perms, ParamStore params);

  const ModelConfig& config() const { return config_; }
  const PermutationSet& permutations() const { return perms_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// [B, C, S, S] -> [B, K, N]. kTrain uses batch statistics and updates the
  /// running buffers.
  ad::Var encode_batch(Binding& binding, const ad::Var& images, Phase phase);
  /// Single image [C, S, S] in evaluation mode.
  FeatureMap encode(Binding& binding, const Tensor& image) const;

  /// Descriptors [B, Q, d, d] -> scores [B]. With `permute` false the
  /// permutation stack is skipped and a single-stream network sees Q slices.
  ad::Var similarity_batch(Binding& binding, const ad::Var& descriptors, Phase phase,
                           bool permute = true);
  /// One descriptor in evaluation mode; returns a [1] score.
  ad::Var similarity(Binding& binding, const RelationDescriptor& d) const;
  /// Evaluation-mode score of every stream for one descriptor, [streams].
  Tensor stream_scores(const RelationDescriptor& d) const;

  /// Scores [nq, L]; entry (q, c) relates query q to class c.
  ad::Var score_episode(Binding& binding, const Episode& episode, Phase phase);
  /// Evaluation-mode scores from frozen parameters; safe to call concurrently.
  Tensor predict(const Episode& episode) const;
  /// Per-pair reference path through describe(), permute_stack() and
  /// similarity(); used to cross-check the batched path.
  Tensor predict_reference(const Episode& episode) const;

 private:
  struct Pass;

  ModelConfig config_;
  PermutationSet perms_;
  ParamStore params_;
};

/// Sum over queries and classes of (score - [label == c])^2.
ad::Var episode_loss(const ad::Var& scores, std::span<const std::size_t> query_labels);
/// Training-mode forward of one episode followed by the loss.
ad::Var episode_loss(SosnModel& model, Binding& binding, const Episode& episode);

/// Argmax of the scores; ties go to the lowest index.
std::size_t classify(std::span<const double> scores);
/// Fraction of queries whose argmax row matches the label.
double episode_accuracy(const Tensor& scores, std::span<const std::size_t> query_labels);

}  // namespace sosn

#endif  // SOSN_MODEL_HPP_
