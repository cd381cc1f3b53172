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

// Episode sampling, rotation augmentation, episodic training and
// confidence-interval evaluation.
//
// Every episode draws from its own generator seeded by (seed, episode index),
// so a resumed run and any number of evaluation workers see the same
// episodes as a single uninterrupted pass.

#ifndef SOSN_EPISODES_HPP_
#define SOSN_EPISODES_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "sosn/datasets.hpp"
#include "sosn/episode.hpp"
#include "sosn/model.hpp"
#include "sosn/params.hpp"

namespace sosn {

enum class Augmentation { kNone, kClassExpansion, kRandom };

std::string_view to_string(Augmentation a);
/// Accepts "none", "class_expansion", "random".
Augmentation parse_augmentation(std::string_view name);

struct ProtocolSpec {
  std::string name = "custom";
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t train_queries = 19;  // per class
  std::size_t test_queries = 1;    // per class
  std::size_t train_episodes = 2000;
  std::size_t eval_episodes = 600;
  Augmentation augmentation = Augmentation::kNone;

  void validate() const;
};

inline constexpr std::size_t kMinEvalEpisodes = 30;

std::vector<std::string> builtin_protocol_names();
/// Built-in protocols, e.g. "omniglot-5w1s" or "miniimagenet-5w5s".
ProtocolSpec builtin_protocol(std::string_view name);
/// Applies a --protocol flag: a built-in name, or "<L>w<Z>s" which replaces
/// only ways and shots.
void apply_protocol_flag(ProtocolSpec& spec, std::string_view flag);

/// Seed of episode `index` in a stream keyed by `seed`.
std::uint64_t episode_seed(std::uint64_t seed, std::uint64_t index);

/// Uniform classes without replacement, then uniform disjoint supports and
/// queries within each class. With `random_rotation` every sampled image gets
/// its own uniformly chosen quarter-turn rotation.
Episode sample_episode(const ImageDataset& data, std::size_t ways, std::size_t shots,
                       std::size_t queries_per_class, std::mt19937_64& rng,
                       bool random_rotation = false);

/// Class expansion: each class and each of its 90/180/270 degree rotations
/// becomes a separate class, ordered (class, rotation).
ImageDataset augment_rotations(const ImageDataset& data);

struct EvalOptions {
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries = 1;  // per class
  std::size_t episodes = 600;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
};

struct EvalResult {
  double mean = 0.0;
  double ci95 = 0.0;  // 1.96 * std / sqrt(E)
  std::size_t episodes = 0;
  std::vector<double> accuracies;  // per episode, in episode order
};

EvalResult summarize(std::vector<double> accuracies);

/// Returns [nq, L] scores for an episode; must be safe to call concurrently.
using EpisodeScorer = std::function<Tensor(const Episode&)>;

EvalResult evaluate(const EpisodeScorer& scorer, const ImageDataset& data,
                    const EvalOptions& options);
EvalResult evaluate(const SosnModel& model, const ImageDataset& data,
                    const EvalOptions& options);

struct TrainState {
  std::size_t episode = 0;  // episodes completed
  double moving_accuracy = 0.0;
  double interval_loss = 0.0;  // loss summed since the last log record
  std::size_t interval_count = 0;
};

inline constexpr double kMovingAccuracyDecay = 0.95;

struct MetricRecord {
  std::size_t episode = 0;
  double loss = 0.0;  // mean over the logging interval
  double moving_acc = 0.0;
};

struct TrainOptions {
  AdamConfig adam;
  std::size_t episodes = 2000;  // total, including any already completed
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries = 19;
  bool random_rotation = false;
  std::uint64_t seed = 1;
  std::size_t log_interval = 50;
  std::size_t checkpoint_interval = 500;
  std::string output_dir;   // empty: nothing is written
  std::string config_json;  // stored in checkpoint headers
};

struct TrainResult {
  TrainState state;
  std::vector<MetricRecord> log;
};

inline constexpr const char* kCheckpointFile = "checkpoint.sosn";
inline constexpr const char* kMetricsFile = "metrics.jsonl";

/// Runs episodes state.episode .. options.episodes - 1. Writes metrics and
/// checkpoints under output_dir. A non-finite loss or gradient throws
/// NumericError and leaves the last checkpoint untouched.
TrainResult train(SosnModel& model, const ImageDataset& data, const TrainOptions& options,
                  TrainState start = {});

struct Checkpoint {
  ModelConfig config;
  PermutationSet perms = PermutationSet::identity(1);
  ParamStore params;
  TrainState state;
  std::string config_json;
};

void save_checkpoint(const std::string& path, const SosnModel& model, const TrainState& state,
                     const std::string& config_json);
Checkpoint load_checkpoint(const std::string& path);
/// Throws ConfigError when `expected` differs in architecture.
SosnModel restore_model(const Checkpoint& checkpoint, const ModelConfig& expected);

std::string metric_to_json(const MetricRecord& record);
std::string eval_to_json(const std::string& protocol, const EvalResult& result);

}  // namespace sosn

#endif  // SOSN_EPISODES_HPP_
