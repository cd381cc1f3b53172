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

// Run configuration as one JSON document.
//
//   {
//     "seed": 1, "output_dir": "runs/x", "workers": 1,
//     "log_interval": 50, "checkpoint_interval": 500,
//     "model":     {"image_size": 28, "channels_in": 1, "encoder_filters": 64,
//                   "encoder_padding": 1, "similarity_filters": 64,
//                   "similarity_hidden": 8, "operator": "avg",
//                   "permutations": 3, "multi_stream": false},
//     "pn":        {"kind": "SigmE", "eta": ..., ...},
//     "protocol":  {"name": "omniglot-5w1s", "ways": 5, ...},
//     "optimizer": {"learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.999,
//                   "epsilon": 1e-8},
//     "dataset":   {"kind": "synthetic", "classes": 64, ...} or
//                  {"kind": "folder", "root": "...", "split_file": "splits.txt"}
//   }
//
// Every section and key is optional. Unknown keys are rejected. Omitted PN
// fields come from default_spec(kind, N) for the configured image size. A
// protocol "name" naming a built-in protocol starts from that protocol.

#ifndef SOSN_CONFIG_HPP_
#define SOSN_CONFIG_HPP_

#include <cstddef>
#include <cstdint>
#include <string>

#include "sosn/datasets.hpp"
#include "sosn/episodes.hpp"
#include "sosn/model.hpp"
#include "sosn/params.hpp"

namespace sosn {

enum class DatasetKind { kSynthetic, kFolder };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::kSynthetic;
  // synthetic: classes [0, train_classes) train, the rest evaluate
  SyntheticSpec synthetic{.classes = 64, .images_per_class = 20};
  std::size_t train_classes = 48;
  // folder
  std::string root;  // empty: SOSN_DATA_ROOT
  std::string split_file = "splits.txt";  // relative paths resolve under root
  double crop_ratio = 1.0;
  Split eval_split = Split::kTest;
};

struct RunConfig {
  ModelConfig model;  // ways, shots and queries follow the protocol
  ProtocolSpec protocol;
  AdamConfig optimizer;
  DatasetConfig dataset;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  std::size_t log_interval = 50;
  std::size_t checkpoint_interval = 500;
  std::size_t workers = 1;

  /// Throws ConfigError on any invalid field.
  void validate() const;
};

/// Throws ConfigError on malformed JSON, unknown keys, wrong types or values
/// out of range.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
/// Fully resolved document; parse_run_config of it yields an equal config.
std::string run_config_to_json(const RunConfig& config);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& json_text);

/// Dataset root from the config, else the SOSN_DATA_ROOT environment
/// variable. Throws DataError when neither is set.
std::string resolve_data_root(const DatasetConfig& dataset);

/// Training classes, or the evaluation classes when `training` is false.
/// Folder datasets are scanned and decoded through load_manifest; the
/// manifest is returned through `manifest` when non-null.
ImageDataset load_run_dataset(const RunConfig& config, bool training,
                              DatasetManifest* manifest = nullptr);

/// Copies the protocol's ways and shots into the model config, with the
/// train or test query count.
void sync_model_episode_shape(RunConfig& config, bool training);

}  // namespace sosn

#endif  // SOSN_CONFIG_HPP_
