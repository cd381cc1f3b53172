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

// One L-way Z-shot task. Images are [C, S, S] tensors.

#ifndef SOSN_EPISODE_HPP_
#define SOSN_EPISODE_HPP_

#include <cstddef>
#include <vector>

#include "sosn/tensor.hpp"

namespace sosn {

struct Episode {
  std::vector<std::size_t> class_ids;         // dataset class indices, one per way
  std::vector<std::vector<Tensor>> supports;  // [L][Z]
  std::vector<Tensor> queries;
  std::vector<std::size_t> query_labels;  // position in class_ids

  std::size_t ways() const { return supports.size(); }
  std::size_t shots() const { return supports.empty() ? 0 : supports.front().size(); }

  /// Throws DataError on an empty query set, uneven shots, a label outside
  /// [0, L) or images of differing shapes.
  void validate() const;
};

}  // namespace sosn

#endif  // SOSN_EPISODE_HPP_
