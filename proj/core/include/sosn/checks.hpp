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

// Oracle suites run by `sosn check`.
//
//   appendix   closed-form co-occurrence difference vs. enumeration
//   prop1      polynomial-kernel linearization, r = 1, 2, 3
//   gradcheck  central differences for primitives, PN members, operators,
//              permutation stacking and the encoder-to-score chain
//   fit        SigmE fit to MaxExpPM and smoothness of the derivative curves

#ifndef SOSN_CHECKS_HPP_
#define SOSN_CHECKS_HPP_

#include <string>
#include <string_view>
#include <vector>

namespace sosn::checks {

struct CheckRow {
  std::string name;
  double measured = 0.0;
  double threshold = 0.0;  // passes when measured <= threshold
  bool passed = false;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckRow> rows;
  double seconds = 0.0;

  bool passed() const;
  /// nullptr when every row passed.
  const CheckRow* first_failure() const;
};

std::vector<std::string> suite_names();
/// Throws ConfigError for an unknown suite.
SuiteReport run_suite(std::string_view name);

}  // namespace sosn::checks

#endif  // SOSN_CHECKS_HPP_
