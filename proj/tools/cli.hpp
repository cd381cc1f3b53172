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

// The `sosn` command line: train, eval, check, curves.

#ifndef SOSN_TOOLS_CLI_HPP_
#define SOSN_TOOLS_CLI_HPP_

#include <iosfwd>

namespace sosn::cli {

enum ExitCode : int {
  kOk = 0,
  kCheckFailed = 1,
  kConfigError = 2,  // also usage errors and checkpoint/config mismatch
  kDataError = 3,    // unreadable dataset, image, checkpoint or output path
  kNumericError = 4,
  kInternalError = 5,
};

/// Runs one command line. Never throws; returns the exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sosn::cli

#endif  // SOSN_TOOLS_CLI_HPP_
