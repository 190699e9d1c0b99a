// Copyright 2026 The eosflip Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef EOSFLIP_TOOLS_CLI_HPP_
#define EOSFLIP_TOOLS_CLI_HPP_

#include <string>
#include <vector>

namespace eosflip::cli {

// Runs the command line tool and returns the process exit status: 0 on
// success, otherwise the numeric ErrorCode of the failure.
int Run(const std::vector<std::string>& args);

}  // namespace eosflip::cli

#endif  // EOSFLIP_TOOLS_CLI_HPP_
