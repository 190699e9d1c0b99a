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

#ifndef EOSFLIP_ERROR_HPP_
#define EOSFLIP_ERROR_HPP_

#include <stdexcept>
#include <string>
#include <string_view>

namespace eosflip {

enum class ErrorCode {
  kInvalidConfig = 1,
  kAllZeroTensor,
  kNonFiniteInput,
  kBitIndexOutOfRange,
  kNoFiniteCandidate,
  kTokenOutOfRange,
  kNonFiniteActivation,
  kChecksumMismatch,
  kShapeMismatch,
  kUnknownFormatTag,
  kCalibrationFailed,
  kMalformedLine,
  kDuplicateId,
  kEmptyCorpus,
  kZeroGradient,
  kZeroVector,
  kIo,
};

std::string_view ErrorCodeName(ErrorCode code);

// All library failures are reported through this exception. The code is
// stable and doubles as the CLI exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(ErrorCodeName(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace eosflip

#endif  // EOSFLIP_ERROR_HPP_
