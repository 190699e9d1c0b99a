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

#include "eosflip/error.hpp"

namespace eosflip {

std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kAllZeroTensor: return "AllZeroTensor";
    case ErrorCode::kNonFiniteInput: return "NonFiniteInput";
    case ErrorCode::kBitIndexOutOfRange: return "BitIndexOutOfRange";
    case ErrorCode::kNoFiniteCandidate: return "NoFiniteCandidate";
    case ErrorCode::kTokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::kNonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::kChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kUnknownFormatTag: return "UnknownFormatTag";
    case ErrorCode::kCalibrationFailed: return "CalibrationFailed";
    case ErrorCode::kMalformedLine: return "MalformedLine";
    case ErrorCode::kDuplicateId: return "DuplicateId";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kZeroGradient: return "ZeroGradient";
    case ErrorCode::kZeroVector: return "ZeroVector";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

}  // namespace eosflip
