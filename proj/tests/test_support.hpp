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

#ifndef EOSFLIP_TESTS_TEST_SUPPORT_HPP_
#define EOSFLIP_TESTS_TEST_SUPPORT_HPP_

#include <filesystem>
#include <string>
#include <utility>

#include <unistd.h>

#include "eosflip/fixture.hpp"
#include "eosflip/model_io.hpp"
#include "eosflip/tiny_lm.hpp"

namespace eosflip::testing {

// V=256, d=64, 2 layers, 4 heads, max_len=128, eos_id=0.
inline TinyLmConfig StandardConfig() { return TinyLmConfig{}; }

// The seed-42 calibrated fixture ([8, 32] baseline band), built once per
// process and per format.
inline const Fixture& SeedFixture(FormatKind format = FormatKind::kInt8) {
  static const Fixture int8 =
      BuildFixture(StandardConfig(), 42, 8, 32, FormatKind::kInt8);
  static const Fixture fp16 =
      BuildFixture(StandardConfig(), 42, 8, 32, FormatKind::kFp16);
  return format == FormatKind::kInt8 ? int8 : fp16;
}

// 54 prompts: the first 4 are search prompts, the other 50 are held out.
inline const PromptCorpus& StandardCorpus() {
  static const PromptCorpus corpus =
      SynthesizePrompts(54, 7, StandardConfig(), 4, 12);
  return corpus;
}

inline const PromptCorpus& SearchPrompts() {
  static const PromptCorpus search = SplitCorpus(StandardCorpus(), 4).first;
  return search;
}
inline const PromptCorpus& HeldOutPrompts() {
  static const PromptCorpus held_out = SplitCorpus(StandardCorpus(), 4).second;
  return held_out;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("eosflip_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace eosflip::testing

#endif  // EOSFLIP_TESTS_TEST_SUPPORT_HPP_
