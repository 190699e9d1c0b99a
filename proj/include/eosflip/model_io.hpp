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

#ifndef EOSFLIP_MODEL_IO_HPP_
#define EOSFLIP_MODEL_IO_HPP_

// Model files, prompt corpora and JSON conversions.
//
// Model file layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "EOSFLIP1"
//   offset 8   u64       manifest length M
//   offset 16  M bytes   manifest, UTF-8 JSON
//   16 + M     ...       payload
//
// The manifest holds the config, the output-embedding format tag and scale,
// one {name, dtype, shape, offset, nbytes} entry per tensor (offsets are
// relative to the payload start), the payload size and its CRC-32. Trunk
// tensors are f32; "output_embedding" is raw 1-byte int8 or 2-byte fp16 words.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "eosflip/tiny_lm.hpp"

namespace eosflip {

std::vector<std::uint8_t> SerializeModel(const TinyLmModel& model);
TinyLmModel DeserializeModel(std::span<const std::uint8_t> bytes);

void SaveModel(const TinyLmModel& model, const std::filesystem::path& path);
TinyLmModel LoadModel(const std::filesystem::path& path);

nlohmann::ordered_json ConfigToJson(const TinyLmConfig& config);
// Rejects unknown keys; missing keys keep their defaults.
TinyLmConfig ConfigFromJson(const nlohmann::json& j);

struct PromptEntry {
  std::string id;
  std::vector<Token> tokens;

  friend bool operator==(const PromptEntry&, const PromptEntry&) = default;
};

struct PromptCorpus {
  std::vector<PromptEntry> entries;
};

// JSONL, one {"id": string, "tokens": [int, ...]} object per line. Blank
// lines are skipped. Tokens must be < vocab_size when vocab_size > 0.
PromptCorpus ParsePrompts(const std::string& text, std::size_t vocab_size = 0);
PromptCorpus LoadPrompts(const std::filesystem::path& path,
                         std::size_t vocab_size = 0);
std::string FormatPrompts(const PromptCorpus& corpus);
void SavePrompts(const PromptCorpus& corpus, const std::filesystem::path& path);

// First n_search entries become search prompts, the rest evaluation prompts.
std::pair<PromptCorpus, PromptCorpus> SplitCorpus(const PromptCorpus& corpus,
                                                  std::size_t n_search);

// Seeded random prompts of non-EOS tokens with lengths in [min_len, max_len].
PromptCorpus SynthesizePrompts(std::size_t count, std::uint64_t seed,
                               const TinyLmConfig& config, std::size_t min_len,
                               std::size_t max_len,
                               const std::string& id_prefix = "p");

// Whole-file helpers shared by the CLI and tests.
std::vector<std::uint8_t> ReadFileBytes(const std::filesystem::path& path);
void WriteFileBytes(const std::filesystem::path& path,
                    std::span<const std::uint8_t> bytes);
void WriteTextFile(const std::filesystem::path& path, const std::string& text);

}  // namespace eosflip

#endif  // EOSFLIP_MODEL_IO_HPP_
