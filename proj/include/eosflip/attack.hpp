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

#ifndef EOSFLIP_ATTACK_HPP_
#define EOSFLIP_ATTACK_HPP_

// Gradient-guided bit-flip search on the EOS row of the output embedding.
//
// Each search epoch decodes every search prompt, sums the EOS probability
// over an aggregation window into the loss, and accumulates the exact
// gradient of that loss with respect to W_o[eos] with the decoded tokens held
// fixed:  g = sum_i p_i (1 - p_i) h_i.  The gradient is rescaled into
// [grad_low, grad_up], the largest-magnitude coordinates are picked, and each
// picked weight gets the single bit flip that lands closest to w - g'.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "eosflip/model_io.hpp"
#include "eosflip/numeric_codec.hpp"
#include "eosflip/tiny_lm.hpp"

namespace eosflip {

enum class SearchMode { kOneShot, kProgressive };
enum class Aggregation { kFull, kLatterHalf, kLast };

std::string_view SearchModeName(SearchMode mode);
SearchMode ParseSearchMode(std::string_view name);
std::string_view AggregationName(Aggregation aggregation);
Aggregation ParseAggregation(std::string_view name);

struct AttackConfig {
  SearchMode mode = SearchMode::kOneShot;
  std::size_t n_flips = 3;
  Aggregation aggregation = Aggregation::kFull;
  double grad_low = 1e-3;
  double grad_up = 1.0;
  // false feeds the raw gradient to target construction.
  bool scale_gradient = true;
  // 0 means the model's max_len.
  std::size_t search_max_len = 0;
  double search_temperature = 0.0;
  std::uint64_t rng_seed = 0;

  // Throws kInvalidConfig.
  void Validate(const TinyLmConfig& model_config) const;
  std::size_t EffectiveSearchMaxLen(const TinyLmConfig& model_config) const {
    return search_max_len == 0 ? model_config.max_len : search_max_len;
  }

  nlohmann::ordered_json ToJson() const;
  // Strict: unknown keys are rejected.
  static AttackConfig FromJson(const nlohmann::json& j);
};

struct FlipRecord {
  std::size_t round = 0;  // 1-based
  std::size_t dim = 0;
  int bit = 0;
  BitWord word_before;
  BitWord word_after;
  double fp_before = 0.0;
  double fp_after = 0.0;
  double target_fp = 0.0;
  // Progressive mode only: this flip undid an earlier flip of the same bit.
  bool reverts_previous = false;
};

struct SkippedDim {
  std::size_t round = 0;
  std::size_t dim = 0;
  std::string reason;
};

struct AttackReport {
  AttackConfig config;
  FormatKind format = FormatKind::kInt8;
  std::vector<std::string> search_prompt_ids;
  std::vector<FlipRecord> flips;
  // Loss of the epoch that produced each round's gradient.
  std::vector<double> round_losses;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<SkippedDim> skipped;
  std::optional<std::string> aborted;

  std::size_t total_bit_flips() const { return flips.size(); }
  nlohmann::ordered_json ToJson() const;
};

// [begin, end) step indices (0-based) that contribute to the loss. LatterHalf
// covers steps ceil(N/2)+1 .. N (1-based), widened to the last step if empty.
std::pair<std::size_t, std::size_t> AggregationWindow(std::size_t steps,
                                                      Aggregation aggregation);

double EosLoss(const GenerationTrace& trace, Aggregation aggregation);

// Adds sum_{i in window} p_i (1 - p_i) h_i to `gradient` and returns the
// window's loss contribution.
double AccumulateTraceGradient(const GenerationTrace& trace,
                               Aggregation aggregation,
                               std::span<double> gradient);

struct EpochGradient {
  std::vector<double> gradient;  // d, w.r.t. W_o[eos]
  double loss = 0.0;
  std::vector<std::size_t> lengths;
};

// One pass over all search prompts. Contributions are summed in prompt order.
EpochGradient ComputeEpochGradient(const TinyLmModel& model,
                                   const PromptCorpus& search_prompts,
                                   const AttackConfig& config);

// As above, returning only the gradient; throws kZeroGradient if it is zero.
std::vector<double> EosRowGradient(const TinyLmModel& model,
                                   const PromptCorpus& search_prompts,
                                   const AttackConfig& config);

// Rescales g so that ||g|| lies in [low, up]; direction is preserved.
std::vector<double> ScaleGradient(std::span<const double> gradient, double low,
                                  double up);

// Indices of the n largest |g_j|, descending, ties to the lowest index.
std::vector<std::size_t> SelectWeights(std::span<const double> gradient,
                                       std::size_t n);

std::vector<double> TargetRow(std::span<const double> current,
                              std::span<const double> scaled_gradient);

// The searches mutate model's W_o[eos] in place.
AttackReport RunOneShot(TinyLmModel& model, const PromptCorpus& search_prompts,
                        const AttackConfig& config);
AttackReport RunProgressive(TinyLmModel& model,
                            const PromptCorpus& search_prompts,
                            const AttackConfig& config);
AttackReport RunAttack(TinyLmModel& model, const PromptCorpus& search_prompts,
                       const AttackConfig& config);

// Replays a report's flips onto a model (e.g. a fresh copy of the victim).
void ApplyFlips(TinyLmModel& model, std::span<const FlipRecord> flips);

std::string HexWord(BitWord word, FormatKind format);

}  // namespace eosflip

#endif  // EOSFLIP_ATTACK_HPP_
