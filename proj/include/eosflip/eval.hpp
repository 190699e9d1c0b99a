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

#ifndef EOSFLIP_EVAL_HPP_
#define EOSFLIP_EVAL_HPP_

// Attack measurement: output-length metrics, cosine traces between the EOS
// row and the hidden states, and the weight-reconstruction (clipping)
// defense.
//
// Lengths count generated tokens only; the prompt is excluded.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "eosflip/model_io.hpp"
#include "eosflip/tiny_lm.hpp"

namespace eosflip {

struct PromptOutcome {
  std::string id;
  std::size_t length = 0;
  Termination terminated_by = Termination::kEos;
  bool reached_max = false;
  std::optional<std::string> error;
};

struct EvalRun {
  std::size_t max_len = 0;
  double temperature = 0.0;
  std::vector<PromptOutcome> outcomes;
  double avg_len = 0.0;
  double max_rate = 0.0;
  // Some prompts failed and were excluded from the averages.
  bool partial = false;
};

struct EvalOptions {
  std::size_t max_len = 128;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  // Record per-prompt failures instead of throwing.
  bool allow_partial = false;
};

EvalRun Evaluate(const TinyLmModel& model, const PromptCorpus& prompts,
                 const EvalOptions& options);

// AvgLen / MaxRate over a list of outcomes (failed ones skipped).
void Aggregate(EvalRun& run);

struct Metrics {
  double avg_len_ori = 0.0;
  double avg_len_attack = 0.0;
  double max_rate_ori = 0.0;
  double max_rate = 0.0;
  std::size_t n_bit_flips = 0;
  std::size_t max_len = 0;
  double temperature = 0.0;
  std::vector<std::string> ids;
  std::vector<std::size_t> lengths_ori;
  std::vector<std::size_t> lengths_attack;
  std::vector<bool> reached_max_attack;
  bool partial = false;

  nlohmann::ordered_json ToJson() const;
  // id,len_ori,len_attack,reached_max
  std::string ToCsv() const;
};

// Both runs must cover the same prompts in the same order.
Metrics CompareRuns(const EvalRun& before, const EvalRun& after,
                    std::size_t n_bit_flips);

struct CosineTrace {
  std::vector<double> before;
  std::vector<double> after;

  // step,cos_before,cos_after; the shorter series leaves its column empty.
  std::string ToCsv() const;
};

// cos(W_o[eos], h_i) for each step of a trace.
std::vector<double> CosineSeries(const TinyLmModel& model,
                                 const GenerationTrace& trace);

// Each model decodes the prompt greedily on its own; throws kZeroVector if an
// EOS row or hidden state is exactly zero.
CosineTrace ComputeCosineTrace(const TinyLmModel& before,
                               const TinyLmModel& after,
                               std::span<const Token> prompt,
                               std::size_t max_len);

// Decoded min / max of W_o.
std::pair<double, double> ReferenceBounds(const TinyLmModel& model);

// Clamps every decoded W_o value into [reference_min, reference_max] and
// re-encodes it. Words already in range are left untouched; NaN words are
// replaced by the in-range value nearest to zero.
TinyLmModel DefendWeightReconstruction(const TinyLmModel& model,
                                       double reference_min,
                                       double reference_max);

}  // namespace eosflip

#endif  // EOSFLIP_EVAL_HPP_
