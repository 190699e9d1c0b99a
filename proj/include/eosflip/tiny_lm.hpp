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

#ifndef EOSFLIP_TINY_LM_HPP_
#define EOSFLIP_TINY_LM_HPP_

// A small decoder-only transformer used as the attack victim.
//
// Layer recipe (pre-norm, no weight tying):
//   x_t = token_embedding[tok] + position_embedding[t]
//   per layer:
//     x += W_attn_out * MHA(LN1(x))      causal scaled dot-product attention
//     x += W_down * gelu(W_up * LN2(x) + b_up) + b_down
//   h_t = LN_final(x_t)
//   logits = W_o * h_t                   W_o is the only bit-addressable tensor
//
// The trunk runs in float32. The output head and softmax accumulate in double
// over the dequantized W_o, so a change to one W_o row leaves every other
// logit bit-identical.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "eosflip/numeric_codec.hpp"

namespace eosflip {

using Token = std::uint32_t;

struct TinyLmConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  // Number of learned positions; prompt length + max_len - 1 must fit.
  std::size_t context_len = 192;
  Token eos_id = 0;
  std::size_t max_len = 128;
  std::uint64_t rng_seed = 42;

  // Throws kInvalidConfig.
  void Validate() const;

  friend bool operator==(const TinyLmConfig&, const TinyLmConfig&) = default;
};

struct LayerWeights {
  std::vector<float> ln1_gain, ln1_bias;        // d
  std::vector<float> wq, wk, wv, w_attn_out;    // d x d
  std::vector<float> ln2_gain, ln2_bias;        // d
  std::vector<float> w_up, b_up;                // d_ff x d, d_ff
  std::vector<float> w_down, b_down;            // d x d_ff, d

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct TrunkWeights {
  std::vector<float> token_embedding;     // V x d
  std::vector<float> position_embedding;  // context_len x d
  std::vector<LayerWeights> layers;
  std::vector<float> final_gain, final_bias;  // d

  friend bool operator==(const TrunkWeights&, const TrunkWeights&) = default;
};

class TinyLmModel {
 public:
  // Validates config, shapes and finiteness of the trunk.
  TinyLmModel(TinyLmConfig config, TrunkWeights trunk,
              QuantizedTensor output_embedding);

  const TinyLmConfig& config() const { return config_; }
  const TrunkWeights& trunk() const { return trunk_; }
  const QuantizedTensor& output_embedding() const { return output_; }

  void set_output_embedding(QuantizedTensor output_embedding);
  void set_output_word(std::size_t row, std::size_t col, BitWord word);

  // Dequantized row of W_o.
  std::span<const double> head_row(std::size_t row) const {
    return {head_.data() + row * config_.d_model, config_.d_model};
  }

  friend bool operator==(const TinyLmModel& a, const TinyLmModel& b) {
    return a.config_ == b.config_ && a.trunk_ == b.trunk_ &&
           a.output_ == b.output_;
  }

 private:
  void CheckOutputShape(const QuantizedTensor& output) const;

  TinyLmConfig config_;
  TrunkWeights trunk_;
  QuantizedTensor output_;
  std::vector<double> head_;
};

struct ForwardResult {
  std::vector<float> hidden;   // final-position decoder state, d
  std::vector<double> logits;  // V
};

// Runs the whole token list and returns the state at the last position.
ForwardResult Forward(const TinyLmModel& model, std::span<const Token> tokens);

// logits[i] = dot(W_o[i], hidden), optionally with row eos_id replaced.
std::vector<double> Logits(const TinyLmModel& model,
                           std::span<const float> hidden,
                           std::span<const double> eos_row_override = {});

enum class Termination { kEos, kMaxLen };

struct GenerationTrace {
  std::vector<Token> prompt_tokens;
  std::vector<Token> generated_tokens;
  std::vector<std::vector<float>> hidden_states;  // h_i per step
  std::vector<double> eos_probs;                  // softmax(l_i)[eos]
  std::vector<double> eos_logits;                 // l_i[eos]
  std::vector<std::vector<double>> logits;        // only when requested
  Termination terminated_by = Termination::kMaxLen;

  std::size_t steps() const { return generated_tokens.size(); }
};

struct DecodeOptions {
  std::size_t max_len = 128;
  // 0 selects greedy argmax (ties to the lowest index).
  double temperature = 0.0;
  std::uint64_t seed = 0;
  bool keep_logits = false;
};

// Autoregressive decoding until eos_id is emitted or max_len tokens exist.
//
// Sampling at temperature T > 0 draws one uniform u in [0, 1) per step from a
// stream seeded by (seed, prompt) and returns the first token whose running
// sum of exp((l_i - max l) / T), in token order, exceeds u times the total.
GenerationTrace Generate(const TinyLmModel& model, std::span<const Token> prompt,
                         const DecodeOptions& options);

// Teacher-forced pass over a fixed continuation. Records the same per-step
// quantities as Generate. A non-empty eos_row_override replaces the
// dequantized W_o[eos_id] row (used for finite differences).
GenerationTrace Replay(const TinyLmModel& model, std::span<const Token> prompt,
                       std::span<const Token> fixed_tokens,
                       bool keep_logits = false,
                       std::span<const double> eos_row_override = {});

struct SoftmaxStats {
  double max_logit = 0.0;
  double sum_exp = 0.0;  // sum of exp(l_i - max_logit)

  double Prob(double logit) const {
    return std::exp(logit - max_logit) / sum_exp;
  }
};
SoftmaxStats ComputeSoftmaxStats(std::span<const double> logits);

}  // namespace eosflip

#endif  // EOSFLIP_TINY_LM_HPP_
