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

#include "eosflip/tiny_lm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "eosflip/error.hpp"
#include "eosflip/rng.hpp"

namespace eosflip {
namespace {

constexpr float kLayerNormEps = 1e-5f;

void Require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::kInvalidConfig, what);
}

void CheckTensor(const std::vector<float>& t, std::size_t n,
                 const char* name) {
  if (t.size() != n) {
    throw Error(ErrorCode::kShapeMismatch,
                std::string(name) + " has " + std::to_string(t.size()) +
                    " values, expected " + std::to_string(n));
  }
  for (const float v : t) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::kNonFiniteInput,
                  std::string(name) + " contains NaN/Inf");
    }
  }
}

void LayerNorm(std::span<const float> x, std::span<const float> gain,
               std::span<const float> bias, std::span<float> out) {
  const std::size_t d = x.size();
  float mean = 0.0f;
  for (const float v : x) mean += v;
  mean /= static_cast<float>(d);
  float var = 0.0f;
  for (const float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<float>(d);
  const float inv = 1.0f / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
  }
}

// out = W * x (+ bias), W is rows x cols row-major.
void MatVec(std::span<const float> w, std::span<const float> x,
            std::span<float> out, std::span<const float> bias = {}) {
  const std::size_t cols = x.size();
  for (std::size_t r = 0; r < out.size(); ++r) {
    const float* row = w.data() + r * cols;
    float acc = bias.empty() ? 0.0f : bias[r];
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    out[r] = acc;
  }
}

float Gelu(float x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

// Incremental decoder state. Every position, including prompt positions, goes
// through Step(), so Forward, Generate and Replay share one computation.
class Session {
 public:
  explicit Session(const TinyLmModel& model)
      : model_(model),
        cfg_(model.config()),
        keys_(cfg_.n_layers),
        values_(cfg_.n_layers),
        x_(cfg_.d_model),
        a_(cfg_.d_model),
        q_(cfg_.d_model),
        k_(cfg_.d_model),
        v_(cfg_.d_model),
        attn_(cfg_.d_model),
        proj_(cfg_.d_model),
        up_(cfg_.d_ff),
        hidden_(cfg_.d_model),
        scores_(cfg_.context_len) {}

  const std::vector<float>& Step(Token token) {
    const std::size_t d = cfg_.d_model;
    if (token >= cfg_.vocab_size) {
      throw Error(ErrorCode::kTokenOutOfRange,
                  "token " + std::to_string(token) + " >= vocab " +
                      std::to_string(cfg_.vocab_size));
    }
    if (pos_ >= cfg_.context_len) {
      throw Error(ErrorCode::kInvalidConfig,
                  "sequence exceeds context_len " +
                      std::to_string(cfg_.context_len));
    }
    const TrunkWeights& w = model_.trunk();
    const float* tok = w.token_embedding.data() + token * d;
    const float* pe = w.position_embedding.data() + pos_ * d;
    for (std::size_t i = 0; i < d; ++i) x_[i] = tok[i] + pe[i];

    const std::size_t n_heads = cfg_.n_heads;
    const std::size_t hd = d / n_heads;
    const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const LayerWeights& lw = w.layers[l];
      LayerNorm(x_, lw.ln1_gain, lw.ln1_bias, a_);
      MatVec(lw.wq, a_, q_);
      MatVec(lw.wk, a_, k_);
      MatVec(lw.wv, a_, v_);
      keys_[l].insert(keys_[l].end(), k_.begin(), k_.end());
      values_[l].insert(values_[l].end(), v_.begin(), v_.end());
      const std::size_t n_pos = pos_ + 1;
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        float max_score = -std::numeric_limits<float>::infinity();
        for (std::size_t p = 0; p < n_pos; ++p) {
          const float* kp = keys_[l].data() + p * d + off;
          float s = 0.0f;
          for (std::size_t i = 0; i < hd; ++i) s += q_[off + i] * kp[i];
          s *= inv_sqrt_hd;
          scores_[p] = s;
          max_score = std::max(max_score, s);
        }
        float denom = 0.0f;
        for (std::size_t p = 0; p < n_pos; ++p) {
          scores_[p] = std::exp(scores_[p] - max_score);
          denom += scores_[p];
        }
        for (std::size_t i = 0; i < hd; ++i) attn_[off + i] = 0.0f;
        for (std::size_t p = 0; p < n_pos; ++p) {
          const float weight = scores_[p] / denom;
          const float* vp = values_[l].data() + p * d + off;
          for (std::size_t i = 0; i < hd; ++i) attn_[off + i] += weight * vp[i];
        }
      }
      MatVec(lw.w_attn_out, attn_, proj_);
      for (std::size_t i = 0; i < d; ++i) x_[i] += proj_[i];

      LayerNorm(x_, lw.ln2_gain, lw.ln2_bias, a_);
      MatVec(lw.w_up, a_, up_, lw.b_up);
      for (float& u : up_) u = Gelu(u);
      MatVec(lw.w_down, up_, proj_, lw.b_down);
      for (std::size_t i = 0; i < d; ++i) x_[i] += proj_[i];
    }
    LayerNorm(x_, w.final_gain, w.final_bias, hidden_);
    for (const float v : hidden_) {
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::kNonFiniteActivation,
                    "hidden state at position " + std::to_string(pos_));
      }
    }
    ++pos_;
    return hidden_;
  }

 private:
  const TinyLmModel& model_;
  const TinyLmConfig& cfg_;
  std::size_t pos_ = 0;
  std::vector<std::vector<float>> keys_, values_;
  std::vector<float> x_, a_, q_, k_, v_, attn_, proj_, up_, hidden_, scores_;
};

void CheckPrompt(const TinyLmModel& model, std::span<const Token> prompt,
                 std::size_t continuation) {
  if (prompt.empty()) {
    throw Error(ErrorCode::kInvalidConfig, "prompt must be non-empty");
  }
  const std::size_t needed = prompt.size() + continuation - 1;
  if (continuation > 0 && needed > model.config().context_len) {
    throw Error(ErrorCode::kInvalidConfig,
                "prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                    std::to_string(continuation) +
                    " steps exceeds context_len");
  }
}

std::uint64_t PromptStreamSeed(std::uint64_t seed,
                               std::span<const Token> prompt) {
  std::uint64_t h = Rng::Mix(seed);
  for (const Token t : prompt) h = Rng::Mix(h ^ t);
  return h;
}

Token Argmax(std::span<const double> logits) {
  Token best = 0;
  for (Token i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

Token Sample(std::span<const double> logits, double temperature,
             double max_logit, Rng& rng) {
  double total = 0.0;
  std::vector<double> weights(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    weights[i] = std::exp((logits[i] - max_logit) / temperature);
    total += weights[i];
  }
  const double threshold = rng.Uniform() * total;
  double running = 0.0;
  Token last_positive = 0;
  for (Token i = 0; i < logits.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    running += weights[i];
    last_positive = i;
    if (running > threshold) return i;
  }
  return last_positive;
}

void RecordStep(const TinyLmModel& model, const std::vector<float>& hidden,
                std::span<const double> eos_override, bool keep_logits,
                GenerationTrace& trace, std::vector<double>& logits_out) {
  logits_out = Logits(model, hidden, eos_override);
  const Token eos = model.config().eos_id;
  const SoftmaxStats stats = ComputeSoftmaxStats(logits_out);
  trace.hidden_states.push_back(hidden);
  trace.eos_logits.push_back(logits_out[eos]);
  trace.eos_probs.push_back(stats.Prob(logits_out[eos]));
  if (keep_logits) trace.logits.push_back(logits_out);
}

}  // namespace

void TinyLmConfig::Validate() const {
  Require(vocab_size >= 2, "vocab_size must be >= 2");
  Require(d_model >= 1 && n_heads >= 1, "d_model and n_heads must be >= 1");
  Require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  Require(n_layers >= 1, "n_layers must be >= 1");
  Require(d_ff >= 1, "d_ff must be >= 1");
  Require(eos_id < vocab_size, "eos_id must be < vocab_size");
  Require(max_len >= 1, "max_len must be >= 1");
  Require(context_len >= max_len, "context_len must be >= max_len");
}

TinyLmModel::TinyLmModel(TinyLmConfig config, TrunkWeights trunk,
                         QuantizedTensor output_embedding)
    : config_(config), trunk_(std::move(trunk)) {
  config_.Validate();
  const std::size_t d = config_.d_model;
  CheckTensor(trunk_.token_embedding, config_.vocab_size * d,
              "token_embedding");
  CheckTensor(trunk_.position_embedding, config_.context_len * d,
              "position_embedding");
  if (trunk_.layers.size() != config_.n_layers) {
    throw Error(ErrorCode::kShapeMismatch, "layer count mismatch");
  }
  for (const LayerWeights& lw : trunk_.layers) {
    CheckTensor(lw.ln1_gain, d, "ln1_gain");
    CheckTensor(lw.ln1_bias, d, "ln1_bias");
    CheckTensor(lw.wq, d * d, "wq");
    CheckTensor(lw.wk, d * d, "wk");
    CheckTensor(lw.wv, d * d, "wv");
    CheckTensor(lw.w_attn_out, d * d, "w_attn_out");
    CheckTensor(lw.ln2_gain, d, "ln2_gain");
    CheckTensor(lw.ln2_bias, d, "ln2_bias");
    CheckTensor(lw.w_up, config_.d_ff * d, "w_up");
    CheckTensor(lw.b_up, config_.d_ff, "b_up");
    CheckTensor(lw.w_down, d * config_.d_ff, "w_down");
    CheckTensor(lw.b_down, d, "b_down");
  }
  CheckTensor(trunk_.final_gain, d, "final_gain");
  CheckTensor(trunk_.final_bias, d, "final_bias");
  set_output_embedding(std::move(output_embedding));
}

void TinyLmModel::CheckOutputShape(const QuantizedTensor& output) const {
  if (output.rows() != config_.vocab_size || output.cols() != config_.d_model) {
    throw Error(ErrorCode::kShapeMismatch,
                "output embedding must be vocab_size x d_model");
  }
}

void TinyLmModel::set_output_embedding(QuantizedTensor output_embedding) {
  CheckOutputShape(output_embedding);
  output_ = std::move(output_embedding);
  head_ = output_.DecodeAll();
}

void TinyLmModel::set_output_word(std::size_t row, std::size_t col,
                                  BitWord word) {
  output_.set_word(row, col, word);
  head_[row * config_.d_model + col] = output_.value(row, col);
}

std::vector<double> Logits(const TinyLmModel& model,
                           std::span<const float> hidden,
                           std::span<const double> eos_row_override) {
  const TinyLmConfig& cfg = model.config();
  const std::size_t d = cfg.d_model;
  if (!eos_row_override.empty() && eos_row_override.size() != d) {
    throw Error(ErrorCode::kShapeMismatch, "eos row override must have d values");
  }
  std::vector<double> logits(cfg.vocab_size);
  for (std::size_t r = 0; r < cfg.vocab_size; ++r) {
    const std::span<const double> row =
        (r == cfg.eos_id && !eos_row_override.empty()) ? eos_row_override
                                                       : model.head_row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      acc += row[c] * static_cast<double>(hidden[c]);
    }
    if (!std::isfinite(acc)) {
      throw Error(ErrorCode::kNonFiniteActivation,
                  "non-finite logit for token " + std::to_string(r));
    }
    logits[r] = acc;
  }
  return logits;
}

SoftmaxStats ComputeSoftmaxStats(std::span<const double> logits) {
  SoftmaxStats stats;
  stats.max_logit = *std::max_element(logits.begin(), logits.end());
  for (const double l : logits) stats.sum_exp += std::exp(l - stats.max_logit);
  return stats;
}

ForwardResult Forward(const TinyLmModel& model, std::span<const Token> tokens) {
  CheckPrompt(model, tokens, 0);
  Session session(model);
  const std::vector<float>* hidden = nullptr;
  for (const Token t : tokens) hidden = &session.Step(t);
  ForwardResult result;
  result.hidden = *hidden;
  result.logits = Logits(model, result.hidden);
  return result;
}

GenerationTrace Generate(const TinyLmModel& model, std::span<const Token> prompt,
                         const DecodeOptions& options) {
  if (options.max_len < 1) {
    throw Error(ErrorCode::kInvalidConfig, "max_len must be >= 1");
  }
  if (!(options.temperature >= 0.0) || !std::isfinite(options.temperature)) {
    throw Error(ErrorCode::kInvalidConfig, "temperature must be >= 0");
  }
  CheckPrompt(model, prompt, options.max_len);
  const Token eos = model.config().eos_id;
  Rng rng(PromptStreamSeed(options.seed, prompt));

  GenerationTrace trace;
  trace.prompt_tokens.assign(prompt.begin(), prompt.end());
  Session session(model);
  const std::vector<float>* hidden = nullptr;
  for (const Token t : prompt) hidden = &session.Step(t);

  std::vector<double> logits;
  while (true) {
    RecordStep(model, *hidden, {}, options.keep_logits, trace, logits);
    Token next;
    if (options.temperature == 0.0) {
      next = Argmax(logits);
    } else {
      const double max_logit = *std::max_element(logits.begin(), logits.end());
      next = Sample(logits, options.temperature, max_logit, rng);
    }
    trace.generated_tokens.push_back(next);
    if (next == eos) {
      trace.terminated_by = Termination::kEos;
      break;
    }
    if (trace.steps() == options.max_len) {
      trace.terminated_by = Termination::kMaxLen;
      break;
    }
    hidden = &session.Step(next);
  }
  return trace;
}

GenerationTrace Replay(const TinyLmModel& model, std::span<const Token> prompt,
                       std::span<const Token> fixed_tokens, bool keep_logits,
                       std::span<const double> eos_row_override) {
  CheckPrompt(model, prompt, fixed_tokens.size());
  for (const Token t : fixed_tokens) {
    if (t >= model.config().vocab_size) {
      throw Error(ErrorCode::kTokenOutOfRange,
                  "forced token " + std::to_string(t) + " out of range");
    }
  }
  GenerationTrace trace;
  trace.prompt_tokens.assign(prompt.begin(), prompt.end());
  Session session(model);
  const std::vector<float>* hidden = nullptr;
  for (const Token t : prompt) hidden = &session.Step(t);

  std::vector<double> logits;
  for (std::size_t i = 0; i < fixed_tokens.size(); ++i) {
    RecordStep(model, *hidden, eos_row_override, keep_logits, trace, logits);
    trace.generated_tokens.push_back(fixed_tokens[i]);
    if (i + 1 < fixed_tokens.size()) hidden = &session.Step(fixed_tokens[i]);
  }
  trace.terminated_by =
      (!fixed_tokens.empty() && fixed_tokens.back() == model.config().eos_id)
          ? Termination::kEos
          : Termination::kMaxLen;
  return trace;
}

}  // namespace eosflip
