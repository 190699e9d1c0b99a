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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "eosflip/error.hpp"
#include "eosflip/fixture.hpp"
#include "eosflip/rng.hpp"
#include "test_support.hpp"

namespace eosflip {
namespace {

ErrorCode CodeOf(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an eosflip::Error";
  return ErrorCode::kIo;
}

TinyLmConfig SmallConfig() {
  TinyLmConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.context_len = 40;
  c.max_len = 20;
  return c;
}

TinyLmModel SmallModel(std::vector<double> rows, std::uint64_t seed = 9) {
  const TinyLmConfig c = SmallConfig();
  return TinyLmModel(c, RandomTrunk(c, seed),
                     QuantizeFp16(rows, c.vocab_size, c.d_model));
}

TinyLmModel SmallModel(std::uint64_t seed = 9) {
  return SmallModel(RandomOutputRows(SmallConfig(), seed), seed);
}

// Straight-line forward pass over the whole sequence in double precision.
// No caching: every position recomputes attention over its prefix.
std::vector<double> OracleHidden(const TinyLmModel& model,
                                 const std::vector<Token>& tokens) {
  const TinyLmConfig& c = model.config();
  const TrunkWeights& w = model.trunk();
  const std::size_t d = c.d_model, n = tokens.size(), hd = d / c.n_heads;
  auto layer_norm = [&](const std::vector<double>& x, const std::vector<float>& g,
                        const std::vector<float>& b) {
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / d;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= d;
    std::vector<double> y(d);
    for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
    return y;
  };
  auto matvec = [](const std::vector<float>& m, const std::vector<double>& x,
                   std::size_t rows) {
    std::vector<double> y(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < x.size(); ++k) y[r] += m[r * x.size() + k] * x[k];
    return y;
  };
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t i = 0; i < d; ++i)
      x[p][i] = w.token_embedding[tokens[p] * d + i] + w.position_embedding[p * d + i];
  for (const LayerWeights& lw : w.layers) {
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t p = 0; p < n; ++p) {
      const auto a = layer_norm(x[p], lw.ln1_gain, lw.ln1_bias);
      q[p] = matvec(lw.wq, a, d);
      k[p] = matvec(lw.wk, a, d);
      v[p] = matvec(lw.wv, a, d);
    }
    std::vector<std::vector<double>> next = x;
    for (std::size_t p = 0; p < n; ++p) {
      std::vector<double> mixed(d, 0.0);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        std::vector<double> s(p + 1);
        for (std::size_t j = 0; j <= p; ++j) {
          for (std::size_t i = 0; i < hd; ++i) s[j] += q[p][h * hd + i] * k[j][h * hd + i];
          s[j] /= std::sqrt(static_cast<double>(hd));
        }
        const double m = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - m));
        for (std::size_t j = 0; j <= p; ++j)
          for (std::size_t i = 0; i < hd; ++i) mixed[h * hd + i] += s[j] / z * v[j][h * hd + i];
      }
      const auto proj = matvec(lw.w_attn_out, mixed, d);
      for (std::size_t i = 0; i < d; ++i) next[p][i] += proj[i];
      const auto a = layer_norm(next[p], lw.ln2_gain, lw.ln2_bias);
      auto up = matvec(lw.w_up, a, c.d_ff);
      for (std::size_t i = 0; i < c.d_ff; ++i) {
        const double u = up[i] + lw.b_up[i];
        up[i] = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u)));
      }
      const auto down = matvec(lw.w_down, up, d);
      for (std::size_t i = 0; i < d; ++i) next[p][i] += down[i] + lw.b_down[i];
    }
    x = std::move(next);
  }
  return layer_norm(x.back(), w.final_gain, w.final_bias);
}

TEST(ForwardTest, ZeroOutputEmbeddingGivesUniformSoftmax) {
  const TinyLmConfig c = SmallConfig();
  // An all-zero tensor cannot be int8-quantized, so use fp16 zeros.
  const TinyLmModel m = SmallModel(std::vector<double>(c.vocab_size * c.d_model, 0.0));
  const std::vector<Token> prompt = {1, 2, 3};
  const ForwardResult r = Forward(m, prompt);
  for (const double l : r.logits) EXPECT_EQ(l, 0.0);
  const SoftmaxStats s = ComputeSoftmaxStats(r.logits);
  for (const double l : r.logits) EXPECT_DOUBLE_EQ(s.Prob(l), 1.0 / c.vocab_size);
}

TEST(ForwardTest, MatchesStraightLineOracleOnSeedFixture) {
  const TinyLmModel& m = testing::SeedFixture().model;
  const std::vector<Token> prompt = {1, 2, 3};
  const ForwardResult r = Forward(m, prompt);
  const std::vector<double> h = OracleHidden(m, prompt);
  ASSERT_EQ(r.hidden.size(), h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    EXPECT_NEAR(r.hidden[i], h[i], 1e-4 * (1.0 + std::fabs(h[i]))) << i;
  }
  const std::size_t d = m.config().d_model;
  for (std::size_t t = 0; t < m.config().vocab_size; ++t) {
    double want = 0.0;
    for (std::size_t i = 0; i < d; ++i) want += m.output_embedding().value(t, i) * h[i];
    EXPECT_NEAR(r.logits[t], want, 1e-3 * (1.0 + std::fabs(want))) << t;
  }
}

TEST(ForwardTest, LogitsAreExactDotProductsOfDecodedRows) {
  const TinyLmModel m = SmallModel();
  const std::vector<Token> prompt = {4, 5};
  const ForwardResult r = Forward(m, prompt);
  for (std::size_t t = 0; t < m.config().vocab_size; ++t) {
    double want = 0.0;
    for (std::size_t i = 0; i < m.config().d_model; ++i)
      want += Decode(m.output_embedding().word(t, i), m.output_embedding().format()) *
              static_cast<double>(r.hidden[i]);
    EXPECT_EQ(r.logits[t], want);
  }
}

TEST(ForwardTest, EditingEosRowChangesOnlyEosLogit) {
  TinyLmModel m = SmallModel();
  const std::vector<Token> prompt = {3, 1, 4, 1, 5};
  const ForwardResult before = Forward(m, prompt);
  const std::size_t eos = m.config().eos_id;
  for (std::size_t c = 0; c < m.config().d_model; ++c) {
    m.set_output_word(eos, c, Encode(0.25 * static_cast<double>(c) - 1.0,
                                     m.output_embedding().format()));
  }
  const ForwardResult after = Forward(m, prompt);
  EXPECT_EQ(before.hidden, after.hidden);
  for (std::size_t t = 0; t < m.config().vocab_size; ++t) {
    if (t == eos) {
      EXPECT_NE(before.logits[t], after.logits[t]);
    } else {
      EXPECT_EQ(before.logits[t], after.logits[t]) << t;
    }
  }
}

TEST(ForwardTest, RatioOfNonEosProbabilitiesIsPreserved) {
  TinyLmModel m = SmallModel();
  const std::vector<Token> prompt = {7, 8, 9};
  const ForwardResult a = Forward(m, prompt);
  m.set_output_word(0, 0, Encode(3.0, m.output_embedding().format()));
  const ForwardResult b = Forward(m, prompt);
  const SoftmaxStats sa = ComputeSoftmaxStats(a.logits);
  const SoftmaxStats sb = ComputeSoftmaxStats(b.logits);
  for (std::size_t i = 1; i < a.logits.size(); ++i) {
    for (std::size_t j = 1; j < a.logits.size(); ++j) {
      const double ra = sa.Prob(a.logits[i]) / sa.Prob(a.logits[j]);
      const double rb = sb.Prob(b.logits[i]) / sb.Prob(b.logits[j]);
      EXPECT_NEAR(rb / ra, 1.0, 1e-6);
    }
  }
}

TEST(ForwardTest, Errors) {
  const TinyLmModel m = SmallModel();
  const std::vector<Token> bad = {1, 16};
  EXPECT_EQ(CodeOf([&] { Forward(m, bad); }), ErrorCode::kTokenOutOfRange);

  const TinyLmConfig c = SmallConfig();
  TrunkWeights trunk = RandomTrunk(c, 9);
  for (float& v : trunk.layers[0].w_up) v = 3e38f;
  for (float& v : trunk.layers[0].b_up) v = 3e38f;
  const TinyLmModel broken(c, trunk,
                           QuantizeFp16(RandomOutputRows(c, 9), c.vocab_size, c.d_model));
  const std::vector<Token> prompt = {1, 2};
  EXPECT_EQ(CodeOf([&] { Forward(broken, prompt); }), ErrorCode::kNonFiniteActivation);
}

TEST(ConfigTest, Validation) {
  TinyLmConfig c = SmallConfig();
  c.n_heads = 3;
  EXPECT_EQ(CodeOf([&] { c.Validate(); }), ErrorCode::kInvalidConfig);
  c = SmallConfig();
  c.eos_id = 16;
  EXPECT_EQ(CodeOf([&] { c.Validate(); }), ErrorCode::kInvalidConfig);
  c = SmallConfig();
  c.max_len = 0;
  EXPECT_EQ(CodeOf([&] { c.Validate(); }), ErrorCode::kInvalidConfig);
}

// EOS row set to a multiple of the first-step hidden state.
TinyLmModel WithEosRowAlong(const std::vector<Token>& prompt, double multiple) {
  TinyLmModel m = SmallModel();
  const ForwardResult r = Forward(m, prompt);
  std::vector<double> rows = m.output_embedding().DecodeAll();
  const std::size_t d = m.config().d_model;
  for (std::size_t i = 0; i < d; ++i) rows[i] = multiple * r.hidden[i];
  m.set_output_embedding(QuantizeFp16(rows, m.config().vocab_size, d));
  return m;
}

TEST(GenerateTest, EosArgmaxAtFirstStepStopsImmediately) {
  const std::vector<Token> prompt = {2, 3};
  const TinyLmModel m = WithEosRowAlong(prompt, 5.0);
  const GenerationTrace t = Generate(m, prompt, {.max_len = 20});
  EXPECT_EQ(t.steps(), 1u);
  EXPECT_EQ(t.terminated_by, Termination::kEos);
  EXPECT_EQ(t.generated_tokens.back(), m.config().eos_id);
}

TEST(GenerateTest, StronglyNegativeEosRowRunsToMaxLen) {
  // EOS row = -40 * mean hidden state of an unconstrained run.
  TinyLmModel m = SmallModel();
  const std::vector<Token> prompt = {5, 6, 7};
  const GenerationTrace base = Generate(m, prompt, {.max_len = 20});
  const std::size_t d = m.config().d_model;
  std::vector<double> rows = m.output_embedding().DecodeAll();
  std::fill(rows.begin(), rows.begin() + d, 0.0);
  for (const auto& h : base.hidden_states)
    for (std::size_t i = 0; i < d; ++i) rows[i] -= 40.0 * h[i] / base.steps();
  m.set_output_embedding(QuantizeFp16(rows, m.config().vocab_size, d));
  const GenerationTrace t = Generate(m, prompt, {.max_len = 20});
  EXPECT_EQ(t.steps(), 20u);
  EXPECT_EQ(t.terminated_by, Termination::kMaxLen);
  EXPECT_NE(t.generated_tokens.back(), m.config().eos_id);
}

TEST(GenerateTest, TraceListsHaveConsistentLengths) {
  const TinyLmModel& m = testing::SeedFixture().model;
  for (const PromptEntry& e : testing::SearchPrompts().entries) {
    for (const double temperature : {0.0, 0.7}) {
      const GenerationTrace t =
          Generate(m, e.tokens, {.max_len = 40, .temperature = temperature, .seed = 3,
                                 .keep_logits = true});
      const std::size_t n = t.steps();
      ASSERT_GE(n, 1u);
      EXPECT_LE(n, 40u);
      EXPECT_EQ(t.hidden_states.size(), n);
      EXPECT_EQ(t.eos_probs.size(), n);
      EXPECT_EQ(t.eos_logits.size(), n);
      EXPECT_EQ(t.logits.size(), n);
      EXPECT_EQ(t.prompt_tokens, e.tokens);
      for (const double p : t.eos_probs) {
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
      }
      const bool last_is_eos = t.generated_tokens.back() == m.config().eos_id;
      EXPECT_EQ(t.terminated_by == Termination::kEos, last_is_eos);
      EXPECT_EQ(t.terminated_by == Termination::kMaxLen, n == 40u && !last_is_eos);
      // Only the last token may be EOS.
      for (std::size_t i = 0; i + 1 < n; ++i)
        EXPECT_NE(t.generated_tokens[i], m.config().eos_id);
    }
  }
}

TEST(GenerateTest, GreedyPicksArgmaxWithLowestIndexTies) {
  const TinyLmModel& m = testing::SeedFixture().model;
  const std::vector<Token>& prompt = testing::SearchPrompts().entries[0].tokens;
  const GenerationTrace t = Generate(m, prompt, {.max_len = 16, .keep_logits = true});
  for (std::size_t i = 0; i < t.steps(); ++i) {
    const auto& l = t.logits[i];
    const auto best = std::max_element(l.begin(), l.end()) - l.begin();
    EXPECT_EQ(t.generated_tokens[i], static_cast<Token>(best));
  }
  // Zero head: all logits tie, so greedy emits token 0 = EOS.
  const TinyLmConfig c = SmallConfig();
  const TinyLmModel flat = SmallModel(std::vector<double>(c.vocab_size * c.d_model, 0.0));
  const std::vector<Token> small_prompt = {1, 2};
  const GenerationTrace z = Generate(flat, small_prompt, {.max_len = 5});
  EXPECT_EQ(z.generated_tokens, std::vector<Token>{0});
}

// Calibration controls the median over the probe set, not each prompt.
TEST(GenerateTest, FixtureProbeMedianWithinCalibratedRange) {
  const Fixture& f = testing::SeedFixture();
  const TinyLmModel& m = f.model;
  ASSERT_EQ(f.report.probe_lengths.size(), 16u);
  const double median = MedianLength(f.report.probe_lengths);
  EXPECT_EQ(median, f.report.median_length);
  EXPECT_GE(median, 8.0);
  EXPECT_LE(median, 32.0);
  for (const PromptEntry& e : testing::SearchPrompts().entries) {
    const GenerationTrace t = Generate(m, e.tokens, {.max_len = m.config().max_len});
    EXPECT_EQ(t.terminated_by, Termination::kEos) << e.id;
  }
}

TEST(GenerateTest, DeterministicInModelPromptTemperatureSeed) {
  const TinyLmModel& m = testing::SeedFixture().model;
  const std::vector<Token>& prompt = testing::SearchPrompts().entries[1].tokens;
  const DecodeOptions opt{.max_len = 64, .temperature = 1.0, .seed = 17};
  const GenerationTrace a = Generate(m, prompt, opt);
  const GenerationTrace b = Generate(m, prompt, opt);
  EXPECT_EQ(a.generated_tokens, b.generated_tokens);
  EXPECT_EQ(a.eos_probs, b.eos_probs);
  const TinyLmModel copy = m;
  EXPECT_EQ(Generate(copy, prompt, opt).generated_tokens, a.generated_tokens);
  // A different seed changes the sampled continuation for some prompt.
  bool any_diff = false;
  for (const PromptEntry& e : testing::HeldOutPrompts().entries) {
    DecodeOptions other = opt;
    other.seed = 18;
    if (Generate(m, e.tokens, opt).generated_tokens !=
        Generate(m, e.tokens, other).generated_tokens) {
      any_diff = true;
      break;
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST(ReplayTest, ReproducesGenerateExactly) {
  const TinyLmModel& m = testing::SeedFixture().model;
  for (const PromptEntry& e : testing::SearchPrompts().entries) {
    const GenerationTrace g = Generate(m, e.tokens, {.max_len = 64, .temperature = 0.8, .seed = 1});
    const GenerationTrace r = Replay(m, e.tokens, g.generated_tokens);
    EXPECT_EQ(r.generated_tokens, g.generated_tokens);
    EXPECT_EQ(r.hidden_states, g.hidden_states);
    EXPECT_EQ(r.eos_probs, g.eos_probs);
    EXPECT_EQ(r.eos_logits, g.eos_logits);
    EXPECT_EQ(r.terminated_by, g.terminated_by);
  }
}

TEST(ReplayTest, EosRowEditChangesProbsButNotHiddenStates) {
  TinyLmModel m = testing::SeedFixture().model;
  const std::vector<Token>& prompt = testing::SearchPrompts().entries[2].tokens;
  const GenerationTrace g = Generate(m, prompt, {.max_len = 64});
  const std::size_t eos = m.config().eos_id;
  for (std::size_t c = 0; c < m.config().d_model; c += 3) {
    m.set_output_word(eos, c, Int8Word(0));
  }
  const GenerationTrace r = Replay(m, prompt, g.generated_tokens);
  EXPECT_EQ(r.hidden_states, g.hidden_states);
  EXPECT_NE(r.eos_probs, g.eos_probs);
}

TEST(ReplayTest, NonEosRowEditKeepsEosLogitsAndChangesProbs) {
  TinyLmModel m = testing::SeedFixture().model;
  const std::vector<Token>& prompt = testing::SearchPrompts().entries[3].tokens;
  const GenerationTrace g = Generate(m, prompt, {.max_len = 64, .keep_logits = true});
  const std::size_t d = m.config().d_model;
  for (std::size_t c = 0; c < d; ++c) m.set_output_word(5, c, Int8Word(127));
  const GenerationTrace r = Replay(m, prompt, g.generated_tokens, true);
  EXPECT_EQ(r.eos_logits, g.eos_logits);
  const std::size_t eos = m.config().eos_id;
  for (std::size_t i = 0; i < g.steps(); ++i) {
    // Recompute softmax by hand from the captured logits with row 5 replaced.
    std::vector<double> l = g.logits[i];
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) dot += m.head_row(5)[c] * g.hidden_states[i][c];
    l[5] = dot;
    const double mx = *std::max_element(l.begin(), l.end());
    double z = 0.0;
    for (const double v : l) z += std::exp(v - mx);
    const double want = std::exp(l[eos] - mx) / z;
    EXPECT_NEAR(r.eos_probs[i], want, 1e-12 * (1.0 + want));
    EXPECT_NE(r.eos_probs[i], g.eos_probs[i]);
  }
}

TEST(ReplayTest, RejectsOutOfRangeForcedTokens) {
  const TinyLmModel m = SmallModel();
  const std::vector<Token> prompt = {1};
  const std::vector<Token> forced = {2, 99};
  EXPECT_EQ(CodeOf([&] { Replay(m, prompt, forced); }), ErrorCode::kTokenOutOfRange);
}

TEST(GenerateTest, PropertyRandomModelsRespectLengthBound) {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const TinyLmModel m = SmallModel(seed);
    Rng rng(seed);
    std::vector<Token> prompt(1 + rng.UniformInt(0, 5));
    for (Token& t : prompt) t = static_cast<Token>(rng.UniformInt(1, 15));
    const std::size_t max_len = 1 + rng.UniformInt(0, 19);
    const GenerationTrace t =
        Generate(m, prompt, {.max_len = max_len, .temperature = (seed % 2) * 1.5, .seed = seed});
    EXPECT_LE(t.steps(), max_len);
    EXPECT_EQ(t.terminated_by == Termination::kMaxLen,
              t.steps() == max_len && t.generated_tokens.back() != m.config().eos_id);
  }
}

}  // namespace
}  // namespace eosflip
