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

#include "eosflip/fixture.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "eosflip/error.hpp"
#include "eosflip/model_io.hpp"
#include "eosflip/rng.hpp"

namespace eosflip {
namespace {

// Stream tags so trunk, head and probes draw from independent streams.
constexpr std::uint64_t kTrunkStream = 0x7472756E6Bull;
constexpr std::uint64_t kHeadStream = 0x68656164ull;
constexpr std::uint64_t kProbeStream = 0x70726F6265ull;

std::vector<float> Normal(Rng& rng, std::size_t n, double std) {
  std::vector<float> out(n);
  for (float& v : out) v = static_cast<float>(rng.Normal() * std);
  return out;
}

std::vector<std::size_t> ProbeLengths(const TinyLmModel& model,
                                      const PromptCorpus& probes) {
  std::vector<std::size_t> lengths;
  DecodeOptions opts;
  opts.max_len = model.config().max_len;
  for (const PromptEntry& p : probes.entries) {
    lengths.push_back(Generate(model, p.tokens, opts).steps());
  }
  return lengths;
}

}  // namespace

nlohmann::ordered_json ProbeReport::ToJson() const {
  nlohmann::ordered_json j;
  j["alpha"] = alpha;
  j["iterations"] = iterations;
  j["median_length"] = median_length;
  j["probe_lengths"] = probe_lengths;
  j["eos_direction"] = eos_direction;
  return j;
}

double MedianLength(std::vector<std::size_t> lengths) {
  if (lengths.empty()) return 0.0;
  std::sort(lengths.begin(), lengths.end());
  const std::size_t n = lengths.size();
  if (n % 2 == 1) return static_cast<double>(lengths[n / 2]);
  return 0.5 * static_cast<double>(lengths[n / 2 - 1] + lengths[n / 2]);
}

TrunkWeights RandomTrunk(const TinyLmConfig& config, std::uint64_t seed,
                         const FixtureOptions& options) {
  config.Validate();
  Rng rng(Rng::Mix(seed) ^ kTrunkStream);
  const std::size_t d = config.d_model;
  const std::size_t ff = config.d_ff;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double residual =
      1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  TrunkWeights w;
  w.token_embedding = Normal(rng, config.vocab_size * d, options.embedding_std);
  w.position_embedding = Normal(rng, config.context_len * d, options.position_std);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain.assign(d, 1.0f);
    lw.ln1_bias.assign(d, 0.0f);
    lw.wq = Normal(rng, d * d, in_std);
    lw.wk = Normal(rng, d * d, in_std);
    lw.wv = Normal(rng, d * d, in_std);
    lw.w_attn_out = Normal(rng, d * d, in_std * residual);
    lw.ln2_gain.assign(d, 1.0f);
    lw.ln2_bias.assign(d, 0.0f);
    lw.w_up = Normal(rng, ff * d, in_std);
    lw.b_up.assign(ff, 0.0f);
    lw.w_down = Normal(rng, d * ff,
                       residual / std::sqrt(static_cast<double>(ff)));
    lw.b_down.assign(d, 0.0f);
    w.layers.push_back(std::move(lw));
  }
  w.final_gain.assign(d, 1.0f);
  w.final_bias = Normal(rng, d, options.final_bias_std);
  std::vector<std::size_t> dims(d);
  std::iota(dims.begin(), dims.end(), 0);
  const std::size_t n_outliers = std::min(options.n_outlier_dims, d);
  for (std::size_t i = 0; i < n_outliers; ++i) {
    // Partial Fisher-Yates picks distinct dimensions.
    const std::size_t j = rng.UniformInt(i, d - 1);
    std::swap(dims[i], dims[j]);
    const double sign = rng.Uniform() < 0.5 ? -1.0 : 1.0;
    w.final_bias[dims[i]] = static_cast<float>(sign * options.outlier_bias);
  }
  return w;
}

std::vector<double> RandomOutputRows(const TinyLmConfig& config,
                                     std::uint64_t seed,
                                     const FixtureOptions& options) {
  Rng rng(Rng::Mix(seed) ^ kHeadStream);
  const std::size_t d = config.d_model;
  std::vector<double> rows(config.vocab_size * d);
  for (double& v : rows) v = rng.Normal() * options.output_std;
  std::fill_n(rows.begin() + static_cast<std::ptrdiff_t>(config.eos_id * d), d, 0.0);
  return rows;
}

TinyLmModel FixtureWithAlpha(const TinyLmConfig& config,
                             const TrunkWeights& trunk,
                             std::vector<double> output_rows,
                             const std::vector<double>& eos_direction,
                             double alpha, FormatKind format) {
  const std::size_t d = config.d_model;
  for (std::size_t j = 0; j < d; ++j) {
    output_rows[config.eos_id * d + j] = alpha * eos_direction[j];
  }
  return TinyLmModel(config, trunk,
                     Quantize(output_rows, config.vocab_size, d, format));
}

Fixture BuildFixture(const TinyLmConfig& config, std::uint64_t seed,
                     std::size_t lo, std::size_t hi, FormatKind format,
                     const FixtureOptions& options) {
  config.Validate();
  if (lo < 2 || hi < lo || hi > config.max_len / 2) {
    throw Error(ErrorCode::kInvalidConfig,
                "baseline length range must satisfy 2 <= lo <= hi <= max_len/2");
  }
  if (options.probe_max_len + config.max_len - 1 > config.context_len) {
    throw Error(ErrorCode::kInvalidConfig, "probe prompts do not fit context_len");
  }
  const TrunkWeights trunk = RandomTrunk(config, seed, options);
  const std::vector<double> rows = RandomOutputRows(config, seed, options);
  const PromptCorpus probes =
      SynthesizePrompts(options.n_probe_prompts, Rng::Mix(seed) ^ kProbeStream,
                        config, options.probe_min_len, options.probe_max_len,
                        "probe");

  // Mean unit hidden direction under a zero EOS row.
  const std::size_t d = config.d_model;
  std::vector<double> zero(d, 0.0);
  const TinyLmModel base = FixtureWithAlpha(config, trunk, rows, zero, 0.0, format);
  std::vector<double> mean(d, 0.0);
  DecodeOptions opts;
  opts.max_len = config.max_len;
  for (const PromptEntry& p : probes.entries) {
    const GenerationTrace trace = Generate(base, p.tokens, opts);
    for (const auto& h : trace.hidden_states) {
      double norm = 0.0;
      for (const float v : h) norm += static_cast<double>(v) * v;
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) mean[j] += h[j] / norm;
    }
  }
  double mean_norm = 0.0;
  for (const double v : mean) mean_norm += v * v;
  mean_norm = std::sqrt(mean_norm);
  if (mean_norm == 0.0) {
    throw Error(ErrorCode::kCalibrationFailed, "probe hidden states cancel out");
  }
  for (double& v : mean) v /= mean_norm;

  ProbeReport report;
  report.eos_direction = mean;
  auto evaluate = [&](double alpha) {
    TinyLmModel m = FixtureWithAlpha(config, trunk, rows, mean, alpha, format);
    std::vector<std::size_t> lengths = ProbeLengths(m, probes);
    ++report.iterations;
    return std::make_pair(std::move(m), std::move(lengths));
  };
  auto in_band = [&](double median) {
    return median >= static_cast<double>(lo) && median <= static_cast<double>(hi);
  };

  // Grow the upper bracket until lengths fall below the band, then bisect.
  double alpha_lo = 0.0;
  double alpha_hi = 1.0;
  while (report.iterations < options.max_iterations) {
    auto [model, lengths] = evaluate(alpha_hi);
    const double median = MedianLength(lengths);
    if (in_band(median)) {
      report.alpha = alpha_hi;
      report.median_length = median;
      report.probe_lengths = std::move(lengths);
      return Fixture{std::move(model), std::move(report)};
    }
    if (median < static_cast<double>(lo)) break;
    alpha_lo = alpha_hi;
    alpha_hi *= 2.0;
  }
  while (report.iterations < options.max_iterations) {
    const double alpha = 0.5 * (alpha_lo + alpha_hi);
    auto [model, lengths] = evaluate(alpha);
    const double median = MedianLength(lengths);
    if (in_band(median)) {
      report.alpha = alpha;
      report.median_length = median;
      report.probe_lengths = std::move(lengths);
      return Fixture{std::move(model), std::move(report)};
    }
    if (median > static_cast<double>(hi)) {
      alpha_lo = alpha;
    } else {
      alpha_hi = alpha;
    }
  }
  throw Error(ErrorCode::kCalibrationFailed,
              "median probe length not in [" + std::to_string(lo) + ", " +
                  std::to_string(hi) + "] after " +
                  std::to_string(report.iterations) + " iterations");
}

}  // namespace eosflip
