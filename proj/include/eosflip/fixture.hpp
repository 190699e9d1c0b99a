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

#ifndef EOSFLIP_FIXTURE_HPP_
#define EOSFLIP_FIXTURE_HPP_

// Synthetic victim models with a controllable baseline output length.
//
// A randomly initialised LM has no notion of when to stop. The fixture gives
// it one: all W_o rows are random except W_o[eos], which is set to
// alpha * h_mean, where h_mean is the normalised mean of the unit hidden
// states seen while decoding a seeded probe set with a zero EOS row. alpha is
// then bisected until the median greedy length over the probe set lands in
// the requested band.

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "eosflip/numeric_codec.hpp"
#include "eosflip/tiny_lm.hpp"

namespace eosflip {

struct FixtureOptions {
  std::size_t n_probe_prompts = 16;
  std::size_t probe_min_len = 4;
  std::size_t probe_max_len = 12;
  int max_iterations = 64;

  // Initialisation scales (standard deviations unless noted).
  double embedding_std = 1.0;
  double position_std = 0.5;
  double output_std = 0.2;
  // Residual-branch output projections are scaled by 1/sqrt(2 * n_layers).
  double final_bias_std = 0.1;
  // A few hidden dimensions carry large, prompt-independent offsets, similar
  // to the outlier features of trained LMs.
  std::size_t n_outlier_dims = 4;
  double outlier_bias = 4.0;
};

struct ProbeReport {
  double alpha = 0.0;
  int iterations = 0;
  double median_length = 0.0;
  std::vector<std::size_t> probe_lengths;
  std::vector<double> eos_direction;  // unit h_mean

  nlohmann::ordered_json ToJson() const;
};

struct Fixture {
  TinyLmModel model;
  ProbeReport report;
};

// Random trunk and non-EOS W_o rows, deterministic in (config, seed).
TrunkWeights RandomTrunk(const TinyLmConfig& config, std::uint64_t seed,
                         const FixtureOptions& options = {});
std::vector<double> RandomOutputRows(const TinyLmConfig& config,
                                     std::uint64_t seed,
                                     const FixtureOptions& options = {});

// Throws kCalibrationFailed if the median cannot be placed in [lo, hi].
Fixture BuildFixture(const TinyLmConfig& config, std::uint64_t seed,
                     std::size_t lo, std::size_t hi, FormatKind format,
                     const FixtureOptions& options = {});

// Builds the model for one alpha; exposed for calibration tests.
TinyLmModel FixtureWithAlpha(const TinyLmConfig& config,
                             const TrunkWeights& trunk,
                             std::vector<double> output_rows,
                             const std::vector<double>& eos_direction,
                             double alpha, FormatKind format);

double MedianLength(std::vector<std::size_t> lengths);

}  // namespace eosflip

#endif  // EOSFLIP_FIXTURE_HPP_
