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

#include "eosflip/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>

#include "eosflip/error.hpp"
#include "parallel.hpp"

namespace eosflip {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

double Norm(std::span<const double> v) {
  double s = 0.0;
  for (const double x : v) s += x * x;
  return std::sqrt(s);
}

// Gradient to feed into target construction for one round.
std::vector<double> PrepareGradient(const std::vector<double>& g,
                                    const AttackConfig& config) {
  if (Norm(g) == 0.0) {
    throw Error(ErrorCode::kZeroGradient, "EOS-row gradient is zero");
  }
  if (!config.scale_gradient) return g;
  return ScaleGradient(g, config.grad_low, config.grad_up);
}

std::vector<std::string> PromptIds(const PromptCorpus& prompts) {
  std::vector<std::string> ids;
  for (const PromptEntry& e : prompts.entries) ids.push_back(e.id);
  return ids;
}

// Loss of the current model on the search set.
double SearchLoss(const TinyLmModel& model, const PromptCorpus& prompts,
                  const AttackConfig& config) {
  return ComputeEpochGradient(model, prompts, config).loss;
}

FlipRecord FlipOne(TinyLmModel& model, std::size_t round, std::size_t dim,
                   double target) {
  const Token eos = model.config().eos_id;
  const QuantizedTensor& out = model.output_embedding();
  const BitWord before = out.word(eos, dim);
  const BitChoice choice = SelectBit(before, target, out.format());
  FlipRecord rec;
  rec.round = round;
  rec.dim = dim;
  rec.bit = choice.bit;
  rec.word_before = before;
  rec.word_after = choice.word;
  rec.fp_before = Decode(before, out.format());
  rec.fp_after = choice.value;
  rec.target_fp = target;
  model.set_output_word(eos, dim, choice.word);
  return rec;
}

}  // namespace

std::string_view SearchModeName(SearchMode mode) {
  return mode == SearchMode::kOneShot ? "one-shot" : "progressive";
}

SearchMode ParseSearchMode(std::string_view name) {
  if (name == "one-shot" || name == "one_shot") return SearchMode::kOneShot;
  if (name == "progressive") return SearchMode::kProgressive;
  throw Error(ErrorCode::kInvalidConfig, "unknown search mode '" + std::string(name) + "'");
}

std::string_view AggregationName(Aggregation aggregation) {
  switch (aggregation) {
    case Aggregation::kFull: return "full";
    case Aggregation::kLatterHalf: return "latter-half";
    case Aggregation::kLast: return "last";
  }
  return "full";
}

Aggregation ParseAggregation(std::string_view name) {
  if (name == "full") return Aggregation::kFull;
  if (name == "latter-half" || name == "latter_half") return Aggregation::kLatterHalf;
  if (name == "last") return Aggregation::kLast;
  throw Error(ErrorCode::kInvalidConfig, "unknown aggregation '" + std::string(name) + "'");
}

void AttackConfig::Validate(const TinyLmConfig& model_config) const {
  auto fail = [](const std::string& what) {
    throw Error(ErrorCode::kInvalidConfig, what);
  };
  if (n_flips < 1) fail("n_flips must be >= 1");
  if (mode == SearchMode::kOneShot && n_flips > model_config.d_model) {
    fail("one-shot n_flips must be <= d_model");
  }
  if (!(grad_low > 0.0) || !(grad_up > 0.0) || !std::isfinite(grad_up)) {
    fail("gradient bounds must be positive and finite");
  }
  if (!(grad_low < grad_up)) fail("grad_low must be < grad_up");
  if (search_max_len > model_config.max_len) {
    fail("search_max_len must be <= model max_len");
  }
  if (!(search_temperature >= 0.0) || !std::isfinite(search_temperature)) {
    fail("search_temperature must be >= 0");
  }
}

ordered_json AttackConfig::ToJson() const {
  ordered_json j;
  j["mode"] = SearchModeName(mode);
  j["n_flips"] = n_flips;
  j["aggregation"] = AggregationName(aggregation);
  j["grad_low"] = grad_low;
  j["grad_up"] = grad_up;
  j["scale_gradient"] = scale_gradient;
  j["search_max_len"] = search_max_len;
  j["search_temperature"] = search_temperature;
  j["rng_seed"] = rng_seed;
  return j;
}

AttackConfig AttackConfig::FromJson(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kInvalidConfig, "attack config must be an object");
  AttackConfig c;
  const std::map<std::string, std::function<void(const json&)>> setters = {
      {"mode", [&](const json& v) { c.mode = ParseSearchMode(v.get<std::string>()); }},
      {"n_flips", [&](const json& v) { c.n_flips = v.get<std::size_t>(); }},
      {"aggregation", [&](const json& v) { c.aggregation = ParseAggregation(v.get<std::string>()); }},
      {"grad_low", [&](const json& v) { c.grad_low = v.get<double>(); }},
      {"grad_up", [&](const json& v) { c.grad_up = v.get<double>(); }},
      {"scale_gradient", [&](const json& v) { c.scale_gradient = v.get<bool>(); }},
      {"search_max_len", [&](const json& v) { c.search_max_len = v.get<std::size_t>(); }},
      {"search_temperature", [&](const json& v) { c.search_temperature = v.get<double>(); }},
      {"rng_seed", [&](const json& v) { c.rng_seed = v.get<std::uint64_t>(); }},
  };
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) {
      throw Error(ErrorCode::kInvalidConfig, "unknown attack config key '" + key + "'");
    }
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kInvalidConfig, "attack config key '" + key + "': " + e.what());
    }
  }
  return c;
}

std::string HexWord(BitWord word, FormatKind format) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), format == FormatKind::kInt8 ? "0x%02x" : "0x%04x",
                static_cast<unsigned>(word.bits));
  return buf;
}

ordered_json AttackReport::ToJson() const {
  ordered_json j;
  j["config"] = config.ToJson();
  j["format"] = FormatKindName(format);
  j["search_prompt_ids"] = search_prompt_ids;
  j["initial_loss"] = initial_loss;
  j["round_losses"] = round_losses;
  j["final_loss"] = final_loss;
  j["total_bit_flips"] = total_bit_flips();
  ordered_json flips_json = ordered_json::array();
  for (const FlipRecord& f : flips) {
    ordered_json r;
    r["round"] = f.round;
    r["dim"] = f.dim;
    r["bit"] = f.bit;
    r["word_before"] = HexWord(f.word_before, format);
    r["word_after"] = HexWord(f.word_after, format);
    r["fp_before"] = f.fp_before;
    r["fp_after"] = f.fp_after;
    r["target_fp"] = f.target_fp;
    r["reverts_previous"] = f.reverts_previous;
    flips_json.push_back(std::move(r));
  }
  j["flips"] = std::move(flips_json);
  ordered_json skipped_json = ordered_json::array();
  for (const SkippedDim& s : skipped) {
    skipped_json.push_back({{"round", s.round}, {"dim", s.dim}, {"reason", s.reason}});
  }
  j["skipped"] = std::move(skipped_json);
  j["aborted"] = aborted ? ordered_json(*aborted) : ordered_json(nullptr);
  return j;
}

std::pair<std::size_t, std::size_t> AggregationWindow(std::size_t steps,
                                                      Aggregation aggregation) {
  if (steps == 0) return {0, 0};
  switch (aggregation) {
    case Aggregation::kFull:
      return {0, steps};
    case Aggregation::kLatterHalf:
      return {std::min((steps + 1) / 2, steps - 1), steps};
    case Aggregation::kLast:
      return {steps - 1, steps};
  }
  return {0, steps};
}

double EosLoss(const GenerationTrace& trace, Aggregation aggregation) {
  const auto [begin, end] = AggregationWindow(trace.steps(), aggregation);
  double loss = 0.0;
  for (std::size_t i = begin; i < end; ++i) loss += trace.eos_probs[i];
  return loss;
}

double AccumulateTraceGradient(const GenerationTrace& trace,
                               Aggregation aggregation,
                               std::span<double> gradient) {
  const auto [begin, end] = AggregationWindow(trace.steps(), aggregation);
  double loss = 0.0;
  for (std::size_t i = begin; i < end; ++i) {
    const double p = trace.eos_probs[i];
    const double w = p * (1.0 - p);
    loss += p;
    const std::vector<float>& h = trace.hidden_states[i];
    for (std::size_t j = 0; j < gradient.size(); ++j) {
      gradient[j] += w * static_cast<double>(h[j]);
    }
  }
  return loss;
}

EpochGradient ComputeEpochGradient(const TinyLmModel& model,
                                   const PromptCorpus& search_prompts,
                                   const AttackConfig& config) {
  if (search_prompts.entries.empty()) {
    throw Error(ErrorCode::kEmptyCorpus, "at least one search prompt is required");
  }
  const std::size_t d = model.config().d_model;
  DecodeOptions opts;
  opts.max_len = config.EffectiveSearchMaxLen(model.config());
  opts.temperature = config.search_temperature;
  opts.seed = config.rng_seed;

  struct PromptContribution {
    std::vector<double> gradient;
    double loss = 0.0;
    std::size_t length = 0;
  };
  const auto parts = internal::ParallelMap(
      search_prompts.entries.size(), [&](std::size_t k) {
        const GenerationTrace trace =
            Generate(model, search_prompts.entries[k].tokens, opts);
        PromptContribution c;
        c.gradient.assign(d, 0.0);
        c.length = trace.steps();
        c.loss = AccumulateTraceGradient(trace, config.aggregation, c.gradient);
        return c;
      });

  EpochGradient out;
  out.gradient.assign(d, 0.0);
  for (const PromptContribution& c : parts) {
    for (std::size_t j = 0; j < d; ++j) out.gradient[j] += c.gradient[j];
    out.loss += c.loss;
    out.lengths.push_back(c.length);
  }
  return out;
}

std::vector<double> EosRowGradient(const TinyLmModel& model,
                                   const PromptCorpus& search_prompts,
                                   const AttackConfig& config) {
  EpochGradient epoch = ComputeEpochGradient(model, search_prompts, config);
  if (Norm(epoch.gradient) == 0.0) {
    throw Error(ErrorCode::kZeroGradient, "EOS-row gradient is zero");
  }
  return std::move(epoch.gradient);
}

std::vector<double> ScaleGradient(std::span<const double> gradient, double low,
                                  double up) {
  const double norm = Norm(gradient);
  if (norm == 0.0) throw Error(ErrorCode::kZeroGradient, "cannot rescale a zero gradient");
  double factor = 1.0;
  if (norm > up) {
    factor = up / norm;
  } else if (norm < low) {
    factor = low / norm;
  }
  std::vector<double> out(gradient.begin(), gradient.end());
  if (factor != 1.0) {
    for (double& v : out) v *= factor;
  }
  return out;
}

std::vector<std::size_t> SelectWeights(std::span<const double> gradient,
                                       std::size_t n) {
  std::vector<std::size_t> order(gradient.size());
  std::iota(order.begin(), order.end(), 0);
  n = std::min(n, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n),
                    order.end(), [&](std::size_t a, std::size_t b) {
                      const double ma = std::fabs(gradient[a]);
                      const double mb = std::fabs(gradient[b]);
                      return ma != mb ? ma > mb : a < b;
                    });
  order.resize(n);
  return order;
}

std::vector<double> TargetRow(std::span<const double> current,
                              std::span<const double> scaled_gradient) {
  if (current.size() != scaled_gradient.size()) {
    throw Error(ErrorCode::kShapeMismatch, "row and gradient sizes differ");
  }
  std::vector<double> target(current.size());
  for (std::size_t j = 0; j < current.size(); ++j) {
    target[j] = current[j] - scaled_gradient[j];
  }
  return target;
}

AttackReport RunOneShot(TinyLmModel& model, const PromptCorpus& search_prompts,
                        const AttackConfig& config) {
  config.Validate(model.config());
  AttackReport report;
  report.config = config;
  report.format = model.output_embedding().format().kind();
  report.search_prompt_ids = PromptIds(search_prompts);

  const EpochGradient epoch = ComputeEpochGradient(model, search_prompts, config);
  report.initial_loss = epoch.loss;
  report.round_losses.push_back(epoch.loss);
  const std::vector<double> g = PrepareGradient(epoch.gradient, config);
  const Token eos = model.config().eos_id;
  const std::vector<double> current(model.head_row(eos).begin(),
                                    model.head_row(eos).end());
  const std::vector<double> target = TargetRow(current, g);

  // Walk the full ranking so a skipped dim is replaced by the next one.
  for (const std::size_t dim : SelectWeights(g, g.size())) {
    if (report.flips.size() == config.n_flips) break;
    try {
      report.flips.push_back(FlipOne(model, 1, dim, target[dim]));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNoFiniteCandidate) throw;
      report.skipped.push_back({1, dim, e.what()});
    }
  }
  report.final_loss = SearchLoss(model, search_prompts, config);
  return report;
}

AttackReport RunProgressive(TinyLmModel& model,
                            const PromptCorpus& search_prompts,
                            const AttackConfig& config) {
  config.Validate(model.config());
  AttackReport report;
  report.config = config;
  report.format = model.output_embedding().format().kind();
  report.search_prompt_ids = PromptIds(search_prompts);
  const Token eos = model.config().eos_id;
  // Bits currently flipped relative to the pre-attack words.
  std::set<std::pair<std::size_t, int>> flipped;

  double last_loss = 0.0;
  for (std::size_t round = 1; round <= config.n_flips; ++round) {
    const EpochGradient epoch = ComputeEpochGradient(model, search_prompts, config);
    if (round == 1) report.initial_loss = epoch.loss;
    report.round_losses.push_back(epoch.loss);
    last_loss = epoch.loss;
    std::vector<double> g;
    try {
      g = PrepareGradient(epoch.gradient, config);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kZeroGradient) throw;
      report.aborted = "round " + std::to_string(round) + ": " + e.what();
      break;
    }
    const std::vector<double> current(model.head_row(eos).begin(),
                                      model.head_row(eos).end());
    const std::vector<double> target = TargetRow(current, g);
    bool done = false;
    for (const std::size_t dim : SelectWeights(g, g.size())) {
      try {
        FlipRecord rec = FlipOne(model, round, dim, target[dim]);
        const auto key = std::make_pair(dim, rec.bit);
        rec.reverts_previous = flipped.erase(key) > 0;
        if (!rec.reverts_previous) flipped.insert(key);
        report.flips.push_back(rec);
        done = true;
        break;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kNoFiniteCandidate) throw;
        report.skipped.push_back({round, dim, e.what()});
      }
    }
    if (!done) {
      report.aborted = "round " + std::to_string(round) + ": no flippable dimension";
      break;
    }
  }
  report.final_loss = report.aborted && report.flips.empty()
                          ? last_loss
                          : SearchLoss(model, search_prompts, config);
  return report;
}

AttackReport RunAttack(TinyLmModel& model, const PromptCorpus& search_prompts,
                       const AttackConfig& config) {
  return config.mode == SearchMode::kOneShot
             ? RunOneShot(model, search_prompts, config)
             : RunProgressive(model, search_prompts, config);
}

void ApplyFlips(TinyLmModel& model, std::span<const FlipRecord> flips) {
  const Token eos = model.config().eos_id;
  const NumericFormat& format = model.output_embedding().format();
  for (const FlipRecord& f : flips) {
    const BitWord current = model.output_embedding().word(eos, f.dim);
    if (current != f.word_before) {
      throw Error(ErrorCode::kShapeMismatch,
                  "flip at dim " + std::to_string(f.dim) +
                      " does not match the model's current word");
    }
    model.set_output_word(eos, f.dim, FlipBit(current, f.bit, format));
  }
}

}  // namespace eosflip
