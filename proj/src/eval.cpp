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

#include "eosflip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "eosflip/error.hpp"
#include "parallel.hpp"

namespace eosflip {
namespace {

using nlohmann::ordered_json;

double Cosine(std::span<const double> row, std::span<const float> h) {
  double dot = 0.0, row_sq = 0.0, h_sq = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double hv = static_cast<double>(h[j]);
    dot += row[j] * hv;
    row_sq += row[j] * row[j];
    h_sq += hv * hv;
  }
  if (row_sq == 0.0 || h_sq == 0.0) {
    throw Error(ErrorCode::kZeroVector, "cosine of a zero vector");
  }
  return std::clamp(dot / (std::sqrt(row_sq) * std::sqrt(h_sq)), -1.0, 1.0);
}

// One representable step of `word` toward +inf (up) or -inf (down).
BitWord Nudge(BitWord word, const NumericFormat& format, bool up) {
  if (format.kind() == FormatKind::kInt8) {
    const int q = Int8Value(word);
    return Int8Word(up ? std::min(q + 1, 127) : std::max(q - 1, -128));
  }
  const bool negative = (word.bits & 0x8000) != 0;
  const std::uint16_t magnitude = word.bits & 0x7FFF;
  if (magnitude == 0) return BitWord{static_cast<std::uint16_t>(up ? 0x0001 : 0x8001)};
  const bool grow = up != negative;
  return BitWord{static_cast<std::uint16_t>(grow ? word.bits + 1 : word.bits - 1)};
}

std::string FormatDouble(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void Aggregate(EvalRun& run) {
  std::size_t n = 0, total = 0, at_max = 0;
  run.partial = false;
  for (const PromptOutcome& o : run.outcomes) {
    if (o.error) {
      run.partial = true;
      continue;
    }
    ++n;
    total += o.length;
    if (o.reached_max) ++at_max;
  }
  run.avg_len = n == 0 ? 0.0 : static_cast<double>(total) / static_cast<double>(n);
  run.max_rate = n == 0 ? 0.0 : static_cast<double>(at_max) / static_cast<double>(n);
}

EvalRun Evaluate(const TinyLmModel& model, const PromptCorpus& prompts,
                 const EvalOptions& options) {
  if (prompts.entries.empty()) throw Error(ErrorCode::kEmptyCorpus, "no evaluation prompts");
  DecodeOptions decode;
  decode.max_len = options.max_len;
  decode.temperature = options.temperature;
  decode.seed = options.seed;

  EvalRun run;
  run.max_len = options.max_len;
  run.temperature = options.temperature;
  run.outcomes = internal::ParallelMap(prompts.entries.size(), [&](std::size_t k) {
    const PromptEntry& p = prompts.entries[k];
    PromptOutcome o;
    o.id = p.id;
    try {
      const GenerationTrace trace = Generate(model, p.tokens, decode);
      o.length = trace.steps();
      o.terminated_by = trace.terminated_by;
      o.reached_max = trace.terminated_by == Termination::kMaxLen &&
                      trace.steps() == options.max_len;
    } catch (const Error& e) {
      if (!options.allow_partial) throw;
      o.error = e.what();
    }
    return o;
  });
  Aggregate(run);
  return run;
}

Metrics CompareRuns(const EvalRun& before, const EvalRun& after,
                    std::size_t n_bit_flips) {
  if (before.outcomes.size() != after.outcomes.size()) {
    throw Error(ErrorCode::kShapeMismatch, "evaluation runs cover different prompts");
  }
  Metrics m;
  m.avg_len_ori = before.avg_len;
  m.avg_len_attack = after.avg_len;
  m.max_rate_ori = before.max_rate;
  m.max_rate = after.max_rate;
  m.n_bit_flips = n_bit_flips;
  m.max_len = after.max_len;
  m.temperature = after.temperature;
  m.partial = before.partial || after.partial;
  for (std::size_t i = 0; i < before.outcomes.size(); ++i) {
    if (before.outcomes[i].id != after.outcomes[i].id) {
      throw Error(ErrorCode::kShapeMismatch, "evaluation runs cover different prompts");
    }
    m.ids.push_back(before.outcomes[i].id);
    m.lengths_ori.push_back(before.outcomes[i].length);
    m.lengths_attack.push_back(after.outcomes[i].length);
    m.reached_max_attack.push_back(after.outcomes[i].reached_max);
  }
  return m;
}

ordered_json Metrics::ToJson() const {
  ordered_json j;
  j["avg_len_ori"] = avg_len_ori;
  j["avg_len_attack"] = avg_len_attack;
  j["max_rate_ori"] = max_rate_ori;
  j["max_rate"] = max_rate;
  j["n_bit_flips"] = n_bit_flips;
  j["max_len"] = max_len;
  j["temperature"] = temperature;
  j["length_counts"] = "generated tokens, prompt excluded";
  j["partial"] = partial;
  ordered_json rows = ordered_json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    rows.push_back({{"id", ids[i]},
                    {"len_ori", lengths_ori[i]},
                    {"len_attack", lengths_attack[i]},
                    {"reached_max", static_cast<bool>(reached_max_attack[i])}});
  }
  j["prompts"] = std::move(rows);
  return j;
}

std::string Metrics::ToCsv() const {
  std::string out = "id,len_ori,len_attack,reached_max\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out += ids[i] + "," + std::to_string(lengths_ori[i]) + "," +
           std::to_string(lengths_attack[i]) + "," +
           (reached_max_attack[i] ? "1" : "0") + "\n";
  }
  return out;
}

std::string CosineTrace::ToCsv() const {
  std::string out = "step,cos_before,cos_after\n";
  const std::size_t n = std::max(before.size(), after.size());
  for (std::size_t i = 0; i < n; ++i) {
    out += std::to_string(i + 1) + ",";
    if (i < before.size()) out += FormatDouble(before[i]);
    out += ",";
    if (i < after.size()) out += FormatDouble(after[i]);
    out += "\n";
  }
  return out;
}

std::vector<double> CosineSeries(const TinyLmModel& model,
                                 const GenerationTrace& trace) {
  const auto row = model.head_row(model.config().eos_id);
  std::vector<double> out;
  out.reserve(trace.steps());
  for (const auto& h : trace.hidden_states) out.push_back(Cosine(row, h));
  return out;
}

CosineTrace ComputeCosineTrace(const TinyLmModel& before,
                               const TinyLmModel& after,
                               std::span<const Token> prompt,
                               std::size_t max_len) {
  DecodeOptions opts;
  opts.max_len = max_len;
  CosineTrace trace;
  trace.before = CosineSeries(before, Generate(before, prompt, opts));
  trace.after = CosineSeries(after, Generate(after, prompt, opts));
  return trace;
}

std::pair<double, double> ReferenceBounds(const TinyLmModel& model) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const double v : model.output_embedding().DecodeAll()) {
    if (std::isnan(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {lo, hi};
}

TinyLmModel DefendWeightReconstruction(const TinyLmModel& model,
                                       double reference_min,
                                       double reference_max) {
  if (!(reference_min <= reference_max)) {
    throw Error(ErrorCode::kInvalidConfig, "reference_min must be <= reference_max");
  }
  QuantizedTensor out = model.output_embedding();
  const NumericFormat format = out.format();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      const double v = out.value(r, c);
      if (v >= reference_min && v <= reference_max) continue;
      const double clamped =
          std::isnan(v) ? std::clamp(0.0, reference_min, reference_max)
                        : std::clamp(v, reference_min, reference_max);
      BitWord w = Encode(clamped, format);
      // Rounding may land one step outside a bound that is not exactly
      // representable; step back inside.
      for (int i = 0; i < 4 && Decode(w, format) > reference_max; ++i) {
        w = Nudge(w, format, false);
      }
      for (int i = 0; i < 4 && Decode(w, format) < reference_min; ++i) {
        w = Nudge(w, format, true);
      }
      out.set_word(r, c, w);
    }
  }
  TinyLmModel defended = model;
  defended.set_output_embedding(std::move(out));
  return defended;
}

}  // namespace eosflip
