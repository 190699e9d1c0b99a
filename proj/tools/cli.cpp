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

#include "cli.hpp"

#include <bit>
#include <functional>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "eosflip/attack.hpp"
#include "eosflip/error.hpp"
#include "eosflip/eval.hpp"
#include "eosflip/fixture.hpp"
#include "eosflip/model_io.hpp"
#include "eosflip/rng.hpp"

namespace eosflip::cli {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

enum class Kind { kString, kUInt, kDouble, kBool, kObject };

// One configurable setting. Every setting may come from the JSON config
// file under `key`; those with a flag may also be set on the command line,
// which wins over the file.
struct KeySpec {
  std::string key;
  std::string flag;
  Kind kind;
  ordered_json fallback;  // null: no default
  bool required = false;
  std::string help;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<KeySpec> keys;
  std::function<void(const ordered_json&)> run;
};

[[noreturn]] void Invalid(const std::string& what) {
  throw Error(ErrorCode::kInvalidConfig, what);
}

bool TypeMatches(const json& v, Kind kind) {
  switch (kind) {
    case Kind::kString: return v.is_string();
    case Kind::kUInt: return v.is_number_unsigned();
    case Kind::kDouble: return v.is_number();
    case Kind::kBool: return v.is_boolean();
    case Kind::kObject: return v.is_object();
  }
  return false;
}

ordered_json FromFlag(const KeySpec& spec, const std::string& text) {
  auto bad = [&]() -> ordered_json {
    Invalid(spec.flag + ": cannot parse '" + text + "'");
  };
  std::size_t used = 0;
  try {
    switch (spec.kind) {
      case Kind::kString:
        return text;
      case Kind::kUInt: {
        if (text.empty() || text[0] == '-') return bad();
        const unsigned long long v = std::stoull(text, &used);
        return used == text.size() ? ordered_json(static_cast<std::uint64_t>(v)) : bad();
      }
      case Kind::kDouble: {
        const double v = std::stod(text, &used);
        return used == text.size() ? ordered_json(v) : bad();
      }
      case Kind::kBool:
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        return bad();
      case Kind::kObject:
        return ordered_json::parse(text);
    }
  } catch (const std::logic_error&) {
    return bad();
  }
  return bad();
}

ordered_json Resolve(const Command& cmd, const std::string& config_path,
                     const std::map<std::string, std::string>& flags) {
  ordered_json resolved = ordered_json::object();
  for (const KeySpec& k : cmd.keys) {
    if (!k.fallback.is_null()) resolved[k.key] = k.fallback;
  }
  if (!config_path.empty()) {
    const auto bytes = ReadFileBytes(config_path);
    json file;
    try {
      file = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
      Invalid(config_path + ": " + e.what());
    }
    if (!file.is_object()) Invalid(config_path + ": config must be a JSON object");
    for (const auto& [key, value] : file.items()) {
      const auto it = std::find_if(cmd.keys.begin(), cmd.keys.end(),
                                   [&](const KeySpec& k) { return k.key == key; });
      if (it == cmd.keys.end()) {
        Invalid(config_path + ": unknown key '" + key + "' for " + cmd.name);
      }
      if (!TypeMatches(value, it->kind)) {
        Invalid(config_path + ": key '" + key + "' has the wrong type");
      }
      resolved[key] = value;
    }
  }
  for (const KeySpec& k : cmd.keys) {
    const auto it = flags.find(k.key);
    if (it != flags.end()) resolved[k.key] = FromFlag(k, it->second);
  }
  for (const KeySpec& k : cmd.keys) {
    if (k.required && (!resolved.contains(k.key) ||
                       (resolved[k.key].is_string() &&
                        resolved[k.key].get<std::string>().empty()))) {
      Invalid(cmd.name + ": '" + k.key + "' is required (" +
              (k.flag.empty() ? "config file" : k.flag) + ")");
    }
  }
  // Canonical key order, so a replayed config resolves to identical bytes.
  ordered_json ordered = ordered_json::object();
  for (const KeySpec& k : cmd.keys) {
    if (resolved.contains(k.key)) ordered[k.key] = resolved[k.key];
  }
  return ordered;
}

std::string Str(const ordered_json& r, const char* key) {
  return r.contains(key) ? r.at(key).get<std::string>() : std::string();
}
std::uint64_t UInt(const ordered_json& r, const char* key) {
  return r.at(key).get<std::uint64_t>();
}
double Real(const ordered_json& r, const char* key) { return r.at(key).get<double>(); }

void WriteJsonValidated(const std::string& path, const ordered_json& j) {
  const std::string text = j.dump(2) + "\n";
  WriteTextFile(path, text);
  const auto back = ReadFileBytes(path);
  if (std::string(back.begin(), back.end()) != text ||
      !json::accept(back.begin(), back.end())) {
    throw Error(ErrorCode::kIo, "validation of " + path + " failed");
  }
}

void WriteTextValidated(const std::string& path, const std::string& text) {
  WriteTextFile(path, text);
  const auto back = ReadFileBytes(path);
  if (std::string(back.begin(), back.end()) != text) {
    throw Error(ErrorCode::kIo, "validation of " + path + " failed");
  }
}

void SaveModelValidated(const TinyLmModel& model, const std::string& path) {
  SaveModel(model, path);
  if (!(LoadModel(path) == model)) {
    throw Error(ErrorCode::kIo, "validation of " + path + " failed");
  }
}

std::size_t ResolveMaxLen(const ordered_json& r, const TinyLmModel& model) {
  const std::size_t v = UInt(r, "max_len");
  return v == 0 ? model.config().max_len : v;
}

std::size_t BitDistance(const TinyLmModel& a, const TinyLmModel& b) {
  const auto wa = a.output_embedding().words();
  const auto wb = b.output_embedding().words();
  if (wa.size() != wb.size()) {
    throw Error(ErrorCode::kShapeMismatch, "models have different output shapes");
  }
  std::size_t bits = 0;
  for (std::size_t i = 0; i < wa.size(); ++i) {
    bits += static_cast<std::size_t>(std::popcount(
        static_cast<unsigned>(wa[i].bits ^ wb[i].bits)));
  }
  return bits;
}

// ---- subcommands ----------------------------------------------------------

void RunFixture(const ordered_json& r) {
  json model_config = r.at("model_config");
  const std::uint64_t seed = UInt(r, "seed");
  if (r.contains("max_len")) model_config["max_len"] = UInt(r, "max_len");
  if (!model_config.contains("context_len")) {
    model_config["context_len"] = model_config.value("max_len", std::uint64_t{128}) + 64;
  }
  if (!model_config.contains("rng_seed")) model_config["rng_seed"] = seed;
  const TinyLmConfig cfg = ConfigFromJson(model_config);
  const FormatKind format = ParseFormatKind(Str(r, "format"));
  const std::size_t lo = UInt(r, "lo");
  const std::size_t hi = UInt(r, "hi");
  if (lo > hi) Invalid("fixture: lo must be <= hi");

  const Fixture fixture = BuildFixture(cfg, seed, lo, hi, format);
  const std::string out = Str(r, "out");
  SaveModelValidated(fixture.model, out);

  std::string report_path = Str(r, "report");
  if (report_path.empty()) report_path = out + ".probe.json";
  ordered_json report;
  report["run_config"] = r;
  report["model_config"] = ConfigToJson(cfg);
  report["format"] = FormatKindName(format);
  report["scale"] = fixture.model.output_embedding().format().scale();
  report["probe"] = fixture.report.ToJson();
  WriteJsonValidated(report_path, report);

  const std::string prompts_out = Str(r, "prompts_out");
  if (!prompts_out.empty()) {
    const PromptCorpus corpus =
        SynthesizePrompts(UInt(r, "n_prompts"), UInt(r, "prompt_seed"), cfg,
                          UInt(r, "prompt_min_len"), UInt(r, "prompt_max_len"));
    WriteTextValidated(prompts_out, FormatPrompts(corpus));
  }
  std::cout << "fixture: alpha=" << fixture.report.alpha
            << " median_length=" << fixture.report.median_length
            << " -> " << out << "\n";
}

void RunAttackCmd(const ordered_json& r) {
  TinyLmModel model = LoadModel(Str(r, "model"));
  const PromptCorpus corpus = LoadPrompts(Str(r, "prompts"), model.config().vocab_size);
  const auto [search, rest] = SplitCorpus(corpus, UInt(r, "n_search"));
  if (search.entries.empty()) Invalid("attack: n_search must be >= 1");

  AttackConfig cfg;
  cfg.mode = ParseSearchMode(Str(r, "mode"));
  cfg.n_flips = UInt(r, "n_flips");
  cfg.aggregation = ParseAggregation(Str(r, "aggregation"));
  cfg.grad_low = Real(r, "grad_low");
  cfg.grad_up = Real(r, "grad_up");
  cfg.scale_gradient = r.at("scale_gradient").get<bool>();
  cfg.search_max_len = UInt(r, "max_len");
  cfg.search_temperature = Real(r, "temperature");
  cfg.rng_seed = UInt(r, "seed");
  cfg.Validate(model.config());

  const AttackReport report = RunAttack(model, search, cfg);
  const std::string out = Str(r, "out");
  SaveModelValidated(model, out);
  std::string report_path = Str(r, "report");
  if (report_path.empty()) report_path = out + ".report.json";
  ordered_json j;
  j["run_config"] = r;
  j["attack"] = report.ToJson();
  WriteJsonValidated(report_path, j);
  std::cout << "attack: " << report.total_bit_flips() << " bit flips, loss "
            << report.initial_loss << " -> " << report.final_loss << " -> "
            << out << "\n";
}

void RunEvalCmd(const ordered_json& r) {
  const TinyLmModel before = LoadModel(Str(r, "model"));
  const std::string attacked_path = Str(r, "attacked");
  const TinyLmModel after = attacked_path.empty() ? before : LoadModel(attacked_path);
  const PromptCorpus corpus = LoadPrompts(Str(r, "prompts"), before.config().vocab_size);
  const PromptCorpus eval_prompts = SplitCorpus(corpus, UInt(r, "n_search")).second;

  EvalOptions opts;
  opts.max_len = ResolveMaxLen(r, before);
  opts.temperature = Real(r, "temperature");
  opts.seed = UInt(r, "seed");
  const Metrics m = CompareRuns(Evaluate(before, eval_prompts, opts),
                                Evaluate(after, eval_prompts, opts),
                                BitDistance(before, after));
  ordered_json j;
  j["run_config"] = r;
  j["metrics"] = m.ToJson();
  WriteJsonValidated(Str(r, "out"), j);
  const std::string csv = Str(r, "csv");
  if (!csv.empty()) WriteTextValidated(csv, m.ToCsv());
  std::cout << "eval: AvgLen " << m.avg_len_ori << " -> " << m.avg_len_attack
            << ", MaxRate " << m.max_rate_ori << " -> " << m.max_rate
            << ", #BitFlip " << m.n_bit_flips << "\n";
}

void RunDefendCmd(const ordered_json& r) {
  const TinyLmModel model = LoadModel(Str(r, "model"));
  const TinyLmModel reference = LoadModel(Str(r, "reference"));
  const auto [lo, hi] = ReferenceBounds(reference);
  const TinyLmModel defended = DefendWeightReconstruction(model, lo, hi);
  SaveModelValidated(defended, Str(r, "out"));
  std::cout << "defend: clipped W_o into [" << lo << ", " << hi << "] -> "
            << Str(r, "out") << "\n";
}

void RunCosineCmd(const ordered_json& r) {
  const TinyLmModel before = LoadModel(Str(r, "model"));
  const TinyLmModel after = LoadModel(Str(r, "attacked"));
  const PromptCorpus corpus = LoadPrompts(Str(r, "prompts"), before.config().vocab_size);
  const std::string wanted = Str(r, "prompt_id");
  const PromptEntry* prompt = nullptr;
  if (wanted.empty()) {
    const std::size_t n_search = UInt(r, "n_search");
    if (n_search >= corpus.entries.size()) Invalid("cosine: no evaluation prompt left");
    prompt = &corpus.entries[n_search];
  } else {
    for (const PromptEntry& e : corpus.entries) {
      if (e.id == wanted) prompt = &e;
    }
    if (!prompt) Invalid("cosine: no prompt with id '" + wanted + "'");
  }
  const CosineTrace trace =
      ComputeCosineTrace(before, after, prompt->tokens, ResolveMaxLen(r, before));
  WriteTextValidated(Str(r, "out"), trace.ToCsv());
  std::cout << "cosine: " << trace.before.size() << " / " << trace.after.size()
            << " steps for prompt " << prompt->id << "\n";
}

std::vector<Command> Commands() {
  const ordered_json none;
  std::vector<Command> cmds;
  cmds.push_back(
      {"fixture",
       "Build a calibrated synthetic victim model",
       {{"model_config", "", Kind::kObject, ordered_json::object(), false,
         "model hyperparameters (config file only)"},
        {"seed", "--seed", Kind::kUInt, 42, false, "initialisation seed"},
        {"format", "--format", Kind::kString, "int8", false, "int8 or fp16"},
        {"max_len", "--max-len", Kind::kUInt, none, false, "maximum generation length"},
        {"lo", "--lo", Kind::kUInt, 8, false, "lower bound of the median baseline length"},
        {"hi", "--hi", Kind::kUInt, 32, false, "upper bound of the median baseline length"},
        {"out", "--out", Kind::kString, none, true, "output model file"},
        {"report", "--report", Kind::kString, "", false, "probe report (default <out>.probe.json)"},
        {"prompts_out", "--prompts-out", Kind::kString, "", false, "also write a prompt corpus"},
        {"n_prompts", "--n-prompts", Kind::kUInt, 104, false, "corpus size"},
        {"prompt_seed", "--prompt-seed", Kind::kUInt, 7, false, "corpus seed"},
        {"prompt_min_len", "", Kind::kUInt, 4, false, ""},
        {"prompt_max_len", "", Kind::kUInt, 12, false, ""}},
       RunFixture});
  cmds.push_back(
      {"attack",
       "Search and apply EOS-row bit flips",
       {{"model", "--model", Kind::kString, none, true, "victim model file"},
        {"prompts", "--prompts", Kind::kString, none, true, "prompt corpus (JSONL)"},
        {"n_search", "--n-search", Kind::kUInt, 4, false, "leading prompts used for search"},
        {"out", "--out", Kind::kString, none, true, "attacked model file"},
        {"report", "--report", Kind::kString, "", false, "attack report (default <out>.report.json)"},
        {"mode", "--mode", Kind::kString, "one-shot", false, "one-shot or progressive"},
        {"n_flips", "--n-flips", Kind::kUInt, 3, false, "bit flip budget"},
        {"aggregation", "--aggregation", Kind::kString, "full", false, "full, latter-half or last"},
        {"grad_low", "--grad-low", Kind::kDouble, 1e-3, false, "lower gradient norm bound"},
        {"grad_up", "--grad-up", Kind::kDouble, 1.0, false, "upper gradient norm bound"},
        {"scale_gradient", "--scale-gradient", Kind::kBool, true, false, "true or false"},
        {"max_len", "--max-len", Kind::kUInt, 0, false, "search decoding cap (0: model max_len)"},
        {"temperature", "--temperature", Kind::kDouble, 0.0, false, "search decoding temperature"},
        {"seed", "--seed", Kind::kUInt, 0, false, "sampling seed"}},
       RunAttackCmd});
  cmds.push_back(
      {"eval",
       "Measure AvgLen / MaxRate before and after an attack",
       {{"model", "--model", Kind::kString, none, true, "original model file"},
        {"attacked", "--attacked", Kind::kString, "", false, "attacked model (default: --model)"},
        {"prompts", "--prompts", Kind::kString, none, true, "prompt corpus (JSONL)"},
        {"n_search", "--n-search", Kind::kUInt, 4, false, "leading prompts to skip"},
        {"max_len", "--max-len", Kind::kUInt, 0, false, "generation cap (0: model max_len)"},
        {"temperature", "--temperature", Kind::kDouble, 0.0, false, "decoding temperature"},
        {"seed", "--seed", Kind::kUInt, 0, false, "sampling seed"},
        {"out", "--out", Kind::kString, none, true, "metrics JSON"},
        {"csv", "--csv", Kind::kString, "", false, "per-prompt CSV"}},
       RunEvalCmd});
  cmds.push_back(
      {"defend",
       "Clip W_o into the reference model's value range",
       {{"model", "--model", Kind::kString, none, true, "model to defend"},
        {"reference", "--reference", Kind::kString, none, true, "pre-attack model"},
        {"out", "--out", Kind::kString, none, true, "defended model file"}},
       RunDefendCmd});
  cmds.push_back(
      {"cosine",
       "Per-step cosine between W_o[eos] and h, before and after",
       {{"model", "--model", Kind::kString, none, true, "original model file"},
        {"attacked", "--attacked", Kind::kString, none, true, "attacked model file"},
        {"prompts", "--prompts", Kind::kString, none, true, "prompt corpus (JSONL)"},
        {"prompt_id", "--prompt-id", Kind::kString, "", false, "prompt to trace"},
        {"n_search", "--n-search", Kind::kUInt, 4, false, "default prompt is the first after these"},
        {"max_len", "--max-len", Kind::kUInt, 0, false, "generation cap (0: model max_len)"},
        {"out", "--out", Kind::kString, none, true, "CSV output"}},
       RunCosineCmd});
  return cmds;
}

}  // namespace

int Run(const std::vector<std::string>& args) {
  const std::vector<Command> commands = Commands();
  CLI::App app{"Bit-flip inference-cost attack simulator"};
  app.require_subcommand(1);

  struct Bound {
    CLI::App* sub = nullptr;
    std::string config;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
    CLI::Option* no_scaling = nullptr;
  };
  std::vector<Bound> bound(commands.size());
  for (std::size_t i = 0; i < commands.size(); ++i) {
    const Command& cmd = commands[i];
    Bound& b = bound[i];
    b.sub = app.add_subcommand(cmd.name, cmd.help);
    b.sub->add_option("--config", b.config, "JSON config file (flags override it)");
    for (const KeySpec& k : cmd.keys) {
      if (k.flag.empty()) continue;
      b.options[k.key] = b.sub->add_option(k.flag, b.values[k.key], k.help);
    }
    if (cmd.name == "attack") {
      b.no_scaling = b.sub->add_flag("--no-scaling", "same as --scale-gradient false");
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorCode::kInvalidConfig);
  }

  for (std::size_t i = 0; i < commands.size(); ++i) {
    Bound& b = bound[i];
    if (!b.sub->parsed()) continue;
    try {
      std::map<std::string, std::string> given;
      for (const auto& [key, opt] : b.options) {
        if (opt->count() > 0) given[key] = b.values[key];
      }
      if (b.no_scaling && b.no_scaling->count() > 0) given["scale_gradient"] = "false";
      const ordered_json resolved = Resolve(commands[i], b.config, given);
      commands[i].run(resolved);
      return 0;
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return static_cast<int>(e.code());
    } catch (const json::exception& e) {
      std::cerr << "error: InvalidConfig: " << e.what() << "\n";
      return static_cast<int>(ErrorCode::kInvalidConfig);
    }
  }
  return static_cast<int>(ErrorCode::kInvalidConfig);
}

}  // namespace eosflip::cli
