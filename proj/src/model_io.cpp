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

#include "eosflip/model_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "eosflip/error.hpp"
#include "eosflip/rng.hpp"

namespace eosflip {
namespace {

static_assert(std::endian::native == std::endian::little,
              "model files are little-endian; big-endian hosts unsupported");

constexpr char kMagic[8] = {'E', 'O', 'S', 'F', 'L', 'I', 'P', '1'};
constexpr int kFileVersion = 1;

using nlohmann::json;
using nlohmann::ordered_json;

struct TensorRef {
  std::string name;
  std::string dtype;
  std::size_t rows;
  std::size_t cols;
  const std::vector<float>* data = nullptr;  // null for output_embedding
};

std::vector<TensorRef> TrunkTensors(const TinyLmConfig& c,
                                    const TrunkWeights& w) {
  const std::size_t d = c.d_model;
  std::vector<TensorRef> refs;
  refs.push_back({"token_embedding", "f32", c.vocab_size, d,
                  &w.token_embedding});
  refs.push_back({"position_embedding", "f32", c.context_len, d,
                  &w.position_embedding});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerWeights* lw = l < w.layers.size() ? &w.layers[l] : nullptr;
    const std::string p = "layers." + std::to_string(l) + ".";
    auto add = [&](const char* name, std::size_t rows, std::size_t cols,
                   const std::vector<float> LayerWeights::*member) {
      refs.push_back({p + name, "f32", rows, cols,
                      lw ? &(lw->*member) : nullptr});
    };
    add("ln1_gain", 1, d, &LayerWeights::ln1_gain);
    add("ln1_bias", 1, d, &LayerWeights::ln1_bias);
    add("wq", d, d, &LayerWeights::wq);
    add("wk", d, d, &LayerWeights::wk);
    add("wv", d, d, &LayerWeights::wv);
    add("w_attn_out", d, d, &LayerWeights::w_attn_out);
    add("ln2_gain", 1, d, &LayerWeights::ln2_gain);
    add("ln2_bias", 1, d, &LayerWeights::ln2_bias);
    add("w_up", c.d_ff, d, &LayerWeights::w_up);
    add("b_up", 1, c.d_ff, &LayerWeights::b_up);
    add("w_down", d, c.d_ff, &LayerWeights::w_down);
    add("b_down", 1, d, &LayerWeights::b_down);
  }
  refs.push_back({"final_gain", "f32", 1, d, &w.final_gain});
  refs.push_back({"final_bias", "f32", 1, d, &w.final_bias});
  return refs;
}

std::vector<float>& MutableTensor(TrunkWeights& w, const std::string& name) {
  if (name == "token_embedding") return w.token_embedding;
  if (name == "position_embedding") return w.position_embedding;
  if (name == "final_gain") return w.final_gain;
  if (name == "final_bias") return w.final_bias;
  // layers.<l>.<field>
  const std::size_t dot = name.find('.', 7);
  const std::size_t l = std::stoul(name.substr(7, dot - 7));
  const std::string field = name.substr(dot + 1);
  LayerWeights& lw = w.layers.at(l);
  static const std::map<std::string, std::vector<float> LayerWeights::*>
      kFields = {{"ln1_gain", &LayerWeights::ln1_gain},
                 {"ln1_bias", &LayerWeights::ln1_bias},
                 {"wq", &LayerWeights::wq},
                 {"wk", &LayerWeights::wk},
                 {"wv", &LayerWeights::wv},
                 {"w_attn_out", &LayerWeights::w_attn_out},
                 {"ln2_gain", &LayerWeights::ln2_gain},
                 {"ln2_bias", &LayerWeights::ln2_bias},
                 {"w_up", &LayerWeights::w_up},
                 {"b_up", &LayerWeights::b_up},
                 {"w_down", &LayerWeights::w_down},
                 {"b_down", &LayerWeights::b_down}};
  return lw.*kFields.at(field);
}

std::uint32_t Crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large payloads.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string Hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", v);
  return buf;
}

void PutU64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t GetU64(std::span<const std::uint8_t> in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return v;
}

[[noreturn]] void ShapeError(const std::string& what) {
  throw Error(ErrorCode::kShapeMismatch, what);
}

}  // namespace

ordered_json ConfigToJson(const TinyLmConfig& c) {
  ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["context_len"] = c.context_len;
  j["eos_id"] = c.eos_id;
  j["max_len"] = c.max_len;
  j["rng_seed"] = c.rng_seed;
  return j;
}

TinyLmConfig ConfigFromJson(const json& j) {
  if (!j.is_object()) {
    throw Error(ErrorCode::kInvalidConfig, "model config must be an object");
  }
  TinyLmConfig c;
  const std::map<std::string, std::function<void(const json&)>> setters = {
      {"vocab_size", [&](const json& v) { c.vocab_size = v.get<std::size_t>(); }},
      {"d_model", [&](const json& v) { c.d_model = v.get<std::size_t>(); }},
      {"n_layers", [&](const json& v) { c.n_layers = v.get<std::size_t>(); }},
      {"n_heads", [&](const json& v) { c.n_heads = v.get<std::size_t>(); }},
      {"d_ff", [&](const json& v) { c.d_ff = v.get<std::size_t>(); }},
      {"context_len", [&](const json& v) { c.context_len = v.get<std::size_t>(); }},
      {"eos_id", [&](const json& v) { c.eos_id = v.get<Token>(); }},
      {"max_len", [&](const json& v) { c.max_len = v.get<std::size_t>(); }},
      {"rng_seed", [&](const json& v) { c.rng_seed = v.get<std::uint64_t>(); }},
  };
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) {
      throw Error(ErrorCode::kInvalidConfig, "unknown model config key '" + key + "'");
    }
    if (!value.is_number_unsigned()) {
      throw Error(ErrorCode::kInvalidConfig,
                  "model config key '" + key + "' must be a non-negative integer");
    }
    it->second(value);
  }
  c.Validate();
  return c;
}

std::vector<std::uint8_t> SerializeModel(const TinyLmModel& model) {
  const TinyLmConfig& cfg = model.config();
  std::vector<std::uint8_t> payload;
  ordered_json tensors = ordered_json::array();
  for (const TensorRef& t : TrunkTensors(cfg, model.trunk())) {
    const std::size_t nbytes = t.data->size() * sizeof(float);
    tensors.push_back({{"name", t.name},
                       {"dtype", t.dtype},
                       {"shape", {t.rows, t.cols}},
                       {"offset", payload.size()},
                       {"nbytes", nbytes}});
    const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data->data());
    payload.insert(payload.end(), raw, raw + nbytes);
  }
  const QuantizedTensor& out = model.output_embedding();
  const std::vector<std::uint8_t> raw = out.RawBytes();
  tensors.push_back({{"name", "output_embedding"},
                     {"dtype", FormatKindName(out.format().kind())},
                     {"shape", {out.rows(), out.cols()}},
                     {"offset", payload.size()},
                     {"nbytes", raw.size()}});
  payload.insert(payload.end(), raw.begin(), raw.end());

  ordered_json manifest;
  manifest["file_version"] = kFileVersion;
  manifest["config"] = ConfigToJson(cfg);
  manifest["output_format"] = {
      {"kind", FormatKindName(out.format().kind())},
      {"scale", out.format().scale()}};
  manifest["tensors"] = std::move(tensors);
  manifest["payload_bytes"] = payload.size();
  manifest["payload_crc32"] = Hex32(Crc32(payload));
  const std::string text = manifest.dump(1);

  std::vector<std::uint8_t> bytes(kMagic, kMagic + sizeof(kMagic));
  PutU64(bytes, text.size());
  bytes.insert(bytes.end(), text.begin(), text.end());
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  return bytes;
}

TinyLmModel DeserializeModel(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::kIo, "not a model file (bad magic)");
  }
  const std::uint64_t manifest_len = GetU64(bytes.subspan(8, 8));
  if (manifest_len > bytes.size() - 16) {
    throw Error(ErrorCode::kIo, "truncated manifest");
  }
  const auto manifest_bytes = bytes.subspan(16, manifest_len);
  const auto payload = bytes.subspan(16 + manifest_len);
  json manifest;
  TinyLmConfig cfg;
  NumericFormat format = NumericFormat::Fp16();
  std::string format_tag;
  try {
    manifest = json::parse(manifest_bytes.begin(), manifest_bytes.end());
    if (manifest.at("file_version").get<int>() != kFileVersion) {
      throw Error(ErrorCode::kIo, "unsupported model file version");
    }
    cfg = ConfigFromJson(manifest.at("config"));
    if (manifest.at("payload_bytes").get<std::size_t>() != payload.size()) {
      ShapeError("manifest declares " +
                 manifest.at("payload_bytes").dump() + " payload bytes, file has " +
                 std::to_string(payload.size()));
    }
    if (manifest.at("payload_crc32").get<std::string>() !=
        Hex32(Crc32(payload))) {
      throw Error(ErrorCode::kChecksumMismatch, "payload CRC-32 differs");
    }
    format_tag = manifest.at("output_format").at("kind").get<std::string>();
    const FormatKind kind = ParseFormatKind(format_tag);
    format = kind == FormatKind::kInt8
                 ? NumericFormat::Int8(
                       manifest.at("output_format").at("scale").get<double>())
                 : NumericFormat::Fp16();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIo, std::string("malformed manifest: ") + e.what());
  }

  TrunkWeights trunk;
  trunk.layers.resize(cfg.n_layers);
  std::map<std::string, json> entries;
  for (const json& t : manifest.at("tensors")) {
    entries[t.at("name").get<std::string>()] = t;
  }
  auto locate = [&](const std::string& name, const std::string& dtype,
                    std::size_t rows, std::size_t cols,
                    std::size_t elem_bytes) {
    const auto it = entries.find(name);
    if (it == entries.end()) ShapeError("missing tensor " + name);
    const json& t = it->second;
    if (t.at("dtype").get<std::string>() != dtype) {
      if (name == "output_embedding") {
        throw Error(ErrorCode::kUnknownFormatTag,
                    "output_embedding dtype " + t.at("dtype").dump());
      }
      ShapeError(name + " has dtype " + t.at("dtype").dump());
    }
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t nbytes = t.at("nbytes").get<std::size_t>();
    if (shape != std::vector<std::size_t>{rows, cols} ||
        nbytes != rows * cols * elem_bytes || offset > payload.size() ||
        nbytes > payload.size() - offset) {
      ShapeError(name + " shape/extent does not match config or payload");
    }
    entries.erase(it);
    return payload.subspan(offset, nbytes);
  };
  try {
    for (const TensorRef& ref : TrunkTensors(cfg, trunk)) {
      const auto span = locate(ref.name, "f32", ref.rows, ref.cols, sizeof(float));
      std::vector<float>& dst = MutableTensor(trunk, ref.name);
      dst.resize(ref.rows * ref.cols);
      std::memcpy(dst.data(), span.data(), span.size());
    }
    const auto out_span = locate("output_embedding", format_tag, cfg.vocab_size,
                                 cfg.d_model, format.bit_width() / 8);
    if (!entries.empty()) ShapeError("unexpected tensor " + entries.begin()->first);
    return TinyLmModel(cfg, std::move(trunk),
                       QuantizedTensor::FromRawBytes(cfg.vocab_size, cfg.d_model,
                                                     format, out_span));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIo, std::string("malformed tensor entry: ") + e.what());
  }
}

std::vector<std::uint8_t> ReadFileBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void WriteFileBytes(const std::filesystem::path& path,
                    std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

void WriteTextFile(const std::filesystem::path& path, const std::string& text) {
  WriteFileBytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()),
                                 text.size()));
}

void SaveModel(const TinyLmModel& model, const std::filesystem::path& path) {
  WriteFileBytes(path, SerializeModel(model));
}

TinyLmModel LoadModel(const std::filesystem::path& path) {
  return DeserializeModel(ReadFileBytes(path));
}

PromptCorpus ParsePrompts(const std::string& text, std::size_t vocab_size) {
  PromptCorpus corpus;
  std::set<std::string> ids;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto malformed = [&](const std::string& why) {
      return Error(ErrorCode::kMalformedLine,
                   "line " + std::to_string(line_no) + ": " + why);
    };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw malformed(e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("tokens") ||
        !j["id"].is_string() || !j["tokens"].is_array() || j.size() != 2) {
      throw malformed("expected {\"id\": string, \"tokens\": [int]}");
    }
    PromptEntry entry;
    entry.id = j["id"].get<std::string>();
    for (const json& t : j["tokens"]) {
      if (!t.is_number_unsigned()) throw malformed("token must be a non-negative integer");
      const auto v = t.get<std::uint64_t>();
      if (vocab_size > 0 && v >= vocab_size) {
        throw malformed("token " + std::to_string(v) + " outside vocabulary");
      }
      entry.tokens.push_back(static_cast<Token>(v));
    }
    if (entry.tokens.empty()) throw malformed("empty token list");
    if (!ids.insert(entry.id).second) {
      throw Error(ErrorCode::kDuplicateId,
                  "line " + std::to_string(line_no) + ": id '" + entry.id + "'");
    }
    corpus.entries.push_back(std::move(entry));
  }
  if (corpus.entries.empty()) {
    throw Error(ErrorCode::kEmptyCorpus, "no prompts");
  }
  return corpus;
}

PromptCorpus LoadPrompts(const std::filesystem::path& path,
                         std::size_t vocab_size) {
  const auto bytes = ReadFileBytes(path);
  return ParsePrompts(std::string(bytes.begin(), bytes.end()), vocab_size);
}

std::string FormatPrompts(const PromptCorpus& corpus) {
  std::string out;
  for (const PromptEntry& e : corpus.entries) {
    ordered_json j;
    j["id"] = e.id;
    j["tokens"] = e.tokens;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void SavePrompts(const PromptCorpus& corpus, const std::filesystem::path& path) {
  WriteTextFile(path, FormatPrompts(corpus));
}

std::pair<PromptCorpus, PromptCorpus> SplitCorpus(const PromptCorpus& corpus,
                                                  std::size_t n_search) {
  if (n_search > corpus.entries.size()) {
    throw Error(ErrorCode::kInvalidConfig,
                "n_search " + std::to_string(n_search) + " exceeds corpus size " +
                    std::to_string(corpus.entries.size()));
  }
  std::pair<PromptCorpus, PromptCorpus> out;
  const auto mid = corpus.entries.begin() + static_cast<std::ptrdiff_t>(n_search);
  out.first.entries.assign(corpus.entries.begin(), mid);
  out.second.entries.assign(mid, corpus.entries.end());
  return out;
}

PromptCorpus SynthesizePrompts(std::size_t count, std::uint64_t seed,
                               const TinyLmConfig& config, std::size_t min_len,
                               std::size_t max_len,
                               const std::string& id_prefix) {
  if (min_len < 1 || max_len < min_len) {
    throw Error(ErrorCode::kInvalidConfig, "bad prompt length range");
  }
  Rng rng(seed);
  PromptCorpus corpus;
  for (std::size_t i = 0; i < count; ++i) {
    PromptEntry e;
    char id[32];
    std::snprintf(id, sizeof(id), "%04zu", i);
    e.id = id_prefix + id;
    const std::size_t len = rng.UniformInt(min_len, max_len);
    while (e.tokens.size() < len) {
      const auto t = static_cast<Token>(rng.UniformInt(0, config.vocab_size - 1));
      if (t != config.eos_id) e.tokens.push_back(t);
    }
    corpus.entries.push_back(std::move(e));
  }
  return corpus;
}

}  // namespace eosflip
