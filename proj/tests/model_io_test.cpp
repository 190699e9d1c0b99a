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

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "eosflip/error.hpp"
#include "eosflip/fixture.hpp"
#include "test_support.hpp"

namespace eosflip {
namespace {

using nlohmann::json;

ErrorCode CodeOf(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an eosflip::Error";
  return ErrorCode::kIo;
}

// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
std::uint32_t Crc32Oracle(const std::uint8_t* data, std::size_t n) {
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    crc ^= data[i];
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

struct SplitFile {
  json manifest;
  std::vector<std::uint8_t> payload;
};

SplitFile Split(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | bytes[8 + i];
  SplitFile f;
  f.manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + len);
  f.payload.assign(bytes.begin() + 16 + len, bytes.end());
  return f;
}

std::vector<std::uint8_t> Join(const SplitFile& f) {
  const std::string text = f.manifest.dump();
  std::vector<std::uint8_t> out = {'E', 'O', 'S', 'F', 'L', 'I', 'P', '1'};
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(text.size() >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

TEST(ModelFileTest, RoundTripIsBitIdentity) {
  for (const FormatKind kind : {FormatKind::kInt8, FormatKind::kFp16}) {
    const TinyLmModel& m = testing::SeedFixture(kind).model;
    const std::vector<std::uint8_t> bytes = SerializeModel(m);
    const TinyLmModel back = DeserializeModel(bytes);
    EXPECT_TRUE(back == m);
    EXPECT_TRUE(std::ranges::equal(back.output_embedding().words(), m.output_embedding().words()));
    EXPECT_EQ(back.output_embedding().format().scale(), m.output_embedding().format().scale());
    EXPECT_EQ(SerializeModel(back), bytes);

    testing::TempDir dir("io_roundtrip");
    SaveModel(m, dir / "m.bin");
    EXPECT_EQ(ReadFileBytes(dir / "m.bin"), bytes);
    EXPECT_TRUE(LoadModel(dir / "m.bin") == m);
  }
}

TEST(ModelFileTest, LayoutIsLittleEndianWithZlibCrc) {
  const TinyLmModel& m = testing::SeedFixture().model;
  const std::vector<std::uint8_t> bytes = SerializeModel(m);
  ASSERT_EQ(std::memcmp(bytes.data(), "EOSFLIP1", 8), 0);
  const SplitFile f = Split(bytes);
  EXPECT_EQ(f.manifest.at("payload_bytes").get<std::size_t>(), f.payload.size());
  char hex[9];
  std::snprintf(hex, sizeof hex, "%08x", Crc32Oracle(f.payload.data(), f.payload.size()));
  EXPECT_EQ(f.manifest.at("payload_crc32").get<std::string>(), hex);
  EXPECT_EQ(f.manifest.at("output_format").at("kind"), "int8");

  // The output embedding occupies its declared extent as raw words, and the
  // first f32 tensor decodes little-endian.
  for (const json& t : f.manifest.at("tensors")) {
    if (t.at("name") == "output_embedding") {
      const std::size_t off = t.at("offset").get<std::size_t>();
      EXPECT_EQ(t.at("nbytes").get<std::size_t>(), 256u * 64u);
      for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_EQ(f.payload[off + i], m.output_embedding().words()[i].bits);
      }
    }
    if (t.at("name") == "token_embedding") {
      const std::size_t off = t.at("offset").get<std::size_t>();
      std::uint32_t u = 0;
      for (int i = 3; i >= 0; --i) u = (u << 8) | f.payload[off + i];
      float v;
      std::memcpy(&v, &u, 4);
      EXPECT_EQ(v, m.trunk().token_embedding[0]);
    }
  }
}

TEST(ModelFileTest, Fp16WordsStoredLowByteFirst) {
  const TinyLmModel& m = testing::SeedFixture(FormatKind::kFp16).model;
  const SplitFile f = Split(SerializeModel(m));
  for (const json& t : f.manifest.at("tensors")) {
    if (t.at("name") != "output_embedding") continue;
    const std::size_t off = t.at("offset").get<std::size_t>();
    EXPECT_EQ(t.at("nbytes").get<std::size_t>(), 256u * 64u * 2u);
    for (std::size_t i = 0; i < 32; ++i) {
      const unsigned w = f.payload[off + 2 * i] | (f.payload[off + 2 * i + 1] << 8);
      EXPECT_EQ(w, m.output_embedding().words()[i].bits);
    }
  }
}

TEST(ModelFileTest, ShapeMismatch) {
  SplitFile f = Split(SerializeModel(testing::SeedFixture().model));
  for (json& t : f.manifest["tensors"]) {
    if (t["name"] == "output_embedding") t["shape"] = {128, 64};
  }
  EXPECT_EQ(CodeOf([&] { DeserializeModel(Join(f)); }), ErrorCode::kShapeMismatch);

  SplitFile g = Split(SerializeModel(testing::SeedFixture().model));
  g.manifest["config"]["vocab_size"] = 300;
  EXPECT_EQ(CodeOf([&] { DeserializeModel(Join(g)); }), ErrorCode::kShapeMismatch);

  SplitFile h = Split(SerializeModel(testing::SeedFixture().model));
  h.payload.pop_back();
  EXPECT_EQ(CodeOf([&] { DeserializeModel(Join(h)); }), ErrorCode::kShapeMismatch);
}

TEST(ModelFileTest, ChecksumMismatchOnAnySingleByteEdit) {
  const std::vector<std::uint8_t> bytes = SerializeModel(testing::SeedFixture().model);
  const std::size_t payload_start = bytes.size() - Split(bytes).payload.size();
  for (const std::size_t pos : {payload_start, payload_start + 1000, bytes.size() - 1}) {
    std::vector<std::uint8_t> bad = bytes;
    bad[pos] ^= 0x10;
    EXPECT_EQ(CodeOf([&] { DeserializeModel(bad); }), ErrorCode::kChecksumMismatch) << pos;
  }
}

TEST(ModelFileTest, UnknownFormatTag) {
  SplitFile f = Split(SerializeModel(testing::SeedFixture().model));
  f.manifest["output_format"]["kind"] = "bf16";
  EXPECT_EQ(CodeOf([&] { DeserializeModel(Join(f)); }), ErrorCode::kUnknownFormatTag);
}

TEST(ModelFileTest, BadMagicAndMissingFile) {
  std::vector<std::uint8_t> bytes = SerializeModel(testing::SeedFixture().model);
  bytes[0] = 'X';
  EXPECT_EQ(CodeOf([&] { DeserializeModel(bytes); }), ErrorCode::kIo);
  EXPECT_EQ(CodeOf([] { LoadModel("/nonexistent/model.bin"); }), ErrorCode::kIo);
}

TEST(ConfigJsonTest, StrictRoundTrip) {
  TinyLmConfig c;
  c.max_len = 77;
  c.rng_seed = 5;
  EXPECT_EQ(ConfigFromJson(ConfigToJson(c)), c);
  json j = ConfigToJson(c);
  j["surprise"] = 1;
  EXPECT_EQ(CodeOf([&] { ConfigFromJson(j); }), ErrorCode::kInvalidConfig);
  j = ConfigToJson(c);
  j["d_model"] = "wide";
  EXPECT_EQ(CodeOf([&] { ConfigFromJson(j); }), ErrorCode::kInvalidConfig);
}

PromptCorpus Numbered(std::size_t n) {
  PromptCorpus c;
  for (std::size_t i = 0; i < n; ++i) {
    c.entries.push_back({"q" + std::to_string(i), {static_cast<Token>(1 + i % 200)}});
  }
  return c;
}

TEST(PromptCorpusTest, SplitKeepsOrder) {
  const PromptCorpus corpus = Numbered(104);
  const auto [search, eval] = SplitCorpus(corpus, 4);
  ASSERT_EQ(search.entries.size(), 4u);
  ASSERT_EQ(eval.entries.size(), 100u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(search.entries[i], corpus.entries[i]);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(eval.entries[i], corpus.entries[4 + i]);
  EXPECT_EQ(CodeOf([&] { SplitCorpus(corpus, 105); }), ErrorCode::kInvalidConfig);
}

TEST(PromptCorpusTest, JsonlRoundTripThroughFile) {
  const PromptCorpus corpus = Numbered(12);
  testing::TempDir dir("prompts");
  SavePrompts(corpus, dir / "p.jsonl");
  const PromptCorpus back = LoadPrompts(dir / "p.jsonl", 256);
  EXPECT_EQ(back.entries, corpus.entries);
  EXPECT_EQ(FormatPrompts(corpus).substr(0, 26), "{\"id\":\"q0\",\"tokens\":[1]}\n{");
}

TEST(PromptCorpusTest, ParseErrors) {
  EXPECT_EQ(CodeOf([] { ParsePrompts("{\"id\":\"a\",\"tokens\":[1]}\n{\"id\":\"a\",\"tokens\":[2]}\n"); }),
            ErrorCode::kDuplicateId);
  EXPECT_EQ(CodeOf([] { ParsePrompts(""); }), ErrorCode::kEmptyCorpus);
  EXPECT_EQ(CodeOf([] { ParsePrompts("\n  \n"); }), ErrorCode::kEmptyCorpus);
  EXPECT_EQ(CodeOf([] { ParsePrompts("{\"id\":\"a\",\"tokens\":[1]}\n{oops\n"); }),
            ErrorCode::kMalformedLine);
  EXPECT_EQ(CodeOf([] { ParsePrompts("{\"id\":\"a\",\"tokens\":[-1]}\n"); }),
            ErrorCode::kMalformedLine);
  EXPECT_EQ(CodeOf([] { ParsePrompts("{\"id\":\"a\",\"tokens\":[300]}\n", 256); }),
            ErrorCode::kMalformedLine);
  try {
    ParsePrompts("{\"id\":\"a\",\"tokens\":[1]}\n\n[1,2]\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  testing::TempDir dir("prompts_empty");
  WriteTextFile(dir / "empty.jsonl", "");
  EXPECT_EQ(CodeOf([&] { LoadPrompts(dir / "empty.jsonl"); }), ErrorCode::kEmptyCorpus);
}

TEST(PromptCorpusTest, SynthesisIsDeterministicAndInRange) {
  const TinyLmConfig c;
  const PromptCorpus a = SynthesizePrompts(30, 7, c, 4, 12);
  const PromptCorpus b = SynthesizePrompts(30, 7, c, 4, 12);
  EXPECT_EQ(a.entries, b.entries);
  EXPECT_EQ(a.entries[0].id, "p0000");
  for (const PromptEntry& e : a.entries) {
    EXPECT_GE(e.tokens.size(), 4u);
    EXPECT_LE(e.tokens.size(), 12u);
    for (const Token t : e.tokens) {
      EXPECT_LT(t, c.vocab_size);
      EXPECT_NE(t, c.eos_id);
    }
  }
  EXPECT_NE(SynthesizePrompts(30, 8, c, 4, 12).entries, a.entries);
}

TEST(FixtureTest, CalibratedMedianIsRemeasured) {
  const Fixture& f = testing::SeedFixture();
  EXPECT_GE(f.report.median_length, 8.0);
  EXPECT_LE(f.report.median_length, 32.0);
  EXPECT_LE(f.report.iterations, 64u);
  EXPECT_GT(f.report.alpha, 0.0);
  // Re-measure with an independent median over the recorded probe lengths.
  std::vector<std::size_t> l = f.report.probe_lengths;
  std::sort(l.begin(), l.end());
  EXPECT_EQ(f.report.median_length, (l[7] + l[8]) / 2.0);
  // The EOS row is alpha times a unit direction, up to quantization.
  const TinyLmModel& m = f.model;
  double norm = 0.0;
  for (const double v : f.report.eos_direction) norm += v * v;
  EXPECT_NEAR(norm, 1.0, 1e-12);
  const double step = m.output_embedding().format().step();
  for (std::size_t j = 0; j < m.config().d_model; ++j) {
    EXPECT_NEAR(m.head_row(0)[j], f.report.eos_direction[j] * f.report.alpha, step / 2 + 1e-12);
  }
}

TEST(FixtureTest, DeterministicInConfigSeedRange) {
  TinyLmConfig c = testing::StandardConfig();
  const Fixture again = BuildFixture(c, 42, 8, 32, FormatKind::kInt8);
  EXPECT_EQ(SerializeModel(again.model), SerializeModel(testing::SeedFixture().model));
  EXPECT_EQ(again.report.alpha, testing::SeedFixture().report.alpha);
  const Fixture other = BuildFixture(c, 43, 8, 32, FormatKind::kInt8);
  EXPECT_NE(SerializeModel(other.model), SerializeModel(again.model));
}

TEST(FixtureTest, AlphaExtremes) {
  const TinyLmConfig c = testing::StandardConfig();
  const Fixture& f = testing::SeedFixture();
  const TrunkWeights trunk = RandomTrunk(c, 42);
  const std::vector<double> rows = RandomOutputRows(c, 42);
  EXPECT_EQ(trunk, f.model.trunk());

  const TinyLmModel zero =
      FixtureWithAlpha(c, trunk, rows, f.report.eos_direction, 0.0, FormatKind::kInt8);
  for (std::size_t j = 0; j < c.d_model; ++j) EXPECT_EQ(zero.head_row(0)[j], 0.0);
  std::size_t long_runs = 0;
  for (const PromptEntry& e : testing::SearchPrompts().entries) {
    const GenerationTrace t = Generate(zero, e.tokens, {.max_len = c.max_len});
    if (t.steps() == c.max_len) ++long_runs;
  }
  EXPECT_GE(long_runs, 3u);

  const TinyLmModel huge =
      FixtureWithAlpha(c, trunk, rows, f.report.eos_direction, 1e3, FormatKind::kFp16);
  for (const PromptEntry& e : testing::SearchPrompts().entries) {
    const GenerationTrace t = Generate(huge, e.tokens, {.max_len = c.max_len});
    EXPECT_EQ(t.steps(), 1u);
    EXPECT_EQ(t.terminated_by, Termination::kEos);
  }
}

TEST(FixtureTest, Errors) {
  const TinyLmConfig c = testing::StandardConfig();
  EXPECT_EQ(CodeOf([&] { BuildFixture(c, 42, 1, 32, FormatKind::kInt8); }),
            ErrorCode::kInvalidConfig);
  EXPECT_EQ(CodeOf([&] { BuildFixture(c, 42, 40, 32, FormatKind::kInt8); }),
            ErrorCode::kInvalidConfig);
  EXPECT_EQ(CodeOf([&] { BuildFixture(c, 42, 8, 65, FormatKind::kInt8); }),
            ErrorCode::kInvalidConfig);
  FixtureOptions opts;
  opts.max_iterations = 2;
  EXPECT_EQ(CodeOf([&] { BuildFixture(c, 42, 2, 2, FormatKind::kInt8, opts); }),
            ErrorCode::kCalibrationFailed);
}

TEST(FixtureTest, MedianLength) {
  EXPECT_EQ(MedianLength({5}), 5.0);
  EXPECT_EQ(MedianLength({9, 1, 4}), 4.0);
  EXPECT_EQ(MedianLength({9, 1, 4, 6}), 5.0);
}

}  // namespace
}  // namespace eosflip
