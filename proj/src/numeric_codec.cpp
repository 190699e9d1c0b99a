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

#include "eosflip/numeric_codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "eosflip/error.hpp"

namespace eosflip {
namespace {

constexpr std::uint16_t kFp16SignMask = 0x8000;
constexpr std::uint16_t kFp16ExpMask = 0x7C00;
constexpr std::uint16_t kFp16ManMask = 0x03FF;
constexpr std::uint16_t kFp16Inf = 0x7C00;
constexpr std::uint16_t kFp16QuietNan = 0x7E00;

// Round a non-negative double to an integer, ties to even. Exact for the
// magnitudes produced below (< 2^11 after scaling).
double RoundHalfEven(double x) {
  const double lower = std::floor(x);
  const double frac = x - lower;
  if (frac > 0.5) return lower + 1.0;
  if (frac < 0.5) return lower;
  return std::fmod(lower, 2.0) == 0.0 ? lower : lower + 1.0;
}

double DecodeFp16(std::uint16_t bits) {
  const bool negative = (bits & kFp16SignMask) != 0;
  const int exponent = (bits & kFp16ExpMask) >> 10;
  const int mantissa = bits & kFp16ManMask;
  double magnitude;
  if (exponent == 0) {
    magnitude = std::ldexp(static_cast<double>(mantissa), -24);
  } else if (exponent == 31) {
    magnitude = mantissa == 0 ? std::numeric_limits<double>::infinity()
                              : std::numeric_limits<double>::quiet_NaN();
  } else {
    magnitude = std::ldexp(1024.0 + mantissa, exponent - 25);
  }
  return negative ? -magnitude : magnitude;
}

std::uint16_t EncodeFp16(double value) {
  const std::uint16_t sign = std::signbit(value) ? kFp16SignMask : 0;
  if (std::isnan(value)) return sign | kFp16QuietNan;
  const double magnitude = std::fabs(value);
  // 65520 is halfway between the largest finite half (65504) and 2^16; the
  // tie rounds to the even neighbour, which is infinity.
  if (magnitude >= 65520.0) return sign | kFp16Inf;
  if (magnitude < std::ldexp(1.0, -14)) {
    // Subnormal: units of 2^-24. A result of 1024 is the smallest normal and
    // has the right bit pattern already.
    const auto units = static_cast<std::uint16_t>(
        RoundHalfEven(std::ldexp(magnitude, 24)));
    return sign | units;
  }
  int exp2 = 0;
  std::frexp(magnitude, &exp2);  // magnitude = f * 2^exp2, f in [0.5, 1)
  int biased = exp2 - 1 + 15;
  double mantissa = RoundHalfEven(std::ldexp(magnitude, 11 - exp2)) - 1024.0;
  if (mantissa >= 1024.0) {
    mantissa = 0.0;
    ++biased;
  }
  return sign | static_cast<std::uint16_t>(biased << 10) |
         static_cast<std::uint16_t>(mantissa);
}

void CheckShape(std::size_t rows, std::size_t cols, std::size_t n) {
  if (rows * cols != n) {
    throw Error(ErrorCode::kShapeMismatch,
                std::to_string(rows) + "x" + std::to_string(cols) +
                    " does not match " + std::to_string(n) + " values");
  }
}

}  // namespace

std::string_view FormatKindName(FormatKind kind) {
  return kind == FormatKind::kInt8 ? "int8" : "fp16";
}

FormatKind ParseFormatKind(std::string_view tag) {
  if (tag == "int8") return FormatKind::kInt8;
  if (tag == "fp16") return FormatKind::kFp16;
  throw Error(ErrorCode::kUnknownFormatTag, std::string(tag));
}

NumericFormat NumericFormat::Int8(double scale) {
  if (!std::isfinite(scale) || scale <= 0.0) {
    throw Error(ErrorCode::kInvalidConfig,
                "int8 scale must be finite and positive");
  }
  return NumericFormat(FormatKind::kInt8, scale);
}

int Int8Value(BitWord word) {
  return static_cast<int>(static_cast<std::int8_t>(word.bits & 0xFF));
}

BitWord Int8Word(int value) {
  return BitWord{static_cast<std::uint16_t>(static_cast<std::uint8_t>(
      static_cast<std::int8_t>(std::clamp(value, -128, 127))))};
}

double Decode(BitWord word, const NumericFormat& format) {
  if (format.kind() == FormatKind::kInt8) {
    return Int8Value(word) * format.scale() / 127.0;
  }
  return DecodeFp16(word.bits);
}

BitWord Encode(double value, const NumericFormat& format) {
  if (format.kind() == FormatKind::kFp16) return BitWord{EncodeFp16(value)};
  if (std::isnan(value)) return Int8Word(0);
  const double q = std::round(value / format.step());
  return Int8Word(static_cast<int>(std::clamp(q, -128.0, 127.0)));
}

BitWord FlipBit(BitWord word, int bit, const NumericFormat& format) {
  if (bit < 0 || bit >= format.bit_width()) {
    throw Error(ErrorCode::kBitIndexOutOfRange,
                "bit " + std::to_string(bit) + " outside width " +
                    std::to_string(format.bit_width()));
  }
  return BitWord{static_cast<std::uint16_t>(word.bits ^ (1u << bit))};
}

BitChoice SelectBit(BitWord word, double target, const NumericFormat& format,
                    std::span<const int> exclude) {
  BitChoice best;
  bool found = false;
  double best_distance = std::numeric_limits<double>::infinity();
  for (int bit = 0; bit < format.bit_width(); ++bit) {
    if (std::find(exclude.begin(), exclude.end(), bit) != exclude.end()) {
      continue;
    }
    const BitWord flipped = FlipBit(word, bit, format);
    const double value = Decode(flipped, format);
    if (!std::isfinite(value)) continue;
    const double distance = std::fabs(value - target);
    if (!found || distance < best_distance) {
      best = BitChoice{bit, flipped, value};
      best_distance = distance;
      found = true;
    }
  }
  if (!found) {
    throw Error(ErrorCode::kNoFiniteCandidate,
                "no finite single-bit flip of word " +
                    std::to_string(word.bits));
  }
  return best;
}

QuantizedTensor::QuantizedTensor(std::size_t rows, std::size_t cols,
                                 NumericFormat format,
                                 std::vector<BitWord> words)
    : rows_(rows), cols_(cols), format_(format), words_(std::move(words)) {
  CheckShape(rows, cols, words_.size());
  const std::uint32_t limit = 1u << format_.bit_width();
  for (const BitWord w : words_) {
    if (w.bits >= limit) {
      throw Error(ErrorCode::kShapeMismatch, "word wider than format");
    }
  }
}

void QuantizedTensor::set_word(std::size_t row, std::size_t col,
                               BitWord word) {
  if (row >= rows_ || col >= cols_) {
    throw Error(ErrorCode::kShapeMismatch, "word index out of range");
  }
  if (word.bits >= (1u << format_.bit_width())) {
    throw Error(ErrorCode::kShapeMismatch, "word wider than format");
  }
  words_[row * cols_ + col] = word;
}

std::vector<double> QuantizedTensor::DecodeRow(std::size_t row) const {
  std::vector<double> out(cols_);
  for (std::size_t c = 0; c < cols_; ++c) out[c] = value(row, c);
  return out;
}

std::vector<double> QuantizedTensor::DecodeAll() const {
  std::vector<double> out(words_.size());
  for (std::size_t i = 0; i < words_.size(); ++i) {
    out[i] = Decode(words_[i], format_);
  }
  return out;
}

std::vector<std::uint8_t> QuantizedTensor::RawBytes() const {
  const std::size_t width = format_.bit_width() / 8;
  std::vector<std::uint8_t> out;
  out.reserve(words_.size() * width);
  for (const BitWord w : words_) {
    out.push_back(static_cast<std::uint8_t>(w.bits & 0xFF));
    if (width == 2) out.push_back(static_cast<std::uint8_t>(w.bits >> 8));
  }
  return out;
}

QuantizedTensor QuantizedTensor::FromRawBytes(
    std::size_t rows, std::size_t cols, NumericFormat format,
    std::span<const std::uint8_t> bytes) {
  const std::size_t width = format.bit_width() / 8;
  if (bytes.size() != rows * cols * width) {
    throw Error(ErrorCode::kShapeMismatch,
                "raw tensor has " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(rows * cols * width));
  }
  std::vector<BitWord> words(rows * cols);
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::uint16_t bits = bytes[i * width];
    if (width == 2) bits |= static_cast<std::uint16_t>(bytes[i * 2 + 1] << 8);
    words[i] = BitWord{bits};
  }
  return QuantizedTensor(rows, cols, format, std::move(words));
}

QuantizedTensor QuantizeInt8(std::span<const double> values, std::size_t rows,
                             std::size_t cols) {
  CheckShape(rows, cols, values.size());
  double max_abs = 0.0;
  for (const double v : values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::kNonFiniteInput, "cannot quantize NaN/Inf");
    }
    max_abs = std::max(max_abs, std::fabs(v));
  }
  if (max_abs == 0.0) {
    throw Error(ErrorCode::kAllZeroTensor, "int8 scale undefined");
  }
  const NumericFormat format = NumericFormat::Int8(max_abs);
  std::vector<BitWord> words(values.size());
  std::transform(values.begin(), values.end(), words.begin(),
                 [&](double v) { return Encode(v, format); });
  return QuantizedTensor(rows, cols, format, std::move(words));
}

QuantizedTensor QuantizeFp16(std::span<const double> values, std::size_t rows,
                             std::size_t cols) {
  CheckShape(rows, cols, values.size());
  const NumericFormat format = NumericFormat::Fp16();
  std::vector<BitWord> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw Error(ErrorCode::kNonFiniteInput, "cannot quantize NaN/Inf");
    }
    words[i] = Encode(values[i], format);
    if (!std::isfinite(Decode(words[i], format))) {
      throw Error(ErrorCode::kNonFiniteInput, "value overflows fp16");
    }
  }
  return QuantizedTensor(rows, cols, format, std::move(words));
}

QuantizedTensor Quantize(std::span<const double> values, std::size_t rows,
                         std::size_t cols, FormatKind kind) {
  return kind == FormatKind::kInt8 ? QuantizeInt8(values, rows, cols)
                                   : QuantizeFp16(values, rows, cols);
}

}  // namespace eosflip
