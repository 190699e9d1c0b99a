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

#ifndef EOSFLIP_NUMERIC_CODEC_HPP_
#define EOSFLIP_NUMERIC_CODEC_HPP_

// Bit-level storage formats for attackable weights.
//
// Two formats are supported:
//   * Int8: two's complement integer q in [-128, 127] with a per-tensor
//     scale F; the real value is q * F / 127.
//   * Fp16: IEEE 754 binary16 (1 sign, 5 exponent, 10 mantissa bits),
//     including subnormals, infinities and NaNs.
//
// Bit 0 is the least significant bit of a stored word.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace eosflip {

enum class FormatKind : std::uint8_t { kInt8, kFp16 };

std::string_view FormatKindName(FormatKind kind);
// Accepts "int8" or "fp16"; throws kUnknownFormatTag otherwise.
FormatKind ParseFormatKind(std::string_view tag);

class NumericFormat {
 public:
  static NumericFormat Int8(double scale);
  static NumericFormat Fp16() { return NumericFormat(FormatKind::kFp16, 0.0); }

  FormatKind kind() const { return kind_; }
  // Per-tensor scale F. Zero for Fp16.
  double scale() const { return scale_; }
  // Quantization step F / 127. Zero for Fp16.
  double step() const { return scale_ / 127.0; }
  int bit_width() const { return kind_ == FormatKind::kInt8 ? 8 : 16; }

  friend bool operator==(const NumericFormat&, const NumericFormat&) = default;

 private:
  NumericFormat(FormatKind kind, double scale) : kind_(kind), scale_(scale) {}

  FormatKind kind_;
  double scale_;
};

// Raw storage of one weight element. Only the low bit_width() bits are used.
struct BitWord {
  std::uint16_t bits = 0;

  friend auto operator<=>(const BitWord&, const BitWord&) = default;
};

// Two's complement integer held by an int8 word.
int Int8Value(BitWord word);
BitWord Int8Word(int value);

double Decode(BitWord word, const NumericFormat& format);
// Nearest representable value. Int8 rounds half away from zero and clamps to
// [-128, 127]; Fp16 rounds half to even and overflows to +-Inf.
BitWord Encode(double value, const NumericFormat& format);

BitWord FlipBit(BitWord word, int bit, const NumericFormat& format);

struct BitChoice {
  int bit = 0;
  BitWord word;
  double value = 0.0;
};

// Single-bit flip whose decoded value is closest to `target`. Flips that
// decode to Inf/NaN are never chosen; ties go to the lowest bit index.
// Throws kNoFiniteCandidate when no allowed flip is finite.
BitChoice SelectBit(BitWord word, double target, const NumericFormat& format,
                    std::span<const int> exclude = {});

// Row-major matrix of stored words sharing one format.
class QuantizedTensor {
 public:
  QuantizedTensor() : format_(NumericFormat::Fp16()) {}
  QuantizedTensor(std::size_t rows, std::size_t cols, NumericFormat format,
                  std::vector<BitWord> words);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const NumericFormat& format() const { return format_; }
  std::span<const BitWord> words() const { return words_; }

  BitWord word(std::size_t row, std::size_t col) const {
    return words_[row * cols_ + col];
  }
  void set_word(std::size_t row, std::size_t col, BitWord word);

  double value(std::size_t row, std::size_t col) const {
    return Decode(word(row, col), format_);
  }
  std::vector<double> DecodeRow(std::size_t row) const;
  std::vector<double> DecodeAll() const;

  // Little-endian raw words: 1 byte each for int8, 2 bytes for fp16.
  std::vector<std::uint8_t> RawBytes() const;
  static QuantizedTensor FromRawBytes(std::size_t rows, std::size_t cols,
                                      NumericFormat format,
                                      std::span<const std::uint8_t> bytes);

  friend bool operator==(const QuantizedTensor&,
                         const QuantizedTensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  NumericFormat format_;
  std::vector<BitWord> words_;
};

// Per-tensor symmetric int8 quantization with F = max |values|.
QuantizedTensor QuantizeInt8(std::span<const double> values, std::size_t rows,
                             std::size_t cols);
QuantizedTensor QuantizeFp16(std::span<const double> values, std::size_t rows,
                             std::size_t cols);
QuantizedTensor Quantize(std::span<const double> values, std::size_t rows,
                         std::size_t cols, FormatKind kind);

}  // namespace eosflip

#endif  // EOSFLIP_NUMERIC_CODEC_HPP_
