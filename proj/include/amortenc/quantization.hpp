#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amortenc/tensor.hpp"

namespace amortenc {

// Affine uint8 parameters: x ~ (q - zero_point) * scale.
struct QuantParams {
  float scale = 1.0f;
  std::uint8_t zero_point = 0;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

// Tag values double as the on-disk scheme byte.
enum class QuantKind : std::uint8_t { f32 = 0, u8 = 1, bit1 = 2, f16 = 3 };

struct QuantScheme {
  QuantKind kind = QuantKind::f32;
  QuantParams params;  // meaningful for u8 only

  static QuantScheme f32() { return {QuantKind::f32, {}}; }
  static QuantScheme f16() { return {QuantKind::f16, {}}; }
  static QuantScheme bit1() { return {QuantKind::bit1, {}}; }
  static QuantScheme u8(QuantParams p) { return {QuantKind::u8, p}; }

  std::size_t bits_per_element() const;
  std::string name() const;

  friend bool operator==(const QuantScheme& a, const QuantScheme& b) {
    return a.kind == b.kind && (a.kind != QuantKind::u8 || a.params == b.params);
  }
};

// "f32" | "f16" | "u8" | "bit1". u8 parses with default params; calibrate later.
QuantKind parse_quant_kind(std::string_view text);
std::string quant_kind_name(QuantKind kind);

struct QuantizedFeatures {
  QuantScheme scheme;
  Shape shape;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const QuantizedFeatures&, const QuantizedFeatures&) = default;
};

// Exact payload size. Bit1 packs each row (last axis) MSB-first and pads the
// row to a byte boundary.
std::size_t payload_bytes(QuantKind kind, const Shape& shape);

// Global min/max calibration over the sample, range widened to contain zero.
QuantParams calibrate_affine(std::span<const float> sample);

QuantizedFeatures quantize(const Tensor& x, const QuantScheme& scheme);

// Throws FormatError when the payload length disagrees with shape and scheme.
Tensor dequantize(const QuantizedFeatures& q);

// IEEE binary16 conversion, round to nearest even.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

}  // namespace amortenc
