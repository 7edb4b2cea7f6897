#include "amortenc/quantization.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

namespace amortenc {

namespace {

constexpr float kMinScale = 1e-12f;

void check_finite(std::span<const float> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw InputError(std::string(what) + ": non-finite value at index " + std::to_string(i));
    }
  }
}

std::size_t row_width(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

}  // namespace

std::size_t QuantScheme::bits_per_element() const {
  switch (kind) {
    case QuantKind::f32: return 32;
    case QuantKind::f16: return 16;
    case QuantKind::u8: return 8;
    case QuantKind::bit1: return 1;
  }
  return 0;
}

std::string quant_kind_name(QuantKind kind) {
  switch (kind) {
    case QuantKind::f32: return "f32";
    case QuantKind::f16: return "f16";
    case QuantKind::u8: return "u8";
    case QuantKind::bit1: return "bit1";
  }
  return "?";
}

std::string QuantScheme::name() const { return quant_kind_name(kind); }

QuantKind parse_quant_kind(std::string_view text) {
  if (text == "f32") return QuantKind::f32;
  if (text == "f16") return QuantKind::f16;
  if (text == "u8") return QuantKind::u8;
  if (text == "bit1") return QuantKind::bit1;
  throw ParameterError("unknown quantization scheme '" + std::string(text) + "'");
}

std::size_t payload_bytes(QuantKind kind, const Shape& shape) {
  const std::size_t count = shape_size(shape);
  switch (kind) {
    case QuantKind::f32: return count * 4;
    case QuantKind::f16: return count * 2;
    case QuantKind::u8: return count;
    case QuantKind::bit1: {
      const std::size_t width = row_width(shape);
      if (width == 0) return 0;
      return (count / width) * ((width + 7) / 8);
    }
  }
  return 0;
}

QuantParams calibrate_affine(std::span<const float> sample) {
  if (sample.empty()) throw InputError("calibration sample is empty");
  check_finite(sample, "calibration sample");
  const auto [lo_it, hi_it] = std::minmax_element(sample.begin(), sample.end());
  const double lo = std::min(static_cast<double>(*lo_it), 0.0);
  const double hi = std::max(static_cast<double>(*hi_it), 0.0);
  QuantParams p;
  p.scale = std::max(static_cast<float>((hi - lo) / 255.0), kMinScale);
  // Exact in double: the rounded float scale would push [-1, 1] to 127.
  const double zp = hi > lo ? std::round(-lo * 255.0 / (hi - lo)) : 0.0;
  p.zero_point = static_cast<std::uint8_t>(std::clamp(zp, 0.0, 255.0));
  return p;
}

std::uint16_t float_to_half(float value) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
  const std::uint32_t exponent = (bits >> 23) & 0xFFu;
  std::uint32_t mantissa = bits & 0x7FFFFFu;

  if (exponent == 0xFF) {  // inf / nan
    return static_cast<std::uint16_t>(sign | 0x7C00u | (mantissa ? 0x200u : 0u));
  }
  const int e = static_cast<int>(exponent) - 127 + 15;
  if (e >= 0x1F) return static_cast<std::uint16_t>(sign | 0x7C00u);
  if (e <= 0) {
    if (e < -10) return sign;  // underflows to signed zero
    mantissa |= 0x800000u;
    const unsigned shift = static_cast<unsigned>(14 - e);
    std::uint32_t half = mantissa >> shift;
    const std::uint32_t rem = mantissa & ((1u << shift) - 1u);
    const std::uint32_t mid = 1u << (shift - 1);
    if (rem > mid || (rem == mid && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
  }
  std::uint32_t half = (static_cast<std::uint32_t>(e) << 10) | (mantissa >> 13);
  const std::uint32_t rem = mantissa & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // may carry into inf
  return static_cast<std::uint16_t>(sign | half);
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exponent = (h >> 10) & 0x1Fu;
  std::uint32_t mantissa = h & 0x3FFu;
  std::uint32_t bits;
  if (exponent == 0) {
    if (mantissa == 0) {
      bits = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mantissa <<= 1;
      } while ((mantissa & 0x400u) == 0);
      bits = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mantissa & 0x3FFu) << 13);
    }
  } else if (exponent == 0x1F) {
    bits = sign | 0x7F800000u | (mantissa << 13);
  } else {
    bits = sign | ((exponent - 15 + 127) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(bits);
}

QuantizedFeatures quantize(const Tensor& x, const QuantScheme& scheme) {
  check_finite(x.values(), "quantize input");
  QuantizedFeatures q{scheme, x.shape(), {}};
  q.payload.resize(payload_bytes(scheme.kind, x.shape()));
  switch (scheme.kind) {
    case QuantKind::f32:
      std::memcpy(q.payload.data(), x.data(), q.payload.size());
      break;
    case QuantKind::f16:
      for (std::size_t i = 0; i < x.size(); ++i) {
        const std::uint16_t h = float_to_half(x[i]);
        std::memcpy(q.payload.data() + 2 * i, &h, 2);
      }
      break;
    case QuantKind::u8: {
      if (!(scheme.params.scale > 0.0f)) throw ParameterError("u8 scale must be positive");
      const double scale = scheme.params.scale;
      const double zp = scheme.params.zero_point;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double level = std::round(static_cast<double>(x[i]) / scale) + zp;
        q.payload[i] = static_cast<std::uint8_t>(std::clamp(level, 0.0, 255.0));
      }
      break;
    }
    case QuantKind::bit1: {
      const std::size_t width = row_width(x.shape());
      if (width == 0) break;
      const std::size_t row_bytes = (width + 7) / 8;
      const std::size_t rows = x.size() / width;
      for (std::size_t r = 0; r < rows; ++r) {
        std::uint8_t* dst = q.payload.data() + r * row_bytes;
        for (std::size_t j = 0; j < width; ++j) {
          if (x[r * width + j] >= 0.0f) dst[j / 8] |= static_cast<std::uint8_t>(0x80u >> (j % 8));
        }
      }
      break;
    }
  }
  return q;
}

Tensor dequantize(const QuantizedFeatures& q) {
  const std::size_t expected = payload_bytes(q.scheme.kind, q.shape);
  if (q.payload.size() != expected) {
    throw FormatError("payload holds " + std::to_string(q.payload.size()) + " bytes, expected " +
                          std::to_string(expected) + " for " + q.scheme.name() + " " +
                          shape_string(q.shape),
                      0);
  }
  Tensor x(q.shape);
  switch (q.scheme.kind) {
    case QuantKind::f32:
      std::memcpy(x.data(), q.payload.data(), expected);
      break;
    case QuantKind::f16:
      for (std::size_t i = 0; i < x.size(); ++i) {
        std::uint16_t h;
        std::memcpy(&h, q.payload.data() + 2 * i, 2);
        x[i] = half_to_float(h);
      }
      break;
    case QuantKind::u8: {
      const double scale = q.scheme.params.scale;
      const int zp = q.scheme.params.zero_point;
      for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = static_cast<float>((static_cast<int>(q.payload[i]) - zp) * scale);
      }
      break;
    }
    case QuantKind::bit1: {
      const std::size_t width = row_width(q.shape);
      if (width == 0) break;
      const std::size_t row_bytes = (width + 7) / 8;
      const std::size_t rows = x.size() / width;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::uint8_t* src = q.payload.data() + r * row_bytes;
        for (std::size_t j = 0; j < width; ++j) {
          x[r * width + j] = (src[j / 8] & (0x80u >> (j % 8))) ? 1.0f : -1.0f;
        }
      }
      break;
    }
  }
  return x;
}

}  // namespace amortenc
