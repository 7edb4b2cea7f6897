#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amortenc/errors.hpp"
#include "amortenc/tensor.hpp"

// Little-endian binary helpers shared by checkpoint, head and feature-store
// formats. Tensors are written as (rank u8, dims u32 x rank, f32 payload).

namespace amortenc::wire {

static_assert(std::endian::native == std::endian::little,
              "wire format helpers assume a little-endian host");

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void bytes(std::span<const std::uint8_t> data) {
    out_.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out_) throw StorageError("write failed after " + std::to_string(written_) + " bytes");
    written_ += data.size();
  }
  void magic(std::string_view tag) {
    bytes({reinterpret_cast<const std::uint8_t*>(tag.data()), tag.size()});
  }
  template <typename T>
  void scalar(T value) {
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), &value, sizeof(T));
    bytes(raw);
  }
  void u8(std::uint8_t v) { scalar(v); }
  void u16(std::uint16_t v) { scalar(v); }
  void u32(std::uint32_t v) { scalar(v); }
  void u64(std::uint64_t v) { scalar(v); }
  void f32(float v) { scalar(v); }

  void string16(std::string_view s) {
    if (s.size() > 0xFFFF) throw ParameterError("string longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  void dims(const Shape& shape) {
    if (shape.size() > 0xFF) throw ParameterError("tensor rank exceeds 255");
    u8(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) u32(static_cast<std::uint32_t>(d));
  }
  void tensor(const Tensor& t) {
    dims(t.shape());
    bytes({reinterpret_cast<const std::uint8_t*>(t.data()), t.size() * sizeof(float)});
  }
  void flush() {
    out_.flush();
    if (!out_) throw StorageError("flush failed");
  }

  std::uint64_t written() const { return written_; }

 private:
  std::ostream& out_;
  std::uint64_t written_ = 0;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(std::span<std::uint8_t> out, const char* what) {
    in_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != out.size()) {
      throw FormatError(std::string("truncated ") + what + ": expected " +
                            std::to_string(out.size()) + " bytes, got " + std::to_string(got),
                        offset_ + got);
    }
    offset_ += got;
  }
  void expect_magic(std::string_view tag) {
    std::vector<std::uint8_t> raw(tag.size());
    const auto at = offset_;
    bytes(raw, "magic");
    if (std::memcmp(raw.data(), tag.data(), tag.size()) != 0) {
      throw FormatError("bad magic, expected \"" + std::string(tag) + "\"", at);
    }
  }
  template <typename T>
  T scalar(const char* what) {
    std::array<std::uint8_t, sizeof(T)> raw;
    bytes(raw, what);
    T value;
    std::memcpy(&value, raw.data(), sizeof(T));
    return value;
  }
  std::uint8_t u8(const char* what) { return scalar<std::uint8_t>(what); }
  std::uint16_t u16(const char* what) { return scalar<std::uint16_t>(what); }
  std::uint32_t u32(const char* what) { return scalar<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return scalar<std::uint64_t>(what); }
  float f32(const char* what) { return scalar<float>(what); }

  std::string string16(const char* what) {
    const auto len = u16(what);
    std::string s(len, '\0');
    bytes({reinterpret_cast<std::uint8_t*>(s.data()), s.size()}, what);
    return s;
  }
  Shape dims(const char* what) {
    const auto rank = u8(what);
    Shape shape(rank);
    for (auto& d : shape) d = u32(what);
    return shape;
  }
  Tensor tensor(const char* what) {
    Shape shape = dims(what);
    Tensor t(shape);
    bytes({reinterpret_cast<std::uint8_t*>(t.data()), t.size() * sizeof(float)}, what);
    return t;
  }
  // Tensor whose shape must match `expected` exactly.
  Tensor tensor(const char* what, const Shape& expected) {
    const auto at = offset_;
    Tensor t = tensor(what);
    if (t.shape() != expected) {
      throw FormatError(std::string(what) + " has shape " + shape_string(t.shape()) +
                            ", expected " + shape_string(expected),
                        at);
    }
    return t;
  }

  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

// FNV-1a, used for encoder fingerprints.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> data,
                             std::uint64_t hash = 0xCBF29CE484222325ULL) {
  for (auto byte : data) {
    hash ^= byte;
    hash *= 0x100000001B3ULL;
  }
  return hash;
}

}  // namespace amortenc::wire
