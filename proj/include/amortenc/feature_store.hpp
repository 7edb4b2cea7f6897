#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "amortenc/quantization.hpp"

namespace amortenc {

enum class PoolingStage : std::uint8_t { raw_layers = 0, layer_pooled = 1 };

std::string stage_name(PoolingStage stage);
PoolingStage parse_stage(std::string_view text);

// One document's stored features.
//   raw_layers:   L x n x d, post-embedding layers 1..L
//   layer_pooled: n x d
struct FeatureRecord {
  std::string doc_id;
  std::uint64_t encoder_fingerprint = 0;
  PoolingStage stage = PoolingStage::layer_pooled;
  QuantizedFeatures quantized;

  std::size_t token_count() const;
  // Throws ParameterError when the shape does not match the stage.
  void validate() const;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

// Wire format (little-endian):
//   "AMTF" | u16 version | u16 len + doc_id | u64 fingerprint | u8 stage |
//   u8 scheme | [f32 scale, u8 zero_point if u8] | u8 rank | u32 dims | payload
void write_features(std::ostream& sink, const FeatureRecord& record);
FeatureRecord read_features(std::istream& source);

// <store>/<doc_id>.amtf
std::filesystem::path record_path(const std::filesystem::path& store, const std::string& doc_id);
void write_record_file(const std::filesystem::path& store, const FeatureRecord& record);
FeatureRecord read_record_file(const std::filesystem::path& path);

// Refuses features produced by another encoder.
void require_fingerprint(const FeatureRecord& record, std::uint64_t expected);

// Dequantized features reshaped for pooling: raw records become
// (L x n x d), pooled records (n x d).
Tensor record_features(const FeatureRecord& record);

}  // namespace amortenc
