#include "amortenc/feature_store.hpp"

#include <fstream>
#include <sstream>

#include "amortenc/wire.hpp"

namespace amortenc {

namespace {

constexpr std::uint16_t kStoreVersion = 1;

}  // namespace

std::string stage_name(PoolingStage stage) {
  return stage == PoolingStage::raw_layers ? "raw" : "pooled";
}

PoolingStage parse_stage(std::string_view text) {
  if (text == "raw" || text == "raw_layers") return PoolingStage::raw_layers;
  if (text == "pooled" || text == "layer_pooled") return PoolingStage::layer_pooled;
  throw ParameterError("unknown pooling stage '" + std::string(text) + "'");
}

std::size_t FeatureRecord::token_count() const {
  const auto& shape = quantized.shape;
  if (stage == PoolingStage::raw_layers) return shape.size() == 3 ? shape[1] : 0;
  return shape.size() == 2 ? shape[0] : 0;
}

void FeatureRecord::validate() const {
  const std::size_t want_rank = stage == PoolingStage::raw_layers ? 3 : 2;
  if (quantized.shape.size() != want_rank) {
    throw ParameterError("record '" + doc_id + "': stage " + stage_name(stage) + " needs rank " +
                         std::to_string(want_rank) + ", got shape " + shape_string(quantized.shape));
  }
  if (quantized.payload.size() != payload_bytes(quantized.scheme.kind, quantized.shape)) {
    throw ParameterError("record '" + doc_id + "': payload length does not match shape");
  }
}

void write_features(std::ostream& sink, const FeatureRecord& record) {
  record.validate();
  // Staged in memory: the record reaches the sink in a single write.
  std::ostringstream staged(std::ios::binary);
  wire::Writer w(staged);
  w.magic("AMTF");
  w.u16(kStoreVersion);
  w.string16(record.doc_id);
  w.u64(record.encoder_fingerprint);
  w.u8(static_cast<std::uint8_t>(record.stage));
  w.u8(static_cast<std::uint8_t>(record.quantized.scheme.kind));
  if (record.quantized.scheme.kind == QuantKind::u8) {
    w.f32(record.quantized.scheme.params.scale);
    w.u8(record.quantized.scheme.params.zero_point);
  }
  w.dims(record.quantized.shape);
  w.bytes(record.quantized.payload);

  const std::string bytes = staged.str();
  sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  sink.flush();
  if (!sink) throw StorageError("failed to write feature record '" + record.doc_id + "'");
}

FeatureRecord read_features(std::istream& source) {
  wire::Reader r(source);
  r.expect_magic("AMTF");
  auto at = r.offset();
  const auto version = r.u16("version");
  if (version != kStoreVersion) {
    throw FormatError("unsupported feature store version " + std::to_string(version), at);
  }
  FeatureRecord rec;
  rec.doc_id = r.string16("doc id");
  rec.encoder_fingerprint = r.u64("fingerprint");
  at = r.offset();
  const auto stage = r.u8("stage");
  if (stage > 1) throw FormatError("unknown pooling stage " + std::to_string(stage), at);
  rec.stage = static_cast<PoolingStage>(stage);
  at = r.offset();
  const auto scheme = r.u8("scheme");
  if (scheme > 3) throw FormatError("unknown quantization scheme " + std::to_string(scheme), at);
  rec.quantized.scheme.kind = static_cast<QuantKind>(scheme);
  if (rec.quantized.scheme.kind == QuantKind::u8) {
    at = r.offset();
    rec.quantized.scheme.params.scale = r.f32("scale");
    rec.quantized.scheme.params.zero_point = r.u8("zero point");
    if (!(rec.quantized.scheme.params.scale > 0.0f)) throw FormatError("non-positive u8 scale", at);
  }
  at = r.offset();
  rec.quantized.shape = r.dims("shape");
  const std::size_t want_rank = rec.stage == PoolingStage::raw_layers ? 3 : 2;
  if (rec.quantized.shape.size() != want_rank) {
    throw FormatError("shape " + shape_string(rec.quantized.shape) + " inconsistent with stage " +
                          stage_name(rec.stage),
                      at);
  }
  rec.quantized.payload.resize(payload_bytes(rec.quantized.scheme.kind, rec.quantized.shape));
  r.bytes(rec.quantized.payload, "payload");
  return rec;
}

std::filesystem::path record_path(const std::filesystem::path& store, const std::string& doc_id) {
  if (doc_id.empty() || doc_id.find('/') != std::string::npos || doc_id.find('\\') != std::string::npos ||
      doc_id == "." || doc_id == "..") {
    throw ParameterError("doc id '" + doc_id + "' is not a valid file name");
  }
  return store / (doc_id + ".amtf");
}

void write_record_file(const std::filesystem::path& store, const FeatureRecord& record) {
  const auto path = record_path(store, record.doc_id);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot open " + path.string() + " for writing");
  write_features(out, record);
}

FeatureRecord read_record_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open " + path.string());
  return read_features(in);
}

void require_fingerprint(const FeatureRecord& record, std::uint64_t expected) {
  if (record.encoder_fingerprint != expected) {
    throw StaleEncoderError("features for '" + record.doc_id + "' were extracted by encoder " +
                            std::to_string(record.encoder_fingerprint) + ", expected " +
                            std::to_string(expected));
  }
}

Tensor record_features(const FeatureRecord& record) { return dequantize(record.quantized); }

}  // namespace amortenc
