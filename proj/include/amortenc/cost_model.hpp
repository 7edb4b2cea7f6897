#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "amortenc/encoder.hpp"
#include "amortenc/feature_store.hpp"
#include "amortenc/quantization.hpp"

namespace amortenc {

// Forward-pass FLOPs, two per multiply-add, normalization/softmax/bias ignored:
//   per layer 8nd^2 (Q, K, V, O) + 16nd^2 (FFN at 4d) + 4n^2 d (scores, mixing)
//   total     L * (24 n d^2 + 4 n^2 d)
std::uint64_t encoder_flops(const EncoderConfig& config, std::size_t seq_len);

// Stored bits per input token. raw_layers keeps the L post-embedding layers.
std::uint64_t storage_per_token(PoolingStage stage, const EncoderConfig& config, QuantKind scheme);

struct CostScenario {
  EncoderConfig full_config;
  EncoderConfig distilled_config;
  double head_cost_fraction = 0.0;  // per-task pooling + head FLOPs / full encoder FLOPs
  std::size_t seq_len = 128;
  std::size_t num_tasks = 20;

  void validate() const;
};

struct CostCurvePoint {
  std::size_t k = 0;
  double single_full = 0;
  double single_distilled = 0;
  double shared = 0;
};

struct StorageRow {
  std::string pooling;  // "all layers" or "layer-pooled"
  PoolingStage stage = PoolingStage::layer_pooled;
  QuantKind scheme = QuantKind::f32;
  std::uint64_t bits_per_token = 0;
  std::uint64_t bytes_for_reference_doc = 0;
};

struct CostReport {
  std::vector<CostCurvePoint> curve;  // k = 1..num_tasks
  std::optional<std::size_t> break_even_k;
  std::vector<StorageRow> storage;
  std::size_t reference_doc_tokens = 50;
};

std::vector<CostCurvePoint> cumulative_flops(const CostScenario& scenario);

// Smallest k <= num_tasks with shared(k) < single_distilled(k).
std::optional<std::size_t> break_even_tasks(const CostScenario& scenario);

std::vector<StorageRow> storage_table(const EncoderConfig& config, std::size_t reference_tokens);

CostReport cost_report(const CostScenario& scenario, std::size_t reference_tokens = 50);

// "k,strategy,flops" rows for plotting.
std::string cost_curve_csv(const CostReport& report);
// Plain-text storage table.
std::string storage_table_text(const CostReport& report);

}  // namespace amortenc
