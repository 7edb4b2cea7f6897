#include "amortenc/cost_model.hpp"

#include <cstdio>
#include <sstream>

namespace amortenc {

std::uint64_t encoder_flops(const EncoderConfig& config, std::size_t seq_len) {
  const std::uint64_t L = config.num_layers;
  const std::uint64_t d = config.model_dim;
  const std::uint64_t n = seq_len;
  return L * (24 * n * d * d + 4 * n * n * d);
}

std::uint64_t storage_per_token(PoolingStage stage, const EncoderConfig& config, QuantKind scheme) {
  const std::uint64_t bits = QuantScheme{scheme, {}}.bits_per_element();
  const std::uint64_t layers = stage == PoolingStage::raw_layers ? config.num_layers : 1;
  return layers * config.model_dim * bits;
}

void CostScenario::validate() const {
  full_config.validate();
  distilled_config.validate();
  if (seq_len == 0) throw ParameterError("seq_len must be >= 1");
  if (num_tasks == 0) throw ParameterError("num_tasks must be >= 1");
  if (!(head_cost_fraction >= 0.0 && head_cost_fraction < 1.0)) {
    throw ParameterError("head_cost_fraction must lie in [0, 1)");
  }
}

std::vector<CostCurvePoint> cumulative_flops(const CostScenario& scenario) {
  scenario.validate();
  const double full = static_cast<double>(encoder_flops(scenario.full_config, scenario.seq_len));
  const double distilled =
      static_cast<double>(encoder_flops(scenario.distilled_config, scenario.seq_len));
  const double head = scenario.head_cost_fraction * full;
  std::vector<CostCurvePoint> curve;
  curve.reserve(scenario.num_tasks);
  for (std::size_t k = 1; k <= scenario.num_tasks; ++k) {
    const double kk = static_cast<double>(k);
    curve.push_back({k, kk * full, kk * distilled, full + kk * head});
  }
  return curve;
}

std::optional<std::size_t> break_even_tasks(const CostScenario& scenario) {
  for (const auto& point : cumulative_flops(scenario)) {
    if (point.shared < point.single_distilled) return point.k;
  }
  return std::nullopt;
}

std::vector<StorageRow> storage_table(const EncoderConfig& config, std::size_t reference_tokens) {
  std::vector<StorageRow> rows;
  for (auto stage : {PoolingStage::raw_layers, PoolingStage::layer_pooled}) {
    for (auto scheme : {QuantKind::f32, QuantKind::f16, QuantKind::u8, QuantKind::bit1}) {
      const auto bits = storage_per_token(stage, config, scheme);
      rows.push_back({stage == PoolingStage::raw_layers ? "all layers" : "layer-pooled", stage,
                      scheme, bits, (bits * reference_tokens + 7) / 8});
    }
  }
  return rows;
}

CostReport cost_report(const CostScenario& scenario, std::size_t reference_tokens) {
  CostReport report;
  report.curve = cumulative_flops(scenario);
  report.break_even_k = break_even_tasks(scenario);
  report.storage = storage_table(scenario.full_config, reference_tokens);
  report.reference_doc_tokens = reference_tokens;
  return report;
}

std::string cost_curve_csv(const CostReport& report) {
  std::ostringstream out;
  out << "k,strategy,flops\n";
  char buf[64];
  auto emit = [&](std::size_t k, const char* name, double flops) {
    std::snprintf(buf, sizeof(buf), "%.0f", flops);
    out << k << ',' << name << ',' << buf << '\n';
  };
  for (const auto& p : report.curve) {
    emit(p.k, "single-full", p.single_full);
    emit(p.k, "single-distilled", p.single_distilled);
    emit(p.k, "shared-frozen", p.shared);
  }
  return out.str();
}

std::string storage_table_text(const CostReport& report) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-14s %-6s %14s %18s\n", "pooling", "width", "bits/token",
                ("bytes/" + std::to_string(report.reference_doc_tokens) + "-token doc").c_str());
  out << buf;
  for (const auto& row : report.storage) {
    std::snprintf(buf, sizeof(buf), "%-14s %-6s %14llu %18llu\n", row.pooling.c_str(),
                  quant_kind_name(row.scheme).c_str(),
                  static_cast<unsigned long long>(row.bits_per_token),
                  static_cast<unsigned long long>(row.bytes_for_reference_doc));
    out << buf;
  }
  return out.str();
}

}  // namespace amortenc
