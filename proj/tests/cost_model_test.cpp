#include "amortenc/cost_model.hpp"
#include "doctest.h"

using namespace amortenc;

namespace {

EncoderConfig shape(std::size_t layers, std::size_t d, std::size_t heads) {
  EncoderConfig c;
  c.num_layers = layers;
  c.model_dim = d;
  c.num_heads = heads;
  c.ffn_dim = 4 * d;
  return c;
}

const EncoderConfig kFull = shape(24, 1024, 16);
const EncoderConfig kDistilled = shape(6, 768, 12);

CostScenario large_scenario(double head_fraction) {
  CostScenario s;
  s.full_config = kFull;
  s.distilled_config = kDistilled;
  s.head_cost_fraction = head_fraction;
  s.seq_len = 128;
  s.num_tasks = 20;
  return s;
}

}  // namespace

TEST_CASE("encoder_flops formula") {
  CHECK(encoder_flops(shape(1, 1, 1), 1) == 28);
  const double ratio = static_cast<double>(encoder_flops(kFull, 128)) / static_cast<double>(encoder_flops(kDistilled, 128));
  CHECK(ratio == doctest::Approx(7.06).epsilon(0.001));
  for (std::size_t n : {64, 128, 512}) {
    const double r = static_cast<double>(encoder_flops(kFull, n)) / static_cast<double>(encoder_flops(kDistilled, n));
    CHECK(r >= 6.5);
    CHECK(r <= 7.6);
  }
  for (std::size_t n : {1, 17, 300}) {
    CHECK(encoder_flops(shape(8, 64, 4), n) == 2 * encoder_flops(shape(4, 64, 4), n));
    CHECK(encoder_flops(shape(4, 64, 4), n) == 4 * 24 * n * 64 * 64 + 4 * 4 * n * n * 64);
  }
}

TEST_CASE("storage per token") {
  CHECK(storage_per_token(PoolingStage::raw_layers, kFull, QuantKind::f16) * 50 / 8 == 2457600);
  CHECK(storage_per_token(PoolingStage::layer_pooled, kFull, QuantKind::bit1) == 1024);
  CHECK(storage_per_token(PoolingStage::layer_pooled, kFull, QuantKind::f16) ==
        16 * storage_per_token(PoolingStage::layer_pooled, kFull, QuantKind::bit1));
  CHECK(storage_per_token(PoolingStage::layer_pooled, kFull, QuantKind::u8) == 8 * 1024);
  CHECK(storage_per_token(PoolingStage::raw_layers, kFull, QuantKind::f32) == 24 * 1024 * 32);
}

TEST_CASE("cumulative curves") {
  const auto s = large_scenario(0.005);
  const auto curve = cumulative_flops(s);
  REQUIRE(curve.size() == 20);
  const double full = static_cast<double>(encoder_flops(kFull, 128));
  const double dist = static_cast<double>(encoder_flops(kDistilled, 128));
  CHECK(curve[0].shared >= curve[0].single_distilled);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const double k = static_cast<double>(curve[i].k);
    CHECK(curve[i].k == i + 1);
    CHECK(curve[i].single_full == doctest::Approx(k * full));
    CHECK(curve[i].single_distilled == doctest::Approx(k * dist));
    CHECK(curve[i].shared == doctest::Approx(full + k * 0.005 * full));
    if (i > 0) {
      CHECK(curve[i].shared >= curve[i - 1].shared);
      CHECK(curve[i].single_distilled >= curve[i - 1].single_distilled);
      CHECK(curve[i].shared - curve[i - 1].shared == doctest::Approx(0.005 * full));
      CHECK(curve[i].shared < curve[i].single_full);
    }
  }
  const auto flat = cumulative_flops(large_scenario(0.0));
  for (const auto& p : flat) CHECK(p.shared == flat[0].shared);
}

TEST_CASE("break-even") {
  CHECK(break_even_tasks(large_scenario(0.005)) == std::optional<std::size_t>(8));
  for (double f : {0.0, 0.001, 0.01}) CHECK(break_even_tasks(large_scenario(f)) == std::optional<std::size_t>(8));

  // ratio exactly 7: k = 7 ties, k = 8 is the first strict crossing
  CostScenario seven;
  seven.full_config = shape(7, 64, 4);
  seven.distilled_config = shape(1, 64, 4);
  seven.seq_len = 32;
  CHECK(break_even_tasks(seven) == std::optional<std::size_t>(8));

  auto never = large_scenario(1.0 / 7.0);
  CHECK_FALSE(break_even_tasks(never).has_value());
  never.head_cost_fraction = 0.5;
  CHECK_FALSE(break_even_tasks(never).has_value());
  auto bad = large_scenario(1.0);
  CHECK_THROWS_AS(break_even_tasks(bad), ParameterError);
}

TEST_CASE("report rendering") {
  const auto report = cost_report(large_scenario(0.005));
  CHECK(report.break_even_k == std::optional<std::size_t>(8));
  const auto csv = cost_curve_csv(report);
  CHECK(csv.rfind("k,strategy,flops\n", 0) == 0);
  CHECK(csv.find("\n1,shared-frozen,") != std::string::npos);
  const auto table = storage_table_text(report);
  CHECK(table.find("2457600") != std::string::npos);
  CHECK(table.find("1024") != std::string::npos);
  bool saw_bit1 = false;
  for (const auto& row : report.storage)
    if (row.stage == PoolingStage::layer_pooled && row.scheme == QuantKind::bit1) {
      saw_bit1 = true;
      CHECK(row.bits_per_token == 1024);
      CHECK(row.bytes_for_reference_doc == 6400);
    }
  CHECK(saw_bit1);
}
