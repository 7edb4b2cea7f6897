// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "amortenc/cost_model.hpp"
#include "amortenc/feature_store.hpp"
#include "amortenc/training.hpp"
#include "support.hpp"

using namespace amortenc;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c);
  return buf;
}

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

// Relative error max |a - n| / max(|a|, |n|, 1e-4). The floor covers entries
// whose true gradient is exactly zero (attention key biases).
constexpr double kGradFloor = 1e-4;

Outcome compute_ratio() {
  Outcome o;
  for (std::size_t n : {64, 128, 512}) {
    const double r = static_cast<double>(encoder_flops(kFull, n)) / static_cast<double>(encoder_flops(kDistilled, n));
    o.detail += fmt("n=%.0f ratio %.3f ", static_cast<double>(n), r);
    o.require(r >= 6.5 && r <= 7.6, fmt("ratio %.3f outside [6.5, 7.6]", r));
  }
  return o;
}

Outcome storage_arithmetic() {
  Outcome o;
  const std::size_t raw_bytes = storage_per_token(PoolingStage::raw_layers, kFull, QuantKind::f16) * 50 / 8;
  const std::size_t raw_payload = quantize(Tensor({24, 50, 1024}, 0.5f), QuantScheme::f16()).payload.size();
  const std::size_t bit1 = storage_per_token(PoolingStage::layer_pooled, kFull, QuantKind::bit1);
  const std::size_t bit1_payload = quantize(Tensor({50, 1024}, 0.5f), QuantScheme::bit1()).payload.size();
  const std::size_t f16 = storage_per_token(PoolingStage::layer_pooled, kFull, QuantKind::f16);
  o.require(raw_bytes == 2457600 && raw_payload == 2457600, "raw f16 document is not 2457600 bytes");
  o.require(bit1 == 1024 && bit1_payload * 8 == 50 * 1024, "layer-pooled bit1 is not 1024 bits/token");
  o.require(f16 == 16 * bit1, "f16/bit1 reduction is not exactly 16x");
  o.detail = "raw " + std::to_string(raw_payload) + " B, bit1 " + std::to_string(bit1) + " bits/token, ratio " +
             std::to_string(f16 / bit1) + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

Outcome break_even() {
  Outcome o;
  for (double f : {0.0, 0.001, 0.005, 0.01}) {
    CostScenario s;
    s.full_config = kFull;
    s.distilled_config = kDistilled;
    s.head_cost_fraction = f;
    s.seq_len = 128;
    s.num_tasks = 20;
    const auto k = break_even_tasks(s);
    o.detail += fmt("f=%.3f k=%.0f ", f, k ? static_cast<double>(*k) : -1.0);
    o.require(k == std::optional<std::size_t>(8), fmt("head fraction %.3f does not break even at 8", f));
  }
  return o;
}

Outcome gradient_suite() {
  Outcome o;
  const EncoderConfig config{2, 8, 2, 32, 16, 8, 1};
  CounterRng rng(11);
  auto encoder = init_model(config).weights.cast<double>();
  encoder.visit([&](BasicTensor<double>& t) {
    for (auto& v : t.values()) v += rng.normal(0.0, 0.2);
  });

  // learned-comb + MHA on one task, layer-avg + position-avg on the other
  std::vector<TaskModule<double>> modules;
  std::vector<std::vector<TokenSeq>> inputs(2);
  std::vector<BatchRef> batches(2);
  const char* specs[] = {"learned-comb,mha", "layer-avg:2,pos-avg"};
  const std::size_t classes[] = {3, 2};
  for (std::size_t t = 0; t < 2; ++t) {
    TaskModule<double> m;
    m.pooler = Pooler<double>::init(PoolingSpec::parse(specs[t]), 3, 2, 8, 2, rng);
    if (m.pooler.layer.mode == LayerMode::learned_comb) m.pooler.layer.logits = test::random_tensor<double>({3}, rng);
    if (m.pooler.position.mode == PositionMode::mha) {
      auto& mha = m.pooler.position.mha;
      mha.query = test::random_tensor<double>({8}, rng);
      for (auto* p : {&mha.value_proj, &mha.out_proj})
        for (auto& v : p->values()) v += rng.normal(0.0, 0.3);
    }
    m.head = Head<double>::init(8, classes[t], rng);
    for (auto* b : {&m.head.b1, &m.head.b2})
      for (auto& v : b->values()) v = rng.normal(0.0, 0.3);
    modules.push_back(m);
    for (std::size_t i = 0; i < 3; ++i) {
      TokenSeq seq{{kClsId}};
      while (seq.ids.size() < 6) seq.ids.push_back(kFirstWordId + static_cast<int>(rng.index(12)));
      inputs[t].push_back(seq);
    }
  }
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t i = 0; i < 3; ++i) {
      batches[t].inputs.push_back(&inputs[t][i]);
      batches[t].labels.push_back((i + t) % classes[t]);
    }
    batches[t].weight = t == 0 ? 0.7 : 0.3;
  }

  ObjectiveGrads<double> grads;
  multitask_objective<double>(config, encoder, modules, batches, true, &grads);
  auto loss = [&] { return multitask_objective<double>(config, encoder, modules, batches, true, nullptr); };

  auto check = [&](const char* group, std::vector<BasicTensor<double>*> params,
                   std::vector<const BasicTensor<double>*> analytic) {
    const double err = test::max_rel_error(test::flatten(analytic), test::numeric_gradient(params, loss), kGradFloor);
    o.detail += std::string(group) + fmt(" %.2e ", err);
    o.require(err <= 1e-4, std::string(group) + " gradient error above 1e-4");
  };

  std::vector<BasicTensor<double>*> p;
  std::vector<const BasicTensor<double>*> a;
  encoder.visit([&](BasicTensor<double>& t) { p.push_back(&t); });
  grads.encoder.visit([&](const BasicTensor<double>& t) { a.push_back(&t); });
  check("encoder", p, a);

  check("learned-comb", {&modules[0].pooler.layer.logits}, {&grads.modules[0].pooler.layer.logits});

  p.clear();
  a.clear();
  MhaParams<double>::visit(modules[0].pooler.position.mha, [&](BasicTensor<double>& t) { p.push_back(&t); });
  MhaParams<double>::visit(grads.modules[0].pooler.position.mha, [&](const BasicTensor<double>& t) { a.push_back(&t); });
  check("mha", p, a);

  p.clear();
  a.clear();
  for (std::size_t t = 0; t < 2; ++t) {
    Head<double>::visit(modules[t].head, [&](BasicTensor<double>& x) { p.push_back(&x); });
    Head<double>::visit(grads.modules[t].head, [&](const BasicTensor<double>& x) { a.push_back(&x); });
  }
  check("head", p, a);
  return o;
}

Outcome quantization_properties() {
  Outcome o;
  CounterRng rng(21);
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const double lo = -5.0 * rng.uniform();
    const double hi = lo + 0.01 + 10.0 * rng.uniform();
    Tensor x({16});
    for (auto& v : x.values()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
    const auto p = calibrate_affine(x.values());
    const auto back = dequantize(quantize(x, QuantScheme::u8(p)));
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double excess = std::abs(back[i] - x[i]) - p.scale / 2;
      worst = std::max(worst, excess);
    }
  }
  // float rounding of the dequantized value
  o.require(worst <= 1e-6, fmt("u8 error exceeds scale/2 by %.2e", worst));

  bool signs = true;
  for (int trial = 0; trial < 1000; ++trial) {
    auto x = test::random_tensor<float>({3, 1 + rng.index(40)}, rng);
    if (trial % 5 == 0) x[0] = 0.0f;
    const auto back = dequantize(quantize(x, QuantScheme::bit1()));
    for (std::size_t i = 0; i < x.size(); ++i) signs &= back[i] == (x[i] >= 0.0f ? 1.0f : -1.0f);
  }
  o.require(signs, "bit1 sign pattern not preserved");

  std::size_t exact = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    FeatureRecord rec;
    rec.doc_id = "doc-" + std::to_string(i);
    rec.encoder_fingerprint = rng.next_u64();
    rec.stage = rng.coin() ? PoolingStage::raw_layers : PoolingStage::layer_pooled;
    Shape s;
    if (rec.stage == PoolingStage::raw_layers) s.push_back(1 + rng.index(4));
    s.push_back(1 + rng.index(12));
    s.push_back(1 + rng.index(20));
    const auto x = test::random_tensor<float>(s, rng);
    const QuantKind kinds[] = {QuantKind::f32, QuantKind::f16, QuantKind::u8, QuantKind::bit1};
    const auto kind = kinds[rng.index(4)];
    rec.quantized = quantize(x, kind == QuantKind::u8 ? QuantScheme::u8(calibrate_affine(x.values()))
                                                      : QuantScheme{kind, {}});
    std::ostringstream first;
    write_features(first, rec);
    std::istringstream in(first.str());
    const auto back = read_features(in);
    std::ostringstream second;
    write_features(second, back);
    exact += (back == rec && second.str() == first.str()) ? 1 : 0;
  }
  o.require(exact == 100, std::to_string(exact) + "/100 records round-trip exactly");
  o.detail = fmt("u8 worst excess over scale/2 %.2e, ", worst) + "bit1 signs " + (signs ? "exact" : "broken") +
             ", records " + std::to_string(exact) + "/100" + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

Outcome pooling_identities() {
  Outcome o;
  CounterRng rng(31);
  double comb = 0.0, mha_one = 0.0, mha_same = 0.0;
  bool avg_last = true;
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = test::random_tensor<float>({4, 5, 8}, rng);
    avg_last &= pool_layers(f, LayerPooling<float>::avg(1)) == pool_layers(f, LayerPooling<float>::last());
    for (std::size_t pick = 0; pick < 4; ++pick) {
      Tensor logits({4}, -40.0f);
      logits[pick] = 40.0f;
      const auto mixed = pool_layers(f, LayerPooling<float>::learned_comb(logits));
      for (std::size_t i = 0; i < mixed.size(); ++i) comb = std::max(comb, double(std::abs(mixed[i] - f.slab(pick)[i])));
    }
    auto params = MhaParams<float>::identity(8, 2);
    params.query = test::random_tensor<float>({8}, rng, 3.0);
    const auto one = test::random_tensor<float>({1, 8}, rng);
    const auto out1 = mha_pool(one, params);
    Tensor same({5, 8});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 8; ++j) same.at(i, j) = one[j];
    const auto out2 = mha_pool(same, params);
    for (std::size_t j = 0; j < 8; ++j) {
      mha_one = std::max(mha_one, double(std::abs(out1[j] - one[j])));
      mha_same = std::max(mha_same, double(std::abs(out2[j] - one[j])));
    }
  }

  // Small integer case; expected values from a 30-digit scalar evaluation.
  MhaParams<float> p;
  p.num_heads = 2;
  p.query = Tensor({4}, {1, -1, 0, 2});
  p.key_proj = Tensor({4, 4}, {1, 0, 0, 1, 0, 1, 1, 0, 1, 0, -1, 0, 0, 1, 0, -1});
  p.value_proj = Tensor({4, 4}, {2, 0, 0, 0, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 0, -1});
  p.out_proj = Tensor({4, 4}, {1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1});
  const auto out = mha_pool(Tensor({2, 4}, {1, 0, 2, -1, 0, 1, -1, 1}), p);
  const double expected[] = {1.0, 1.0070353510851738, 1.9575018923699348, 2.9433358564932464};
  double oracle = 0.0;
  for (std::size_t j = 0; j < 4; ++j)
    oracle = std::max(oracle, std::abs(out[j] - expected[j]) / std::max(1.0, std::abs(expected[j])));

  o.require(avg_last, "Avg(1) differs from Last");
  o.require(comb <= 1e-4, fmt("one-hot LearnedComb off by %.2e", comb));
  o.require(mha_one <= 1e-6, fmt("MHA single-position off by %.2e", mha_one));
  o.require(mha_same <= 1e-6, fmt("MHA identical-rows off by %.2e", mha_same));
  o.require(oracle <= 1e-6, fmt("MHA oracle off by %.2e", oracle));
  o.detail = fmt("comb %.1e, mha single %.1e, identical %.1e", comb, mha_one, mha_same) + fmt(", oracle %.1e", oracle) +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

Outcome weight_formula() {
  Outcome o;
  const std::vector<std::size_t> d{3000, 300, 3};
  const std::vector<std::size_t> uniform{250, 250, 250, 250};
  double prev = std::numeric_limits<double>::infinity();
  for (double t : {1.0, 0.8, 0.5, 0.3, 0.2, 0.1, 0.05}) {
    const auto w = task_weights(d, t);
    o.require(std::abs(w[0] + w[1] + w[2] - 1.0) <= 1e-9, fmt("weights at T=%.2f do not sum to 1", t));
    const double ratio = w[0] / w[2];
    o.require(ratio < prev, fmt("max/min ratio does not decrease at T=%.2f", t));
    prev = ratio;
    for (double u : task_weights(uniform, t)) o.require(std::abs(u - 0.25) <= 1e-12, "uniform sizes not symmetric");
  }
  const auto prop = task_weights(d, 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    o.require(std::abs(prop[i] - static_cast<double>(d[i]) / 3303.0) <= 1e-12, "T=1 is not proportional to D");
  const auto cold = task_weights(d, 0.1);
  o.detail = fmt("T=1 [%.5f %.5f %.5f], ", prop[0], prop[1], prop[2]) + fmt("T=0.1 [%.5f %.5f %.5f]", cold[0], cold[1], cold[2]) +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

// Records every pretraining batch and every stage-2 run.
struct ProtocolAudit : LotoObserver {
  std::size_t batches = 0;
  std::size_t leaks = 0;
  std::size_t stage2 = 0;
  std::size_t changed = 0;
  double seconds = 0.0;

  void on_pretrain_batch(std::span<const std::string> held_out, const std::string& task,
                         std::span<const std::size_t>) override {
    const auto t0 = std::chrono::steady_clock::now();
    ++batches;
    for (const auto& h : held_out) leaks += h == task ? 1 : 0;
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  void on_stage2(const std::string&, std::uint64_t before, std::uint64_t after) override {
    ++stage2;
    changed += before != after ? 1 : 0;
  }
};

constexpr std::size_t kSeeds = 5;

struct TransferRuns {
  LotoReport pretrained;
  LotoReport random;
  std::size_t num_tasks = 0;
  ProtocolAudit audit;
  double pretrained_seconds = 0.0;
  double random_seconds = 0.0;
};

TransferRuns run_transfer() {
  TransferRuns runs;
  const std::vector<std::size_t> sizes{1000, 1000, 600, 600, 400, 400};
  for (std::size_t s = 0; s < kSeeds; ++s) {
    const auto suite = generate_task_suite(6, 100 + s, sizes);
    runs.num_tasks = suite.tasks.size();
    LotoConfig cfg;
    cfg.encoder.vocab_size = suite.options.vocab_size;
    cfg.encoder.seed = s;
    cfg.pooling = PoolingSpec::parse("layer-avg,mha");
    cfg.pretrain.steps = 150;
    cfg.pretrain.learning_rate = 3e-3;
    cfg.pretrain.seed = s;
    cfg.head.steps = 200;
    cfg.head.learning_rate = 3e-3;
    cfg.head.eval_every = 25;
    cfg.head.seed = s;

    cfg.quants = {QuantKind::f32, QuantKind::u8, QuantKind::bit1};
    auto t0 = std::chrono::steady_clock::now();
    auto part = leave_one_task_out(suite.tasks, cfg, &runs.audit);
    runs.pretrained_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (auto& e : part.entries) runs.pretrained.entries.push_back(std::move(e));

    cfg.quants = {QuantKind::f32};
    cfg.mode = LotoMode::random_encoder;
    t0 = std::chrono::steady_clock::now();
    part = leave_one_task_out(suite.tasks, cfg);
    runs.random_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (auto& e : part.entries) runs.random.entries.push_back(std::move(e));

    auto seed_mean = [&](const LotoReport& r, QuantKind q) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& e : r.entries)
        if (e.seed == s && e.quant == q) {
          sum += e.accuracy;
          ++n;
        }
      return n ? sum / static_cast<double>(n) : 0.0;
    };
    std::printf("  seed %zu: f32 %.4f  u8 %.4f  bit1 %.4f  random %.4f\n", s,
                seed_mean(runs.pretrained, QuantKind::f32), seed_mean(runs.pretrained, QuantKind::u8),
                seed_mean(runs.pretrained, QuantKind::bit1), seed_mean(runs.random, QuantKind::f32));
    std::fflush(stdout);
  }
  return runs;
}

Outcome loto_transfer(const TransferRuns& runs) {
  Outcome o;
  const double pre = runs.pretrained.mean_accuracy(QuantKind::f32);
  const double rnd = runs.random.mean_accuracy(QuantKind::f32);
  const double margin = 100.0 * (pre - rnd);
  o.detail = fmt("pretrained %.4f vs random %.4f, margin %+.2f points", pre, rnd, margin);
  o.require(runs.pretrained.entries.size() == kSeeds * runs.num_tasks * 3, "missing LOTO entries");
  o.require(runs.random.entries.size() == kSeeds * runs.num_tasks, "missing random-encoder entries");
  o.require(margin >= 5.0, "margin below 5 points");
  return o;
}

Outcome quant_robustness(const TransferRuns& runs) {
  Outcome o;
  const double f32 = runs.pretrained.mean_accuracy(QuantKind::f32);
  const double u8 = runs.pretrained.mean_accuracy(QuantKind::u8);
  const double bit1 = runs.pretrained.mean_accuracy(QuantKind::bit1);
  const double gap_u8 = 100.0 * std::abs(f32 - u8);
  const double gap_bit1 = 100.0 * (f32 - bit1);
  o.detail = fmt("f32 %.4f, u8 %.4f, bit1 %.4f", f32, u8, bit1) + fmt("; gaps u8 %.2f, bit1 %.2f points", gap_u8, gap_bit1);
  o.require(gap_u8 <= 1.0, "u8 gap above 1 point");
  o.require(gap_bit1 <= 5.0, "bit1 gap above 5 points");
  return o;
}

Outcome protocol_integrity(const TransferRuns& runs) {
  Outcome o;
  const auto& a = runs.audit;
  // each (seed, quant) run holds out every task exactly once
  std::map<std::tuple<std::uint64_t, QuantKind, std::string>, std::size_t> held;
  std::size_t counted = 0, self_pretrain = 0, fingerprint_moves = 0;
  for (const auto& e : runs.pretrained.entries) {
    ++held[{e.seed, e.quant, e.task}];
    counted += e.held_out_batches;
    self_pretrain += std::count(e.pretrain_tasks.begin(), e.pretrain_tasks.end(), e.task);
    fingerprint_moves += e.encoder_before != e.encoder_after ? 1 : 0;
  }
  bool once = held.size() == kSeeds * 3 * runs.num_tasks;
  for (const auto& [key, n] : held) once &= n == 1;
  o.require(a.batches > 0, "no pretraining batches observed");
  o.require(a.leaks == 0 && counted == 0, "held-out task contributed pretraining batches");
  o.require(self_pretrain == 0, "held-out task listed among pretraining tasks");
  o.require(once, "a task was not held out exactly once per seed and scheme");
  o.require(a.stage2 == runs.pretrained.entries.size(), "stage-2 runs not all observed");
  o.require(a.changed == 0 && fingerprint_moves == 0, "encoder bytes changed during stage 2");
  o.require(a.seconds < 60.0, "instrumentation overhead above 1 minute");
  o.detail = std::to_string(a.batches) + " batches audited, " + std::to_string(a.leaks) + " from held-out tasks, " +
             std::to_string(a.stage2) + " stage-2 runs, " + std::to_string(a.changed) + " encoder changes" +
             fmt(", overhead %.3fs", a.seconds) + (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

int failures = 0;

// `prior_seconds` is shared work done before the check itself.
void report(int id, const char* name, double limit_seconds, const std::function<Outcome()>& body,
            double prior_seconds = 0.0) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o = body();
  const double seconds =
      prior_seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (seconds >= limit_seconds) o.require(false, fmt("runtime %.1fs over the %.0fs limit", seconds, limit_seconds));
  failures += o.pass ? 0 : 1;
  while (!o.detail.empty() && o.detail.back() == ' ') o.detail.pop_back();
  std::printf("%s criterion %d (%s): %s [%.2fs]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), seconds);
  std::fflush(stdout);
}

}  // namespace

int main() {
  report(1, "compute ratio", 1.0, compute_ratio);
  report(2, "storage arithmetic", 1.0, storage_arithmetic);
  report(3, "break-even", 1.0, break_even);
  report(4, "gradient suite", 120.0, gradient_suite);
  report(5, "quantization properties", 60.0, quantization_properties);
  report(6, "pooling identities", 60.0, pooling_identities);
  report(7, "weight formula", 1.0, weight_formula);

  std::printf("running leave-one-task-out: %zu seeds, pretrained (f32, u8, bit1) and random encoder\n", kSeeds);
  std::fflush(stdout);
  const TransferRuns runs = run_transfer();
  std::printf("  pretrained runs %.1fs, random-encoder runs %.1fs\n", runs.pretrained_seconds, runs.random_seconds);
  report(8, "LOTO transfer", 15.0 * 60.0, [&] { return loto_transfer(runs); },
         runs.pretrained_seconds + runs.random_seconds);
  report(9, "quantized pipeline robustness", 30.0 * 60.0, [&] { return quant_robustness(runs); },
         runs.pretrained_seconds);
  report(10, "protocol integrity", 60.0, [&] { return protocol_integrity(runs); });

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
