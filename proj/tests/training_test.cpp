#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "amortenc/training.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace amortenc;

namespace {

const EncoderConfig kToy{2, 8, 2, 32, 16, 8, 1};

std::vector<TokenSeq> toy_inputs(CounterRng& rng, std::size_t count) {
  std::vector<TokenSeq> out;
  for (std::size_t i = 0; i < count; ++i) {
    TokenSeq seq{{kClsId}};
    while (seq.ids.size() < 6) seq.ids.push_back(kFirstWordId + static_cast<int>(rng.index(12)));
    out.push_back(seq);
  }
  return out;
}

// Two tasks with different pooling so every parameter group is exercised.
struct ToyObjective {
  EncoderWeights<double> encoder;
  std::vector<TaskModule<double>> modules;
  std::vector<std::vector<TokenSeq>> inputs;
  std::vector<BatchRef> batches;

  explicit ToyObjective(std::uint64_t seed) {
    CounterRng rng(seed);
    encoder = init_model(kToy).weights.cast<double>();
    encoder.visit([&](BasicTensor<double>& t) {
      for (auto& v : t.values()) v += rng.normal(0.0, 0.2);
    });
    const char* specs[] = {"learned-comb,mha", "layer-avg:2,pos-avg"};
    const std::size_t classes[] = {3, 2};
    const double alphas[] = {0.7, 0.3};
    inputs.resize(2);
    batches.resize(2);
    for (std::size_t t = 0; t < 2; ++t) {
      TaskModule<double> m;
      m.pooler = Pooler<double>::init(PoolingSpec::parse(specs[t]), 3, 2, 8, 2, rng);
      if (m.pooler.layer.mode == LayerMode::learned_comb)
        m.pooler.layer.logits = test::random_tensor<double>({3}, rng);
      if (m.pooler.position.mode == PositionMode::mha)
        m.pooler.position.mha.query = test::random_tensor<double>({8}, rng);
      m.head = Head<double>::init(8, classes[t], rng);
      for (auto* b : {&m.head.b1, &m.head.b2})
        for (auto& v : b->values()) v = rng.normal(0.0, 0.3);
      modules.push_back(m);
      inputs[t] = toy_inputs(rng, 3);
    }
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t i = 0; i < 3; ++i) {
        batches[t].inputs.push_back(&inputs[t][i]);
        batches[t].labels.push_back((i + t) % classes[t]);
      }
      batches[t].weight = alphas[t];
    }
  }

  double loss() const { return multitask_objective<double>(kToy, encoder, modules, batches, true, nullptr); }

  std::vector<BasicTensor<double>*> params() {
    std::vector<BasicTensor<double>*> out;
    encoder.visit([&](BasicTensor<double>& t) { out.push_back(&t); });
    for (auto& m : modules) TaskModule<double>::visit(m, [&](BasicTensor<double>& t) { out.push_back(&t); });
    return out;
  }
};

std::vector<const BasicTensor<double>*> grad_list(const ObjectiveGrads<double>& g) {
  std::vector<const BasicTensor<double>*> out;
  g.encoder.visit([&](const BasicTensor<double>& t) { out.push_back(&t); });
  for (const auto& m : g.modules) TaskModule<double>::visit(m, [&](const BasicTensor<double>& t) { out.push_back(&t); });
  return out;
}

std::string head_bytes(const TrainedHead& head) {
  std::ostringstream out;
  save_head(out, head);
  return out.str();
}

std::string model_bytes(const EncoderModel& model) {
  std::ostringstream out;
  save_model(out, model);
  return out.str();
}

TaskDataset balanced_binary() {
  TaskDataset task;
  task.name = "balanced";
  task.num_classes = 2;
  for (int i = 0; i < 10; ++i) {
    task.train.push_back({{5 + i % 7, 6}, {}, static_cast<std::size_t>(i % 2)});
    task.dev.push_back({{6 + i % 5, 9}, {}, static_cast<std::size_t>(i % 2)});
  }
  return task;
}

}  // namespace

TEST_CASE("task weights") {
  const std::vector<std::size_t> uniform{100, 100, 100};
  for (double t : {0.1, 0.5, 1.0})
    for (double w : task_weights(uniform, t)) CHECK(w == doctest::Approx(1.0 / 3).epsilon(1e-12));

  const std::vector<std::size_t> d{3000, 300, 3};
  const auto prop = task_weights(d, 1.0);
  CHECK(prop[0] == doctest::Approx(3000.0 / 3303).epsilon(1e-12));
  CHECK(prop[1] == doctest::Approx(300.0 / 3303).epsilon(1e-12));
  CHECK(prop[2] == doctest::Approx(3.0 / 3303).epsilon(1e-12));

  // 256-bit evaluation of D^T / sum D^T at T = 0.1
  const auto cold = task_weights(d, 0.1);
  CHECK(std::abs(cold[0] - 0.43563200239208839859) <= 1e-12);
  CHECK(std::abs(cold[1] - 0.34603479944951155427) <= 1e-12);
  CHECK(std::abs(cold[2] - 0.21833319815840004714) <= 1e-12);

  double prev_ratio = std::numeric_limits<double>::infinity();
  for (double t : {1.0, 0.8, 0.5, 0.3, 0.1, 0.05, 0.01}) {
    const auto w = task_weights(d, t);
    CHECK(std::abs(w[0] + w[1] + w[2] - 1.0) <= 1e-9);
    CHECK(w[0] > w[1]);
    CHECK(w[1] > w[2]);
    const double ratio = w[0] / w[2];
    CHECK(ratio < prev_ratio);
    prev_ratio = ratio;
  }
  const std::vector<std::size_t> single{42};
  CHECK(task_weights(single, 0.1) == std::vector<double>{1.0});
  const std::vector<std::size_t> with_zero{10, 0};
  CHECK_THROWS_AS(task_weights(with_zero, 0.1), ParameterError);
  CHECK_THROWS_AS(task_weights(d, 0.0), ParameterError);
}

TEST_CASE("head forward") {
  const auto zero = Head<float>::zeros(4, 3);
  const auto probs = head_forward(Tensor({4}, {1, -2, 3, 0.5f}), zero);
  for (auto p : probs.values()) CHECK(p == doctest::Approx(1.0 / 3));

  Head<double> h;
  h.w1 = BasicTensor<double>({2, 2}, {1, 2, -1, 0});
  h.b1 = BasicTensor<double>({2}, {0.5, -0.5});
  h.w2 = BasicTensor<double>({2, 2}, {1, -1, 2, 0});
  h.b2 = BasicTensor<double>({2}, {0, 1});
  const auto p = head_forward(BasicTensor<double>({2}, {0.3, -0.7}), h);
  // tanh/softmax evaluated by hand at 30 digits
  CHECK(std::abs(p[0] - 0.73294822206124205) <= 1e-6);
  CHECK(std::abs(p[1] - 0.26705177793875795) <= 1e-6);

  CounterRng rng(1);
  const auto big = Head<float>::init(16, 5, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = head_forward(test::random_tensor<float>({16}, rng, 5.0), big);
    double s = 0;
    for (auto v : q.values()) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
  CHECK_THROWS_AS(head_forward(Tensor({3}), big), ParameterError);
}

TEST_CASE("head gradients match central differences in double") {
  CounterRng rng(2);
  TaskModule<double> module;
  module.pooler.layer = LayerPooling<double>::last();
  module.pooler.position = PositionPooling<double>::cls();
  module.head = Head<double>::init(8, 3, rng);
  for (auto* b : {&module.head.b1, &module.head.b2})
    for (auto& v : b->values()) v = rng.normal(0.0, 0.5);
  auto features = test::random_tensor<double>({4, 8}, rng);
  auto loss = [&] { return example_loss<double>(features, false, module, 2, 1.0, nullptr, nullptr); };

  auto grads = module.zeros_like();
  BasicTensor<double> d_features(features.shape());
  example_loss<double>(features, false, module, 2, 1.0, &grads, &d_features);

  std::vector<BasicTensor<double>*> params;
  std::vector<const BasicTensor<double>*> analytic;
  Head<double>::visit(module.head, [&](BasicTensor<double>& t) { params.push_back(&t); });
  Head<double>::visit(grads.head, [&](const BasicTensor<double>& t) { analytic.push_back(&t); });
  CHECK(test::max_rel_error(test::flatten(analytic), test::numeric_gradient(params, loss)) <= 1e-4);
  CHECK(test::max_rel_error(test::flatten<double>({&d_features}), test::numeric_gradient({&features}, loss)) <= 1e-4);
}

TEST_CASE("multi-task objective gradients match central differences") {
  ToyObjective toy(3);
  ObjectiveGrads<double> grads;
  multitask_objective<double>(kToy, toy.encoder, toy.modules, toy.batches, true, &grads);
  const auto numeric = test::numeric_gradient(toy.params(), [&] { return toy.loss(); });
  // key biases have exactly zero gradient; the floor absorbs their difference noise
  CHECK(test::max_rel_error(test::flatten(grad_list(grads)), numeric, 1e-4) <= 1e-4);
}

TEST_CASE("one Adam step equals the optimizer applied to the finite-difference gradient") {
  ToyObjective toy(4);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epsilon = 1e-6;
  const auto numeric = test::numeric_gradient(toy.params(), [&] { return toy.loss(); });

  std::vector<double> before;
  for (auto* t : toy.params())
    for (auto v : t->values()) before.push_back(v);
  ObjectiveGrads<double> grads;
  multitask_objective<double>(kToy, toy.encoder, toy.modules, toy.batches, true, &grads);
  Adam<double> adam(cfg);
  adam.step(toy.params(), grad_list(grads));
  CHECK(adam.steps_taken() == 1);

  // first step: m_hat = g, v_hat = g^2
  double err = 0, norm = 0;
  std::size_t i = 0;
  for (auto* t : toy.params())
    for (auto v : t->values()) {
      const double g = numeric[i];
      const double expected = -cfg.learning_rate * g / (std::abs(g) + cfg.epsilon);
      const double actual = v - before[i];
      err += (actual - expected) * (actual - expected);
      norm += expected * expected;
      ++i;
    }
  CHECK(std::sqrt(err / norm) <= 1e-3);
}

TEST_CASE("batch sampler visits every index once per epoch") {
  BatchSampler sampler(10, CounterRng(1));
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    for (int b = 0; b < 5; ++b)
      for (auto i : sampler.next(2)) seen.insert(i);
    CHECK(seen.size() == 10);
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 10);
  }
}

TEST_CASE("multi-task pretraining contracts") {
  const auto suite = generate_task_suite(3, 2, std::vector<std::size_t>{60, 50, 40});
  const EncoderModel initial = init_model(EncoderConfig{2, 16, 2, 32, 64, 64, 3});
  const auto pooling = PoolingSpec::parse("layer-avg,mha");
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.batch_size = 8;
  cfg.seed = 5;

  SUBCASE("deterministic") {
    const TaskDataset* tasks[] = {&suite.tasks[0], &suite.tasks[1]};
    const auto a = multitask_pretrain(initial, tasks, pooling, cfg);
    const auto b = multitask_pretrain(initial, tasks, pooling, cfg);
    CHECK(model_bytes(a.model) == model_bytes(b.model));
    CHECK(a.losses == b.losses);
    CHECK(model_bytes(a.model) != model_bytes(initial));
  }
  SUBCASE("a single task ignores the temperature") {
    const TaskDataset* one[] = {&suite.tasks[0]};
    auto hot = cfg;
    hot.temperature = 1.0;
    const auto a = multitask_pretrain(initial, one, pooling, cfg);
    const auto b = multitask_pretrain(initial, one, pooling, hot);
    CHECK(model_bytes(a.model) == model_bytes(b.model));
    CHECK(a.losses == b.losses);
  }
  SUBCASE("two identical tasks keep equal losses") {
    const TaskDataset* twins[] = {&suite.tasks[1], &suite.tasks[1]};
    const auto r = multitask_pretrain(initial, twins, pooling, cfg);
    REQUIRE(r.losses.size() == cfg.steps);
    for (const auto& step : r.losses) CHECK(step[0] == step[1]);
  }
  SUBCASE("frozen encoder is left untouched") {
    auto frozen = cfg;
    frozen.finetune_encoder = false;
    const TaskDataset* tasks[] = {&suite.tasks[0], &suite.tasks[2]};
    const auto r = multitask_pretrain(initial, tasks, pooling, frozen);
    CHECK(model_bytes(r.model) == model_bytes(initial));
  }
  SUBCASE("NaN loss reports the step") {
    EncoderModel broken = initial;
    broken.weights.token_embeddings[kClsId * 16] = std::numeric_limits<float>::quiet_NaN();
    const TaskDataset* tasks[] = {&suite.tasks[0]};
    try {
      multitask_pretrain(broken, tasks, pooling, cfg);
      FAIL("expected a training error");
    } catch (const TrainingError& e) {
      CHECK(e.step() == 0);
    }
  }
}

TEST_CASE("stage-2 head on a frozen encoder") {
  const auto suite = generate_task_suite(3, 4, std::vector<std::size_t>{150, 120, 100});
  const EncoderModel model = init_model(EncoderConfig{2, 16, 2, 32, 64, 64, 8});
  const std::string before = model_bytes(model);
  HeadOptions options;
  options.pooling = PoolingSpec::parse("learned-comb,mha");
  TrainConfig cfg;
  cfg.steps = 40;
  cfg.eval_every = 10;
  const auto head = train_head(model, suite.tasks[0], options, cfg);
  CHECK(model_bytes(model) == before);
  CHECK(head.encoder_fingerprint == fingerprint(model));
  CHECK(head.best_dev_accuracy == doctest::Approx(evaluate(head, model, suite.tasks[0])));
  CHECK(head_bytes(train_head(model, suite.tasks[0], options, cfg)) == head_bytes(head));

  std::stringstream buf;
  save_head(buf, head);
  const auto back = load_head(buf);
  CHECK(head_bytes(back) == head_bytes(head));
  CHECK(evaluate(back, model, suite.tasks[0]) == evaluate(head, model, suite.tasks[0]));

  const EncoderModel other = init_model(EncoderConfig{2, 16, 2, 32, 64, 64, 9});
  CHECK_THROWS_AS(evaluate(head, other, suite.tasks[0]), StaleEncoderError);

  std::string corrupt = head_bytes(head);
  corrupt[0] = 'Q';
  std::istringstream bad(corrupt);
  CHECK_THROWS_AS(load_head(bad), FormatError);
}

TEST_CASE("with f32, quantizing before or after layer pooling gives the same inputs") {
  CounterRng rng(5);
  const auto features = test::random_tensor<float>({4, 6, 8}, rng);
  TrainedHead head;
  head.module.pooler.layer = LayerPooling<float>::avg(3);
  head.order = QuantOrder::after_layer_pooling;
  const auto after = prepare_features(features, head);
  head.order = QuantOrder::before_layer_pooling;
  CHECK(prepare_features(features, head) == after);

  head.quant = QuantScheme::bit1();
  const auto before_bits = prepare_features(features, head);
  head.order = QuantOrder::after_layer_pooling;
  const auto prepared = prepare_features(features, head);
  for (auto v : prepared.values()) CHECK(std::abs(v) == 1.0f);
  CHECK_FALSE(before_bits == prepare_features(features, head));
}

TEST_CASE("evaluate contracts") {
  const EncoderModel model = init_model(EncoderConfig{1, 8, 2, 16, 16, 16, 0});
  const auto task = balanced_binary();
  TrainedHead head;
  head.task = task.name;
  head.encoder_fingerprint = fingerprint(model);
  head.module.pooler.layer = LayerPooling<float>::last();
  head.module.pooler.position = PositionPooling<float>::cls();
  head.module.head = Head<float>::zeros(8, 2);
  // all-zero logits tie, and ties go to class 0
  CHECK(evaluate(head, model, task) == doctest::Approx(0.5));
  head.module.head.b2[1] = 1.0f;
  CHECK(evaluate(head, model, task) == doctest::Approx(0.5));

  CounterRng rng(6);
  head.module.head = Head<float>::init(8, 2, rng);
  const double base = evaluate(head, model, task);
  for (float c : {0.5f, 3.0f, 100.0f}) {
    auto scaled = head;
    for (auto& v : scaled.module.head.w2.values()) v *= c;
    for (auto& v : scaled.module.head.b2.values()) v *= c;
    CHECK(evaluate(scaled, model, task) == base);
  }
  auto three = balanced_binary();
  three.num_classes = 3;
  CHECK_THROWS_AS(evaluate(head, model, three), ParameterError);
}

TEST_CASE("planted task learnability after multi-task pretraining") {
  const auto suite = generate_task_suite(6, 21, std::vector<std::size_t>{600, 600, 400, 400, 300, 300});
  std::vector<const TaskDataset*> others;
  for (std::size_t t = 1; t < 6; ++t) others.push_back(&suite.tasks[t]);
  TrainConfig pre;
  pre.steps = 150;
  pre.learning_rate = 3e-3;
  const auto pretrained =
      multitask_pretrain(init_model(EncoderConfig{}), others, PoolingSpec::parse("layer-avg,mha"), pre);

  TrainConfig cfg;
  cfg.steps = 500;
  cfg.learning_rate = 3e-3;
  cfg.eval_every = 25;
  const auto& presence = suite.tasks[0];
  REQUIRE(presence.family == "motif-presence");

  HeadOptions cls;
  cls.pooling = PoolingSpec::parse("last,cls");
  CHECK(train_head(pretrained.model, presence, cls, cfg).best_dev_accuracy >= 0.90);

  HeadOptions f32;
  f32.pooling = PoolingSpec::parse("layer-avg,mha");
  HeadOptions u8 = f32;
  u8.quant = QuantKind::u8;
  const double a = train_head(pretrained.model, presence, f32, cfg).best_dev_accuracy;
  const double b = train_head(pretrained.model, presence, u8, cfg).best_dev_accuracy;
  CHECK(std::abs(a - b) <= 0.01);
}

namespace {

struct Audit : LotoObserver {
  std::map<std::string, std::size_t> leaks;
  std::map<std::string, std::set<std::string>> pretrained_on;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> stage2;
  std::vector<std::string> held;

  void on_pretrain_batch(std::span<const std::string> held_out, const std::string& task,
                         std::span<const std::size_t>) override {
    for (const auto& h : held_out) {
      if (h == task) ++leaks[h];
      pretrained_on[h].insert(task);
    }
  }
  void on_stage2(const std::string& task, std::uint64_t before, std::uint64_t after) override {
    held.push_back(task);
    stage2.emplace_back(before, after);
  }
};

}  // namespace

TEST_CASE("leave-one-task-out protocol") {
  const auto suite = generate_task_suite(3, 6, std::vector<std::size_t>{60, 60, 60});
  LotoConfig cfg;
  cfg.encoder = EncoderConfig{1, 8, 2, 16, 64, 64, 0};
  cfg.pooling = PoolingSpec::parse("layer-avg,pos-avg");
  cfg.quants = {QuantKind::f32, QuantKind::bit1};
  cfg.pretrain.steps = 4;
  cfg.pretrain.batch_size = 4;
  cfg.head.steps = 5;
  cfg.head.eval_every = 5;

  Audit audit;
  const auto report = leave_one_task_out(suite.tasks, cfg, &audit);
  REQUIRE(report.entries.size() == 6);
  CHECK(audit.leaks.empty());
  CHECK(audit.held.size() == 6);  // one stage-2 run per task and scheme
  CHECK(std::set<std::string>(audit.held.begin(), audit.held.end()).size() == 3);
  for (const auto& [b, a] : audit.stage2) CHECK(b == a);
  for (const auto& e : report.entries) {
    CHECK(e.held_out_batches == 0);
    CHECK(e.pretrain_tasks.size() == 2);
    CHECK(std::find(e.pretrain_tasks.begin(), e.pretrain_tasks.end(), e.task) == e.pretrain_tasks.end());
    CHECK(e.encoder_before == e.encoder_after);
  }
  for (const auto& [held, seen] : audit.pretrained_on) CHECK(seen.size() == 2);

  const auto again = leave_one_task_out(suite.tasks, cfg);
  CHECK(again.csv() == report.csv());
  CHECK(report.csv().rfind("seed,task,family,pooling,quant,accuracy\n", 0) == 0);

  SUBCASE("k = 2 pretrains on exactly one task") {
    const std::vector<TaskDataset> two(suite.tasks.begin(), suite.tasks.begin() + 2);
    auto one = cfg;
    one.quants = {QuantKind::f32};
    const auto r = leave_one_task_out(two, one);
    REQUIRE(r.entries.size() == 2);
    for (const auto& e : r.entries) CHECK(e.pretrain_tasks.size() == 1);
  }
  SUBCASE("family hold-out removes every task of the family") {
    const auto six = generate_task_suite(6, 6, std::vector<std::size_t>{40, 40, 40, 40, 40, 40});
    auto fam = cfg;
    fam.mode = LotoMode::hold_out_family;
    fam.quants = {QuantKind::f32};
    Audit family_audit;
    const auto r = leave_one_task_out(six.tasks, fam, &family_audit);
    CHECK(r.entries.size() == 6);
    CHECK(family_audit.leaks.empty());
    for (const auto& e : r.entries)
      for (const auto& name : e.pretrain_tasks)
        for (const auto& t : six.tasks)
          if (t.name == name) CHECK(t.family != e.family);
  }
}
