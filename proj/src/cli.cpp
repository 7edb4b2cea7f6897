#include "amortenc/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "amortenc/cost_model.hpp"
#include "amortenc/errors.hpp"
#include "amortenc/feature_store.hpp"
#include "amortenc/kernels.hpp"
#include "amortenc/tasks.hpp"
#include "amortenc/training.hpp"

namespace amortenc::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "amortenc 0.1.0";

struct EncoderFlags {
  std::size_t layers = 4;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t max_positions = 64;

  void add(CLI::App* app) {
    app->add_option("--layers", layers, "Encoder layers L")->capture_default_str();
    app->add_option("--dim", dim, "Model width d")->capture_default_str();
    app->add_option("--heads", heads, "Attention heads h")->capture_default_str();
    app->add_option("--ffn", ffn, "Feed-forward width")->capture_default_str();
    app->add_option("--max-positions", max_positions, "Maximum sequence length")->capture_default_str();
  }
  EncoderConfig config(std::size_t vocab_size, std::uint64_t seed) const {
    EncoderConfig c{layers, dim, heads, ffn, vocab_size, max_positions, seed};
    c.validate();
    return c;
  }
};

json encoder_json(const EncoderConfig& c) {
  return {{"num_layers", c.num_layers}, {"model_dim", c.model_dim},     {"num_heads", c.num_heads},
          {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size},   {"max_positions", c.max_positions},
          {"seed", c.seed}};
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

json train_json(const TrainConfig& c) {
  return {{"steps", c.steps},       {"batch_size", c.batch_size},       {"learning_rate", c.learning_rate},
          {"temperature", c.temperature}, {"seed", c.seed},            {"finetune_encoder", c.finetune_encoder},
          {"beta1", c.beta1},       {"beta2", c.beta2},                 {"epsilon", c.epsilon},
          {"eval_every", c.eval_every}};
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StorageError("cannot write " + path.string());
  out << text;
  if (!out) throw StorageError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what(), 0);
  }
}

// Exactly one manifest per artifact directory; no timestamps, so identical
// runs write identical manifests.
void write_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& args,
                    std::uint64_t seed, json config, json inputs, std::vector<std::string> outputs) {
  std::sort(outputs.begin(), outputs.end());
  json manifest = {{"command", command}, {"args", args},     {"version", kVersion}, {"seed", seed},
                   {"config", std::move(config)}, {"inputs", std::move(inputs)}, {"outputs", outputs}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

const TaskDataset& find_task(const std::vector<TaskDataset>& tasks, const std::string& name) {
  for (const auto& t : tasks)
    if (t.name == name) return t;
  throw ParameterError("suite has no task named '" + name + "'");
}

std::string doc_id(const std::string& task, const char* split, std::size_t index) {
  return task + "." + split + "." + std::to_string(index);
}

std::string fixed(double v, int digits = 6) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// ---- gen-tasks ------------------------------------------------------------

struct GenTasks {
  std::size_t num = 6;
  std::uint64_t seed = 0;
  std::vector<std::size_t> sizes;
  std::size_t dev_size = 300;
  std::string out_dir;

  void add(CLI::App& app) {
    auto* sub = app.add_subcommand("gen-tasks", "Generate a planted-rule task suite");
    sub->add_option("--num", num, "Number of tasks")->required();
    sub->add_option("--seed", seed, "Generator seed")->capture_default_str();
    sub->add_option("--sizes", sizes, "Train sizes, comma separated")->delimiter(',')->required();
    sub->add_option("--dev-size", dev_size, "Dev examples per task")->capture_default_str();
    sub->add_option("--out", out_dir, "Suite directory")->required();
  }

  int run(const std::vector<std::string>& args, std::ostream& out) const {
    SuiteOptions options;
    options.dev_size = dev_size;
    const auto suite = generate_task_suite(num, seed, sizes, options);
    fs::create_directories(out_dir);
    write_suite(out_dir, suite);
    std::vector<std::string> outputs{"vocab.tsv", "suite.jsonl"};
    for (const auto& t : suite.tasks) {
      outputs.push_back(t.name + ".train.tsv");
      outputs.push_back(t.name + ".dev.tsv");
      out << t.name << "\t" << task_kind_name(t.kind) << "\tclasses=" << t.num_classes
          << "\ttrain=" << t.train.size() << "\tdev=" << t.dev.size() << "\n";
    }
    write_manifest(out_dir, "gen-tasks", args, seed,
                   {{"num_tasks", num}, {"sizes", sizes}, {"dev_size", dev_size}}, json::object(), outputs);
    return kExitOk;
  }
};

// ---- pretrain-mt ----------------------------------------------------------

struct PretrainMt {
  std::string suite_dir, out_dir, pooling = "layer-avg,mha";
  std::vector<std::string> hold_out;
  EncoderFlags enc;
  TrainConfig cfg;
  bool freeze_encoder = false;

  PretrainMt() {
    cfg.steps = 150;
    cfg.learning_rate = 3e-3;
  }

  void add(CLI::App& app) {
    auto* sub = app.add_subcommand("pretrain-mt", "Multi-task pretraining over a suite");
    sub->add_option("--suite", suite_dir, "Suite directory")->required();
    sub->add_option("--hold-out", hold_out, "Tasks excluded from pretraining")->delimiter(',');
    sub->add_option("--pooling", pooling, "Pooling spec")->capture_default_str();
    sub->add_option("--steps", cfg.steps, "Optimizer steps")->capture_default_str();
    sub->add_option("--batch-size", cfg.batch_size, "Batch size per task")->capture_default_str();
    sub->add_option("--lr", cfg.learning_rate, "Learning rate")->capture_default_str();
    sub->add_option("--temperature", cfg.temperature, "Task weight temperature T")->capture_default_str();
    sub->add_option("--seed", cfg.seed, "Seed for encoder init and sampling")->capture_default_str();
    sub->add_flag("--freeze-encoder", freeze_encoder, "Train poolers and heads only");
    enc.add(sub);
    sub->add_option("--out", out_dir, "Output directory")->required();
  }

  int run(const std::vector<std::string>& args, std::ostream& out) {
    cfg.finetune_encoder = !freeze_encoder;
    const auto spec = PoolingSpec::parse(pooling);
    auto suite = read_suite(suite_dir);
    for (const auto& name : hold_out) find_task(suite.tasks, name);
    std::vector<const TaskDataset*> tasks;
    std::vector<std::string> names;
    for (const auto& t : suite.tasks) {
      if (std::find(hold_out.begin(), hold_out.end(), t.name) != hold_out.end()) continue;
      tasks.push_back(&t);
      names.push_back(t.name);
    }
    if (tasks.empty()) throw ParameterError("every task is held out");
    const auto config = enc.config(suite.vocab.capacity(), cfg.seed);

    auto result = multitask_pretrain(init_model(config), tasks, spec, cfg);
    fs::create_directories(fs::path(out_dir) / "heads");
    save_model(fs::path(out_dir) / "encoder.amtm", result.model);
    const auto fp = fingerprint(result.model);
    std::vector<std::string> outputs{"encoder.amtm", "losses.csv"};
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      TrainedHead head;
      head.task = tasks[i]->name;
      head.encoder_fingerprint = fp;
      head.spec = spec;
      head.module = result.modules[i];
      save_head(fs::path(out_dir) / "heads" / (tasks[i]->name + ".amth"), head);
      outputs.push_back("heads/" + tasks[i]->name + ".amth");
    }
    std::ostringstream losses;
    losses << "step,task,loss\n";
    for (std::size_t s = 0; s < result.losses.size(); ++s)
      for (std::size_t i = 0; i < tasks.size(); ++i)
        losses << s << ',' << tasks[i]->name << ',' << fixed(result.losses[s][i]) << '\n';
    write_text(fs::path(out_dir) / "losses.csv", losses.str());

    write_manifest(out_dir, "pretrain-mt", args, cfg.seed,
                   {{"encoder", encoder_json(config)}, {"train", train_json(cfg)}, {"pooling", spec.to_string()},
                    {"pretrain_tasks", names}, {"hold_out", hold_out}, {"fingerprint", hex64(fp)}},
                   {{"suite", suite_dir}}, outputs);
    out << "pretrained on " << names.size() << " tasks, encoder " << hex64(fp) << "\n";
    return kExitOk;
  }
};

// ---- extract --------------------------------------------------------------

struct Extract {
  std::string encoder_path, suite_dir, out_dir, stage = "pooled", layer_pooling = "layer-avg", quant = "f32";
  std::vector<std::string> task_names;
  std::size_t calibration_vectors = 1024;

  void add(CLI::App& app) {
    auto* sub = app.add_subcommand("extract", "Encode a suite once and write a feature store");
    sub->add_option("--encoder", encoder_path, "Encoder checkpoint")->required();
    sub->add_option("--suite", suite_dir, "Suite directory")->required();
    sub->add_option("--task", task_names, "Tasks to extract (default: all)")->delimiter(',');
    sub->add_option("--stage", stage, "raw | pooled")->capture_default_str();
    sub->add_option("--layer-pooling", layer_pooling, "last | layer-avg[:m] for the pooled stage")
        ->capture_default_str();
    sub->add_option("--quant", quant, "f32 | f16 | u8 | bit1")->capture_default_str();
    sub->add_option("--out", out_dir, "Store directory")->required();
  }

  int run(const std::vector<std::string>& args, std::ostream& out) {
    const auto model = load_model(encoder_path);
    const auto fp = fingerprint(model);
    const auto pooling_stage = parse_stage(stage);
    const auto kind = parse_quant_kind(quant);
    const auto spec = PoolingSpec::parse(layer_pooling + ",cls");
    if (pooling_stage == PoolingStage::layer_pooled && spec.layer == LayerMode::learned_comb)
      throw ParameterError("learned-comb is trained per task; store raw layers instead");
    CounterRng unused_rng(0);
    const auto layer = Pooler<float>::init(spec, model.config.num_layers + 1, model.config.num_layers,
                                           model.config.model_dim, model.config.num_heads, unused_rng)
                           .layer;
    auto suite = read_suite(suite_dir);
    std::vector<const TaskDataset*> tasks;
    if (task_names.empty()) {
      for (const auto& t : suite.tasks) tasks.push_back(&t);
    } else {
      for (const auto& name : task_names) tasks.push_back(&find_task(suite.tasks, name));
    }

    fs::create_directories(out_dir);
    json calibration = json::object();
    std::size_t records = 0;
    for (const auto* task : tasks) {
      auto stored = [&](const LayerFeatures& f) -> Tensor {
        if (pooling_stage == PoolingStage::layer_pooled) return pool_layers(f, layer);
        const std::size_t n = f.dim(1), d = f.dim(2);
        Tensor raw({f.dim(0) - 1, n, d});
        std::copy(f.data() + n * d, f.data() + f.size(), raw.data());
        return raw;
      };
      std::vector<TokenSeq> train_inputs, dev_inputs;
      for (const auto& ex : task->train) train_inputs.push_back(encode_example(ex, task->kind, model.config.max_positions));
      for (const auto& ex : task->dev) dev_inputs.push_back(encode_example(ex, task->kind, model.config.max_positions));
      const auto train = encode_batch(model, train_inputs);
      const auto dev = encode_batch(model, dev_inputs);

      QuantScheme scheme{kind, {}};
      if (kind == QuantKind::u8) {
        std::vector<Tensor> sample;
        std::size_t rows = 0;
        for (const auto& f : train) {
          if (rows >= calibration_vectors) break;
          sample.push_back(stored(f));
          rows += sample.back().size() / sample.back().shape().back();
        }
        scheme.params = calibrate_rows(sample, calibration_vectors);
        calibration[task->name] = {{"scale", scheme.params.scale}, {"zero_point", scheme.params.zero_point}};
      }
      for (auto [split, feats] : {std::pair{"train", &train}, std::pair{"dev", &dev}}) {
        for (std::size_t i = 0; i < feats->size(); ++i) {
          FeatureRecord rec{doc_id(task->name, split, i), fp, pooling_stage, quantize(stored((*feats)[i]), scheme)};
          write_record_file(out_dir, rec);
          ++records;
        }
      }
    }
    std::vector<std::string> names;
    for (const auto* t : tasks) names.push_back(t->name);
    write_manifest(out_dir, "extract", args, model.config.seed,
                   {{"encoder", encoder_json(model.config)}, {"fingerprint", hex64(fp)}, {"stage", stage_name(pooling_stage)},
                    {"layer_pooling", layer_pooling}, {"quant", quant_kind_name(kind)}, {"tasks", names},
                    {"calibration", calibration}, {"records", records}},
                   {{"encoder", encoder_path}, {"suite", suite_dir}}, {"*.amtf"});
    out << "wrote " << records << " records (" << stage_name(pooling_stage) << ", " << quant_kind_name(kind)
        << ")\n";
    return kExitOk;
  }
};

// ---- train-head -----------------------------------------------------------

struct TrainHeadCmd {
  std::string suite_dir, task_name, out_dir, pooling = "layer-avg,mha", quant = "f32", order = "after-pooling";
  std::string from_encoder, from_store;
  TrainConfig cfg;

  TrainHeadCmd() {
    cfg.steps = 200;
    cfg.learning_rate = 3e-3;
    cfg.eval_every = 25;
  }

  void add(CLI::App& app) {
    auto* sub = app.add_subcommand("train-head", "Train a task head on frozen features");
    sub->add_option("--suite", suite_dir, "Suite directory")->required();
    sub->add_option("--task", task_name, "Task name")->required();
    sub->add_option("--pooling", pooling, "Pooling spec")->capture_default_str();
    sub->add_option("--quant", quant, "f32 | f16 | u8 | bit1")->capture_default_str();
    sub->add_option("--quant-order", order, "after-pooling | before-pooling")->capture_default_str();
    auto* enc = sub->add_option("--from-encoder", from_encoder, "Encoder checkpoint");
    auto* store = sub->add_option("--from-store", from_store, "Feature store directory");
    enc->excludes(store);
    store->excludes(enc);
    sub->add_option("--steps", cfg.steps, "Optimizer steps")->capture_default_str();
    sub->add_option("--batch-size", cfg.batch_size, "Batch size")->capture_default_str();
    sub->add_option("--lr", cfg.learning_rate, "Learning rate")->capture_default_str();
    sub->add_option("--eval-every", cfg.eval_every, "Dev evaluation cadence")->capture_default_str();
    sub->add_option("--seed", cfg.seed, "Seed")->capture_default_str();
    sub->add_option("--out", out_dir, "Output directory")->required();
  }

  TrainedHead from_store_features(const TaskDataset& task, const HeadOptions& options, json& inputs) const {
    const auto manifest = read_json(fs::path(from_store) / "manifest.json");
    const auto config = encoder_from_json(manifest.at("config").at("encoder"));
    const auto fp = std::stoull(manifest.at("config").at("fingerprint").get<std::string>(), nullptr, 16);
    const auto stage = parse_stage(manifest.at("config").at("stage").get<std::string>());
    if (stage == PoolingStage::layer_pooled) {
      const auto stored = PoolingSpec::parse(manifest.at("config").at("layer_pooling").get<std::string>() + ",cls");
      if (stored.layer != options.pooling.layer ||
          stored.resolved_avg_layers(config.num_layers) != options.pooling.resolved_avg_layers(config.num_layers))
        throw ParameterError("store was layer-pooled with " + stored.to_string() +
                             "; the requested pooling needs a different layer pooling");
    }
    const std::size_t slabs = stage == PoolingStage::raw_layers ? config.num_layers : config.num_layers + 1;
    auto head = init_head(config, fp, task, options, cfg, slabs);
    head.order = stage == PoolingStage::raw_layers ? QuantOrder::before_layer_pooling : QuantOrder::after_layer_pooling;

    FeatureSet set;
    bool first = true;
    for (auto [split, examples, feats, labels] :
         {std::tuple{"train", &task.train, &set.train, &set.train_labels},
          std::tuple{"dev", &task.dev, &set.dev, &set.dev_labels}}) {
      for (std::size_t i = 0; i < examples->size(); ++i) {
        const auto rec = read_record_file(record_path(from_store, doc_id(task.name, split, i)));
        require_fingerprint(rec, fp);
        if (rec.stage != stage) throw FormatError("record " + rec.doc_id + " has an unexpected stage", 0);
        if (first) {
          head.quant = rec.quantized.scheme;
          if (head.quant.kind == QuantKind::f32) head.order = options.order;
          first = false;
        } else if (!(rec.quantized.scheme == head.quant)) {
          throw FormatError("record " + rec.doc_id + " uses a different quantization scheme", 0);
        }
        auto f = record_features(rec);
        feats->push_back(stage == PoolingStage::raw_layers && !head.layered() ? pool_layers(f, head.module.pooler.layer)
                                                                              : std::move(f));
        labels->push_back((*examples)[i].label);
      }
    }
    inputs["store"] = from_store;
    return fit_head(set, std::move(head), cfg);
  }

  int run(const std::vector<std::string>& args, std::ostream& out) {
    if (from_encoder.empty() == from_store.empty())
      throw ParameterError("train-head needs exactly one of --from-encoder or --from-store");
    HeadOptions options{PoolingSpec::parse(pooling), parse_quant_kind(quant), parse_quant_order(order)};
    auto suite = read_suite(suite_dir);
    const auto& task = find_task(suite.tasks, task_name);
    json inputs = {{"suite", suite_dir}};
    TrainedHead head;
    if (!from_encoder.empty()) {
      const auto model = load_model(from_encoder);
      head = train_head(model, task, options, cfg);
      inputs["encoder"] = from_encoder;
    } else {
      if (options.quant != QuantKind::f32)
        throw ParameterError("--quant applies at extraction time; store features are used as stored");
      head = from_store_features(task, options, inputs);
    }
    fs::create_directories(out_dir);
    save_head(fs::path(out_dir) / "head.amth", head);
    json metrics = {{"task", head.task},
                    {"best_dev_accuracy", head.best_dev_accuracy},
                    {"best_step", head.best_step},
                    {"quant", head.quant.name()},
                    {"encoder_fingerprint", hex64(head.encoder_fingerprint)}};
    write_text(fs::path(out_dir) / "metrics.json", metrics.dump(2) + "\n");
    write_manifest(out_dir, "train-head", args, cfg.seed,
                   {{"train", train_json(cfg)}, {"pooling", options.pooling.to_string()},
                    {"quant", quant_kind_name(options.quant)}, {"quant_order", order}, {"task", task_name}},
                   inputs, {"head.amth", "metrics.json"});
    out << task.name << " best dev accuracy " << fixed(head.best_dev_accuracy, 4) << " at step " << head.best_step
        << "\n";
    return kExitOk;
  }
};

// ---- eval -----------------------------------------------------------------

struct Eval {
  std::string head_path, encoder_path, suite_dir, task_name, out_dir;

  void add(CLI::App& app) {
    auto* sub = app.add_subcommand("eval", "Dev accuracy of a trained head");
    sub->add_option("--head", head_path, "Head checkpoint")->required();
    sub->add_option("--encoder", encoder_path, "Encoder checkpoint")->required();
    sub->add_option("--suite", suite_dir, "Suite directory")->required();
    sub->add_option("--task", task_name, "Task name (default: the head's task)");
    sub->add_option("--out", out_dir, "Output directory")->required();
  }

  int run(const std::vector<std::string>& args, std::ostream& out) const {
    const auto head = load_head(fs::path(head_path));
    const auto model = load_model(encoder_path);
    auto suite = read_suite(suite_dir);
    const auto& task = find_task(suite.tasks, task_name.empty() ? head.task : task_name);
    const double acc = evaluate(head, model, task);
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "metrics.json",
               json{{"task", task.name}, {"accuracy", acc}, {"dev_size", task.dev.size()}}.dump(2) + "\n");
    write_manifest(out_dir, "eval", args, model.config.seed, {{"task", task.name}},
                   {{"head", head_path}, {"encoder", encoder_path}, {"suite", suite_dir}}, {"metrics.json"});
    out << task.name << " accuracy " << fixed(acc, 4) << "\n";
    return kExitOk;
  }
};

// ---- loto -----------------------------------------------------------------

struct Loto {
  std::string suite_dir, out_dir, pooling = "layer-avg,mha", order = "after-pooling";
  std::vector<std::string> quants{"f32"};
  std::size_t seeds = 1;
  std::uint64_t base_seed = 0;
  bool hold_out_family = false, all_tasks = false, random_encoder = false;
  EncoderFlags enc;
  TrainConfig pretrain, head;

  Loto() {
    pretrain.steps = 150;
    pretrain.learning_rate = 3e-3;
    head.steps = 200;
    head.learning_rate = 3e-3;
    head.eval_every = 25;
  }

  void add(CLI::App& app) {
    auto* sub = app.add_subcommand("loto", "Leave-one-task-out protocol");
    sub->add_option("--suite", suite_dir, "Suite directory")->required();
    sub->add_option("--pooling", pooling, "Pooling spec")->capture_default_str();
    sub->add_option("--quant", quants, "Schemes, comma separated")->delimiter(',')->capture_default_str();
    sub->add_option("--quant-order", order, "after-pooling | before-pooling")->capture_default_str();
    sub->add_option("--seeds", seeds, "Number of seeds")->capture_default_str();
    sub->add_option("--seed", base_seed, "First seed")->capture_default_str();
    auto* fam = sub->add_flag("--hold-out-family", hold_out_family, "Hold out one task family at a time");
    auto* all = sub->add_flag("--all-tasks", all_tasks, "Pretrain on every task; evaluate its heads");
    auto* rnd = sub->add_flag("--random-encoder", random_encoder, "Frozen randomly initialized encoder");
    fam->excludes(all)->excludes(rnd);
    all->excludes(rnd);
    sub->add_option("--pretrain-steps", pretrain.steps, "Stage-1 steps")->capture_default_str();
    sub->add_option("--head-steps", head.steps, "Stage-2 steps")->capture_default_str();
    sub->add_option("--lr", pretrain.learning_rate, "Stage-1 learning rate")->capture_default_str();
    sub->add_option("--head-lr", head.learning_rate, "Stage-2 learning rate")->capture_default_str();
    sub->add_option("--batch-size", pretrain.batch_size, "Batch size")->capture_default_str();
    sub->add_option("--temperature", pretrain.temperature, "Task weight temperature T")->capture_default_str();
    sub->add_option("--eval-every", head.eval_every, "Stage-2 dev evaluation cadence")->capture_default_str();
    enc.add(sub);
    sub->add_option("--out", out_dir, "Output directory")->required();
  }

  int run(const std::vector<std::string>& args, std::ostream& out) {
    auto suite = read_suite(suite_dir);
    LotoConfig cfg;
    cfg.pooling = PoolingSpec::parse(pooling);
    cfg.quants.clear();
    for (const auto& q : quants) cfg.quants.push_back(parse_quant_kind(q));
    cfg.order = parse_quant_order(order);
    cfg.mode = hold_out_family ? LotoMode::hold_out_family
               : all_tasks     ? LotoMode::all_tasks
               : random_encoder ? LotoMode::random_encoder
                                : LotoMode::leave_one_out;
    head.batch_size = pretrain.batch_size;
    if (seeds == 0) throw ParameterError("--seeds must be >= 1");

    LotoReport report;
    for (std::size_t s = 0; s < seeds; ++s) {
      const std::uint64_t seed = base_seed + s;
      cfg.encoder = enc.config(suite.vocab.capacity(), seed);
      cfg.pretrain = pretrain;
      cfg.pretrain.seed = seed;
      cfg.head = head;
      cfg.head.seed = seed;
      auto part = leave_one_task_out(suite.tasks, cfg);
      for (auto& e : part.entries) report.entries.push_back(std::move(e));
      out << "seed " << seed;
      for (auto q : cfg.quants) out << " " << quant_kind_name(q) << "=" << fixed(part.mean_accuracy(q), 4);
      out << "\n";
    }
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "loto.csv", report.csv());
    json means = json::object();
    for (auto q : cfg.quants) means[quant_kind_name(q)] = report.mean_accuracy(q);
    write_text(fs::path(out_dir) / "summary.json",
               json{{"mean_accuracy", means}, {"seeds", seeds}, {"entries", report.entries.size()}}.dump(2) + "\n");
    const char* mode = hold_out_family ? "hold-out-family" : all_tasks ? "all-tasks" : random_encoder ? "random-encoder" : "leave-one-out";
    write_manifest(out_dir, "loto", args, base_seed,
                   {{"encoder", encoder_json(enc.config(suite.vocab.capacity(), base_seed))},
                    {"pretrain", train_json(pretrain)}, {"head", train_json(head)}, {"pooling", cfg.pooling.to_string()},
                    {"quants", quants}, {"quant_order", order}, {"mode", mode}, {"seeds", seeds}},
                   {{"suite", suite_dir}}, {"loto.csv", "summary.json"});
    return kExitOk;
  }
};

// ---- cost-report ----------------------------------------------------------

struct CostReportCmd {
  std::vector<std::size_t> full{24, 1024, 16}, distilled{6, 768, 12};
  std::size_t seq_len = 0, max_k = 20, reference_tokens = 50;
  double head_frac = 0.0;
  std::string out_dir;

  void add(CLI::App& app) {
    auto* sub = app.add_subcommand("cost-report", "Cumulative FLOPs and storage tables");
    sub->add_option("--full", full, "L,d,h of the shared encoder")->delimiter(',')->expected(3)->capture_default_str();
    sub->add_option("--distilled", distilled, "L,d,h of the per-task model")->delimiter(',')->expected(3)->capture_default_str();
    sub->add_option("--seq-len", seq_len, "Sequence length n")->required();
    sub->add_option("--head-frac", head_frac, "Per-task head FLOPs / encoder FLOPs")->capture_default_str();
    sub->add_option("--max-k", max_k, "Largest task count")->capture_default_str();
    sub->add_option("--doc-tokens", reference_tokens, "Tokens in the storage reference document")->capture_default_str();
    sub->add_option("--out", out_dir, "Output directory")->required();
  }

  static EncoderConfig shaped(const std::vector<std::size_t>& v) {
    if (v.size() != 3) throw ParameterError("expected L,d,h");
    EncoderConfig c;
    c.num_layers = v[0];
    c.model_dim = v[1];
    c.num_heads = v[2];
    c.ffn_dim = 4 * v[1];
    c.vocab_size = 50265;
    c.max_positions = 514;
    return c;
  }

  int run(const std::vector<std::string>& args, std::ostream& out) const {
    CostScenario scenario{shaped(full), shaped(distilled), head_frac, seq_len, max_k};
    const auto report = cost_report(scenario, reference_tokens);
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "curve.csv", cost_curve_csv(report));
    std::ostringstream summary;
    const double ratio = static_cast<double>(encoder_flops(scenario.full_config, seq_len)) /
                         static_cast<double>(encoder_flops(scenario.distilled_config, seq_len));
    summary << "break_even_k,full_flops,distilled_flops,compute_ratio\n"
            << (report.break_even_k ? std::to_string(*report.break_even_k) : std::string("none")) << ','
            << encoder_flops(scenario.full_config, seq_len) << ',' << encoder_flops(scenario.distilled_config, seq_len)
            << ',' << fixed(ratio, 4) << '\n';
    write_text(fs::path(out_dir) / "summary.csv", summary.str());
    write_text(fs::path(out_dir) / "storage.txt", storage_table_text(report));
    write_manifest(out_dir, "cost-report", args, 0,
                   {{"full", full}, {"distilled", distilled}, {"seq_len", seq_len}, {"head_frac", head_frac},
                    {"max_k", max_k}, {"doc_tokens", reference_tokens}},
                   json::object(), {"curve.csv", "summary.csv", "storage.txt"});
    out << "break-even tasks: " << (report.break_even_k ? std::to_string(*report.break_even_k) : "none")
        << "\ncompute ratio: " << fixed(ratio, 3) << "\n"
        << storage_table_text(report);
    return kExitOk;
  }
};

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  kernels::configure_threads_from_env();
  CLI::App app{"Amortized text encoder pipeline", "amortenc"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  GenTasks gen;
  PretrainMt pretrain;
  Extract extract;
  TrainHeadCmd train;
  Eval eval;
  Loto loto;
  CostReportCmd cost;
  gen.add(app);
  pretrain.add(app);
  extract.add(app);
  train.add(app);
  eval.add(app);
  loto.add(app);
  cost.add(app);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "gen-tasks") return gen.run(args, out);
    if (name == "pretrain-mt") return pretrain.run(args, out);
    if (name == "extract") return extract.run(args, out);
    if (name == "train-head") return train.run(args, out);
    if (name == "eval") return eval.run(args, out);
    if (name == "loto") return loto.run(args, out);
    if (name == "cost-report") return cost.run(args, out);
    err << "error: unknown subcommand " << name << "\n";
    return kExitUsage;
  } catch (const TrainingError& e) {
    err << "training error: " << e.what() << "\n";
    return kExitTraining;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const json::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace amortenc::cli
