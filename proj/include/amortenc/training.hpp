#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amortenc/encoder.hpp"
#include "amortenc/pooling.hpp"
#include "amortenc/quantization.hpp"
#include "amortenc/tasks.hpp"

namespace amortenc {

struct TrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double temperature = 0.1;
  std::uint64_t seed = 0;
  bool finetune_encoder = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t eval_every = 50;  // dev evaluation cadence for best-dev head selection

  void validate() const;
};

// Two-layer tanh MLP: softmax(W2^T tanh(W1^T p + b1) + b2).
template <typename T>
struct Head {
  BasicTensor<T> w1;  // d x d
  BasicTensor<T> b1;  // d
  BasicTensor<T> w2;  // d x C
  BasicTensor<T> b2;  // C

  std::size_t input_dim() const { return w1.dim(0); }
  std::size_t num_classes() const { return b2.size(); }
  void validate() const;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(self.w1); f(self.b1); f(self.w2); f(self.b2);
  }

  static Head init(std::size_t d, std::size_t classes, CounterRng& rng);
  static Head zeros(std::size_t d, std::size_t classes);
};

template <typename T>
struct HeadTrace {
  BasicTensor<T> hidden;  // tanh activations, d
  BasicTensor<T> logits;  // C
};

// Class probabilities for one pooled vector.
template <typename T>
BasicTensor<T> head_forward(const BasicTensor<T>& pooled, const Head<T>& head,
                            HeadTrace<T>* trace = nullptr);

// Loss weights alpha_i = D_i^T / sum_j D_j^T, evaluated in log space. T = 1
// gives weights proportional to data size; smaller T flattens them.
std::vector<double> task_weights(std::span<const std::size_t> sizes, double temperature);

// Pooler and head owned by one task.
template <typename T>
struct TaskModule {
  Pooler<T> pooler;
  Head<T> head;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    Pooler<T>::visit(self.pooler, f);
    Head<T>::visit(self.head, f);
  }

  // Same modes and shapes, all trainable entries zero.
  TaskModule zeros_like() const;
  template <typename U>
  TaskModule<U> cast() const;
};

// Cross-entropy of one example through pooler and head. `features` is
// (layers x n x d) when `layered`, else already layer-pooled (n x d).
// Gradients are scaled by `scale` and accumulated when the pointers are set.
template <typename T>
T example_loss(const BasicTensor<T>& features, bool layered, const TaskModule<T>& module,
               std::size_t label, T scale, TaskModule<T>* grads, BasicTensor<T>* d_features);

// Class scores for one example; argmax ties go to the lowest class index.
std::size_t predict(const Tensor& features, bool layered, const TaskModule<float>& module);

struct BatchRef {
  std::vector<const TokenSeq*> inputs;
  std::vector<std::size_t> labels;
  double weight = 1.0;  // alpha for this task
};

template <typename T>
struct ObjectiveGrads {
  EncoderWeights<T> encoder;
  std::vector<TaskModule<T>> modules;
};

// sum_i weight_i * mean cross-entropy over batch i, with modules[i] applied to
// batch i. Per-example work fans out over fixed gradient lanes that are summed
// in lane order, so results do not depend on the thread count.
template <typename T>
T multitask_objective(const EncoderConfig& config, const EncoderWeights<T>& weights,
                      std::span<const TaskModule<T>> modules, std::span<const BatchRef> batches,
                      bool encoder_grads, ObjectiveGrads<T>* grads,
                      std::vector<T>* task_losses = nullptr);

// Adaptive moment estimation with bias correction and a fixed learning rate.
template <typename T>
class Adam {
 public:
  explicit Adam(const TrainConfig& config) : config_(config) {}

  void step(const std::vector<BasicTensor<T>*>& params, const std::vector<const BasicTensor<T>*>& grads);
  std::size_t steps_taken() const { return t_; }

 private:
  TrainConfig config_;
  std::size_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// Cyclic iterator over a shuffled permutation, reshuffled every epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t size, CounterRng rng);
  std::vector<std::size_t> next(std::size_t batch);

 private:
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  CounterRng rng_;
};

// Sees every batch drawn during training.
class BatchObserver {
 public:
  virtual ~BatchObserver() = default;
  virtual void on_batch(std::size_t step, const std::string& task, std::span<const std::size_t> indices) = 0;
};

struct PretrainResult {
  EncoderModel model;
  std::vector<TaskModule<float>> modules;   // one per task, in input order
  std::vector<std::vector<double>> losses;  // [step][task] mean batch loss
};

// One batch per task per step, loss sum_i alpha_i * loss_i. The encoder is
// updated only when cfg.finetune_encoder. Throws TrainingError on NaN loss.
PretrainResult multitask_pretrain(const EncoderModel& initial, std::span<const TaskDataset* const> tasks,
                                  const PoolingSpec& pooling, const TrainConfig& cfg,
                                  BatchObserver* observer = nullptr);

enum class QuantOrder : std::uint8_t { after_layer_pooling = 0, before_layer_pooling = 1 };

std::string quant_order_name(QuantOrder order);
QuantOrder parse_quant_order(std::string_view text);

struct HeadOptions {
  PoolingSpec pooling;
  QuantKind quant = QuantKind::f32;
  QuantOrder order = QuantOrder::after_layer_pooling;
  std::size_t calibration_vectors = 1024;
};

// A stage-2 head with everything needed to apply it to fresh encoder output.
struct TrainedHead {
  std::string task;
  std::uint64_t encoder_fingerprint = 0;
  PoolingSpec spec;
  QuantScheme quant;  // u8 carries calibrated params
  QuantOrder order = QuantOrder::after_layer_pooling;
  TaskModule<float> module;
  double best_dev_accuracy = 0.0;
  std::size_t best_step = 0;

  // Learned-comb pools inside the trainable path, so its features stay layered.
  bool layered() const { return module.pooler.layer.mode == LayerMode::learned_comb; }
};

// Fresh pooler + head for `task`. `layer_slabs` is the layer count of the
// features the pooler sees: L + 1 from the encoder, L from a raw store.
TrainedHead init_head(const EncoderConfig& config, std::uint64_t encoder_fingerprint,
                      const TaskDataset& task, const HeadOptions& options, const TrainConfig& cfg,
                      std::size_t layer_slabs);

// Encoder output -> the features the head consumes: quantized/dequantized
// at the configured point, layer-pooled unless the pooler learns the mix.
Tensor prepare_features(const LayerFeatures& features, const TrainedHead& head);

// Calibration rows (vectors of width d) for u8, taken from up to `limit` rows.
QuantParams calibrate_rows(std::span<const Tensor> features, std::size_t limit);

// Already-prepared features with labels.
struct FeatureSet {
  std::vector<Tensor> train, dev;
  std::vector<std::size_t> train_labels, dev_labels;
};

// Trains pooler + head on fixed features; keeps the best dev checkpoint.
// `head` supplies spec/quant/module initial values; returns the trained copy.
TrainedHead fit_head(const FeatureSet& features, TrainedHead head, const TrainConfig& cfg);

// Stage-2 head on a frozen encoder. The encoder is taken by const reference
// and never modified.
TrainedHead train_head(const EncoderModel& frozen, const TaskDataset& task, const HeadOptions& options,
                       const TrainConfig& cfg);

// Fraction of dev examples whose argmax matches the label.
double evaluate(const TrainedHead& head, const EncoderModel& frozen, const TaskDataset& task);

// Head checkpoint: "AMTH" | u16 version | task | u64 encoder fingerprint |
// pooling spec string | pooler tags + params | quant scheme | quant order |
// head tensors.
void save_head(std::ostream& out, const TrainedHead& head);
TrainedHead load_head(std::istream& in);
void save_head(const std::filesystem::path& path, const TrainedHead& head);
TrainedHead load_head(const std::filesystem::path& path);

enum class LotoMode : std::uint8_t {
  leave_one_out,    // pretrain on k-1 tasks, fresh head on the held-out one
  hold_out_family,  // every task of one family held out together
  all_tasks,        // pretrain on all k tasks, evaluate the multi-task heads
  random_encoder,   // no pretraining: frozen randomly initialized encoder
};

struct LotoConfig {
  EncoderConfig encoder;
  PoolingSpec pooling;
  std::vector<QuantKind> quants{QuantKind::f32};
  QuantOrder order = QuantOrder::after_layer_pooling;
  TrainConfig pretrain;
  TrainConfig head;
  LotoMode mode = LotoMode::leave_one_out;
};

struct LotoEntry {
  std::uint64_t seed = 0;
  std::string task;
  std::string family;
  std::string pooling;
  QuantKind quant = QuantKind::f32;
  double accuracy = 0.0;
  std::vector<std::string> pretrain_tasks;
  std::size_t held_out_batches = 0;  // pretraining batches drawn from this task
  std::uint64_t encoder_before = 0;  // fingerprints around stage 2
  std::uint64_t encoder_after = 0;
};

struct LotoReport {
  std::vector<LotoEntry> entries;

  double mean_accuracy(QuantKind quant) const;
  // seed,task,family,pooling,quant,accuracy
  std::string csv() const;
};

// Events from inside a LOTO run, for protocol audits.
class LotoObserver {
 public:
  virtual ~LotoObserver() = default;
  virtual void on_pretrain_batch(std::span<const std::string> held_out, const std::string& task,
                                 std::span<const std::size_t> indices) = 0;
  virtual void on_stage2(const std::string& task, std::uint64_t before, std::uint64_t after) = 0;
};

LotoReport leave_one_task_out(std::span<const TaskDataset> tasks, const LotoConfig& cfg,
                              LotoObserver* observer = nullptr);

}  // namespace amortenc
