#include "amortenc/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <omp.h>

#include "amortenc/errors.hpp"
#include "amortenc/wire.hpp"

namespace amortenc {

namespace {

// Fixed number of gradient accumulators; work item i always lands in lane i % kLanes.
constexpr std::size_t kLanes = 8;

template <typename T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  auto* d = dst.data();
  const auto* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename T>
void add_module(TaskModule<T>& dst, const TaskModule<T>& src) {
  std::vector<const BasicTensor<T>*> from;
  TaskModule<T>::visit(src, [&](const BasicTensor<T>& t) { from.push_back(&t); });
  std::size_t at = 0;
  TaskModule<T>::visit(dst, [&](BasicTensor<T>& t) { add_into(t, *from[at++]); });
}

template <typename T>
void add_encoder(EncoderWeights<T>& dst, const EncoderWeights<T>& src) {
  std::vector<const BasicTensor<T>*> from;
  src.visit([&](const BasicTensor<T>& t) { from.push_back(&t); });
  std::size_t at = 0;
  dst.visit([&](BasicTensor<T>& t) { add_into(t, *from[at++]); });
}

template <typename T>
void head_backward(const BasicTensor<T>& pooled, const Head<T>& head, const HeadTrace<T>& trace,
                   const BasicTensor<T>& d_logits, Head<T>* grads, BasicTensor<T>& d_pooled) {
  const std::size_t d = head.input_dim();
  const std::size_t c = head.num_classes();
  BasicTensor<T> dz({d});
  for (std::size_t i = 0; i < d; ++i) {
    T acc = 0;
    for (std::size_t k = 0; k < c; ++k) acc += head.w2.at(i, k) * d_logits[k];
    const T h = trace.hidden[i];
    dz[i] = acc * (T(1) - h * h);
  }
  if (grads) {
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t k = 0; k < c; ++k) grads->w2.at(i, k) += trace.hidden[i] * d_logits[k];
    for (std::size_t k = 0; k < c; ++k) grads->b2[k] += d_logits[k];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) grads->w1.at(i, j) += pooled[i] * dz[j];
    for (std::size_t j = 0; j < d; ++j) grads->b1[j] += dz[j];
  }
  for (std::size_t i = 0; i < d; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < d; ++j) acc += head.w1.at(i, j) * dz[j];
    d_pooled[i] += acc;
  }
}

template <typename T>
BasicTensor<T> head_logits(const BasicTensor<T>& pooled, const Head<T>& head, HeadTrace<T>* trace) {
  const std::size_t d = head.input_dim();
  const std::size_t c = head.num_classes();
  if (pooled.size() != d) {
    throw ParameterError("pooled vector has width " + std::to_string(pooled.size()) + ", head expects " +
                     std::to_string(d));
  }
  BasicTensor<T> hidden({d});
  for (std::size_t j = 0; j < d; ++j) {
    T acc = head.b1[j];
    for (std::size_t i = 0; i < d; ++i) acc += pooled[i] * head.w1.at(i, j);
    hidden[j] = std::tanh(acc);
  }
  BasicTensor<T> logits({c});
  for (std::size_t k = 0; k < c; ++k) {
    T acc = head.b2[k];
    for (std::size_t i = 0; i < d; ++i) acc += hidden[i] * head.w2.at(i, k);
    logits[k] = acc;
  }
  if (trace) {
    trace->hidden = hidden;
    trace->logits = logits;
  }
  return logits;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  BasicTensor<T> probs = logits;
  T mx = probs[0];
  for (std::size_t k = 1; k < probs.size(); ++k) mx = std::max(mx, probs[k]);
  T sum = 0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    probs[k] = std::exp(probs[k] - mx);
    sum += probs[k];
  }
  for (std::size_t k = 0; k < probs.size(); ++k) probs[k] /= sum;
  return probs;
}

std::size_t argmax(const Tensor& scores) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

// Runs body(item, lane) for items 0..count-1, each lane sequentially in item
// order. Rethrows the first exception raised by any lane.
template <typename Body>
void run_lanes(std::size_t count, Body&& body) {
  std::exception_ptr failure;
#pragma omp parallel for schedule(static, 1)
  for (std::size_t lane = 0; lane < kLanes; ++lane) {
    try {
      for (std::size_t item = lane; item < count; item += kLanes) body(item, lane);
    } catch (...) {
#pragma omp critical(amortenc_lane_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

std::vector<TokenSeq> encode_examples(const std::vector<Example>& examples, TaskKind kind,
                                      std::size_t max_positions) {
  std::vector<TokenSeq> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(encode_example(ex, kind, max_positions));
  return out;
}

std::vector<std::size_t> labels_of(const std::vector<Example>& examples) {
  std::vector<std::size_t> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.label);
  return out;
}

double accuracy(std::span<const Tensor> features, std::span<const std::size_t> labels, bool layered,
                const TaskModule<float>& module) {
  if (features.empty()) return 0.0;
  const auto count = static_cast<std::ptrdiff_t>(features.size());
  std::size_t correct = 0;
#pragma omp parallel for reduction(+ : correct) schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    if (predict(features[i], layered, module) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(features.size());
}

Tensor roundtrip(const Tensor& x, const QuantScheme& scheme) {
  if (scheme.kind == QuantKind::f32) return x;
  return dequantize(quantize(x, scheme));
}

// Tensor holding the values at the quantization point, before quantizing.
Tensor quantization_input(const LayerFeatures& features, const TrainedHead& head) {
  if (head.layered() || head.order == QuantOrder::before_layer_pooling) return features;
  return pool_layers(features, head.module.pooler.layer);
}

void check_finite(double loss, std::size_t step) {
  if (!std::isfinite(loss)) throw TrainingError("loss is not finite", step);
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ParameterError("learning_rate must be positive");
  if (!(temperature > 0.0) || temperature > 1.0) throw ParameterError("temperature must lie in (0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ParameterError("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ParameterError("epsilon must be positive");
  if (eval_every == 0) throw ParameterError("eval_every must be >= 1");
}

template <typename T>
void Head<T>::validate() const {
  const std::size_t d = w1.rank() == 2 ? w1.dim(0) : 0;
  const std::size_t c = b2.rank() == 1 ? b2.size() : 0;
  if (d == 0 || w1.shape() != Shape{d, d} || b1.shape() != Shape{d} || w2.shape() != Shape{d, c} ||
      c < 2) {
    throw ParameterError("head tensors have inconsistent shapes: w1 " + shape_string(w1.shape()) +
                         ", b1 " + shape_string(b1.shape()) + ", w2 " + shape_string(w2.shape()) +
                         ", b2 " + shape_string(b2.shape()));
  }
}

template <typename T>
Head<T> Head<T>::init(std::size_t d, std::size_t classes, CounterRng& rng) {
  Head h = zeros(d, classes);
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& v : h.w1.values()) v = static_cast<T>(rng.normal() * std_dev);
  for (auto& v : h.w2.values()) v = static_cast<T>(rng.normal() * std_dev);
  return h;
}

template <typename T>
Head<T> Head<T>::zeros(std::size_t d, std::size_t classes) {
  if (d == 0 || classes < 2) throw ParameterError("head needs d >= 1 and at least 2 classes");
  return {BasicTensor<T>({d, d}), BasicTensor<T>({d}), BasicTensor<T>({d, classes}),
          BasicTensor<T>({classes})};
}

template <typename T>
BasicTensor<T> head_forward(const BasicTensor<T>& pooled, const Head<T>& head, HeadTrace<T>* trace) {
  return softmax(head_logits(pooled, head, trace));
}

std::vector<double> task_weights(std::span<const std::size_t> sizes, double temperature) {
  if (sizes.empty()) throw ParameterError("task_weights needs at least one task");
  if (!(temperature > 0.0) || temperature > 1.0) throw ParameterError("temperature must lie in (0, 1]");
  std::vector<double> logs;
  logs.reserve(sizes.size());
  for (auto size : sizes) {
    if (size == 0) throw ParameterError("task size must be >= 1");
    logs.push_back(temperature * std::log(static_cast<double>(size)));
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  double sum = 0.0;
  for (auto& v : logs) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : logs) v /= sum;
  return logs;
}

template <typename T>
TaskModule<T> TaskModule<T>::zeros_like() const {
  TaskModule out = *this;
  TaskModule::visit(out, [](BasicTensor<T>& t) { t.fill(T(0)); });
  return out;
}

template <typename T>
template <typename U>
TaskModule<U> TaskModule<T>::cast() const {
  TaskModule<U> out;
  out.pooler = pooler.template cast<U>();
  std::vector<const BasicTensor<T>*> src;
  Head<T>::visit(head, [&](const BasicTensor<T>& t) { src.push_back(&t); });
  std::size_t at = 0;
  Head<U>::visit(out.head, [&](BasicTensor<U>& t) { t = src[at++]->template cast<U>(); });
  return out;
}

template <typename T>
T example_loss(const BasicTensor<T>& features, bool layered, const TaskModule<T>& module,
               std::size_t label, T scale, TaskModule<T>* grads, BasicTensor<T>* d_features) {
  if (label >= module.head.num_classes()) {
    throw InputError("label " + std::to_string(label) + " out of range for " +
                     std::to_string(module.head.num_classes()) + " classes");
  }
  BasicTensor<T> layer_pooled;
  if (layered) layer_pooled = pool_layers(features, module.pooler.layer);
  const BasicTensor<T>& positions = layered ? layer_pooled : features;

  MhaTrace<T> mha_trace;
  const auto pooled = pool_positions(positions, module.pooler.position, &mha_trace);
  HeadTrace<T> head_trace;
  const auto logits = head_logits(pooled, module.head, &head_trace);

  T mx = logits[0];
  for (std::size_t k = 1; k < logits.size(); ++k) mx = std::max(mx, logits[k]);
  T sum = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) sum += std::exp(logits[k] - mx);
  const T loss = mx + std::log(sum) - logits[label];
  if (!grads && !d_features) return loss;

  auto d_logits = softmax(logits);
  d_logits[label] -= T(1);
  for (auto& v : d_logits.values()) v *= scale;

  BasicTensor<T> d_pooled({pooled.size()});
  head_backward(pooled, module.head, head_trace, d_logits, grads ? &grads->head : nullptr, d_pooled);

  const bool need_positions =
      layered ? (d_features || (grads && module.pooler.layer.mode == LayerMode::learned_comb))
              : d_features != nullptr;
  BasicTensor<T> d_positions;
  if (need_positions) d_positions = BasicTensor<T>(positions.shape());
  pool_positions_backward(positions, module.pooler.position, &mha_trace, d_pooled,
                          need_positions ? &d_positions : nullptr,
                          grads ? &grads->pooler.position : nullptr);
  if (!need_positions) return loss;
  if (layered) {
    pool_layers_backward(features, module.pooler.layer, d_positions, d_features,
                         grads ? &grads->pooler.layer : nullptr);
  } else {
    add_into(*d_features, d_positions);
  }
  return loss;
}

std::size_t predict(const Tensor& features, bool layered, const TaskModule<float>& module) {
  const Tensor positions = layered ? pool_layers(features, module.pooler.layer) : features;
  const auto pooled = pool_positions(positions, module.pooler.position);
  return argmax(head_logits<float>(pooled, module.head, nullptr));
}

template <typename T>
T multitask_objective(const EncoderConfig& config, const EncoderWeights<T>& weights,
                      std::span<const TaskModule<T>> modules, std::span<const BatchRef> batches,
                      bool encoder_grads, ObjectiveGrads<T>* grads, std::vector<T>* task_losses) {
  if (modules.size() != batches.size()) {
    throw ParameterError("objective has " + std::to_string(modules.size()) + " modules but " +
                         std::to_string(batches.size()) + " batches");
  }
  std::vector<std::pair<std::size_t, std::size_t>> items;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    if (batches[t].inputs.size() != batches[t].labels.size() || batches[t].inputs.empty())
      throw ParameterError("batch " + std::to_string(t) + " is empty or has mismatched labels");
    for (std::size_t b = 0; b < batches[t].inputs.size(); ++b) items.emplace_back(t, b);
  }

  struct Lane {
    EncoderWeights<T> encoder;
    std::vector<TaskModule<T>> modules;
  };
  const bool want_encoder = grads && encoder_grads;
  std::vector<Lane> lanes(grads ? kLanes : 0);
  for (auto& lane : lanes) {
    if (want_encoder) lane.encoder = EncoderWeights<T>::zeros(config);
    for (const auto& m : modules) lane.modules.push_back(m.zeros_like());
  }

  std::vector<T> losses(items.size());
  run_lanes(items.size(), [&](std::size_t item, std::size_t lane) {
    const auto [t, b] = items[item];
    const auto& batch = batches[t];
    const auto& ids = batch.inputs[b]->ids;
    EncoderTrace<T> trace;
    const auto features = encoder_forward(config, weights, ids, want_encoder ? &trace : nullptr);
    const T scale = static_cast<T>(batch.weight / static_cast<double>(batch.inputs.size()));
    BasicTensor<T> d_features;
    if (want_encoder) d_features = BasicTensor<T>(features.shape());
    losses[item] = example_loss(features, true, modules[t], batch.labels[b], scale,
                                grads ? &lanes[lane].modules[t] : nullptr,
                                want_encoder ? &d_features : nullptr);
    if (want_encoder) encoder_backward(config, weights, ids, trace, d_features, lanes[lane].encoder);
  });

  std::vector<T> per_task(batches.size(), T(0));
  for (std::size_t i = 0; i < items.size(); ++i) per_task[items[i].first] += losses[i];
  T total = 0;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    per_task[t] /= static_cast<T>(batches[t].inputs.size());
    total += static_cast<T>(batches[t].weight) * per_task[t];
  }
  if (task_losses) *task_losses = per_task;

  if (grads) {
    grads->encoder = want_encoder ? EncoderWeights<T>::zeros(config) : EncoderWeights<T>{};
    grads->modules.clear();
    for (const auto& m : modules) grads->modules.push_back(m.zeros_like());
    for (const auto& lane : lanes) {
      if (want_encoder) add_encoder(grads->encoder, lane.encoder);
      for (std::size_t t = 0; t < modules.size(); ++t) add_module(grads->modules[t], lane.modules[t]);
    }
  }
  return total;
}

template <typename T>
void Adam<T>::step(const std::vector<BasicTensor<T>*>& params,
                   const std::vector<const BasicTensor<T>*>& grads) {
  if (params.size() != grads.size()) throw ParameterError("Adam: params and grads differ in count");
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }
  if (m_.size() != params.size()) throw ParameterError("Adam: parameter list changed between steps");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = config_.learning_rate, eps = config_.epsilon;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i]->data();
    const auto* g = grads[i]->data();
    if (grads[i]->size() != params[i]->size() || m_[i].size() != params[i]->size())
      throw ParameterError("Adam: gradient " + std::to_string(i) + " has the wrong size");
    for (std::size_t j = 0; j < params[i]->size(); ++j) {
      const double gj = g[j];
      const double m = b1 * m_[i][j] + (1.0 - b1) * gj;
      const double v = b2 * v_[i][j] + (1.0 - b2) * gj * gj;
      m_[i][j] = static_cast<T>(m);
      v_[i][j] = static_cast<T>(v);
      p[j] = static_cast<T>(p[j] - lr * (m / c1) / (std::sqrt(v / c2) + eps));
    }
  }
}

BatchSampler::BatchSampler(std::size_t size, CounterRng rng) : order_(size), rng_(rng) {
  if (size == 0) throw ParameterError("cannot sample batches from an empty dataset");
  for (std::size_t i = 0; i < size; ++i) order_[i] = i;
  rng_.shuffle(std::span<std::size_t>(order_));
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch) {
  std::vector<std::size_t> out;
  out.reserve(batch);
  while (out.size() < batch) {
    if (cursor_ == order_.size()) {
      rng_.shuffle(std::span<std::size_t>(order_));
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

PretrainResult multitask_pretrain(const EncoderModel& initial, std::span<const TaskDataset* const> tasks,
                                  const PoolingSpec& pooling, const TrainConfig& cfg,
                                  BatchObserver* observer) {
  cfg.validate();
  initial.config.validate();
  if (tasks.empty()) throw ParameterError("multi-task pretraining needs at least one task");
  const auto& ec = initial.config;

  std::vector<std::size_t> sizes;
  for (const auto* task : tasks) {
    task->validate();
    sizes.push_back(task->train.size());
  }
  const auto alphas = task_weights(sizes, cfg.temperature);

  CounterRng root(cfg.seed);
  PretrainResult result{initial, {}, {}};
  std::vector<BatchSampler> samplers;
  std::vector<std::vector<TokenSeq>> inputs;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    // Streams are keyed by task name: two copies of one task train identically.
    const auto& name = tasks[i]->name;
    const std::uint64_t key =
        wire::fnv1a64({reinterpret_cast<const std::uint8_t*>(name.data()), name.size()});
    auto rng = root.fork(key).fork(1);
    TaskModule<float> module;
    module.pooler = Pooler<float>::init(pooling, ec.num_layers + 1, ec.num_layers, ec.model_dim,
                                        ec.num_heads, rng);
    module.head = Head<float>::init(ec.model_dim, tasks[i]->num_classes, rng);
    result.modules.push_back(std::move(module));
    samplers.emplace_back(tasks[i]->train.size(), root.fork(key).fork(2));
    inputs.push_back(encode_examples(tasks[i]->train, tasks[i]->kind, ec.max_positions));
    for (const auto& seq : inputs.back()) validate_input(ec, seq.ids);
  }

  std::vector<BasicTensor<float>*> params;
  if (cfg.finetune_encoder) result.model.weights.visit([&](BasicTensor<float>& t) { params.push_back(&t); });
  for (auto& m : result.modules) TaskModule<float>::visit(m, [&](BasicTensor<float>& t) { params.push_back(&t); });

  Adam<float> adam(cfg);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<BatchRef> batches(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const auto indices = samplers[i].next(cfg.batch_size);
      if (observer) observer->on_batch(step, tasks[i]->name, indices);
      for (auto idx : indices) {
        batches[i].inputs.push_back(&inputs[i][idx]);
        batches[i].labels.push_back(tasks[i]->train[idx].label);
      }
      batches[i].weight = alphas[i];
    }
    ObjectiveGrads<float> grads;
    std::vector<float> per_task;
    const float loss = multitask_objective<float>(ec, result.model.weights, result.modules, batches,
                                                  cfg.finetune_encoder, &grads, &per_task);
    check_finite(loss, step);
    result.losses.emplace_back(per_task.begin(), per_task.end());

    std::vector<const BasicTensor<float>*> gradient_list;
    if (cfg.finetune_encoder)
      grads.encoder.visit([&](const BasicTensor<float>& t) { gradient_list.push_back(&t); });
    for (const auto& m : grads.modules)
      TaskModule<float>::visit(m, [&](const BasicTensor<float>& t) { gradient_list.push_back(&t); });
    adam.step(params, gradient_list);
  }
  return result;
}

std::string quant_order_name(QuantOrder order) {
  return order == QuantOrder::before_layer_pooling ? "before-pooling" : "after-pooling";
}

QuantOrder parse_quant_order(std::string_view text) {
  if (text == "after-pooling") return QuantOrder::after_layer_pooling;
  if (text == "before-pooling") return QuantOrder::before_layer_pooling;
  throw ParameterError("unknown quantization order '" + std::string(text) +
                       "' (expected after-pooling or before-pooling)");
}

Tensor prepare_features(const LayerFeatures& features, const TrainedHead& head) {
  if (head.layered()) return roundtrip(features, head.quant);
  if (head.order == QuantOrder::before_layer_pooling)
    return pool_layers(roundtrip(features, head.quant), head.module.pooler.layer);
  return roundtrip(pool_layers(features, head.module.pooler.layer), head.quant);
}

QuantParams calibrate_rows(std::span<const Tensor> features, std::size_t limit) {
  std::vector<float> sample;
  std::size_t rows = 0;
  for (const auto& t : features) {
    if (rows >= limit) break;
    if (t.rank() == 0 || t.size() == 0) continue;
    const std::size_t width = t.shape().back();
    const std::size_t take = std::min(limit - rows, t.size() / width);
    sample.insert(sample.end(), t.data(), t.data() + take * width);
    rows += take;
  }
  if (sample.empty()) throw ParameterError("no calibration rows available");
  return calibrate_affine(sample);
}

TrainedHead fit_head(const FeatureSet& features, TrainedHead head, const TrainConfig& cfg) {
  cfg.validate();
  head.module.head.validate();
  if (features.train.size() != features.train_labels.size() ||
      features.dev.size() != features.dev_labels.size()) {
    throw ParameterError("feature set has mismatched labels");
  }
  if (features.train.empty()) throw ParameterError("feature set has no training examples");
  const bool layered = head.layered();

  CounterRng rng(cfg.seed);
  BatchSampler sampler(features.train.size(), rng.fork(1));
  std::vector<BasicTensor<float>*> params;
  TaskModule<float>::visit(head.module, [&](BasicTensor<float>& t) { params.push_back(&t); });
  Adam<float> adam(cfg);

  TaskModule<float> best = head.module;
  double best_accuracy = -1.0;
  std::size_t best_step = 0;
  auto consider = [&](std::size_t step) {
    const double acc = accuracy(features.dev, features.dev_labels, layered, head.module);
    if (acc > best_accuracy) {
      best_accuracy = acc;
      best = head.module;
      best_step = step;
    }
  };
  if (cfg.steps == 0) consider(0);

  std::vector<TaskModule<float>> lanes(kLanes, head.module.zeros_like());
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto indices = sampler.next(cfg.batch_size);
    for (auto& lane : lanes) TaskModule<float>::visit(lane, [](BasicTensor<float>& t) { t.fill(0.0f); });
    std::vector<float> losses(indices.size());
    const float scale = 1.0f / static_cast<float>(indices.size());
    run_lanes(indices.size(), [&](std::size_t item, std::size_t lane) {
      const auto idx = indices[item];
      losses[item] = example_loss<float>(features.train[idx], layered, head.module, features.train_labels[idx],
                                  scale, &lanes[lane], nullptr);
    });
    double loss = 0.0;
    for (auto v : losses) loss += v;
    check_finite(loss, step);

    TaskModule<float> total = head.module.zeros_like();
    for (const auto& lane : lanes) add_module(total, lane);
    std::vector<const BasicTensor<float>*> gradient_list;
    TaskModule<float>::visit(total, [&](const BasicTensor<float>& t) { gradient_list.push_back(&t); });
    adam.step(params, gradient_list);
    if (step % cfg.eval_every == 0 || step == cfg.steps) consider(step);
  }
  head.module = std::move(best);
  head.best_dev_accuracy = best_accuracy;
  head.best_step = best_step;
  return head;
}

TrainedHead init_head(const EncoderConfig& config, std::uint64_t encoder_fingerprint,
                      const TaskDataset& task, const HeadOptions& options, const TrainConfig& cfg,
                      std::size_t layer_slabs) {
  TrainedHead head;
  head.task = task.name;
  head.encoder_fingerprint = encoder_fingerprint;
  head.spec = options.pooling;
  head.quant = QuantScheme{options.quant, {}};
  head.order = options.order;
  CounterRng rng = CounterRng(cfg.seed).fork(7);
  head.module.pooler = Pooler<float>::init(options.pooling, layer_slabs, config.num_layers, config.model_dim,
                                           config.num_heads, rng);
  head.module.head = Head<float>::init(config.model_dim, task.num_classes, rng);
  return head;
}

namespace {

// Calibrates u8 on the training features, then quantizes every split.
FeatureSet build_feature_set(const std::vector<LayerFeatures>& train, const std::vector<LayerFeatures>& dev,
                             const TaskDataset& task, TrainedHead& head, std::size_t calibration_vectors) {
  if (head.quant.kind == QuantKind::u8) {
    std::vector<Tensor> sample;
    std::size_t rows = 0;
    for (const auto& f : train) {
      if (rows >= calibration_vectors) break;
      sample.push_back(quantization_input(f, head));
      rows += sample.back().size() / sample.back().shape().back();
    }
    head.quant.params = calibrate_rows(sample, calibration_vectors);
  }
  FeatureSet set;
  set.train.resize(train.size());
  set.dev.resize(dev.size());
  const auto n_train = static_cast<std::ptrdiff_t>(train.size());
  const auto n_dev = static_cast<std::ptrdiff_t>(dev.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n_train; ++i) set.train[i] = prepare_features(train[i], head);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n_dev; ++i) set.dev[i] = prepare_features(dev[i], head);
  set.train_labels = labels_of(task.train);
  set.dev_labels = labels_of(task.dev);
  return set;
}

struct RawFeatures {
  std::vector<LayerFeatures> train, dev;
};

RawFeatures encode_task(const EncoderModel& frozen, const TaskDataset& task) {
  const auto train_inputs = encode_examples(task.train, task.kind, frozen.config.max_positions);
  const auto dev_inputs = encode_examples(task.dev, task.kind, frozen.config.max_positions);
  return {encode_batch(frozen, train_inputs), encode_batch(frozen, dev_inputs)};
}

}  // namespace

TrainedHead train_head(const EncoderModel& frozen, const TaskDataset& task, const HeadOptions& options,
                       const TrainConfig& cfg) {
  task.validate();
  cfg.validate();
  const auto raw = encode_task(frozen, task);
  auto head = init_head(frozen.config, fingerprint(frozen), task, options, cfg, frozen.config.num_layers + 1);
  const auto set = build_feature_set(raw.train, raw.dev, task, head, options.calibration_vectors);
  return fit_head(set, std::move(head), cfg);
}

double evaluate(const TrainedHead& head, const EncoderModel& frozen, const TaskDataset& task) {
  if (head.encoder_fingerprint != fingerprint(frozen)) {
    throw StaleEncoderError("head '" + head.task + "' was trained against a different encoder");
  }
  if (head.module.head.num_classes() != task.num_classes) {
    throw ParameterError("head has " + std::to_string(head.module.head.num_classes()) +
                         " classes, task '" + task.name + "' has " + std::to_string(task.num_classes));
  }
  const auto inputs = encode_examples(task.dev, task.kind, frozen.config.max_positions);
  const auto raw = encode_batch(frozen, inputs);
  std::vector<Tensor> prepared(raw.size());
  const auto count = static_cast<std::ptrdiff_t>(raw.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) prepared[i] = prepare_features(raw[i], head);
  const auto labels = labels_of(task.dev);
  return accuracy(prepared, labels, head.layered(), head.module);
}

namespace {
constexpr std::uint16_t kHeadVersion = 1;
}

void save_head(std::ostream& out, const TrainedHead& head) {
  head.module.head.validate();
  wire::Writer w(out);
  w.magic("AMTH");
  w.u16(kHeadVersion);
  w.string16(head.task);
  w.u64(head.encoder_fingerprint);
  w.string16(head.spec.to_string());
  write_pooler(w, head.module.pooler);
  w.u8(static_cast<std::uint8_t>(head.quant.kind));
  if (head.quant.kind == QuantKind::u8) {
    w.f32(head.quant.params.scale);
    w.u8(head.quant.params.zero_point);
  }
  w.u8(static_cast<std::uint8_t>(head.order));
  Head<float>::visit(head.module.head, [&](const Tensor& t) { w.tensor(t); });
  w.f32(static_cast<float>(head.best_dev_accuracy));
  w.u32(static_cast<std::uint32_t>(head.best_step));
  w.flush();
}

TrainedHead load_head(std::istream& in) {
  wire::Reader r(in);
  r.expect_magic("AMTH");
  const auto version_at = r.offset();
  const auto version = r.u16("head version");
  if (version != kHeadVersion)
    throw FormatError("unsupported head version " + std::to_string(version), version_at);
  TrainedHead head;
  head.task = r.string16("task name");
  head.encoder_fingerprint = r.u64("encoder fingerprint");
  const auto spec_at = r.offset();
  try {
    head.spec = PoolingSpec::parse(r.string16("pooling spec"));
  } catch (const ParameterError& e) {
    throw FormatError(e.what(), spec_at);
  }
  head.module.pooler = read_pooler(r);
  const auto kind_at = r.offset();
  const auto kind = r.u8("quant scheme");
  if (kind > static_cast<std::uint8_t>(QuantKind::f16))
    throw FormatError("unknown quant scheme " + std::to_string(kind), kind_at);
  head.quant.kind = static_cast<QuantKind>(kind);
  if (head.quant.kind == QuantKind::u8) {
    head.quant.params.scale = r.f32("u8 scale");
    head.quant.params.zero_point = r.u8("u8 zero point");
  }
  const auto order_at = r.offset();
  const auto order = r.u8("quant order");
  if (order > 1) throw FormatError("unknown quant order " + std::to_string(order), order_at);
  head.order = static_cast<QuantOrder>(order);
  const auto tensors_at = r.offset();
  Head<float>::visit(head.module.head, [&](Tensor& t) { t = r.tensor("head tensor"); });
  try {
    head.module.head.validate();
  } catch (const ParameterError& e) {
    throw FormatError(e.what(), tensors_at);
  }
  head.best_dev_accuracy = r.f32("best dev accuracy");
  head.best_step = r.u32("best step");
  return head;
}

void save_head(const std::filesystem::path& path, const TrainedHead& head) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StorageError("cannot write " + path.string());
  save_head(out, head);
  if (!out) throw StorageError("write failed for " + path.string());
}

TrainedHead load_head(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open " + path.string());
  return load_head(in);
}

double LotoReport::mean_accuracy(QuantKind quant) const {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& e : entries) {
    if (e.quant != quant) continue;
    sum += e.accuracy;
    ++count;
  }
  return count ? sum / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

std::string LotoReport::csv() const {
  std::ostringstream out;
  out << "seed,task,family,pooling,quant,accuracy\n";
  char buf[32];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof(buf), "%.6f", e.accuracy);
    out << e.seed << ',' << e.task << ',' << e.family << ',' << e.pooling << ','
        << quant_kind_name(e.quant) << ',' << buf << '\n';
  }
  return out.str();
}

namespace {

class RoundObserver : public BatchObserver {
 public:
  RoundObserver(std::vector<std::string> held_out, LotoObserver* outer)
      : held_out_(std::move(held_out)), outer_(outer) {}

  void on_batch(std::size_t, const std::string& task, std::span<const std::size_t> indices) override {
    if (std::find(held_out_.begin(), held_out_.end(), task) != held_out_.end()) ++counts_[task];
    if (outer_) outer_->on_pretrain_batch(held_out_, task, indices);
  }
  std::size_t count(const std::string& task) const {
    const auto it = counts_.find(task);
    return it == counts_.end() ? 0 : it->second;
  }

 private:
  std::vector<std::string> held_out_;
  LotoObserver* outer_;
  std::map<std::string, std::size_t> counts_;
};

std::vector<std::vector<std::size_t>> loto_rounds(std::span<const TaskDataset> tasks, LotoMode mode) {
  std::vector<std::vector<std::size_t>> rounds;
  switch (mode) {
    case LotoMode::leave_one_out:
      for (std::size_t i = 0; i < tasks.size(); ++i) rounds.push_back({i});
      break;
    case LotoMode::hold_out_family: {
      std::vector<std::string> families;
      for (const auto& t : tasks)
        if (std::find(families.begin(), families.end(), t.family) == families.end())
          families.push_back(t.family);
      if (families.size() < 2) throw ParameterError("hold-out-family needs at least two task families");
      for (const auto& f : families) {
        rounds.emplace_back();
        for (std::size_t i = 0; i < tasks.size(); ++i)
          if (tasks[i].family == f) rounds.back().push_back(i);
      }
      break;
    }
    case LotoMode::all_tasks:
    case LotoMode::random_encoder: {
      rounds.emplace_back();
      for (std::size_t i = 0; i < tasks.size(); ++i) rounds.back().push_back(i);
      break;
    }
  }
  return rounds;
}

}  // namespace

LotoReport leave_one_task_out(std::span<const TaskDataset> tasks, const LotoConfig& cfg,
                              LotoObserver* observer) {
  cfg.encoder.validate();
  cfg.pretrain.validate();
  cfg.head.validate();
  if (tasks.size() < 2) throw ParameterError("leave-one-task-out needs at least two tasks");
  if (cfg.quants.empty()) throw ParameterError("at least one quantization scheme is required");
  for (const auto& t : tasks) t.validate();

  LotoReport report;
  for (const auto& round : loto_rounds(tasks, cfg.mode)) {
    std::vector<std::string> held_names;
    for (auto i : round) held_names.push_back(tasks[i].name);

    std::vector<const TaskDataset*> pretrain_tasks;
    std::vector<std::string> pretrain_names;
    if (cfg.mode != LotoMode::random_encoder) {
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        const bool held = cfg.mode != LotoMode::all_tasks &&
                          std::find(round.begin(), round.end(), i) != round.end();
        if (held) continue;
        pretrain_tasks.push_back(&tasks[i]);
        pretrain_names.push_back(tasks[i].name);
      }
    }

    RoundObserver counter(cfg.mode == LotoMode::all_tasks ? std::vector<std::string>{} : held_names,
                          observer);
    PretrainResult pretrained{init_model(cfg.encoder), {}, {}};
    if (!pretrain_tasks.empty())
      pretrained = multitask_pretrain(pretrained.model, pretrain_tasks, cfg.pooling, cfg.pretrain, &counter);
    const EncoderModel& frozen = pretrained.model;
    const auto fp = fingerprint(frozen);

    for (std::size_t r = 0; r < round.size(); ++r) {
      const auto& task = tasks[round[r]];
      const auto raw = encode_task(frozen, task);
      for (auto quant : cfg.quants) {
        TrainedHead head;
        if (cfg.mode == LotoMode::all_tasks) {
          head.task = task.name;
          head.encoder_fingerprint = fp;
          head.spec = cfg.pooling;
          head.quant = QuantScheme{quant, {}};
          head.order = cfg.order;
          head.module = pretrained.modules[round[r]];
          const auto set = build_feature_set(raw.train, raw.dev, task, head, HeadOptions{}.calibration_vectors);
          head.best_dev_accuracy = accuracy(set.dev, set.dev_labels, head.layered(), head.module);
        } else {
          HeadOptions options{cfg.pooling, quant, cfg.order, HeadOptions{}.calibration_vectors};
          TrainConfig head_cfg = cfg.head;
          head_cfg.seed = cfg.head.seed ^ (0x9E3779B97F4A7C15ULL * (round[r] + 1));
          head = init_head(frozen.config, fp, task, options, head_cfg, frozen.config.num_layers + 1);
          const auto set = build_feature_set(raw.train, raw.dev, task, head, options.calibration_vectors);
          head = fit_head(set, std::move(head), head_cfg);
        }
        const auto after = fingerprint(frozen);
        if (observer) observer->on_stage2(task.name, fp, after);

        LotoEntry entry;
        entry.seed = cfg.encoder.seed;
        entry.task = task.name;
        entry.family = task.family;
        entry.pooling = cfg.pooling.to_string();
        entry.quant = quant;
        entry.accuracy = head.best_dev_accuracy;
        entry.pretrain_tasks = pretrain_names;
        entry.held_out_batches = counter.count(task.name);
        entry.encoder_before = fp;
        entry.encoder_after = after;
        report.entries.push_back(std::move(entry));
      }
    }
  }
  return report;
}

#define AMORTENC_INSTANTIATE(T)                                                                     \
  template struct Head<T>;                                                                          \
  template struct TaskModule<T>;                                                                    \
  template class Adam<T>;                                                                           \
  template BasicTensor<T> head_forward<T>(const BasicTensor<T>&, const Head<T>&, HeadTrace<T>*);    \
  template T example_loss<T>(const BasicTensor<T>&, bool, const TaskModule<T>&, std::size_t, T,     \
                             TaskModule<T>*, BasicTensor<T>*);                                      \
  template T multitask_objective<T>(const EncoderConfig&, const EncoderWeights<T>&,                 \
                                    std::span<const TaskModule<T>>, std::span<const BatchRef>, bool, \
                                    ObjectiveGrads<T>*, std::vector<T>*);

AMORTENC_INSTANTIATE(float)
AMORTENC_INSTANTIATE(double)

template TaskModule<double> TaskModule<float>::cast<double>() const;
template TaskModule<float> TaskModule<double>::cast<float>() const;

#undef AMORTENC_INSTANTIATE

}  // namespace amortenc
