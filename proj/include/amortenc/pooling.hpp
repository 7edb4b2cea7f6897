#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "amortenc/rng.hpp"
#include "amortenc/tensor.hpp"
#include "amortenc/wire.hpp"

namespace amortenc {

// Feature pooling: layer-wise first, then position-wise.

enum class LayerMode : std::uint8_t { last = 0, avg = 1, learned_comb = 2 };
enum class PositionMode : std::uint8_t { cls = 0, avg = 1, mha = 2 };

// Strategy choice without learned values. avg_layers = 0 selects the default
// min(16, L); mha_heads = 0 selects the encoder's head count.
struct PoolingSpec {
  LayerMode layer = LayerMode::avg;
  std::size_t avg_layers = 0;
  PositionMode position = PositionMode::mha;
  std::size_t mha_heads = 0;

  // Grammar: <layer>,<position> with layer in {last, layer-avg[:m], learned-comb}
  // and position in {cls, pos-avg, mha}.
  static PoolingSpec parse(std::string_view text);
  std::string to_string() const;

  // Layer count Avg averages over for an encoder with `num_layers` layers.
  std::size_t resolved_avg_layers(std::size_t num_layers) const;

  friend bool operator==(const PoolingSpec&, const PoolingSpec&) = default;
};

template <typename T>
struct MhaParams {
  BasicTensor<T> query;       // d
  BasicTensor<T> key_proj;    // d x d
  BasicTensor<T> value_proj;  // d x d
  BasicTensor<T> out_proj;    // d x d
  std::size_t num_heads = 1;

  // Throws ParameterError unless shapes agree with width `d` and d % heads == 0.
  void validate(std::size_t d) const;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(self.query); f(self.key_proj); f(self.value_proj); f(self.out_proj);
  }

  // Zero query, identity value/out projections, key projection ~ N(0, 1/d).
  static MhaParams init(std::size_t d, std::size_t heads, CounterRng& rng);
  static MhaParams identity(std::size_t d, std::size_t heads);
};

template <typename T>
struct LayerPooling {
  LayerMode mode = LayerMode::last;
  std::size_t avg_layers = 1;
  BasicTensor<T> logits;  // learned_comb only; one per layer slab

  static LayerPooling last() { return {LayerMode::last, 1, {}}; }
  static LayerPooling avg(std::size_t m) { return {LayerMode::avg, m, {}}; }
  static LayerPooling learned_comb(BasicTensor<T> logits) {
    return {LayerMode::learned_comb, 0, std::move(logits)};
  }
};

template <typename T>
struct PositionPooling {
  PositionMode mode = PositionMode::cls;
  MhaParams<T> mha;  // mha only

  static PositionPooling cls() { return {PositionMode::cls, {}}; }
  static PositionPooling avg() { return {PositionMode::avg, {}}; }
  static PositionPooling attention(MhaParams<T> params) { return {PositionMode::mha, std::move(params)}; }
};

// Task-owned pooler: strategies plus their trainable parameters.
template <typename T>
struct Pooler {
  LayerPooling<T> layer;
  PositionPooling<T> position;

  // Visits trainable tensors only (LearnedComb logits, MHA parameters).
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    if (self.layer.mode == LayerMode::learned_comb) f(self.layer.logits);
    if (self.position.mode == PositionMode::mha) MhaParams<T>::visit(self.position.mha, f);
  }

  // Fresh pooler for features with `layer_slabs` layers of width d.
  static Pooler init(const PoolingSpec& spec, std::size_t layer_slabs, std::size_t num_layers,
                     std::size_t d, std::size_t default_heads, CounterRng& rng);

  template <typename U>
  Pooler<U> cast() const;
};

// Softmax weights of a LearnedComb.
template <typename T>
BasicTensor<T> layer_weights(const BasicTensor<T>& logits);

// (layers x n x d) -> (n x d). Avg(m) clamps m to the available layer count.
template <typename T>
BasicTensor<T> pool_layers(const BasicTensor<T>& features, const LayerPooling<T>& strategy);

// Accumulates gradients. d_features may be null when the features are frozen.
template <typename T>
void pool_layers_backward(const BasicTensor<T>& features, const LayerPooling<T>& strategy,
                          const BasicTensor<T>& d_out, BasicTensor<T>* d_features,
                          LayerPooling<T>* d_strategy);

template <typename T>
struct MhaTrace {
  BasicTensor<T> keys, values;  // n x d
  BasicTensor<T> weights;       // heads x n, each row sums to 1
  BasicTensor<T> concat;        // d, before out_proj
};

template <typename T>
BasicTensor<T> mha_pool(const BasicTensor<T>& features, const MhaParams<T>& params,
                        MhaTrace<T>* trace = nullptr);

template <typename T>
void mha_pool_backward(const BasicTensor<T>& features, const MhaParams<T>& params,
                       const MhaTrace<T>& trace, const BasicTensor<T>& d_out,
                       BasicTensor<T>* d_features, MhaParams<T>* d_params);

// (n x d) -> (d). Throws InputError when n = 0.
template <typename T>
BasicTensor<T> pool_positions(const BasicTensor<T>& features, const PositionPooling<T>& strategy,
                              MhaTrace<T>* trace = nullptr);

template <typename T>
void pool_positions_backward(const BasicTensor<T>& features, const PositionPooling<T>& strategy,
                             const MhaTrace<T>* trace, const BasicTensor<T>& d_out,
                             BasicTensor<T>* d_features, PositionPooling<T>* d_strategy);

// Strategy tag bytes and parameters, shared tensor wire format.
void write_pooler(wire::Writer& out, const Pooler<float>& pooler);
Pooler<float> read_pooler(wire::Reader& in);

}  // namespace amortenc
