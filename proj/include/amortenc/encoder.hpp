#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "amortenc/tensor.hpp"

namespace amortenc {

// Reserved token ids.
inline constexpr int kClsId = 0;
inline constexpr int kSepId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kFirstWordId = 4;

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t model_dim = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 64;
  std::size_t max_positions = 64;
  std::uint64_t seed = 0;

  // Throws ConfigError when any invariant fails.
  void validate() const;
  std::size_t head_dim() const { return model_dim / num_heads; }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Token ids for one (possibly paired) input. ids[0] is CLS; pair inputs carry
// one SEP between segments.
struct TokenSeq {
  std::vector<int> ids;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

// Pre-norm Transformer block: x + Attn(LN1(x)), then + FFN(LN2(.)).
template <typename T>
struct LayerWeights {
  BasicTensor<T> ln1_gain, ln1_bias;
  BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  BasicTensor<T> ln2_gain, ln2_bias;
  BasicTensor<T> w1, b1, w2, b2;

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(self.ln1_gain); f(self.ln1_bias);
    f(self.wq); f(self.bq); f(self.wk); f(self.bk);
    f(self.wv); f(self.bv); f(self.wo); f(self.bo);
    f(self.ln2_gain); f(self.ln2_bias);
    f(self.w1); f(self.b1); f(self.w2); f(self.b2);
  }
};

template <typename T>
struct EncoderWeights {
  BasicTensor<T> token_embeddings;     // vocab x d
  BasicTensor<T> position_embeddings;  // max_positions x d
  std::vector<LayerWeights<T>> layers;

  // Visits every tensor in checkpoint declaration order.
  template <typename F>
  void visit(F&& f) {
    f(token_embeddings);
    f(position_embeddings);
    for (auto& layer : layers) LayerWeights<T>::visit(layer, f);
  }
  template <typename F>
  void visit(F&& f) const {
    f(token_embeddings);
    f(position_embeddings);
    for (const auto& layer : layers) LayerWeights<T>::visit(layer, f);
  }

  // Same shapes as `config` prescribes, every entry zero.
  static EncoderWeights zeros(const EncoderConfig& config);

  template <typename U>
  EncoderWeights<U> cast() const {
    EncoderWeights<U> out;
    out.token_embeddings = token_embeddings.template cast<U>();
    out.position_embeddings = position_embeddings.template cast<U>();
    out.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      std::vector<const BasicTensor<T>*> src;
      LayerWeights<T>::visit(layers[i], [&](const BasicTensor<T>& t) { src.push_back(&t); });
      std::size_t at = 0;
      LayerWeights<U>::visit(out.layers[i], [&](BasicTensor<U>& t) { t = src[at++]->template cast<U>(); });
    }
    return out;
  }
};

// Immutable after construction; encode() may be called concurrently.
struct EncoderModel {
  EncoderConfig config;
  EncoderWeights<float> weights;
};

EncoderModel init_model(const EncoderConfig& config);

// Exact number of trainable scalars for `config`.
std::uint64_t param_count(const EncoderConfig& config);

// Throws InputError for empty, overlong or out-of-vocabulary input.
void validate_input(const EncoderConfig& config, std::span<const int> ids);

LayerFeatures encode(const EncoderModel& model, const TokenSeq& input);

// One LayerFeatures per input; parallel across inputs.
std::vector<LayerFeatures> encode_batch(const EncoderModel& model, std::span<const TokenSeq> inputs);
// Serial reference for encode_batch.
std::vector<LayerFeatures> encode_batch_serial(const EncoderModel& model,
                                               std::span<const TokenSeq> inputs);

// Intermediate activations kept by forward() for backward().
template <typename T>
struct EncoderTrace {
  struct Layer {
    BasicTensor<T> xhat1, rstd1, a1;  // LN1 normalized input, 1/std per row, LN1 output
    BasicTensor<T> q, k, v;           // n x d projections
    BasicTensor<T> probs;             // heads x n x n attention weights
    BasicTensor<T> context;           // n x d (heads concatenated)
    BasicTensor<T> xhat2, rstd2, a2;
    BasicTensor<T> pre_act, act;      // n x ffn before / after GELU
  };
  std::vector<Layer> layers;
};

// Full forward pass, (L+1) x n x d. Records activations when trace != nullptr.
template <typename T>
BasicTensor<T> encoder_forward(const EncoderConfig& config, const EncoderWeights<T>& weights,
                               std::span<const int> ids, EncoderTrace<T>* trace = nullptr);

// Accumulates dLoss/dweights into `grads`, given dLoss/dfeatures for every
// layer output (same shape as the forward result).
template <typename T>
void encoder_backward(const EncoderConfig& config, const EncoderWeights<T>& weights,
                      std::span<const int> ids, const EncoderTrace<T>& trace,
                      const BasicTensor<T>& d_features, EncoderWeights<T>& grads);

// Checkpoint: magic "AMTM", u16 version, config, tensors in declaration order.
void save_model(std::ostream& out, const EncoderModel& model);
EncoderModel load_model(std::istream& in);
void save_model(const std::filesystem::path& path, const EncoderModel& model);
EncoderModel load_model(const std::filesystem::path& path);

// FNV-1a over the serialized checkpoint bytes.
std::uint64_t fingerprint(const EncoderModel& model);

}  // namespace amortenc
