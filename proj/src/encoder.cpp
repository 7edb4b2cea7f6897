#include "amortenc/encoder.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include "amortenc/kernels.hpp"
#include "amortenc/rng.hpp"
#include "amortenc/wire.hpp"

namespace amortenc {

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;
constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStddev = 0.02;

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
void add_row_bias(T* x, const T* bias, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) x[i * cols + j] += bias[j];
}

template <typename T>
void add_column_sums(const T* x, T* out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j] += x[i * cols + j];
}

template <typename T>
void layer_norm_forward(const T* x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                        std::size_t rows, std::size_t cols, BasicTensor<T>& xhat,
                        BasicTensor<T>& rstd, BasicTensor<T>& out) {
  xhat = BasicTensor<T>({rows, cols});
  rstd = BasicTensor<T>({rows});
  out = BasicTensor<T>({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = x + i * cols;
    T mean = 0;
    for (std::size_t j = 0; j < cols; ++j) mean += row[j];
    mean /= T(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(cols);
    const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[i] = r;
    for (std::size_t j = 0; j < cols; ++j) {
      const T xh = (row[j] - mean) * r;
      xhat.at(i, j) = xh;
      out.at(i, j) = xh * gain[j] + bias[j];
    }
  }
}

// Adds dLoss/dx into dx given dLoss/dout.
template <typename T>
void layer_norm_backward(const BasicTensor<T>& d_out, const BasicTensor<T>& xhat,
                         const BasicTensor<T>& rstd, const BasicTensor<T>& gain,
                         BasicTensor<T>& d_gain, BasicTensor<T>& d_bias, T* dx) {
  const std::size_t rows = xhat.dim(0);
  const std::size_t cols = xhat.dim(1);
  std::vector<T> dxhat(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    T mean_dxhat = 0;
    T mean_dxhat_xhat = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const T g = d_out.at(i, j);
      d_gain[j] += g * xhat.at(i, j);
      d_bias[j] += g;
      dxhat[j] = g * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat.at(i, j);
    }
    mean_dxhat /= T(cols);
    mean_dxhat_xhat /= T(cols);
    for (std::size_t j = 0; j < cols; ++j) {
      dx[i * cols + j] += rstd[i] * (dxhat[j] - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat);
    }
  }
}

// Copies columns [offset, offset + width) of an n x d matrix into n x width.
template <typename T>
void gather_head(const BasicTensor<T>& src, std::size_t offset, std::size_t width,
                 std::vector<T>& dst) {
  const std::size_t n = src.dim(0);
  const std::size_t d = src.dim(1);
  dst.resize(n * width);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < width; ++j) dst[i * width + j] = src[i * d + offset + j];
}

template <typename T>
void scatter_head(const std::vector<T>& src, std::size_t offset, std::size_t width,
                  BasicTensor<T>& dst) {
  const std::size_t n = dst.dim(0);
  const std::size_t d = dst.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < width; ++j) dst[i * d + offset + j] = src[i * width + j];
}

template <typename T>
LayerWeights<T> layer_shapes(const EncoderConfig& c) {
  const std::size_t d = c.model_dim;
  const std::size_t f = c.ffn_dim;
  LayerWeights<T> w;
  w.ln1_gain = BasicTensor<T>({d}, T(1));
  w.ln1_bias = BasicTensor<T>({d});
  w.wq = BasicTensor<T>({d, d});
  w.bq = BasicTensor<T>({d});
  w.wk = BasicTensor<T>({d, d});
  w.bk = BasicTensor<T>({d});
  w.wv = BasicTensor<T>({d, d});
  w.bv = BasicTensor<T>({d});
  w.wo = BasicTensor<T>({d, d});
  w.bo = BasicTensor<T>({d});
  w.ln2_gain = BasicTensor<T>({d}, T(1));
  w.ln2_bias = BasicTensor<T>({d});
  w.w1 = BasicTensor<T>({d, f});
  w.b1 = BasicTensor<T>({f});
  w.w2 = BasicTensor<T>({f, d});
  w.b2 = BasicTensor<T>({d});
  return w;
}

void write_config(wire::Writer& w, const EncoderConfig& c) {
  w.u32(static_cast<std::uint32_t>(c.num_layers));
  w.u32(static_cast<std::uint32_t>(c.model_dim));
  w.u32(static_cast<std::uint32_t>(c.num_heads));
  w.u32(static_cast<std::uint32_t>(c.ffn_dim));
  w.u32(static_cast<std::uint32_t>(c.vocab_size));
  w.u32(static_cast<std::uint32_t>(c.max_positions));
  w.u64(c.seed);
}

EncoderConfig read_config(wire::Reader& r) {
  EncoderConfig c;
  c.num_layers = r.u32("config");
  c.model_dim = r.u32("config");
  c.num_heads = r.u32("config");
  c.ffn_dim = r.u32("config");
  c.vocab_size = r.u32("config");
  c.max_positions = r.u32("config");
  c.seed = r.u64("config");
  return c;
}

}  // namespace

void EncoderConfig::validate() const {
  if (num_layers == 0) throw ConfigError("num_layers must be >= 1");
  if (model_dim == 0) throw ConfigError("model_dim must be >= 1");
  if (num_heads == 0) throw ConfigError("num_heads must be >= 1");
  if (model_dim % num_heads != 0) {
    throw ConfigError("model_dim " + std::to_string(model_dim) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (ffn_dim < model_dim) throw ConfigError("ffn_dim must be >= model_dim");
  if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4 (reserved ids)");
  if (max_positions == 0) throw ConfigError("max_positions must be >= 1");
}

template <typename T>
EncoderWeights<T> EncoderWeights<T>::zeros(const EncoderConfig& config) {
  config.validate();
  EncoderWeights<T> w;
  w.token_embeddings = BasicTensor<T>({config.vocab_size, config.model_dim});
  w.position_embeddings = BasicTensor<T>({config.max_positions, config.model_dim});
  w.layers.assign(config.num_layers, layer_shapes<T>(config));
  w.visit([](BasicTensor<T>& t) { t.fill(T(0)); });
  return w;
}

EncoderModel init_model(const EncoderConfig& config) {
  config.validate();
  EncoderModel model{config, {}};
  auto& w = model.weights;
  w.token_embeddings = Tensor({config.vocab_size, config.model_dim});
  w.position_embeddings = Tensor({config.max_positions, config.model_dim});
  w.layers.assign(config.num_layers, layer_shapes<float>(config));

  // Matrices (rank 2) draw from N(0, 0.02); vectors keep their zero/one init.
  const CounterRng root(config.seed);
  std::uint64_t index = 0;
  w.visit([&](Tensor& t) {
    CounterRng stream = root.fork(index++);
    if (t.rank() != 2) return;
    for (auto& v : t.values()) v = static_cast<float>(stream.normal(0.0, kInitStddev));
  });
  return model;
}

std::uint64_t param_count(const EncoderConfig& c) {
  const std::uint64_t d = c.model_dim;
  const std::uint64_t f = c.ffn_dim;
  const std::uint64_t per_layer = 2 * d          // LN1
                                  + 4 * (d * d + d)  // Q, K, V, O
                                  + 2 * d          // LN2
                                  + d * f + f      // FFN in
                                  + f * d + d;     // FFN out
  return c.vocab_size * d + c.max_positions * d + c.num_layers * per_layer;
}

void validate_input(const EncoderConfig& config, std::span<const int> ids) {
  if (ids.empty()) throw InputError("empty token sequence");
  if (ids.size() > config.max_positions) {
    throw InputError("input length " + std::to_string(ids.size()) + " exceeds max_positions " +
                     std::to_string(config.max_positions));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config.vocab_size) {
      throw InputError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " is outside the vocabulary");
    }
  }
}

template <typename T>
BasicTensor<T> encoder_forward(const EncoderConfig& config, const EncoderWeights<T>& weights,
                               std::span<const int> ids, EncoderTrace<T>* trace) {
  validate_input(config, ids);
  const std::size_t n = ids.size();
  const std::size_t d = config.model_dim;
  const std::size_t f = config.ffn_dim;
  const std::size_t heads = config.num_heads;
  const std::size_t dh = config.head_dim();
  const std::size_t L = config.num_layers;
  const T scale = T(1) / std::sqrt(T(dh));

  BasicTensor<T> out({L + 1, n, d});
  {
    T* h0 = out.slab(0).data();
    for (std::size_t i = 0; i < n; ++i) {
      const T* tok = weights.token_embeddings.data() + static_cast<std::size_t>(ids[i]) * d;
      const T* pos = weights.position_embeddings.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) h0[i * d + j] = tok[j] + pos[j];
    }
  }
  if (trace) trace->layers.assign(L, {});

  typename EncoderTrace<T>::Layer scratch;
  std::vector<T> qh, kh, vh, ch;
  for (std::size_t l = 1; l <= L; ++l) {
    const LayerWeights<T>& w = weights.layers[l - 1];
    auto& tr = trace ? trace->layers[l - 1] : scratch;
    const T* h_in = out.slab(l - 1).data();
    T* h_out = out.slab(l).data();

    layer_norm_forward(h_in, w.ln1_gain, w.ln1_bias, n, d, tr.xhat1, tr.rstd1, tr.a1);
    tr.q = BasicTensor<T>({n, d});
    tr.k = BasicTensor<T>({n, d});
    tr.v = BasicTensor<T>({n, d});
    kernels::matmul(tr.a1.data(), w.wq.data(), tr.q.data(), n, d, d);
    kernels::matmul(tr.a1.data(), w.wk.data(), tr.k.data(), n, d, d);
    kernels::matmul(tr.a1.data(), w.wv.data(), tr.v.data(), n, d, d);
    add_row_bias(tr.q.data(), w.bq.data(), n, d);
    add_row_bias(tr.k.data(), w.bk.data(), n, d);
    add_row_bias(tr.v.data(), w.bv.data(), n, d);

    tr.probs = BasicTensor<T>({heads, n, n});
    tr.context = BasicTensor<T>({n, d});
    for (std::size_t hd = 0; hd < heads; ++hd) {
      gather_head(tr.q, hd * dh, dh, qh);
      gather_head(tr.k, hd * dh, dh, kh);
      gather_head(tr.v, hd * dh, dh, vh);
      T* p = tr.probs.slab(hd).data();
      kernels::matmul_bt(qh.data(), kh.data(), p, n, dh, n);
      for (std::size_t i = 0; i < n * n; ++i) p[i] *= scale;
      kernels::softmax_rows(p, n, n);
      ch.assign(n * dh, T(0));
      kernels::matmul(p, vh.data(), ch.data(), n, n, dh);
      scatter_head(ch, hd * dh, dh, tr.context);
    }

    // mid = h_in + context * Wo + bo, staged in h_out
    kernels::matmul(tr.context.data(), w.wo.data(), h_out, n, d, d);
    add_row_bias(h_out, w.bo.data(), n, d);
    for (std::size_t i = 0; i < n * d; ++i) h_out[i] += h_in[i];

    layer_norm_forward(h_out, w.ln2_gain, w.ln2_bias, n, d, tr.xhat2, tr.rstd2, tr.a2);
    tr.pre_act = BasicTensor<T>({n, f});
    kernels::matmul(tr.a2.data(), w.w1.data(), tr.pre_act.data(), n, d, f);
    add_row_bias(tr.pre_act.data(), w.b1.data(), n, f);
    tr.act = BasicTensor<T>({n, f});
    for (std::size_t i = 0; i < n * f; ++i) tr.act[i] = gelu(tr.pre_act[i]);

    std::vector<T> ffn(n * d);
    kernels::matmul(tr.act.data(), w.w2.data(), ffn.data(), n, f, d);
    add_row_bias(ffn.data(), w.b2.data(), n, d);
    for (std::size_t i = 0; i < n * d; ++i) h_out[i] += ffn[i];
  }
  return out;
}

template <typename T>
void encoder_backward(const EncoderConfig& config, const EncoderWeights<T>& weights,
                      std::span<const int> ids, const EncoderTrace<T>& trace,
                      const BasicTensor<T>& d_features, EncoderWeights<T>& grads) {
  const std::size_t n = ids.size();
  const std::size_t d = config.model_dim;
  const std::size_t f = config.ffn_dim;
  const std::size_t heads = config.num_heads;
  const std::size_t dh = config.head_dim();
  const std::size_t L = config.num_layers;
  const T scale = T(1) / std::sqrt(T(dh));

  if (d_features.shape() != Shape{L + 1, n, d}) {
    throw ParameterError("feature gradient shape " + shape_string(d_features.shape()) +
                         " does not match encoder output");
  }

  BasicTensor<T> dh_out({n, d});
  {
    auto last = d_features.slab(L);
    std::copy(last.begin(), last.end(), dh_out.data());
  }

  std::vector<T> qh, kh, vh, dch, dp, dqh, dkh, dvh;
  for (std::size_t l = L; l >= 1; --l) {
    const LayerWeights<T>& w = weights.layers[l - 1];
    LayerWeights<T>& g = grads.layers[l - 1];
    const auto& tr = trace.layers[l - 1];

    // FFN branch
    kernels::matmul_at(tr.act.data(), dh_out.data(), g.w2.data(), n, f, d, true);
    add_column_sums(dh_out.data(), g.b2.data(), n, d);
    BasicTensor<T> d_pre({n, f});
    kernels::matmul_bt(dh_out.data(), w.w2.data(), d_pre.data(), n, d, f);
    for (std::size_t i = 0; i < n * f; ++i) d_pre[i] *= gelu_grad(tr.pre_act[i]);
    kernels::matmul_at(tr.a2.data(), d_pre.data(), g.w1.data(), n, d, f, true);
    add_column_sums(d_pre.data(), g.b1.data(), n, f);
    BasicTensor<T> d_a2({n, d});
    kernels::matmul_bt(d_pre.data(), w.w1.data(), d_a2.data(), n, f, d);

    BasicTensor<T> d_mid = dh_out;
    layer_norm_backward(d_a2, tr.xhat2, tr.rstd2, w.ln2_gain, g.ln2_gain, g.ln2_bias, d_mid.data());

    // attention output projection
    kernels::matmul_at(tr.context.data(), d_mid.data(), g.wo.data(), n, d, d, true);
    add_column_sums(d_mid.data(), g.bo.data(), n, d);
    BasicTensor<T> d_context({n, d});
    kernels::matmul_bt(d_mid.data(), w.wo.data(), d_context.data(), n, d, d);

    BasicTensor<T> dq({n, d}), dk({n, d}), dv({n, d});
    for (std::size_t hd = 0; hd < heads; ++hd) {
      gather_head(tr.q, hd * dh, dh, qh);
      gather_head(tr.k, hd * dh, dh, kh);
      gather_head(tr.v, hd * dh, dh, vh);
      gather_head(d_context, hd * dh, dh, dch);
      const T* p = tr.probs.slab(hd).data();

      dp.assign(n * n, T(0));
      kernels::matmul_bt(dch.data(), vh.data(), dp.data(), n, dh, n);
      dvh.assign(n * dh, T(0));
      kernels::matmul_at(p, dch.data(), dvh.data(), n, n, dh);
      // softmax backward, then the 1/sqrt(dh) scale
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += dp[i * n + j] * p[i * n + j];
        for (std::size_t j = 0; j < n; ++j) dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot) * scale;
      }
      dqh.assign(n * dh, T(0));
      kernels::matmul(dp.data(), kh.data(), dqh.data(), n, n, dh);
      dkh.assign(n * dh, T(0));
      kernels::matmul_at(dp.data(), qh.data(), dkh.data(), n, n, dh);
      scatter_head(dqh, hd * dh, dh, dq);
      scatter_head(dkh, hd * dh, dh, dk);
      scatter_head(dvh, hd * dh, dh, dv);
    }

    kernels::matmul_at(tr.a1.data(), dq.data(), g.wq.data(), n, d, d, true);
    kernels::matmul_at(tr.a1.data(), dk.data(), g.wk.data(), n, d, d, true);
    kernels::matmul_at(tr.a1.data(), dv.data(), g.wv.data(), n, d, d, true);
    add_column_sums(dq.data(), g.bq.data(), n, d);
    add_column_sums(dk.data(), g.bk.data(), n, d);
    add_column_sums(dv.data(), g.bv.data(), n, d);
    BasicTensor<T> d_a1({n, d});
    kernels::matmul_bt(dq.data(), w.wq.data(), d_a1.data(), n, d, d);
    kernels::matmul_bt(dk.data(), w.wk.data(), d_a1.data(), n, d, d, true);
    kernels::matmul_bt(dv.data(), w.wv.data(), d_a1.data(), n, d, d, true);

    BasicTensor<T> d_in = d_mid;
    layer_norm_backward(d_a1, tr.xhat1, tr.rstd1, w.ln1_gain, g.ln1_gain, g.ln1_bias, d_in.data());

    auto skip = d_features.slab(l - 1);
    for (std::size_t i = 0; i < n * d; ++i) d_in[i] += skip[i];
    dh_out = std::move(d_in);
  }

  for (std::size_t i = 0; i < n; ++i) {
    T* tok = grads.token_embeddings.data() + static_cast<std::size_t>(ids[i]) * d;
    T* pos = grads.position_embeddings.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      tok[j] += dh_out.at(i, j);
      pos[j] += dh_out.at(i, j);
    }
  }
}

LayerFeatures encode(const EncoderModel& model, const TokenSeq& input) {
  return encoder_forward<float>(model.config, model.weights, input.ids, nullptr);
}

std::vector<LayerFeatures> encode_batch(const EncoderModel& model, std::span<const TokenSeq> inputs) {
  for (const auto& seq : inputs) validate_input(model.config, seq.ids);
  std::vector<LayerFeatures> out(inputs.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(inputs.size()); ++i) {
    out[static_cast<std::size_t>(i)] = encode(model, inputs[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<LayerFeatures> encode_batch_serial(const EncoderModel& model,
                                               std::span<const TokenSeq> inputs) {
  std::vector<LayerFeatures> out;
  out.reserve(inputs.size());
  for (const auto& seq : inputs) out.push_back(encode(model, seq));
  return out;
}

void save_model(std::ostream& out, const EncoderModel& model) {
  wire::Writer w(out);
  w.magic("AMTM");
  w.u16(kCheckpointVersion);
  write_config(w, model.config);
  model.weights.visit([&](const Tensor& t) { w.tensor(t); });
  w.flush();
}

EncoderModel load_model(std::istream& in) {
  wire::Reader r(in);
  r.expect_magic("AMTM");
  const auto at = r.offset();
  const auto version = r.u16("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), at);
  }
  const auto config_at = r.offset();
  EncoderConfig config = read_config(r);
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid config in checkpoint: ") + e.what(), config_at);
  }
  EncoderModel model{config, EncoderWeights<float>::zeros(config)};
  model.weights.visit([&](Tensor& t) { t = r.tensor("weight tensor", t.shape()); });
  return model;
}

void save_model(const std::filesystem::path& path, const EncoderModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw StorageError("cannot open " + path.string() + " for writing");
  save_model(out, model);
}

EncoderModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open " + path.string());
  return load_model(in);
}

std::uint64_t fingerprint(const EncoderModel& model) {
  std::ostringstream buffer(std::ios::binary);
  save_model(buffer, model);
  const std::string bytes = buffer.str();
  return wire::fnv1a64({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
}

template struct EncoderWeights<float>;
template struct EncoderWeights<double>;
template BasicTensor<float> encoder_forward<float>(const EncoderConfig&, const EncoderWeights<float>&,
                                                   std::span<const int>, EncoderTrace<float>*);
template BasicTensor<double> encoder_forward<double>(const EncoderConfig&,
                                                     const EncoderWeights<double>&,
                                                     std::span<const int>, EncoderTrace<double>*);
template void encoder_backward<float>(const EncoderConfig&, const EncoderWeights<float>&,
                                      std::span<const int>, const EncoderTrace<float>&,
                                      const BasicTensor<float>&, EncoderWeights<float>&);
template void encoder_backward<double>(const EncoderConfig&, const EncoderWeights<double>&,
                                       std::span<const int>, const EncoderTrace<double>&,
                                       const BasicTensor<double>&, EncoderWeights<double>&);

}  // namespace amortenc
