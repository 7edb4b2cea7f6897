#include "amortenc/pooling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "amortenc/kernels.hpp"

namespace amortenc {

namespace {

constexpr std::size_t kDefaultAvgLayers = 16;

std::size_t parse_count(std::string_view text, std::string_view what) {
  if (text.empty()) throw ParameterError(std::string("missing ") + std::string(what));
  std::size_t value = 0;
  for (char c : text) {
    if (c < '0' || c > '9') {
      throw ParameterError("invalid " + std::string(what) + " '" + std::string(text) + "'");
    }
    value = value * 10 + static_cast<std::size_t>(c - '0');
  }
  return value;
}

}  // namespace

PoolingSpec PoolingSpec::parse(std::string_view text) {
  const auto comma = text.rfind(',');
  if (comma == std::string_view::npos) {
    throw ParameterError("pooling spec '" + std::string(text) + "' must be <layer>,<position>");
  }
  const auto layer = text.substr(0, comma);
  const auto position = text.substr(comma + 1);
  PoolingSpec spec;
  if (layer == "last") {
    spec.layer = LayerMode::last;
  } else if (layer == "learned-comb") {
    spec.layer = LayerMode::learned_comb;
  } else if (layer == "layer-avg") {
    spec.layer = LayerMode::avg;
  } else if (layer.starts_with("layer-avg:")) {
    spec.layer = LayerMode::avg;
    spec.avg_layers = parse_count(layer.substr(10), "layer-avg m");
    if (spec.avg_layers == 0) throw ParameterError("layer-avg m must be >= 1");
  } else {
    throw ParameterError("unknown layer pooling '" + std::string(layer) + "'");
  }
  if (position == "cls") {
    spec.position = PositionMode::cls;
  } else if (position == "pos-avg") {
    spec.position = PositionMode::avg;
  } else if (position == "mha") {
    spec.position = PositionMode::mha;
  } else if (position.starts_with("mha:")) {
    spec.position = PositionMode::mha;
    spec.mha_heads = parse_count(position.substr(4), "mha heads");
    if (spec.mha_heads == 0) throw ParameterError("mha heads must be >= 1");
  } else {
    throw ParameterError("unknown position pooling '" + std::string(position) + "'");
  }
  return spec;
}

std::string PoolingSpec::to_string() const {
  std::string out;
  switch (layer) {
    case LayerMode::last: out = "last"; break;
    case LayerMode::avg:
      out = avg_layers ? "layer-avg:" + std::to_string(avg_layers) : "layer-avg";
      break;
    case LayerMode::learned_comb: out = "learned-comb"; break;
  }
  switch (position) {
    case PositionMode::cls: out += ",cls"; break;
    case PositionMode::avg: out += ",pos-avg"; break;
    case PositionMode::mha: out += mha_heads ? ",mha:" + std::to_string(mha_heads) : ",mha"; break;
  }
  return out;
}

std::size_t PoolingSpec::resolved_avg_layers(std::size_t num_layers) const {
  const std::size_t m = avg_layers ? avg_layers : std::min(kDefaultAvgLayers, num_layers);
  return std::min(m, num_layers + 1);
}

template <typename T>
void MhaParams<T>::validate(std::size_t d) const {
  if (num_heads == 0 || d % num_heads != 0) {
    throw ParameterError("MHA pooler: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
  }
  const Shape vec{d};
  const Shape mat{d, d};
  if (query.shape() != vec || key_proj.shape() != mat || value_proj.shape() != mat ||
      out_proj.shape() != mat) {
    throw ParameterError("MHA pooler parameter shapes do not match feature width " +
                         std::to_string(d));
  }
}

template <typename T>
MhaParams<T> MhaParams<T>::identity(std::size_t d, std::size_t heads) {
  MhaParams p;
  p.num_heads = heads;
  p.query = BasicTensor<T>({d});
  p.key_proj = BasicTensor<T>({d, d});
  p.value_proj = BasicTensor<T>({d, d});
  p.out_proj = BasicTensor<T>({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    p.key_proj.at(i, i) = T(1);
    p.value_proj.at(i, i) = T(1);
    p.out_proj.at(i, i) = T(1);
  }
  return p;
}

template <typename T>
MhaParams<T> MhaParams<T>::init(std::size_t d, std::size_t heads, CounterRng& rng) {
  MhaParams p = identity(d, heads);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& v : p.key_proj.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return p;
}

template <typename T>
Pooler<T> Pooler<T>::init(const PoolingSpec& spec, std::size_t layer_slabs, std::size_t num_layers,
                          std::size_t d, std::size_t default_heads, CounterRng& rng) {
  Pooler p;
  switch (spec.layer) {
    case LayerMode::last: p.layer = LayerPooling<T>::last(); break;
    case LayerMode::avg:
      p.layer = LayerPooling<T>::avg(std::min(spec.resolved_avg_layers(num_layers), layer_slabs));
      break;
    case LayerMode::learned_comb:
      p.layer = LayerPooling<T>::learned_comb(BasicTensor<T>({layer_slabs}));
      break;
  }
  switch (spec.position) {
    case PositionMode::cls: p.position = PositionPooling<T>::cls(); break;
    case PositionMode::avg: p.position = PositionPooling<T>::avg(); break;
    case PositionMode::mha:
      p.position = PositionPooling<T>::attention(
          MhaParams<T>::init(d, spec.mha_heads ? spec.mha_heads : default_heads, rng));
      p.position.mha.validate(d);
      break;
  }
  return p;
}

template <typename T>
template <typename U>
Pooler<U> Pooler<T>::cast() const {
  Pooler<U> out;
  out.layer.mode = layer.mode;
  out.layer.avg_layers = layer.avg_layers;
  out.layer.logits = layer.logits.template cast<U>();
  out.position.mode = position.mode;
  out.position.mha.num_heads = position.mha.num_heads;
  out.position.mha.query = position.mha.query.template cast<U>();
  out.position.mha.key_proj = position.mha.key_proj.template cast<U>();
  out.position.mha.value_proj = position.mha.value_proj.template cast<U>();
  out.position.mha.out_proj = position.mha.out_proj.template cast<U>();
  return out;
}

template <typename T>
BasicTensor<T> layer_weights(const BasicTensor<T>& logits) {
  BasicTensor<T> w = logits;
  kernels::serial::softmax_rows(w.data(), 1, w.size());
  return w;
}

template <typename T>
BasicTensor<T> pool_layers(const BasicTensor<T>& features, const LayerPooling<T>& strategy) {
  if (features.rank() != 3 || features.dim(0) == 0) {
    throw ParameterError("layer pooling expects (layers x n x d) features, got " +
                         shape_string(features.shape()));
  }
  const std::size_t layers = features.dim(0);
  const std::size_t n = features.dim(1);
  const std::size_t d = features.dim(2);
  BasicTensor<T> out({n, d});
  switch (strategy.mode) {
    case LayerMode::last: {
      auto src = features.slab(layers - 1);
      std::copy(src.begin(), src.end(), out.data());
      break;
    }
    case LayerMode::avg: {
      if (strategy.avg_layers == 0) throw ParameterError("layer-avg m must be >= 1");
      const std::size_t m = std::min(strategy.avg_layers, layers);
      for (std::size_t l = layers - m; l < layers; ++l) {
        auto src = features.slab(l);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += src[i];
      }
      for (auto& v : out.values()) v /= T(m);
      break;
    }
    case LayerMode::learned_comb: {
      if (strategy.logits.shape() != Shape{layers}) {
        throw ParameterError("learned-comb has " + std::to_string(strategy.logits.size()) +
                             " logits for " + std::to_string(layers) + " layers");
      }
      const BasicTensor<T> w = layer_weights(strategy.logits);
      for (std::size_t l = 0; l < layers; ++l) {
        auto src = features.slab(l);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w[l] * src[i];
      }
      break;
    }
  }
  return out;
}

template <typename T>
void pool_layers_backward(const BasicTensor<T>& features, const LayerPooling<T>& strategy,
                          const BasicTensor<T>& d_out, BasicTensor<T>* d_features,
                          LayerPooling<T>* d_strategy) {
  const std::size_t layers = features.dim(0);
  const std::size_t count = d_out.size();
  switch (strategy.mode) {
    case LayerMode::last:
      if (d_features) {
        auto dst = d_features->slab(layers - 1);
        for (std::size_t i = 0; i < count; ++i) dst[i] += d_out[i];
      }
      break;
    case LayerMode::avg: {
      const std::size_t m = std::min(strategy.avg_layers, layers);
      if (d_features) {
        for (std::size_t l = layers - m; l < layers; ++l) {
          auto dst = d_features->slab(l);
          for (std::size_t i = 0; i < count; ++i) dst[i] += d_out[i] / T(m);
        }
      }
      break;
    }
    case LayerMode::learned_comb: {
      const BasicTensor<T> w = layer_weights(strategy.logits);
      std::vector<T> dw(layers, T(0));
      for (std::size_t l = 0; l < layers; ++l) {
        auto src = features.slab(l);
        for (std::size_t i = 0; i < count; ++i) dw[l] += d_out[i] * src[i];
        if (d_features) {
          auto dst = d_features->slab(l);
          for (std::size_t i = 0; i < count; ++i) dst[i] += w[l] * d_out[i];
        }
      }
      if (d_strategy) {
        T mix = 0;
        for (std::size_t l = 0; l < layers; ++l) mix += w[l] * dw[l];
        for (std::size_t l = 0; l < layers; ++l) d_strategy->logits[l] += w[l] * (dw[l] - mix);
      }
      break;
    }
  }
}

template <typename T>
BasicTensor<T> mha_pool(const BasicTensor<T>& features, const MhaParams<T>& params,
                        MhaTrace<T>* trace) {
  if (features.rank() != 2) {
    throw ParameterError("MHA pooling expects (n x d) features, got " + shape_string(features.shape()));
  }
  const std::size_t n = features.dim(0);
  const std::size_t d = features.dim(1);
  if (n == 0) throw InputError("cannot pool an empty sequence");
  params.validate(d);
  const std::size_t heads = params.num_heads;
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));

  MhaTrace<T> local;
  MhaTrace<T>& tr = trace ? *trace : local;
  tr.keys = BasicTensor<T>({n, d});
  tr.values = BasicTensor<T>({n, d});
  kernels::matmul(features.data(), params.key_proj.data(), tr.keys.data(), n, d, d);
  kernels::matmul(features.data(), params.value_proj.data(), tr.values.data(), n, d, d);

  tr.weights = BasicTensor<T>({heads, n});
  tr.concat = BasicTensor<T>({d});
  for (std::size_t h = 0; h < heads; ++h) {
    T* a = tr.weights.slab(h).data();
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += params.query[c] * tr.keys.at(j, c);
      a[j] = s * scale;
    }
    kernels::serial::softmax_rows(a, 1, n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) tr.concat[c] += a[j] * tr.values.at(j, c);
  }

  BasicTensor<T> out({d});
  kernels::matmul(tr.concat.data(), params.out_proj.data(), out.data(), 1, d, d);
  return out;
}

template <typename T>
void mha_pool_backward(const BasicTensor<T>& features, const MhaParams<T>& params,
                       const MhaTrace<T>& trace, const BasicTensor<T>& d_out,
                       BasicTensor<T>* d_features, MhaParams<T>* d_params) {
  const std::size_t n = features.dim(0);
  const std::size_t d = features.dim(1);
  const std::size_t heads = params.num_heads;
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));

  BasicTensor<T> d_concat({d});
  kernels::matmul_bt(d_out.data(), params.out_proj.data(), d_concat.data(), 1, d, d);

  BasicTensor<T> d_keys({n, d});
  BasicTensor<T> d_values({n, d});
  BasicTensor<T> d_query({d});
  std::vector<T> da(n), ds(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const T* a = trace.weights.slab(h).data();
    T mix = 0;
    for (std::size_t j = 0; j < n; ++j) {
      T g = 0;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        g += d_concat[c] * trace.values.at(j, c);
        d_values.at(j, c) += a[j] * d_concat[c];
      }
      da[j] = g;
      mix += a[j] * g;
    }
    for (std::size_t j = 0; j < n; ++j) ds[j] = a[j] * (da[j] - mix) * scale;
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        d_query[c] += ds[j] * trace.keys.at(j, c);
        d_keys.at(j, c) += ds[j] * params.query[c];
      }
    }
  }

  if (d_params) {
    // out_proj += concat^T * d_out (outer product)
    kernels::matmul_at(trace.concat.data(), d_out.data(), d_params->out_proj.data(), 1, d, d, true);
    for (std::size_t c = 0; c < d; ++c) d_params->query[c] += d_query[c];
    kernels::matmul_at(features.data(), d_keys.data(), d_params->key_proj.data(), n, d, d, true);
    kernels::matmul_at(features.data(), d_values.data(), d_params->value_proj.data(), n, d, d, true);
  }
  if (d_features) {
    kernels::matmul_bt(d_keys.data(), params.key_proj.data(), d_features->data(), n, d, d, true);
    kernels::matmul_bt(d_values.data(), params.value_proj.data(), d_features->data(), n, d, d, true);
  }
}

template <typename T>
BasicTensor<T> pool_positions(const BasicTensor<T>& features, const PositionPooling<T>& strategy,
                              MhaTrace<T>* trace) {
  if (features.rank() != 2) {
    throw ParameterError("position pooling expects (n x d) features, got " +
                         shape_string(features.shape()));
  }
  const std::size_t n = features.dim(0);
  const std::size_t d = features.dim(1);
  if (n == 0) throw InputError("cannot pool an empty sequence");
  switch (strategy.mode) {
    case PositionMode::cls: {
      auto row = features.slab(0);
      return BasicTensor<T>({d}, std::vector<T>(row.begin(), row.end()));
    }
    case PositionMode::avg: {
      BasicTensor<T> out({d});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += features.at(i, j);
      for (auto& v : out.values()) v /= T(n);
      return out;
    }
    case PositionMode::mha:
      return mha_pool(features, strategy.mha, trace);
  }
  throw ParameterError("unknown position pooling mode");
}

template <typename T>
void pool_positions_backward(const BasicTensor<T>& features, const PositionPooling<T>& strategy,
                             const MhaTrace<T>* trace, const BasicTensor<T>& d_out,
                             BasicTensor<T>* d_features, PositionPooling<T>* d_strategy) {
  const std::size_t n = features.dim(0);
  const std::size_t d = features.dim(1);
  switch (strategy.mode) {
    case PositionMode::cls:
      if (d_features)
        for (std::size_t j = 0; j < d; ++j) d_features->at(0, j) += d_out[j];
      break;
    case PositionMode::avg:
      if (d_features)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) d_features->at(i, j) += d_out[j] / T(n);
      break;
    case PositionMode::mha:
      if (!trace) throw ParameterError("MHA backward needs the forward trace");
      mha_pool_backward(features, strategy.mha, *trace, d_out, d_features,
                        d_strategy ? &d_strategy->mha : nullptr);
      break;
  }
}

void write_pooler(wire::Writer& out, const Pooler<float>& pooler) {
  out.u8(static_cast<std::uint8_t>(pooler.layer.mode));
  if (pooler.layer.mode == LayerMode::avg) out.u32(static_cast<std::uint32_t>(pooler.layer.avg_layers));
  if (pooler.layer.mode == LayerMode::learned_comb) out.tensor(pooler.layer.logits);
  out.u8(static_cast<std::uint8_t>(pooler.position.mode));
  if (pooler.position.mode == PositionMode::mha) {
    out.u32(static_cast<std::uint32_t>(pooler.position.mha.num_heads));
    MhaParams<float>::visit(pooler.position.mha, [&](const Tensor& t) { out.tensor(t); });
  }
}

Pooler<float> read_pooler(wire::Reader& in) {
  Pooler<float> p;
  auto at = in.offset();
  const auto layer_tag = in.u8("layer pooling tag");
  switch (layer_tag) {
    case 0: p.layer = LayerPooling<float>::last(); break;
    case 1: p.layer = LayerPooling<float>::avg(in.u32("layer-avg m")); break;
    case 2: p.layer = LayerPooling<float>::learned_comb(in.tensor("learned-comb logits")); break;
    default: throw FormatError("unknown layer pooling tag " + std::to_string(layer_tag), at);
  }
  at = in.offset();
  const auto position_tag = in.u8("position pooling tag");
  switch (position_tag) {
    case 0: p.position = PositionPooling<float>::cls(); break;
    case 1: p.position = PositionPooling<float>::avg(); break;
    case 2: {
      MhaParams<float> mha;
      mha.num_heads = in.u32("mha heads");
      MhaParams<float>::visit(mha, [&](Tensor& t) { t = in.tensor("mha parameter"); });
      const std::size_t d = mha.query.size();
      try {
        mha.validate(d);
      } catch (const ParameterError& e) {
        throw FormatError(e.what(), at);
      }
      p.position = PositionPooling<float>::attention(std::move(mha));
      break;
    }
    default: throw FormatError("unknown position pooling tag " + std::to_string(position_tag), at);
  }
  return p;
}

#define AMORTENC_INSTANTIATE(T)                                                                  \
  template struct MhaParams<T>;                                                                  \
  template struct Pooler<T>;                                                                     \
  template BasicTensor<T> layer_weights<T>(const BasicTensor<T>&);                               \
  template BasicTensor<T> pool_layers<T>(const BasicTensor<T>&, const LayerPooling<T>&);         \
  template void pool_layers_backward<T>(const BasicTensor<T>&, const LayerPooling<T>&,           \
                                        const BasicTensor<T>&, BasicTensor<T>*,                  \
                                        LayerPooling<T>*);                                       \
  template BasicTensor<T> mha_pool<T>(const BasicTensor<T>&, const MhaParams<T>&, MhaTrace<T>*); \
  template void mha_pool_backward<T>(const BasicTensor<T>&, const MhaParams<T>&,                 \
                                     const MhaTrace<T>&, const BasicTensor<T>&, BasicTensor<T>*, \
                                     MhaParams<T>*);                                             \
  template BasicTensor<T> pool_positions<T>(const BasicTensor<T>&, const PositionPooling<T>&,    \
                                            MhaTrace<T>*);                                       \
  template void pool_positions_backward<T>(const BasicTensor<T>&, const PositionPooling<T>&,     \
                                           const MhaTrace<T>*, const BasicTensor<T>&,            \
                                           BasicTensor<T>*, PositionPooling<T>*);

AMORTENC_INSTANTIATE(float)
AMORTENC_INSTANTIATE(double)

template Pooler<double> Pooler<float>::cast<double>() const;
template Pooler<float> Pooler<double>::cast<float>() const;
template Pooler<float> Pooler<float>::cast<float>() const;

#undef AMORTENC_INSTANTIATE

}  // namespace amortenc
