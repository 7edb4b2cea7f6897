#include "amortenc/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>

namespace amortenc::kernels {

namespace {

template <typename T>
inline void matmul_row(const T* a, const T* b, T* c, std::size_t i, std::size_t k, std::size_t n,
                       bool accumulate) {
  T* out = c + i * n;
  if (!accumulate) std::fill(out, out + n, T{0});
  const T* arow = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const T av = arow[p];
    const T* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += av * brow[j];
  }
}

template <typename T>
inline void matmul_at_row(const T* a, const T* b, T* c, std::size_t p, std::size_t m,
                          std::size_t k, std::size_t n, bool accumulate) {
  T* out = c + p * n;
  if (!accumulate) std::fill(out, out + n, T{0});
  for (std::size_t i = 0; i < m; ++i) {
    const T av = a[i * k + p];
    const T* brow = b + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += av * brow[j];
  }
}

template <typename T>
inline void matmul_bt_row(const T* a, const T* b, T* c, std::size_t i, std::size_t n,
                          std::size_t k, bool accumulate) {
  const T* arow = a + i * n;
  T* out = c + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    T acc = accumulate ? out[p] : T{0};
    for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
    out[p] = acc;
  }
}

template <typename T>
inline void softmax_row(T* x, std::size_t n) {
  T peak = x[0];
  for (std::size_t j = 1; j < n; ++j) peak = std::max(peak, x[j]);
  T total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    x[j] = std::exp(x[j] - peak);
    total += x[j];
  }
  for (std::size_t j = 0; j < n; ++j) x[j] /= total;
}

}  // namespace

namespace serial {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n, accumulate);
}

template <typename T>
void matmul_at(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate) {
  for (std::size_t p = 0; p < k; ++p) matmul_at_row(a, b, c, p, m, k, n, accumulate);
}

template <typename T>
void matmul_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
               bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) matmul_bt_row(a, b, c, i, n, k, accumulate);
}

template <typename T>
void softmax_rows(T* x, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) softmax_row(x + i * n, n);
}

}  // namespace serial

namespace parallel {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate) {
  const bool wide = m * k * n >= kParallelWorkThreshold;
#pragma omp parallel for schedule(static) if (wide)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    matmul_row(a, b, c, static_cast<std::size_t>(i), k, n, accumulate);
  }
}

template <typename T>
void matmul_at(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate) {
  const bool wide = m * k * n >= kParallelWorkThreshold;
#pragma omp parallel for schedule(static) if (wide)
  for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(k); ++p) {
    matmul_at_row(a, b, c, static_cast<std::size_t>(p), m, k, n, accumulate);
  }
}

template <typename T>
void matmul_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
               bool accumulate) {
  const bool wide = m * k * n >= kParallelWorkThreshold;
#pragma omp parallel for schedule(static) if (wide)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    matmul_bt_row(a, b, c, static_cast<std::size_t>(i), n, k, accumulate);
  }
}

template <typename T>
void softmax_rows(T* x, std::size_t m, std::size_t n) {
  const bool wide = m * n >= kParallelWorkThreshold;
#pragma omp parallel for schedule(static) if (wide)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    softmax_row(x + static_cast<std::size_t>(i) * n, n);
  }
}

}  // namespace parallel

int configure_threads_from_env() {
  if (const char* raw = std::getenv("AMORTENC_THREADS")) {
    try {
      const int cap = std::stoi(raw);
      if (cap >= 1) omp_set_num_threads(cap);
    } catch (const std::exception&) {
      // unparsable value: keep the OpenMP default
    }
  }
  return omp_get_max_threads();
}

int max_threads() { return omp_get_max_threads(); }

#define AMORTENC_INSTANTIATE(NS, T)                                                             \
  template void NS::matmul<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t,    \
                              bool);                                                            \
  template void NS::matmul_at<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, \
                                 bool);                                                         \
  template void NS::matmul_bt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, \
                                 bool);                                                         \
  template void NS::softmax_rows<T>(T*, std::size_t, std::size_t);

AMORTENC_INSTANTIATE(serial, float)
AMORTENC_INSTANTIATE(serial, double)
AMORTENC_INSTANTIATE(parallel, float)
AMORTENC_INSTANTIATE(parallel, double)

#undef AMORTENC_INSTANTIATE

}  // namespace amortenc::kernels
