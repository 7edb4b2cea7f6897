#pragma once

#include <cstddef>
#include <span>

namespace amortenc::kernels {

// Dense row-major GEMM variants used by the encoder, pooler and head.
//   matmul:     C[m x n]  (+)= A[m x k]  * B[k x n]
//   matmul_at:  C[k x n]  (+)= A[m x k]^T * B[m x n]
//   matmul_bt:  C[m x k]  (+)= A[m x n]  * B[k x n]^T
//
// Every output element is reduced in the same order in both namespaces, so
// the parallel variants are bit-identical to the serial reference.

namespace serial {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false);
template <typename T>
void matmul_at(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate = false);
template <typename T>
void matmul_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
               bool accumulate = false);

// In-place softmax over each row of an m x n block.
template <typename T>
void softmax_rows(T* x, std::size_t m, std::size_t n);

}  // namespace serial

namespace parallel {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false);
template <typename T>
void matmul_at(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate = false);
template <typename T>
void matmul_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k,
               bool accumulate = false);
template <typename T>
void softmax_rows(T* x, std::size_t m, std::size_t n);

}  // namespace parallel

// Below this many multiply-adds the parallel kernels stay on one thread.
inline constexpr std::size_t kParallelWorkThreshold = 1u << 16;

using parallel::matmul;
using parallel::matmul_at;
using parallel::matmul_bt;
using parallel::softmax_rows;

// Reads AMORTENC_THREADS and caps the OpenMP team size. Returns the cap in
// effect (the OpenMP default when the variable is unset or invalid).
int configure_threads_from_env();
int max_threads();

}  // namespace amortenc::kernels
