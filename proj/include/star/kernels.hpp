#pragma once

#include <cstddef>

// Dense numeric kernels behind the autodiff operators. The default
// implementations are OpenMP-parallel over independent output rows, so
// results do not depend on the thread count. The serial versions in
// `reference` are the plain loops the parallel ones are checked against.
namespace star::kernels {

// C[m x n] (+)= op(A) * op(B), op(X) = X or X^T. Row-major, contiguous.
// A is m x k (or k x m when trans_a), B is k x n (or n x k when trans_b).
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

// Row-wise softmax over the last axis, in place.
template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols);

// Row-wise normalisation: y = (x - mean) / sqrt(var + eps); also writes
// the per-row inverse standard deviation (needed for the backward pass).
template <typename T>
void normalize_rows(const T* x, T* y, T* inv_std, std::size_t rows, std::size_t cols, T eps);

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols);

template <typename T>
void normalize_rows(const T* x, T* y, T* inv_std, std::size_t rows, std::size_t cols, T eps);

}  // namespace reference

// Threads used by the parallel kernels (0 = OpenMP default).
void set_num_threads(int n);
int num_threads();

}  // namespace star::kernels
