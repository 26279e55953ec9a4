#include "star/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace star::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1 << 15;

int g_threads = 0;

int team_size() { return g_threads > 0 ? g_threads : omp_get_max_threads(); }

}  // namespace

void set_num_threads(int n) { g_threads = std::max(0, n); }
int num_threads() { return team_size(); }

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 16;

// C rows [i0, i0 + kRowBlock) x cols [j0, j0 + kColBlock) with the
// accumulators held in registers.
template <typename T>
void gemm_tile(std::size_t i0, std::size_t j0, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
               bool accumulate) {
  T acc[kRowBlock][kColBlock];
  for (std::size_t r = 0; r < kRowBlock; ++r) {
    for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] = accumulate ? c[(i0 + r) * n + j0 + j] : T{0};
  }
  for (std::size_t p = 0; p < k; ++p) {
    const T* bp = b + p * n + j0;
    for (std::size_t r = 0; r < kRowBlock; ++r) {
      const T av = a[(i0 + r) * k + p];
#pragma omp simd
      for (std::size_t j = 0; j < kColBlock; ++j) acc[r][j] += av * bp[j];
    }
  }
  for (std::size_t r = 0; r < kRowBlock; ++r) {
    for (std::size_t j = 0; j < kColBlock; ++j) c[(i0 + r) * n + j0 + j] = acc[r][j];
  }
}

// Ragged edges: plain loops over the given block.
template <typename T>
void gemm_edge(std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1, std::size_t n, std::size_t k,
               const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = i0; i < i1; ++i) {
    T* ci = c + i * n;
    if (!accumulate) std::fill(ci + j0, ci + j1, T{0});
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = j0; j < j1; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
  }
  return out;
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  if (m == 0 || n == 0) return;
  // Transposed operands are packed once so every case runs the same
  // row-major tile kernel.
  std::vector<T> at, bt;
  if (trans_a) {
    at = transposed(a, k, m);
    a = at.data();
  }
  if (trans_b) {
    bt = transposed(b, n, k);
    b = bt.data();
  }
  const std::size_t row_blocks = (m + kRowBlock - 1) / kRowBlock;
  const std::size_t full_cols = n - n % kColBlock;
  const bool par = m * n * k >= kParallelWork && row_blocks > 1;
#pragma omp parallel for if (par) num_threads(team_size()) schedule(static)
  for (std::ptrdiff_t blk = 0; blk < static_cast<std::ptrdiff_t>(row_blocks); ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * kRowBlock;
    const std::size_t i1 = std::min(m, i0 + kRowBlock);
    if (i1 - i0 == kRowBlock) {
      for (std::size_t j0 = 0; j0 < full_cols; j0 += kColBlock) gemm_tile(i0, j0, n, k, a, b, c, accumulate);
    } else if (full_cols > 0) {
      gemm_edge(i0, i1, 0, full_cols, n, k, a, b, c, accumulate);
    }
    if (full_cols < n) gemm_edge(i0, i1, full_cols, n, n, k, a, b, c, accumulate);
  }
}

template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols) {
  const bool par = rows * cols >= kParallelWork;
#pragma omp parallel for if (par) num_threads(team_size()) schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    T* xr = x + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T sum{0};
    for (std::size_t j = 0; j < cols; ++j) {
      xr[j] = std::exp(xr[j] - mx);
      sum += xr[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < cols; ++j) xr[j] *= inv;
  }
}

template <typename T>
void normalize_rows(const T* x, T* y, T* inv_std, std::size_t rows, std::size_t cols, T eps) {
  const bool par = rows * cols >= kParallelWork;
#pragma omp parallel for if (par) num_threads(team_size()) schedule(static)
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(rows); ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mean{0};
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<T>(cols);
    T var{0};
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(cols);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < cols; ++j) yr[j] = (xr[j] - mean) * is;
  }
}

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        s += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

template <typename T>
void softmax_rows(T* x, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* xr = x + r * cols;
    T mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T sum{0};
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(xr[j] - mx);
    for (std::size_t j = 0; j < cols; ++j) xr[j] = std::exp(xr[j] - mx) / sum;
  }
}

template <typename T>
void normalize_rows(const T* x, T* y, T* inv_std, std::size_t rows, std::size_t cols, T eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mean{0};
    for (std::size_t j = 0; j < cols; ++j) mean += x[r * cols + j];
    mean /= static_cast<T>(cols);
    T var{0};
    for (std::size_t j = 0; j < cols; ++j) {
      const T dv = x[r * cols + j] - mean;
      var += dv * dv;
    }
    var /= static_cast<T>(cols);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] = (x[r * cols + j] - mean) * inv_std[r];
  }
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                           const double*, double*, bool);
template void softmax_rows<float>(float*, std::size_t, std::size_t);
template void softmax_rows<double>(double*, std::size_t, std::size_t);
template void normalize_rows<float>(const float*, float*, float*, std::size_t, std::size_t, float);
template void normalize_rows<double>(const double*, double*, double*, std::size_t, std::size_t,
                                     double);

}  // namespace reference

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                           const double*, double*, bool);
template void softmax_rows<float>(float*, std::size_t, std::size_t);
template void softmax_rows<double>(double*, std::size_t, std::size_t);
template void normalize_rows<float>(const float*, float*, float*, std::size_t, std::size_t, float);
template void normalize_rows<double>(const double*, double*, double*, std::size_t, std::size_t,
                                     double);

}  // namespace star::kernels
