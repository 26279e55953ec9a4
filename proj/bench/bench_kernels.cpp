#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "star/kernels.hpp"

using namespace star;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Args: m, n, k, layout (0 = NN, 1 = NT, 2 = TN).
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto k = static_cast<std::size_t>(state.range(2));
  const bool ta = state.range(3) == 2, tb = state.range(3) == 1;
  const auto a = random_vec(m * k, 1), b = random_vec(k * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::gemm(ta, tb, m, n, k, a.data(), b.data(), c.data(), false);
    } else {
      kernels::reference::gemm(ta, tb, m, n, k, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * double(m * n * k), benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = static_cast<std::size_t>(state.range(1));
  const auto src = random_vec(rows * cols, 3);
  auto x = src;
  for (auto _ : state) {
    x = src;
    if constexpr (Parallel) {
      kernels::softmax_rows(x.data(), rows, cols);
    } else {
      kernels::reference::softmax_rows(x.data(), rows, cols);
    }
    benchmark::DoNotOptimize(x.data());
  }
}

template <bool Parallel>
void BM_Normalize(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), cols = static_cast<std::size_t>(state.range(1));
  const auto x = random_vec(rows * cols, 4);
  std::vector<float> y(rows * cols), inv(rows);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::normalize_rows(x.data(), y.data(), inv.data(), rows, cols, 1e-5f);
    } else {
      kernels::reference::normalize_rows(x.data(), y.data(), inv.data(), rows, cols, 1e-5f);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

// Shapes seen in desk-profile training: projections over ~80 frames at
// d=64, the FFN, the output layer, and a square case for scale.
void gemm_shapes(benchmark::internal::Benchmark* b) {
  for (int layout : {0, 1, 2}) {
    b->Args({80, 64, 64, layout});
    b->Args({80, 128, 64, layout});
    b->Args({21, 67, 64, layout});
    b->Args({256, 256, 256, layout});
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Apply(gemm_shapes);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Apply(gemm_shapes);
BENCHMARK(BM_Softmax<false>)->Name("softmax/reference")->Args({80, 80})->Args({1024, 1024});
BENCHMARK(BM_Softmax<true>)->Name("softmax/parallel")->Args({80, 80})->Args({1024, 1024});
BENCHMARK(BM_Normalize<false>)->Name("normalize/reference")->Args({80, 64})->Args({1024, 512});
BENCHMARK(BM_Normalize<true>)->Name("normalize/parallel")->Args({80, 64})->Args({1024, 512});

BENCHMARK_MAIN();
