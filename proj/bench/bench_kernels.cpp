#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "partreid/kernels/kernels.hpp"

using namespace partreid::kernels;

namespace {

std::vector<float> random_vector(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (float& x : v) x = d(rng);
  return v;
}

template <bool kParallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vector(n * n, 1), b = random_vector(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (kParallel) {
      omp::gemm<float>(Trans::kNo, Trans::kNo, n, n, n, a, b, std::span<float>(c), false);
    } else {
      ref::gemm<float>(Trans::kNo, Trans::kNo, n, n, n, a, b, std::span<float>(c), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

// Stage-2-like convolution: 16 -> 32 channels on a 24x8 map.
template <bool kParallel>
void BM_Conv(benchmark::State& state) {
  ConvGeometry g{static_cast<std::size_t>(state.range(0)), 16, 24, 8, 32, 3, 1, 1};
  const auto in = random_vector(g.batch * g.in_channels * g.height * g.width, 3);
  const auto w = random_vector(g.out_channels * g.patch(), 4);
  std::vector<float> out(g.batch * g.out_channels * g.out_height() * g.out_width());
  for (auto _ : state) {
    if constexpr (kParallel) {
      omp::conv2d_forward<float>(g, in, w, std::span<float>(out));
    } else {
      ref::conv2d_forward<float>(g, in, w, std::span<float>(out));
    }
    benchmark::DoNotOptimize(out.data());
  }
}

// Attention rows of a 48x16 map.
template <bool kParallel>
void BM_Softmax(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  const auto logits = random_vector(n * n, 5);
  std::vector<float> out(n * n);
  for (auto _ : state) {
    if constexpr (kParallel) {
      omp::softmax_rows<float>(n, n, logits, {}, {}, std::span<float>(out));
    } else {
      ref::softmax_rows<float>(n, n, logits, {}, {}, std::span<float>(out));
    }
    benchmark::DoNotOptimize(out.data());
  }
}

// Query x gallery distances for 256-d embeddings.
template <bool kParallel>
void BM_Pairwise(benchmark::State& state) {
  const std::size_t m = static_cast<std::size_t>(state.range(0)), n = 4 * m, d = 256;
  const auto a = random_vector(m * d, 6), b = random_vector(n * d, 7);
  std::vector<float> out(m * n);
  for (auto _ : state) {
    if constexpr (kParallel) {
      omp::pairwise_sqdist<float>(m, n, d, a, b, std::span<float>(out));
    } else {
      ref::pairwise_sqdist<float>(m, n, d, a, b, std::span<float>(out));
    }
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Arg(64)->Arg(256);
BENCHMARK(BM_Conv<false>)->Arg(1)->Arg(16);
BENCHMARK(BM_Conv<true>)->Arg(1)->Arg(16);
BENCHMARK(BM_Softmax<false>)->Arg(192)->Arg(768);
BENCHMARK(BM_Softmax<true>)->Arg(192)->Arg(768);
BENCHMARK(BM_Pairwise<false>)->Arg(64)->Arg(256);
BENCHMARK(BM_Pairwise<true>)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
