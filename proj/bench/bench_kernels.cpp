// Serial reference vs OpenMP kernels on detector-sized shapes.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "fdet/kernels.hpp"

namespace ks = fdet::kernels::serial;
namespace kp = fdet::kernels::parallel;
using fdet::kernels::ConvShape;

namespace {

std::vector<double> rand_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// First backbone conv on a 128x128 image and the RPN conv on its 8x8 map.
ConvShape conv_shape(int which) {
  return which == 0 ? ConvShape{1, 1, 128, 128, 16, 3, 1, 1} : ConvShape{1, 32, 8, 8, 32, 3, 1, 1};
}

template <bool Parallel>
void BM_conv_forward(benchmark::State& state) {
  const ConvShape s = conv_shape(static_cast<int>(state.range(0)));
  const auto x = rand_vec(static_cast<std::size_t>(s.in_channels) * s.height * s.width, 1);
  const auto w = rand_vec(static_cast<std::size_t>(s.out_channels) * s.in_channels * 9, 2);
  const auto b = rand_vec(static_cast<std::size_t>(s.out_channels), 3);
  std::vector<double> y(static_cast<std::size_t>(s.out_channels) * s.out_height() * s.out_width());
  for (auto _ : state) {
    if constexpr (Parallel)
      kp::conv2d_forward(s, x, w, b, y);
    else
      ks::conv2d_forward(s, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_conv_backward(benchmark::State& state) {
  const ConvShape s = conv_shape(static_cast<int>(state.range(0)));
  const auto x = rand_vec(static_cast<std::size_t>(s.in_channels) * s.height * s.width, 1);
  const auto w = rand_vec(static_cast<std::size_t>(s.out_channels) * s.in_channels * 9, 2);
  const auto dy = rand_vec(static_cast<std::size_t>(s.out_channels) * s.out_height() * s.out_width(), 3);
  std::vector<double> dx(x.size()), dw(w.size()), db(static_cast<std::size_t>(s.out_channels));
  for (auto _ : state) {
    if constexpr (Parallel) {
      kp::conv2d_backward_input(s, dy, w, dx);
      kp::conv2d_backward_weights(s, x, dy, dw, db);
    } else {
      ks::conv2d_backward_input(s, dy, w, dx);
      ks::conv2d_backward_weights(s, x, dy, dw, db);
    }
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Parallel>
void BM_linear(benchmark::State& state) {
  const int rows = 64, in = 32 * 49, out = 128;
  const auto x = rand_vec(static_cast<std::size_t>(rows) * in, 1);
  const auto w = rand_vec(static_cast<std::size_t>(out) * in, 2);
  const auto b = rand_vec(out, 3);
  std::vector<double> y(static_cast<std::size_t>(rows) * out);
  for (auto _ : state) {
    if constexpr (Parallel)
      kp::linear_forward(rows, in, out, x, w, b, y);
    else
      ks::linear_forward(rows, in, out, x, w, b, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_resize(benchmark::State& state) {
  const auto src = rand_vec(128 * 128, 1);
  std::vector<double> dst(160 * 160);
  for (auto _ : state) {
    if constexpr (Parallel)
      kp::resize_bilinear(1, 128, 128, 160, 160, src, dst);
    else
      ks::resize_bilinear(1, 128, 128, 160, 160, src, dst);
    benchmark::DoNotOptimize(dst.data());
  }
}

template <bool Parallel>
void BM_raster(benchmark::State& state) {
  const fdet::Region a = fdet::BBox(0, 0, 10, 10), b = fdet::EllipseRegion(6, 6, 6, 4, 0.5);
  const fdet::BBox frame(-1, -1, 13, 13);
  for (auto _ : state) {
    auto c = Parallel ? kp::raster_counts(a, b, frame, 1024) : ks::raster_counts(a, b, frame, 1024);
    benchmark::DoNotOptimize(c);
  }
}

}  // namespace

BENCHMARK(BM_conv_forward<false>)->Arg(0)->Arg(1);
BENCHMARK(BM_conv_forward<true>)->Arg(0)->Arg(1);
BENCHMARK(BM_conv_backward<false>)->Arg(0)->Arg(1);
BENCHMARK(BM_conv_backward<true>)->Arg(0)->Arg(1);
BENCHMARK(BM_linear<false>);
BENCHMARK(BM_linear<true>);
BENCHMARK(BM_resize<false>);
BENCHMARK(BM_resize<true>);
BENCHMARK(BM_raster<false>);
BENCHMARK(BM_raster<true>);

BENCHMARK_MAIN();
