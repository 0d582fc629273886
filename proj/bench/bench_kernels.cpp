// Serial reference kernels against the OpenMP versions on detector-sized inputs.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "mdbank/kernels.hpp"

namespace k = mdbank::kernels;

namespace {

std::vector<double> noise(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Second backbone stage on a 96px image: 16×48×48 -> 32×24×24.
const k::ConvGeometry kConv{16, 48, 48, 32, 3, 2, 1};

template <bool Parallel>
void conv_forward(benchmark::State& state) {
  const auto x = noise(static_cast<std::size_t>(kConv.in_channels) * kConv.in_height * kConv.in_width, 1);
  const auto w = noise(static_cast<std::size_t>(kConv.out_channels) * kConv.patch(), 2);
  const auto b = noise(kConv.out_channels, 3);
  std::vector<double> y(static_cast<std::size_t>(kConv.out_channels) * kConv.out_height() * kConv.out_width());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::conv2d_forward(kConv, x, w, b, y);
    } else {
      k::reference::conv2d_forward(kConv, x, w, b, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void conv_backward(benchmark::State& state) {
  const auto x = noise(static_cast<std::size_t>(kConv.in_channels) * kConv.in_height * kConv.in_width, 1);
  const auto w = noise(static_cast<std::size_t>(kConv.out_channels) * kConv.patch(), 2);
  const auto gy = noise(static_cast<std::size_t>(kConv.out_channels) * kConv.out_height() * kConv.out_width(), 3);
  std::vector<double> gw(w.size()), gb(kConv.out_channels), gx(x.size());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::conv2d_backward(kConv, x, w, gy, gw, gb, gx);
    } else {
      k::reference::conv2d_backward(kConv, x, w, gy, gw, gb, gx);
    }
    benchmark::DoNotOptimize(gx.data());
  }
}

// First head layer: 128 regions, 1024 -> 128.
template <bool Parallel>
void linear(benchmark::State& state) {
  constexpr int rows = 128, in = 1024, out = 128;
  const auto x = noise(static_cast<std::size_t>(rows) * in, 1);
  const auto w = noise(static_cast<std::size_t>(out) * in, 2);
  const auto b = noise(out, 3);
  std::vector<double> y(static_cast<std::size_t>(rows) * out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::linear_forward(rows, in, out, x, w, b, y);
    } else {
      k::reference::linear_forward(rows, in, out, x, w, b, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void roi_align(benchmark::State& state) {
  constexpr int channels = 64, side = 12, n = 128;
  const k::RoiAlignConfig cfg;
  const auto f = noise(static_cast<std::size_t>(channels) * side * side, 1);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> pos(0, 70), size(8, 26);
  std::vector<mdbank::Box> boxes(n);
  for (auto& bx : boxes) {
    const double x = pos(rng), y = pos(rng);
    bx = {x, y, x + size(rng), y + size(rng)};
  }
  std::vector<double> out(static_cast<std::size_t>(n) * channels * cfg.grid * cfg.grid);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::roi_align_forward(cfg, channels, side, side, f, boxes, out);
    } else {
      k::reference::roi_align_forward(cfg, channels, side, side, f, boxes, out);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(conv_forward<false>)->Name("conv_forward/serial");
BENCHMARK(conv_forward<true>)->Name("conv_forward/openmp");
BENCHMARK(conv_backward<false>)->Name("conv_backward/serial");
BENCHMARK(conv_backward<true>)->Name("conv_backward/openmp");
BENCHMARK(linear<false>)->Name("linear_forward/serial");
BENCHMARK(linear<true>)->Name("linear_forward/openmp");
BENCHMARK(roi_align<false>)->Name("roi_align_forward/serial");
BENCHMARK(roi_align<true>)->Name("roi_align_forward/openmp");

BENCHMARK_MAIN();
