// Microbenchmarks for the hot paths: the raw convolution kernels and the
// streamed pass against the conventional one at a fixed input.
#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "streamconv/network.hpp"
#include "streamconv/ops.hpp"
#include "streamconv/probe.hpp"
#include "streamconv/rng.hpp"
#include "streamconv/streaming.hpp"

using namespace streamconv;

namespace {

Tensor random_tensor(Dtype dtype, const std::vector<int64_t>& shape, uint64_t seed) {
  Tensor t(dtype, shape);
  Rng rng(seed);
  rng.fill_uniform(t, -1.0, 1.0);
  return t;
}

NetworkSpec three_conv() {
  NetworkSpec spec;
  spec.dtype = Dtype::F32;
  spec.split_index = 3;
  auto conv = [](int64_t out) { return LayerDesc{LayerKind::Conv, out, 3, 1, true}; };
  spec.layers = {conv(3), conv(64), conv(3)};
  return spec;
}

void bm_conv_forward(benchmark::State& state) {
  int64_t e = state.range(0), cin = state.range(1), cout = state.range(2);
  Tensor x = random_tensor(Dtype::F32, {1, cin, e, e}, 1);
  ConvParams p;
  p.kernel = random_tensor(Dtype::F32, {cout, cin, 3, 3}, 2);
  p.stride = {1, 1};
  for (auto _ : state) {
    Tensor y = conv_forward(x, p);
    benchmark::DoNotOptimize(y);
  }
  state.SetItemsProcessed(state.iterations() * (e - 2) * (e - 2) * cin * cout * 9);
}
BENCHMARK(bm_conv_forward)->Args({128, 3, 64})->Args({256, 3, 64})->Args({256, 64, 3});

void bm_conv_backward_kernel(benchmark::State& state) {
  int64_t e = state.range(0);
  Tensor x = random_tensor(Dtype::F32, {1, 64, e, e}, 3);
  ConvParams p;
  p.kernel = random_tensor(Dtype::F32, {3, 64, 3, 3}, 4);
  p.stride = {1, 1};
  Tensor g = random_tensor(Dtype::F32, {1, 3, e - 2, e - 2}, 5);
  for (auto _ : state) {
    Tensor dk = conv_backward_kernel(x, g, p);
    benchmark::DoNotOptimize(dk);
  }
  state.SetItemsProcessed(state.iterations() * (e - 2) * (e - 2) * 64 * 3 * 9);
}
BENCHMARK(bm_conv_backward_kernel)->Arg(128)->Arg(256);

void bm_full_pass(benchmark::State& state) {
  int64_t n = state.range(0);
  NetworkSpec spec = three_conv();
  Network net = Network::build(spec, {1, 3, n, n}, 7);
  Tensor input = random_tensor(Dtype::F32, {1, 3, n, n}, 8);
  for (auto _ : state) {
    ActivationStore store;
    forward_full_store(net, Tensor(input), store);
    GradientSet g = backward_full(net, store, sum_loss_grad(store.acts.back()));
    benchmark::DoNotOptimize(g);
  }
}
BENCHMARK(bm_full_pass)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

void bm_streamed_pass(benchmark::State& state) {
  int64_t n = state.range(0), grid = state.range(1);
  NetworkSpec spec = three_conv();
  Network net = Network::build(spec, {1, 3, n, n}, 7);
  Tensor input = random_tensor(Dtype::F32, {1, 3, n, n}, 8);
  TilePlan plan = plan_grid(net, {n, n}, {grid, grid}, analytic_overlap(net));
  for (auto _ : state) {
    StreamState st;
    stream_forward(net, input, plan, st);
    GradientSet g = stream_backward(net, input, plan, st, sum_loss_grad(st.prediction()));
    benchmark::DoNotOptimize(g);
  }
}
BENCHMARK(bm_streamed_pass)
    ->Args({256, 2})
    ->Args({512, 2})
    ->Args({512, 4})
    ->Unit(benchmark::kMillisecond);

void bm_probe(benchmark::State& state) {
  NetworkSpec spec = three_conv();
  Network net = Network::build(spec, {1, 3, 64, 64}, 7);
  for (auto _ : state) {
    ProbeReport rep = probe(net, {15, 15});
    benchmark::DoNotOptimize(rep);
  }
}
BENCHMARK(bm_probe);

}  // namespace

BENCHMARK_MAIN();
