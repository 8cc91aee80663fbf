// Microbenchmarks for the kernels that dominate training time.

#include <random>

#include <benchmark/benchmark.h>

#include "dar/model.hpp"
#include "dar/ops.hpp"

using namespace dar;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Tensor t(shape);
  for (auto& v : t.data()) v = normal(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

// First block of the small preset on a batch of 64 dominoes.
void BM_Conv2dForward(benchmark::State& state) {
  const auto c_in = static_cast<std::size_t>(state.range(0)), c_out = static_cast<std::size_t>(state.range(1));
  const auto h = static_cast<std::size_t>(state.range(2));
  const auto x = random_tensor({64, c_in, h, h / 2}, 3), k = random_tensor({c_out, c_in, 3, 3}, 4);
  const auto bias = random_tensor({c_out}, 5);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, bias, 1, 1).data().data());
}
BENCHMARK(BM_Conv2dForward)->Args({1, 16, 32})->Args({16, 32, 16})->Args({32, 32, 8});

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c_in = static_cast<std::size_t>(state.range(0)), c_out = static_cast<std::size_t>(state.range(1));
  const auto h = static_cast<std::size_t>(state.range(2));
  auto x = random_tensor({64, c_in, h, h / 2}, 3), k = random_tensor({c_out, c_in, 3, 3}, 4);
  auto bias = random_tensor({c_out}, 5);
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  bias.set_requires_grad(true);
  for (auto _ : state) {
    x.zero_grad();
    k.zero_grad();
    bias.zero_grad();
    sum(conv2d(x, k, bias, 1, 1)).backward();
    benchmark::DoNotOptimize(k.grad().data());
  }
}
BENCHMARK(BM_Conv2dBackward)->Args({1, 16, 32})->Args({16, 32, 16})->Args({32, 32, 8});

// Default attention head on the small preset's 8x4x32 activation map.
void BM_DarForward(benchmark::State& state) {
  Rng rng(6);
  DarConfig cfg;
  cfg.heads = static_cast<std::size_t>(state.range(0));
  const auto head = DarHead<float>::init(cfg, 32, 32, rng);
  const auto a = random_tensor({64, 32, 8, 4}, 7);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(head.forward(a).features.data().data());
}
BENCHMARK(BM_DarForward)->Arg(1)->Arg(2)->Arg(4);

void BM_SmallBackboneForward(benchmark::State& state) {
  Rng rng(8);
  const auto backbone = Backbone<float>::init(1, preset_blocks(BackbonePreset::small), rng);
  const auto x = random_tensor({64, 1, 32, 16}, 9);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(backbone.forward(x).data().data());
}
BENCHMARK(BM_SmallBackboneForward);

}  // namespace

BENCHMARK_MAIN();
