#include <benchmark/benchmark.h>

#include "conec/adapters.hpp"
#include "conec/backbone.hpp"
#include "conec/domainid.hpp"
#include "conec/mixtures.hpp"
#include "conec/numkit.hpp"

using namespace conec;

static void BM_Svd(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Matrix m = random_normal(n, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(svd(m));
}
BENCHMARK(BM_Svd)->Arg(8)->Arg(32)->Arg(64);

static void BM_Cholesky(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Matrix a = random_normal(n, n, rng);
  Matrix k = matmul_nt(a, a);
  for (std::size_t i = 0; i < n; ++i) k(i, i) += 1.0;
  for (auto _ : state) benchmark::DoNotOptimize(cholesky(k, "bench"));
}
BENCHMARK(BM_Cholesky)->Arg(32);

static void BM_ForwardPlain(benchmark::State& state) {
  const Backbone bb{BackboneConfig{}};
  Rng rng(3);
  const Matrix x = random_normal(1, bb.config().input_dim, rng);
  for (auto _ : state) benchmark::DoNotOptimize(bb.forward_plain(x.row(0)));
}
BENCHMARK(BM_ForwardPlain);

static void BM_ForwardBackwardAdapters(benchmark::State& state) {
  const Backbone bb{BackboneConfig{}};
  Rng rng(4);
  AdapterBankConfig ac;
  ac.num_layers = bb.num_layers();
  ac.shared_blocks = 3;
  ac.dim = bb.dim();
  AdapterBank bank(ac, rng);
  bank.add_domain(0, rng);
  const AdapterStack stack = bank.stack_for(0);
  const Matrix x = random_normal(1, bb.config().input_dim, rng);
  std::vector<BlockAdapterGrads> grads;
  std::vector<BlockAdapterGrads*> ptrs;
  grads.reserve(stack.size());
  for (const auto* block : stack) grads.push_back(BlockAdapterGrads::zeros_like(*block));
  for (auto& g : grads) ptrs.push_back(&g);
  for (auto _ : state) {
    ForwardTape tape = bb.forward(x.row(0), stack);
    Matrix d_top(bb.config().num_tokens, bb.dim(), 1.0);
    bb.backward(tape, stack, bb.num_layers(), std::move(d_top), ptrs);
  }
}
BENCHMARK(BM_ForwardBackwardAdapters);

static void BM_FitEm(benchmark::State& state) {
  Rng rng(5);
  const Matrix x = random_normal(800, 32, rng);
  for (auto _ : state) {
    Rng r(6);
    benchmark::DoNotOptimize(fit_em(x, 2, r, 20));
  }
}
BENCHMARK(BM_FitEm)->Unit(benchmark::kMillisecond);

static void BM_GmmSample(benchmark::State& state) {
  Rng rng(7);
  Rng fit_rng(8);
  const GmmModel g = fit_em(random_normal(400, 32, rng), 2, fit_rng).model;
  for (auto _ : state) benchmark::DoNotOptimize(sample(g, 512, rng));
}
BENCHMARK(BM_GmmSample);
BENCHMARK_MAIN();
