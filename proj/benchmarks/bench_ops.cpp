#include <random>

#include <benchmark/benchmark.h>

#include "msnet/data.hpp"
#include "msnet/loss.hpp"
#include "msnet/normalization.hpp"
#include "msnet/ops.hpp"
#include "msnet/train.hpp"

using namespace msnet;

namespace {

Tensor random(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  for (double& v : t.values()) v = n(rng);
  return t;
}

// args: channels, spatial size; batch 5, 3x3 kernel
void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), hw = static_cast<std::size_t>(state.range(1));
  Tensor x = random({5, c, hw, hw}, 1), k = random({c, c, 3, 3}, 2), b = random({c}, 3);
  for (auto _ : state) {
    Graph g(GradMode::kDisabled);
    Var y = conv2d(g.constant(x), g.constant(k), g.constant(b), 1, 1);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * 5 * c * c * 9 * hw * hw);
}
BENCHMARK(BM_Conv2dForward)->Args({4, 64})->Args({16, 32})->Args({32, 8})->Unit(benchmark::kMicrosecond);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), hw = static_cast<std::size_t>(state.range(1));
  Tensor x = random({5, c, hw, hw}, 1), k = random({c, c, 3, 3}, 2), b = random({c}, 3);
  for (auto _ : state) {
    Graph g;
    Var y = sum(conv2d(g.variable(x), g.variable(k), g.variable(b), 1, 1));
    g.backward(y);
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(state.iterations() * 5 * c * c * 9 * hw * hw);
}
BENCHMARK(BM_Conv2dBackward)->Args({4, 64})->Args({16, 32})->Args({32, 8})->Unit(benchmark::kMicrosecond);

void BM_BatchNormForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), hw = static_cast<std::size_t>(state.range(1));
  Tensor x = random({5, c, hw, hw}, 4);
  BnState bn = BnState::create(c, "bench");
  for (auto _ : state) {
    Graph g(GradMode::kDisabled);
    Var y = bn_forward(g, g.constant(x), bn, NormMode::kBatchStats);
    benchmark::DoNotOptimize(y.value().data());
  }
}
BENCHMARK(BM_BatchNormForward)->Args({4, 64})->Args({32, 8});

void BM_BatchNormBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), hw = static_cast<std::size_t>(state.range(1));
  Tensor x = random({5, c, hw, hw}, 4), w = random({5, c, hw, hw}, 5);
  BnState bn = BnState::create(c, "bench");
  for (auto _ : state) {
    Graph g;
    Var y = bn_forward(g, g.variable(x), bn, NormMode::kBatchStats);
    g.backward(sum(mul(y, g.constant(w))));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_BatchNormBackward)->Args({4, 64})->Args({32, 8});

void BM_DsbnForward(benchmark::State& state) {
  Tensor x = random({5, 16, 32, 32}, 6);
  DsbnState dsbn = DsbnState::create(16, static_cast<int>(state.range(0)), "bench");
  for (auto _ : state) {
    Graph g(GradMode::kDisabled);
    Var y = dsbn_forward(g, g.constant(x), SiteId{1}, dsbn, NormMode::kBatchStats);
    benchmark::DoNotOptimize(y.value().data());
  }
}
BENCHMARK(BM_DsbnForward)->Arg(1)->Arg(3)->Arg(8);

// One full optimization step per strategy on the default 64x64 three-site setting.
void BM_TrainIteration(benchmark::State& state) {
  const auto strategy = static_cast<Strategy>(state.range(0));
  CorpusConfig cc;
  cc.train_per_site = 10;
  cc.test_per_site = 1;
  Corpus corpus = generate_corpus(cc);
  auto sets = train_splits(corpus);
  ArchConfig arch;
  arch.base_channels = static_cast<int>(state.range(1));
  arch.num_sites = corpus.num_sites();
  TrainConfig tc;
  TrainRun run = make_run(strategy, arch, tc);
  for (auto _ : state) train_iteration(run, sets, tc);
  state.SetLabel(to_string(strategy));
}
BENCHMARK(BM_TrainIteration)
    ->Args({static_cast<int>(Strategy::kJoint), 4})
    ->Args({static_cast<int>(Strategy::kDsbn), 4})
    ->Args({static_cast<int>(Strategy::kMsnet), 4})
    ->Unit(benchmark::kMillisecond)
    ->Iterations(3);

}  // namespace

BENCHMARK_MAIN();
