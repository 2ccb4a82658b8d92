#include <benchmark/benchmark.h>

#include "germ/env.hpp"
#include "germ/model.hpp"
#include "germ/qlearning.hpp"

namespace {

using namespace germ;

void BM_MatmulPlain(benchmark::State& state) {
  int64_t n = state.range(0);
  Rng rng(1);
  Tensor a({n, n}), b({n, n});
  for (double& v : a.data) v = rng.normal();
  for (double& v : b.data) v = rng.normal();
  for (auto _ : state) {
    Tape t;
    benchmark::DoNotOptimize(t.value(t.matmul(t.constant(a.shape, a.data),
                                              t.constant(b.shape, b.data))));
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_MatmulPlain)->Arg(32)->Arg(64)->Arg(128);

ModelConfig bench_config() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.d_model = 32;
  cfg.num_heads = 4;
  cfg.d_ff = 64;
  return cfg;
}

void BM_DecoderForward(benchmark::State& state) {
  ModelConfig cfg = bench_config();
  PolicyDecoder model(cfg, 7, true);
  ContextBatch ctx;
  std::vector<Observation> window(cfg.history_frames());
  ctx.add(window, {0, 0, 0, 0}, cfg);
  std::vector<int64_t> prior(cfg.action_dim - 1, 0);
  Rng rng(0);
  for (auto _ : state) {
    Tape t;
    benchmark::DoNotOptimize(
        t.value(model.build_rows(t, ctx, prior, cfg.action_dim, false, rng)));
  }
}
BENCHMARK(BM_DecoderForward);

void BM_GreedyDecode(benchmark::State& state) {
  ModelConfig cfg = bench_config();
  PolicyDecoder model(cfg, 7, true);
  std::vector<Observation> window(cfg.history_frames());
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.greedy_decode(window, {0, 0, 0, 0}));
  }
}
BENCHMARK(BM_GreedyDecode);

void BM_EnvEpisode(benchmark::State& state) {
  GridEnv env;
  uint64_t i = 0;
  for (auto _ : state) {
    TaskSpec spec = sample_task(static_cast<int>(i % kNumSkills), 5, i);
    ++i;
    TrajectoryRecord rec =
        run_episode(env, spec, [](GridEnv& g) { return g.expert_command(); });
    benchmark::DoNotOptimize(rec);
  }
}
BENCHMARK(BM_EnvEpisode);

}  // namespace

BENCHMARK_MAIN();
