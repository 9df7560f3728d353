#include <benchmark/benchmark.h>

#include "hatdiag/diagnostics.hpp"
#include "hatdiag/hat.hpp"

using namespace hatdiag;

namespace {

Batch make_batch(std::size_t n) {
  RngStream rng(1, "bench/batch");
  Batch b{Tensor(Shape{n, 2}), std::vector<int>(n)};
  for (auto& v : b.x.data()) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) b.labels[i] = static_cast<int>(i % 2);
  return b;
}

std::vector<PerturbationSpec> pipeline(int which) {
  switch (which) {
    case 0: return {};
    case 1: return {Additive{1e-6}};
    case 2: return {Multiplicative{}, StuckAt{}};
    case 3: return {IrDropCoupled{0.5}};
    default: return {AdcQuant{}};
  }
}

void BM_Forward(benchmark::State& state) {
  HatModel m({2, static_cast<std::size_t>(state.range(0)), 2}, Activation::kRelu, CrossbarConfig{}, 1);
  m.set_perturbations(pipeline(static_cast<int>(state.range(1))));
  const Batch b = make_batch(128);
  std::size_t i = 0;
  for (auto _ : state) {
    NoiseStreams rng = NoiseStreams::from(RngStream(2, "bench").child("f", i++));
    benchmark::DoNotOptimize(model_forward(m, b.x, rng, {}).value().size());
  }
}
BENCHMARK(BM_Forward)->ArgsProduct({{32, 128}, {0, 1, 2, 3, 4}});

void BM_TrainStep(benchmark::State& state) {
  HatModel m({2, 32, 2}, Activation::kRelu, CrossbarConfig{}, 1);
  m.set_perturbations(pipeline(static_cast<int>(state.range(0))));
  const Batch b = make_batch(128);
  TrainConfig cfg;
  OptimizerState opt{cfg.learning_rate, cfg.momentum, cfg.weight_decay, {}};
  TimeState time;
  for (auto _ : state) {
    benchmark::DoNotOptimize(hat_train_step(m, b, cfg, opt, RngStream(3, "bench").child("s", time.step), time));
  }
}
BENCHMARK(BM_TrainStep)->DenseRange(0, 4);

void BM_CoupledSolve(benchmark::State& state) {
  const std::size_t in = static_cast<std::size_t>(state.range(0));
  RngStream rng(4, "bench/coupled");
  Tensor x(Shape{64, in}), g(Shape{32, in});
  for (auto& v : x.data()) v = rng.uniform(-1, 1);
  for (auto& v : g.data()) v = rng.uniform(2e-6, 2e-4);
  IrDropCoupled spec;
  spec.s = 0.5;
  const Tensor jitter(Shape{in}, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(solve_coupled_voltages(x, g, spec, 128, jitter).iterations);
}
BENCHMARK(BM_CoupledSolve)->Arg(8)->Arg(16)->Arg(32);

void BM_Diagnose(benchmark::State& state) {
  HatModel m({2, 32, 2}, Activation::kRelu, CrossbarConfig{}, 1);
  const Batch b = make_batch(128);
  const std::vector<PerturbationSpec> specs = pipeline(static_cast<int>(state.range(0)));
  RegimeThresholds th;
  th.t_var = 1.0;
  const DiagnoseSettings settings{32, 32};
  for (auto _ : state) benchmark::DoNotOptimize(diagnose_spec(m, b, specs, RngStream(5, "bench"), th, settings));
}
BENCHMARK(BM_Diagnose)->DenseRange(1, 4)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
