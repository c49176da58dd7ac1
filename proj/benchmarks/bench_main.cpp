#include <benchmark/benchmark.h>

#include "fedbap/aggregation.hpp"
#include "fedbap/autodiff.hpp"
#include "fedbap/defense.hpp"
#include "fedbap/mlp.hpp"

using namespace fedbap;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform01(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(kernels::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_ForwardBackward(benchmark::State& state) {
  Rng rng(2);
  const MlpModel m = MlpModel::he_init({144, 64, 32, 10}, rng);
  const Tensor x = random_tensor({32, 144}, rng);
  const std::vector<int> labels(32, 3);
  for (auto _ : state) {
    Tape tape;
    const MlpVars vars = bind_parameters(m, tape, true);
    const Var loss = cross_entropy_mean(forward(vars, tape.constant(x)).logits, labels);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad(vars.weights[0]));
  }
}
BENCHMARK(BM_ForwardBackward);

void BM_Krum(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  std::vector<ClientUpdate> u;
  for (std::size_t i = 0; i < n; ++i) u.push_back({static_cast<int>(i), ParamVector{random_tensor({12000}, rng).values()}});
  const UpdateSet set(std::move(u));
  for (auto _ : state) benchmark::DoNotOptimize(aggregate_krum(set, 2));
}
BENCHMARK(BM_Krum)->Arg(10)->Arg(20);

void BM_MaskGenEpoch(benchmark::State& state) {
  Rng rng(4);
  const Dataset d = synth_blobs(20, 10, {12, 12, 1}, 0.15, rng);
  const MlpModel m = MlpModel::he_init({144, 64, 32, 10}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(mask_gen_client(m, d, {1, 0.1, 0.9, 0.01, 32}, rng));
}
BENCHMARK(BM_MaskGenEpoch)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
