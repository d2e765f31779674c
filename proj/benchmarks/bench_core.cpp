#include <benchmark/benchmark.h>

#include "fuse/data.hpp"
#include "fuse/flows.hpp"
#include "fuse/metrics.hpp"
#include "fuse/schedule.hpp"
#include "fuse/targets.hpp"

using namespace fuse;

namespace {

Ensemble gaussian_cloud(std::size_t n, std::size_t d, std::uint64_t seed = 1) {
  RngStream rng(seed);
  return init_ensemble(n, d, Vector::Zero(static_cast<Eigen::Index>(d)), Vector::Ones(static_cast<Eigen::Index>(d)), rng);
}

void BM_GaussianGradient(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto t = GaussianTarget::diagonal(Vector::Zero(10), Vector::LinSpaced(10, 1.0, 10.0));
  const auto x = gaussian_cloud(n, 10);
  for (auto _ : state) benchmark::DoNotOptimize(t->gradient(x, nullptr));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GaussianGradient)->Arg(100)->Arg(10000);

void BM_LogRegMinibatchGradient(benchmark::State& state) {
  RngStream rng(3);
  const auto prob = gen_logreg({500, 8, 3.0, 0.2, 0.6, 0.01}, rng);
  const auto t = LogRegTarget::make(prob.data.features, prob.data.labels, GaussianPrior{5.0},
                                    static_cast<std::size_t>(state.range(0)));
  const auto x = gaussian_cloud(100, t->dim());
  RngStream batch(4);
  for (auto _ : state) benchmark::DoNotOptimize(t->gradient(x, &batch));
}
BENCHMARK(BM_LogRegMinibatchGradient)->Arg(100)->Arg(500);

void BM_MeanFieldGradient(benchmark::State& state) {
  RngStream rng(5);
  const auto data = gen_nn_data(300, rng);
  const MeanFieldNNEnergy e(data.z, data.y, 300.0);
  const auto x = gaussian_cloud(static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(e.gradient(x, nullptr));
}
BENCHMARK(BM_MeanFieldGradient)->Arg(100)->Arg(1000);

void BM_KernelizedDrift(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto t = GaussianTarget::diagonal(Vector::Zero(10), Vector::Ones(10));
  const auto x = gaussian_cloud(n, 10);
  const auto g = t->gradient(x, nullptr);
  const KernelSpec k = RbfKernel{median_bandwidth(x)};
  for (auto _ : state) benchmark::DoNotOptimize(kernelized_drift(x, g, k));
}
BENCHMARK(BM_KernelizedDrift)->Arg(50)->Arg(200);

void BM_KsdDrift(benchmark::State& state) {
  const auto t = GaussianTarget::diagonal(Vector::Zero(5), Vector::Ones(5));
  const auto x = gaussian_cloud(static_cast<std::size_t>(state.range(0)), 5);
  const SteinKernel sk{ImqKernel{1.0, -0.5}, t->score_field()};
  for (auto _ : state) benchmark::DoNotOptimize(ksd_flow_drift(x, sk));
}
BENCHMARK(BM_KsdDrift)->Arg(50)->Arg(200);

void BM_FuseFlowStep(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto ref = gaussian_cloud(n, 10, 1);
  const auto half = gaussian_cloud(n, 10, 2);
  auto init = fuse_flow_step(make_flow_state(1e-3), ref, 1.0).state;
  for (auto _ : state) benchmark::DoNotOptimize(fuse_flow_step(init, half, 2.0));
}
BENCHMARK(BM_FuseFlowStep)->Arg(100)->Arg(10000);

void BM_Hungarian(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  RngStream rng(9);
  Matrix cost(n, n);
  for (auto& v : cost.reshaped()) v = rng.uniform();
  for (auto _ : state) benchmark::DoNotOptimize(hungarian(cost));
}
BENCHMARK(BM_Hungarian)->Arg(8)->Arg(16)->Arg(128);

}  // namespace
BENCHMARK_MAIN();
