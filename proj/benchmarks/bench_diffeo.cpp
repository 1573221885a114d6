#include <benchmark/benchmark.h>

#include "gwreg/diffeo.hpp"
#include "gwreg/rng.hpp"

using namespace gwreg;

namespace {

diffeo::VelocityField random_velocity(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Tensor t({2, h, w});
  rng.fill_uniform(t, -2.0, 2.0);
  return diffeo::VelocityField(std::move(t));
}

void BM_IntegrateVelocity(benchmark::State& state) {
  const int n = int(state.range(0));
  auto v = random_velocity(n, n, 1);
  for (auto _ : state) {
    auto t = diffeo::integrate_velocity(v, 7);
    benchmark::DoNotOptimize(t.displacement.data());
  }
}
BENCHMARK(BM_IntegrateVelocity)->Arg(64)->Arg(128);

void BM_Warp(benchmark::State& state) {
  const int n = int(state.range(0));
  auto v = random_velocity(n, n, 2);
  auto t = diffeo::integrate_velocity(v, 7);
  Rng rng(3);
  Tensor img({n, n});
  rng.fill_uniform(img, 0.0, 1.0);
  for (auto _ : state) {
    Tensor out = diffeo::warp(img, t, Boundary::clamp);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_Warp)->Arg(64)->Arg(256);

void BM_JacobianDeterminant(benchmark::State& state) {
  const int n = int(state.range(0));
  auto v = random_velocity(n, n, 4);
  auto t = diffeo::integrate_velocity(v, 7);
  for (auto _ : state) {
    Tensor det = diffeo::jacobian_determinant(t);
    benchmark::DoNotOptimize(det.data());
  }
}
BENCHMARK(BM_JacobianDeterminant)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
