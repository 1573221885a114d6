#include <benchmark/benchmark.h>

#include "gwreg/autodiff.hpp"
#include "gwreg/rng.hpp"

using namespace gwreg;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  rng.fill_uniform(t, -1.0, 1.0);
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const int n = int(state.range(0)), c = int(state.range(1));
  ad::Var x = ad::constant(random_tensor({n, c, 64, 64}, 1));
  ad::Var w = ad::constant(random_tensor({c, c, 3, 3}, 2));
  ad::Var b = ad::constant(random_tensor({c}, 3));
  for (auto _ : state) {
    ad::Var y = ad::conv2d(x, w, b, 1, 1);
    benchmark::DoNotOptimize(y.val().data());
  }
  state.SetItemsProcessed(state.iterations() * int64_t(n) * c * c * 9 * 64 * 64 * 2);
}
BENCHMARK(BM_Conv2dForward)->Args({10, 8})->Args({10, 16})->Args({20, 16});

void BM_Conv2dTrainStep(benchmark::State& state) {
  const int n = int(state.range(0)), c = int(state.range(1));
  Tensor xv = random_tensor({n, c, 64, 64}, 1);
  Tensor wv = random_tensor({c, c, 3, 3}, 2);
  Tensor bv = random_tensor({c}, 3);
  for (auto _ : state) {
    ad::Var x = ad::param(xv), w = ad::param(wv), b = ad::param(bv);
    ad::Var loss = ad::sum(ad::square(ad::conv2d(x, w, b, 1, 1)));
    ad::backward(loss);
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_Conv2dTrainStep)->Args({10, 8})->Args({10, 16});

void BM_BatchNorm(benchmark::State& state) {
  const int n = int(state.range(0)), c = int(state.range(1));
  ad::Var x = ad::constant(random_tensor({n, c, 64, 64}, 1));
  ad::Var g = ad::constant(Tensor::full({c}, 1.0));
  ad::Var b = ad::constant(Tensor::zeros({c}));
  Tensor rm = Tensor::zeros({c}), rv = Tensor::full({c}, 1.0);
  for (auto _ : state) {
    ad::Var y = ad::batch_norm(x, g, b, rm, rv, true, 0.01);
    benchmark::DoNotOptimize(y.val().data());
  }
}
BENCHMARK(BM_BatchNorm)->Args({10, 16});

}  // namespace
