#include <benchmark/benchmark.h>

#include "segcaps/capsule.hpp"
#include "segcaps/config.hpp"
#include "segcaps/ops.hpp"
#include "segcaps/rng.hpp"

namespace {

using namespace segcaps;

Tensor random_tensor(const Shape& shape, std::uint64_t seed) {
  CounterRng rng(seed, 0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(shape, std::move(v));
}

caps::CapsLayerSpec conv_caps(std::size_t k, std::size_t stride, std::size_t types, std::size_t atoms, std::size_t d) {
  caps::CapsLayerSpec s;
  s.kind = caps::CapsKind::conv;
  s.kernel_h = s.kernel_w = k;
  s.stride = stride;
  s.types = types;
  s.atoms = atoms;
  s.routing = d;
  return s;
}

// [C, H, W] input, 5x5 kernel, 16 -> 16 channels.
void BM_Conv2d(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor x = random_tensor({16, n, n}, 1), k = random_tensor({16, 16, 5, 5}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, k));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * 16 * 16 * 25));
}
BENCHMARK(BM_Conv2d)->Arg(32)->Arg(64);

// Prediction vectors for a 5x5 conv capsule layer, 4 x 16D -> 4 x 16D.
void BM_PredictConv(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto spec = conv_caps(5, 1, 4, 16, 3);
  const Tensor c = random_tensor({n, n, 4, 16}, 3), m = random_tensor(caps::transform_shape(4, 16, spec), 4);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(caps::predict_conv(c, m, spec));
}
BENCHMARK(BM_PredictConv)->Arg(16)->Arg(32);

void BM_Route(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const auto spec = conv_caps(5, 1, 4, 16, d);
  const Tensor u = caps::predict_conv(random_tensor({32, 32, 4, 16}, 5),
                                      random_tensor(caps::transform_shape(4, 16, spec), 6), spec);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(caps::route(u, d));
}
BENCHMARK(BM_Route)->DenseRange(1, 4);

void BM_DeskSegCapsForward(benchmark::State& state) {
  const auto spec = config::preset("segcaps_desk").model.build();
  const auto params = model::init_params(spec);
  const Tensor img = random_tensor({spec.height, spec.width}, 7);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model::forward(spec, params, img));
}
BENCHMARK(BM_DeskSegCapsForward)->Unit(benchmark::kMillisecond);

void BM_DeskSegCapsTrainStep(benchmark::State& state) {
  const auto spec = config::preset("segcaps_desk").model.build();
  auto params = model::init_params(spec);
  params.set_requires_grad();
  const Tensor img = random_tensor({spec.height, spec.width}, 8);
  for (auto _ : state) {
    params.zero_grad();
    backward(ops::sum(model::forward_segment(spec, params, img)));
  }
}
BENCHMARK(BM_DeskSegCapsTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
