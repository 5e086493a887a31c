#include <benchmark/benchmark.h>

#include <vector>

#include "retiscreen/ensembling.hpp"
#include "retiscreen/eval_stats.hpp"
#include "retiscreen/heatmap.hpp"
#include "retiscreen/micro_cnn.hpp"
#include "retiscreen/ops.hpp"
#include "retiscreen/preprocessing.hpp"
#include "retiscreen/rng.hpp"
#include "retiscreen/synthetic_fundus.hpp"

using namespace retiscreen;
using namespace retiscreen::dl;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = false) {
  Rng rng(seed);
  std::vector<float> v(element_count(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return Tensor(shape, std::move(v), requires_grad);
}

MicroCnnModel model_for(int input_size, std::uint64_t seed) {
  MicroCnnConfig c;
  c.input_size = input_size;
  c.seed = seed;
  return MicroCnnModel(c);
}

RawImage fundus(std::uint64_t seed) {
  return generate_image(Grade::severe, true, Side::left, SynthParams{}, seed).raw;
}

}  // namespace

// Args: channels, spatial size.
static void BM_ConvForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  const auto input = random_tensor({1, c, s, s}, 1);
  const auto kernel = random_tensor({2 * c, c, 3, 3}, 2);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(input, kernel, 1, 1));
}
BENCHMARK(BM_ConvForward)->Args({3, 32})->Args({8, 32})->Args({3, 64})->Args({16, 16});

static void BM_ConvBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  auto input = random_tensor({1, c, s, s}, 1, true);
  auto kernel = random_tensor({2 * c, c, 3, 3}, 2, true);
  for (auto _ : state) {
    input.zero_grad();
    kernel.zero_grad();
    sum(conv2d(input, kernel, 1, 1)).backward();
  }
}
BENCHMARK(BM_ConvBackward)->Args({3, 32})->Args({8, 32})->Args({3, 64});

static void BM_ModelForward(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const auto model = model_for(size, 3);
  const auto image = random_tensor({3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, image));
}
BENCHMARK(BM_ModelForward)->Arg(32)->Arg(48)->Arg(64);

static void BM_Normalize(benchmark::State& state) {
  const auto raw = fundus(5);
  for (auto _ : state) benchmark::DoNotOptimize(normalize(raw, static_cast<int>(state.range(0))));
}
BENCHMARK(BM_Normalize)->Arg(32)->Arg(64);

static void BM_GradientMap(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const auto model = model_for(size, 6);
  const auto image = normalize(fundus(7), size);
  for (auto _ : state) benchmark::DoNotOptimize(input_gradient_map(model, image));
}
BENCHMARK(BM_GradientMap)->Arg(32)->Arg(64);

// One image through preprocessing, a five-member ensemble and its heatmap.
static void BM_ImageInference(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  Ensemble ensemble;
  for (std::uint64_t k = 0; k < 5; ++k) ensemble.members.push_back(model_for(size, 10 + k));
  const auto raw = fundus(8);
  for (auto _ : state) {
    MultiScaleImage image(raw, "bench");
    benchmark::DoNotOptimize(ensemble_predict(ensemble, image));
    benchmark::DoNotOptimize(ensemble_gradient_map(ensemble, image));
  }
}
BENCHMARK(BM_ImageInference)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

static void BM_RocCurve(benchmark::State& state) {
  Rng rng(9);
  ScoredSet set;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    const int label = rng.bernoulli(0.3) ? 1 : 0;
    set.labels.push_back(label);
    set.scores.push_back(rng.normal(label, 1.0));
  }
  for (auto _ : state) benchmark::DoNotOptimize(roc_curve(set));
}
BENCHMARK(BM_RocCurve)->Arg(600)->Arg(6000);

BENCHMARK_MAIN();
