#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

#include "rsa/diffusion.hpp"
#include "rsa/edges.hpp"
#include "rsa/metrics.hpp"
#include "rsa/selector.hpp"

using namespace rsa;

namespace {

Image2D disk_image(std::size_t n) {
  Image2D im;
  im.id = "bench";
  im.pixels = RealGrid(n, n, 0.1);
  const double c = n / 2.0, r = n / 4.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (std::hypot(i + 0.5 - c, j + 0.5 - c) < r) im.pixels(i, j) = 0.8;
  return im;
}

BinaryMask random_blob(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.3, 0.7), rad(0.1, 0.25);
  const double cr = u(rng) * n, cc = u(rng) * n, r = rad(rng) * n;
  BinaryMask m{"m", BitGrid(n, n, 0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m.pixels(i, j) = std::hypot(i + 0.5 - cr, j + 0.5 - cc) < r;
  return m;
}

void BM_Canny(benchmark::State& state) {
  const auto im = disk_image(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(edges::canny(im, 50.0));
  state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}
BENCHMARK(BM_Canny)->Arg(32)->Arg(128)->Arg(320);

void BM_Consistency(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  const std::vector<BinaryMask> masks{random_blob(n, rng), random_blob(n, rng), random_blob(n, rng)};
  for (auto _ : state) benchmark::DoNotOptimize(select::consistency(masks));
}
BENCHMARK(BM_Consistency)->Arg(32)->Arg(320);

void BM_Assd(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(2);
  const auto a = random_blob(n, rng), b = random_blob(n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::assd(a, b));
}
BENCHMARK(BM_Assd)->Arg(32)->Arg(128)->Arg(320);

// One batched DDIM trajectory of a small translator, per denoising step.
void BM_DdimStep(benchmark::State& state) {
  torch::manual_seed(0);
  diffusion::TranslatorConfig cfg;
  cfg.net.base_width = 16;
  cfg.net.channel_mult = {1, 2, 2};
  cfg.image_size = 32;
  diffusion::TranslatorModel model(cfg);
  model.attach_control();
  model.eval();
  const auto edge = edges::canny(disk_image(32), 50.0);
  const std::vector<diffusion::SampleRequest> requests(static_cast<std::size_t>(state.range(0)), {edge, 1});
  constexpr int kSteps = 5;
  for (auto _ : state) benchmark::DoNotOptimize(diffusion::ddim_sample_batch(model, requests, kSteps));
  state.SetItemsProcessed(state.iterations() * kSteps);
}
BENCHMARK(BM_DdimStep)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
