#include <gtest/gtest.h>

#include "rsa/diffusion.hpp"
#include "rsa/edges.hpp"
#include "rsa/seed.hpp"
#include "rsa/synth.hpp"
#include "rsa/tensor_util.hpp"
#include "support.hpp"

using namespace rsa;
using namespace rsa::testing;
using diffusion::DiffusionSchedule;

namespace {

diffusion::TranslatorConfig tiny_config() {
  diffusion::TranslatorConfig cfg;
  cfg.net.base_width = 8;
  cfg.net.channel_mult = {1, 2};
  cfg.net.groups = 4;
  cfg.num_steps = 100;
  cfg.image_size = 16;
  return cfg;
}

std::vector<diffusion::TranslatorExample> tiny_data(int n) {
  std::vector<diffusion::TranslatorExample> out;
  for (int i = 0; i < n; ++i) {
    const Image2D im = square_image(16, 2 + i % 6, 6 + i % 4, 0.1, 0.9);
    out.push_back({im, edges::canny(im, 30)});
  }
  return out;
}

EdgeMap ring_edge() { return edges::canny(square_image(16, 4, 8), 30); }

}  // namespace

TEST(Schedule, LinearDefaultsAreValidAndDecreasing) {
  const auto s = DiffusionSchedule::linear();
  EXPECT_NO_THROW(s.validate());
  ASSERT_EQ(s.alpha_bars.size(), 1000u);
  for (std::size_t t = 1; t < s.alpha_bars.size(); ++t) EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
  EXPECT_ANY_THROW(DiffusionSchedule::linear(1000, 0.02, 1e-4).validate());
}

TEST(ForwardDiffuse, ZeroNoiseScalesExactly) {
  const auto s = DiffusionSchedule::linear();
  RealGrid x(8, 8);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.01 * double(i);
  const RealGrid zero(8, 8, 0.0);
  for (int t : {0, 10, 500, 999}) {
    const RealGrid out = diffusion::forward_diffuse(x, t, zero, s);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(out[i], std::sqrt(s.alpha_bars[t]) * x[i]);
  }
}

TEST(ForwardDiffuse, FirstStepIsNearlyClean) {
  const auto s = DiffusionSchedule::linear();
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  RealGrid x(8, 8, 0.5), noise(8, 8);
  for (auto& v : noise) v = n01(rng);
  const RealGrid out = diffusion::forward_diffuse(x, 0, noise, s);
  const double tol = std::sqrt(1 - s.alpha_bars[0]) * 5 + (1 - std::sqrt(s.alpha_bars[0]));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out[i], x[i], tol);
}

TEST(ForwardDiffuse, OutOfRangeTimestepThrows) {
  const auto s = DiffusionSchedule::linear();
  const RealGrid x(4, 4, 0.0);
  EXPECT_THROW(diffusion::forward_diffuse(x, -1, x, s), std::out_of_range);
  EXPECT_THROW(diffusion::forward_diffuse(x, 1000, x, s), std::out_of_range);
}

TEST(ForwardDiffuse, MatchesClosedFormStatistics) {
  const auto s = DiffusionSchedule::linear();
  const int draws = 10000, t = 300;
  RealGrid x(4, 4);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = -0.8 + 0.1 * double(i);
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n01;
  std::vector<double> sum(x.size(), 0.0), sumsq(x.size(), 0.0);
  RealGrid noise(4, 4);
  for (int d = 0; d < draws; ++d) {
    for (auto& v : noise) v = n01(rng);
    const RealGrid out = diffusion::forward_diffuse(x, t, noise, s);
    for (std::size_t i = 0; i < x.size(); ++i) {
      sum[i] += out[i];
      sumsq[i] += out[i] * out[i];
    }
  }
  const double var = 1 - s.alpha_bars[t];
  const double se = std::sqrt(var / draws);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double mean = sum[i] / draws;
    EXPECT_NEAR(mean, std::sqrt(s.alpha_bars[t]) * x[i], 3 * se) << "pixel " << i;
    const double v = sumsq[i] / draws - mean * mean;
    EXPECT_NEAR(v, var, 3 * var * std::sqrt(2.0 / (draws - 1))) << "pixel " << i;
  }
}

TEST(ForwardDiffuse, LastStepDecorrelatesSyntheticImages) {
  const auto s = DiffusionSchedule::linear();
  synth::SynthConfig cfg;
  cfg.image_size = 32;
  cfg.lesion_radius_range = {3, 6};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto x = synth::render_anatomy(cfg, seed, "x").source.pixels;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    RealGrid noise(32, 32);
    for (auto& v : noise) v = n01(rng);
    const RealGrid y = diffusion::forward_diffuse(x, 999, noise, s);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
    mx /= x.size();
    my /= y.size();
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      sxy += (x[i] - mx) * (y[i] - my);
      sxx += (x[i] - mx) * (x[i] - mx);
      syy += (y[i] - my) * (y[i] - my);
    }
    EXPECT_LT(std::abs(sxy / std::sqrt(sxx * syy)), 0.2) << "seed " << seed;
  }
}

TEST(Translator, ZeroGateIdentityAtAttachment) {
  torch::manual_seed(3);
  diffusion::TranslatorModel model(tiny_config());
  model.eval();
  const auto x = torch::randn({4, 1, 16, 16});
  const auto t = torch::tensor({0, 17, 50, 99}, torch::kInt64);
  const auto noise = torch::randn({4, 1, 16, 16});
  const auto edge = (torch::rand({4, 1, 16, 16}) > 0.7).to(torch::kFloat32);

  const auto before = model.predict_noise(x, t);
  const auto uncond_loss = diffusion::noise_loss(model, x, t, noise).item<double>();
  model.attach_control();
  for (const auto& p : model.control()->zero_projection_parameters()) EXPECT_EQ(p.abs().max().item<double>(), 0.0);
  const auto after = model.predict_noise(x, t, edge);
  EXPECT_LE((after - before).abs().max().item<double>(), 1e-6);
  EXPECT_NEAR(diffusion::noise_loss(model, x, t, noise, edge).item<double>(), uncond_loss, 1e-6);
}

TEST(Translator, LockedBaseIsExcludedFromUpdates) {
  diffusion::TranslatorModel model(tiny_config());
  model.attach_control();
  model.set_lock_base(true);
  for (const auto& p : model.base()->parameters()) EXPECT_FALSE(p.requires_grad());
  model.set_lock_base(false);
  for (const auto& p : model.base()->parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(Translator, PhaseTwoLeavesLockedBaseUntouched) {
  const auto data = tiny_data(12);
  diffusion::TrainTranslatorConfig cfg;
  cfg.phase1_epochs = 1;
  cfg.batch_size = 4;
  cfg.heldout = 3;
  cfg.seed = 5;
  cfg.phase2_epochs = 0;
  auto a = diffusion::train_translator(tiny_config(), data, cfg);
  cfg.phase2_epochs = 2;
  auto b = diffusion::train_translator(tiny_config(), data, cfg);
  EXPECT_TRUE(same_parameters(*a->base(), *b->base()));
  EXPECT_FALSE(same_parameters(*a->control(), *b->control()));
}

TEST(Translator, TrainingIsDeterministic) {
  set_deterministic(1);
  const auto data = tiny_data(12);
  diffusion::TrainTranslatorConfig cfg;
  cfg.phase1_epochs = 2;
  cfg.phase2_epochs = 1;
  cfg.batch_size = 4;
  cfg.heldout = 3;
  cfg.seed = 11;
  diffusion::TranslatorTrainingLog la, lb;
  auto a = diffusion::train_translator(tiny_config(), data, cfg, &la);
  auto b = diffusion::train_translator(tiny_config(), data, cfg, &lb);
  EXPECT_NEAR(la.heldout_cond_final, lb.heldout_cond_final, 1e-6);
  EXPECT_EQ(la.phase1_epoch_loss, lb.phase1_epoch_loss);
  EXPECT_TRUE(same_parameters(*a, *b));
}

TEST(Translator, EmptyDatasetRejected) {
  EXPECT_THROW(diffusion::train_translator(tiny_config(), {}, {}), std::invalid_argument);
}

// Directional derivative of the noise loss along a random direction in a
// parameter subset, against central differences in double precision.
TEST(Translator, LossGradientMatchesFiniteDifferences) {
  torch::manual_seed(8);
  diffusion::TranslatorModel model(tiny_config());
  model.to(torch::kFloat64);
  model.eval();
  const auto x = torch::rand({2, 1, 16, 16}, torch::kFloat64) * 2 - 1;
  const auto t = torch::tensor({5, 60}, torch::kInt64);
  const auto noise = torch::randn({2, 1, 16, 16}, torch::kFloat64);

  auto params = model.base()->parameters();
  std::vector<torch::Tensor> subset{params.front(), params[params.size() / 2], params.back()};
  // The final projection starts at zero in some designs; nudge it so the check is not trivial.
  {
    torch::NoGradGuard ng;
    for (auto& p : subset) p.add_(torch::randn_like(p) * 0.05);
  }
  std::vector<torch::Tensor> dirs;
  for (auto& p : subset) dirs.push_back(torch::randn_like(p));

  model.zero_grad();
  diffusion::noise_loss(model, x, t, noise).backward();
  double analytic = 0;
  for (std::size_t k = 0; k < subset.size(); ++k) analytic += (subset[k].grad() * dirs[k]).sum().item<double>();

  const double h = 1e-5;
  auto shifted = [&](double s) {
    torch::NoGradGuard ng;
    for (std::size_t k = 0; k < subset.size(); ++k) subset[k].add_(dirs[k] * s);
    const double v = diffusion::noise_loss(model, x, t, noise).item<double>();
    for (std::size_t k = 0; k < subset.size(); ++k) subset[k].sub_(dirs[k] * s);
    return v;
  };
  const double numeric = (shifted(h) - shifted(-h)) / (2 * h);
  EXPECT_NEAR(analytic, numeric, 1e-3 * std::abs(numeric));
}

TEST(Ddim, TimestepsAreEvenlyStrided) {
  EXPECT_EQ(diffusion::ddim_timesteps(1000, 50).back(), 980);
  EXPECT_EQ(diffusion::ddim_timesteps(1000, 50)[1], 20);
  EXPECT_EQ(diffusion::ddim_timesteps(3, 3), (std::vector<int>{0, 1, 2}));
  EXPECT_THROW(diffusion::ddim_timesteps(10, 11), std::invalid_argument);
}

// One-step schedule with a linear noise predictor eps(x) = c x: the update is
// x0 = (1 - sqrt(1 - abar) c) x_T / sqrt(abar) with no further noise.
TEST(Ddim, OneStepToyScheduleMatchesClosedForm) {
  const double abar = 0.64, c = 0.3;
  const auto xT = torch::tensor({0.5, -0.2, 0.1}, torch::kFloat64).view({1, 1, 1, 3});
  diffusion::NoiseFn eps = [&](const torch::Tensor& x, std::int64_t) { return c * x; };
  const auto out = diffusion::ddim_loop(eps, {abar}, xT, 1, false);
  const auto expected = (1 - std::sqrt(1 - abar) * c) * xT / std::sqrt(abar);
  EXPECT_LT((out - expected).abs().max().item<double>(), 1e-15);
}

// With steps equal to the schedule length and an exact noise oracle for a
// known x0, every update lands back on the noised x0, ending at x0.
TEST(Ddim, FullLengthWithExactNoiseRecoversSignal) {
  const std::vector<double> abars{0.9, 0.6, 0.3, 0.1};
  const auto x0 = torch::tensor({0.4, -0.7}, torch::kFloat64).view({1, 1, 1, 2});
  const auto e0 = torch::tensor({1.2, 0.3}, torch::kFloat64).view({1, 1, 1, 2});
  const auto xT = std::sqrt(abars.back()) * x0 + std::sqrt(1 - abars.back()) * e0;
  diffusion::NoiseFn eps = [&](const torch::Tensor& x, std::int64_t t) {
    return (x - std::sqrt(abars[t]) * x0) / std::sqrt(1 - abars[t]);
  };
  const auto out = diffusion::ddim_loop(eps, abars, xT, 4, false);
  EXPECT_LT((out - x0).abs().max().item<double>(), 1e-12);
}

TEST(Ddim, SamplingIsBitwiseDeterministic) {
  torch::manual_seed(4);
  diffusion::TranslatorModel model(tiny_config());
  model.attach_control();
  const auto edge = ring_edge();
  const Image2D a = diffusion::ddim_sample(model, edge, 10, 77);
  const Image2D b = diffusion::ddim_sample(model, edge, 10, 77);
  EXPECT_EQ(a.pixels, b.pixels);
  for (double v : a.pixels) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Ddim, EmptyEdgeStillSamples) {
  diffusion::TranslatorModel model(tiny_config());
  model.attach_control();
  const EdgeMap empty{BitGrid(16, 16, 0), 30};
  EXPECT_NO_THROW(diffusion::ddim_sample(model, empty, 5, 1));
  EXPECT_THROW(diffusion::ddim_sample(model, empty, 101, 1), std::invalid_argument);
}

TEST(Ddim, GridShapeSeedsAndReproducibility) {
  torch::manual_seed(6);
  diffusion::TranslatorModel model(tiny_config());
  model.attach_control();
  const std::vector<EdgeMap> edges{ring_edge(), edges::canny(square_image(16, 2, 10), 80)};
  const auto g1 = diffusion::generate_grid(model, edges, 3, 99, 5);
  const auto g2 = diffusion::generate_grid(model, edges, 3, 99, 5);
  ASSERT_EQ(g1.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    ASSERT_EQ(g1[i].size(), 3u);
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_EQ(g1[i][j].shape(), edges[i].shape());
      EXPECT_EQ(g1[i][j].pixels, g2[i][j].pixels);
    }
    EXPECT_NE(g1[i][0].pixels, g1[i][1].pixels);
  }
  EXPECT_NE(diffusion::grid_seed(99, 0, 1), diffusion::grid_seed(99, 1, 0));
  // A grid cell can be regenerated alone from its derived seed.
  const Image2D lone = diffusion::ddim_sample(model, edges[1], 5, diffusion::grid_seed(99, 1, 2));
  double worst = 0;
  for (std::size_t k = 0; k < lone.pixels.size(); ++k) worst = std::max(worst, std::abs(lone.pixels[k] - g1[1][2].pixels[k]));
  EXPECT_LT(worst, 1e-4);
}
