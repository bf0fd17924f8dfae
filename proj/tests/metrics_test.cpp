#include <gtest/gtest.h>

#include <numeric>

#include "rsa/metrics.hpp"
#include "support.hpp"

using namespace rsa;
using namespace rsa::testing;

namespace {

GroundTruth truth_of(const std::map<std::string, BinaryMask>& masks) {
  std::map<std::string, LabeledSample> s;
  for (const auto& [id, m] : masks) {
    s.emplace(id, LabeledSample{image_from(RealGrid(m.pixels.rows(), m.pixels.cols(), 0.5), id), m});
  }
  return GroundTruth(std::move(s));
}

// Compact random blob: a box plus a few random pixels, so surfaces are non-trivial.
BinaryMask blob(std::mt19937_64& rng, std::size_t side) {
  std::uniform_int_distribution<std::size_t> pos(0, side - 4), len(1, 4);
  BinaryMask m = box_mask(side, side, pos(rng), pos(rng), len(rng), len(rng));
  std::uniform_int_distribution<std::size_t> any(0, side - 1);
  for (int k = 0; k < 3; ++k) m.pixels(any(rng), any(rng)) = 1;
  return m;
}

}  // namespace

TEST(Dice, WorkedExamples) {
  const BinaryMask a = box_mask(6, 6, 1, 1, 2, 2);
  EXPECT_EQ(metrics::dice(a, a), 1.0);
  EXPECT_EQ(metrics::dice(a, box_mask(6, 6, 4, 4, 2, 2)), 0.0);
  const BinaryMask empty{"e", BitGrid(6, 6, 0)};
  EXPECT_EQ(metrics::dice(empty, empty), 1.0);
  // |P| = 6, |G| = 4, overlap 3.
  const BinaryMask p = mask_from(4, 4, {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}, {1, 2}});
  const BinaryMask g = mask_from(4, 4, {{0, 0}, {0, 1}, {0, 2}, {3, 3}});
  EXPECT_DOUBLE_EQ(metrics::dice(p, g), 0.6);
  EXPECT_THROW(metrics::dice(p, box_mask(5, 5, 0, 0, 1, 1)), std::invalid_argument);
}

TEST(Dice, SymmetricPermutationInvariantAndMatchesOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const BinaryMask a = random_mask(rng, 7, 7, 0.3), b = random_mask(rng, 7, 7, 0.4);
    const double d = metrics::dice(a, b);
    EXPECT_NEAR(d, dice_reference(a, b), 1e-15);
    EXPECT_EQ(d, metrics::dice(b, a));
    std::vector<std::size_t> perm(49);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    BinaryMask a2 = a, b2 = b;
    for (std::size_t i = 0; i < 49; ++i) a2.pixels[i] = a.pixels[perm[i]], b2.pixels[i] = b.pixels[perm[i]];
    EXPECT_EQ(metrics::dice(a2, b2), d);
  }
}

TEST(Assd, WorkedExamples) {
  const BinaryMask a = box_mask(20, 20, 4, 4, 10, 10);
  EXPECT_EQ(metrics::assd(a, a), 0.0);
  EXPECT_DOUBLE_EQ(metrics::assd(mask_from(10, 10, {{2, 2}}), mask_from(10, 10, {{2, 7}})), 5.0);
  const BinaryMask shifted = box_mask(20, 20, 4, 6, 10, 10);
  EXPECT_NEAR(metrics::assd(a, shifted), assd_reference(a, shifted), 1e-9);
}

TEST(Assd, EmptySurfaceIsUndefined) {
  const BinaryMask empty{"e", BitGrid(8, 8, 0)};
  EXPECT_THROW(metrics::assd(empty, box_mask(8, 8, 1, 1, 2, 2)), metrics::UndefinedSurface);
  EXPECT_THROW(metrics::assd(box_mask(8, 8, 1, 1, 2, 2), empty), metrics::UndefinedSurface);
}

TEST(Assd, MatchesAllPairsOracle) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> sp(0.3, 2.0);
  for (int t = 0; t < 50; ++t) {
    const BinaryMask a = blob(rng, 12), b = blob(rng, 12);
    const Spacing s = t % 2 ? Spacing{1.0, 1.0} : Spacing{sp(rng), sp(rng)};
    EXPECT_NEAR(metrics::assd(a, b, s), assd_reference(a, b, s), 1e-9) << "pair " << t;
    EXPECT_NEAR(metrics::assd(a, b, s), metrics::assd(b, a, s), 1e-12);
  }
}

TEST(Assd, TranslationInvariantAwayFromBorders) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const BinaryMask a = blob(rng, 12), b = blob(rng, 12);
    BinaryMask a2{"a", BitGrid(24, 24, 0)}, b2{"b", BitGrid(24, 24, 0)}, a3 = a2, b3 = b2;
    for (std::size_t r = 0; r < 12; ++r)
      for (std::size_t c = 0; c < 12; ++c) {
        a2.pixels(r + 4, c + 4) = a.pixels(r, c);
        b2.pixels(r + 4, c + 4) = b.pixels(r, c);
        a3.pixels(r + 7, c + 9) = a.pixels(r, c);
        b3.pixels(r + 7, c + 9) = b.pixels(r, c);
      }
    EXPECT_NEAR(metrics::assd(a2, b2), metrics::assd(a3, b3), 1e-12);
  }
}

TEST(Evaluate, PerfectSinglePrediction) {
  const BinaryMask m = box_mask(10, 10, 2, 2, 4, 4);
  const auto r = metrics::evaluate({{"a", m}}, truth_of({{"a", m}}));
  EXPECT_EQ(r.dice_cell(), "100.00 ± 0.00");
  EXPECT_EQ(r.assd_cell(), "0.00 ± 0.00");
  EXPECT_EQ(r.count, 1u);
}

TEST(Evaluate, PopulationStdOfTwoImages) {
  const BinaryMask m = box_mask(10, 10, 2, 2, 4, 4), other = box_mask(10, 10, 7, 7, 2, 2);
  const auto r = metrics::evaluate({{"a", m}, {"b", other}}, truth_of({{"a", m}, {"b", m}}));
  EXPECT_DOUBLE_EQ(r.dice_mean, 50.0);
  EXPECT_DOUBLE_EQ(r.dice_std, 50.0);
  const auto s = metrics::evaluate({{"a", m}, {"b", other}}, truth_of({{"a", m}, {"b", m}}),
                                   metrics::StdConvention::sample);
  EXPECT_NEAR(s.dice_std, 50.0 * std::sqrt(2.0), 1e-9);
}

TEST(Evaluate, MissingAndUndefinedAreFlagged) {
  const BinaryMask m = box_mask(10, 10, 2, 2, 4, 4);
  const BinaryMask empty{"e", BitGrid(10, 10, 0)};
  const auto r = metrics::evaluate({{"a", m}, {"b", empty}}, truth_of({{"a", m}, {"b", m}, {"c", m}}));
  EXPECT_EQ(r.count, 2u);
  EXPECT_EQ(r.assd_excluded, 1u);
  EXPECT_EQ(r.missing, std::vector<std::string>{"c"});
}

TEST(Evaluate, SummaryRecomputableAndJsonRoundTrip) {
  std::mt19937_64 rng(4);
  std::map<std::string, BinaryMask> preds, gts;
  for (int i = 0; i < 12; ++i) {
    const std::string id = "img-" + std::to_string(i);
    preds[id] = blob(rng, 12);
    gts[id] = blob(rng, 12);
  }
  const auto r = metrics::evaluate(preds, truth_of(gts));
  double sum = 0;
  for (const auto& row : r.per_image) sum += 100 * row.dice;
  EXPECT_NEAR(r.dice_mean, sum / r.per_image.size(), 1e-12);
  EXPECT_EQ(r.count, r.per_image.size());

  const auto back = metrics::EvalReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back.dice_cell(), r.dice_cell());
  EXPECT_EQ(back.assd_cell(), r.assd_cell());
  EXPECT_EQ(back.count, r.count);
}

TEST(Formatting, CellsRoundTrip) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 100);
  for (int t = 0; t < 100; ++t) {
    const double m = std::round(u(rng) * 100) / 100, s = std::round(u(rng) * 10) / 100;
    const auto [m2, s2] = metrics::parse_mean_std(metrics::format_mean_std(m, s));
    EXPECT_NEAR(m2, m, 1e-9);
    EXPECT_NEAR(s2, s, 1e-9);
  }
  EXPECT_EQ(metrics::format_mean_std(77.83, 0.98), "77.83 ± 0.98");
  EXPECT_THROW(metrics::parse_mean_std("77.83 +- 0.98"), std::invalid_argument);
}

TEST(Quality, EmptyAndPerfectManifests) {
  const BinaryMask m = box_mask(10, 10, 2, 2, 4, 4);
  const auto truth = truth_of({{"a", m}, {"b", m}});
  const auto none = metrics::approximation_quality({}, truth);
  EXPECT_EQ(none.quantity, 0u);
  EXPECT_FALSE(none.quality_percent.has_value());
  const auto all = metrics::approximation_quality({{"a", m}, {"b", m}}, truth);
  EXPECT_EQ(all.quantity, 2u);
  EXPECT_DOUBLE_EQ(*all.quality_percent, 100.0);
}

TEST(Predictions, SaveAndLoadDirectory) {
  const fs::path dir = scratch_dir("preds");
  const std::map<std::string, BinaryMask> preds{{"a", box_mask(8, 8, 1, 1, 3, 3)}, {"b", box_mask(8, 8, 0, 0, 1, 1)}};
  metrics::save_predictions(dir, preds);
  const auto back = metrics::load_predictions(dir);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back.at("a").pixels, preds.at("a").pixels);
  fs::remove_all(dir);
}
