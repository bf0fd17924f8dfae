#include <gtest/gtest.h>

#include <numeric>
#include <tuple>

#include "rsa/selector.hpp"
#include "support.hpp"

using namespace rsa;
using namespace rsa::testing;

namespace {

UncertaintyMap flat_u(std::size_t r, std::size_t c, double v) { return {RealGrid(r, c, v)}; }

Generation make_gen(int i, int j, BinaryMask raw, UncertaintyMap u) {
  Generation g;
  g.edge_index = i;
  g.sample_index = j;
  const Shape s = raw.shape();
  g.image = image_from(RealGrid(s.rows, s.cols, 0.5));
  g.raw_mask = raw;
  g.refined_mask = raw;
  g.uncertainty = std::move(u);
  g.edge = EdgeMap{BitGrid(s.rows, s.cols, 0), 30.0 + 10 * i};
  return g;
}

// Random grid whose masks are noisy copies of one blob, so R values spread over [0, 1].
GenerationGrid random_grid(std::mt19937_64& rng, int n, int k, std::size_t side) {
  std::uniform_real_distribution<double> u01(0, 1);
  const BinaryMask base = random_mask(rng, side, side, 0.4);
  GenerationGrid grid(n);
  for (int i = 0; i < n; ++i) {
    const double flip = 0.5 * u01(rng) * u01(rng);
    for (int j = 0; j < k; ++j) {
      BinaryMask m = base;
      for (auto& v : m.pixels) if (u01(rng) < flip) v ^= 1;
      UncertaintyMap u{RealGrid(side, side)};
      // Coarse values so uncertainty ties happen too.
      for (auto& v : u.pixels) v = std::floor(u01(rng) * 4) / 10.0;
      grid[i].push_back(make_gen(i, j, m, u));
    }
  }
  return grid;
}

struct Pick {
  bool accepted = false;
  int edge = -1, sample = -1;
};

// Exhaustive scan: every (edge, sample) candidate whose edge passes the
// threshold is ranked by (R, edge, distance to the majority vote, mean
// uncertainty over its mask, sample).
Pick exhaustive(const GenerationGrid& grid, double t_r) {
  using Key = std::tuple<double, int, std::size_t, double, int>;
  std::optional<Key> best;
  for (int i = 0; i < int(grid.size()); ++i) {
    std::vector<BinaryMask> masks;
    for (const auto& g : grid[i]) masks.push_back(g.refined_mask);
    const double R = consistency_reference(masks);
    if (R > t_r) continue;
    const std::size_t k = masks.size(), cells = masks[0].pixels.size();
    for (int j = 0; j < int(k); ++j) {
      std::size_t dist = 0;
      double usum = 0;
      std::size_t ucount = 0;
      for (std::size_t p = 0; p < cells; ++p) {
        std::size_t votes = 0;
        for (const auto& m : masks) votes += m.pixels[p];
        const bool majority = 2 * votes > k;
        dist += (masks[j].pixels[p] == 1) != majority;
        if (masks[j].pixels[p]) usum += grid[i][j].uncertainty.pixels[p], ++ucount;
      }
      const double mu = ucount ? usum / double(ucount) : std::numeric_limits<double>::infinity();
      const Key key{R, i, dist, mu, j};
      if (!best || key < *best) best = key;
    }
  }
  if (!best) return {};
  return {true, std::get<1>(*best), std::get<4>(*best)};
}

}  // namespace

TEST(Refine, LowUncertaintyLeavesMaskUnchanged) {
  std::mt19937_64 rng(1);
  const BinaryMask raw = random_mask(rng, 8, 8);
  EXPECT_EQ(select::refine_mask(raw, flat_u(8, 8, 0.2), 0.2).pixels, raw.pixels);
}

TEST(Refine, HandEnumeratedThreeByThree) {
  const BinaryMask raw = mask_from(3, 3, {{1, 1}});
  UncertaintyMap u = flat_u(3, 3, 0.0);
  u.pixels(1, 1) = 0.9;
  u.pixels(0, 1) = 0.9;
  // XOR gives {(0,1)}; union with raw gives {(0,1),(1,1)}.
  EXPECT_EQ(select::refine_mask(raw, u, 0.2).pixels, mask_from(3, 3, {{0, 1}, {1, 1}}).pixels);
}

TEST(Refine, FullRawAbsorbsEverything) {
  const BinaryMask raw{"m", BitGrid(5, 5, 1)};
  std::mt19937_64 rng(2);
  UncertaintyMap u{RealGrid(5, 5)};
  for (auto& v : u.pixels) v = std::uniform_real_distribution<double>(0, 1)(rng);
  EXPECT_EQ(select::refine_mask(raw, u, 0.2).pixels, raw.pixels);
}

TEST(Refine, ShapeMismatchThrows) {
  EXPECT_THROW(select::refine_mask(BinaryMask{"m", BitGrid(4, 4, 0)}, flat_u(5, 5, 0), 0.2), std::invalid_argument);
}

TEST(Refine, BooleanIdentityAndSuperset) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u01(0, 1);
  for (int t = 0; t < 1000; ++t) {
    const BinaryMask raw = random_mask(rng, 7, 9, u01(rng));
    UncertaintyMap u{RealGrid(7, 9)};
    for (auto& v : u.pixels) v = u01(rng);
    const BinaryMask out = select::refine_mask(raw, u, 0.5);
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
      EXPECT_EQ(out.pixels[i], (raw.pixels[i] || u.pixels[i] > 0.5) ? 1 : 0);
      EXPECT_GE(out.pixels[i], raw.pixels[i]);
    }
  }
}

TEST(Refine, BandLimitsAdditionsToNeighbourhood) {
  const BinaryMask raw = mask_from(9, 9, {{4, 4}});
  const BinaryMask out = select::refine_mask(raw, flat_u(9, 9, 1.0), 0.2, 1);
  EXPECT_EQ(out.count(), 9u);
  EXPECT_EQ(out.pixels(0, 0), 0);
}

TEST(Consistency, IdenticalDisjointAndCounted) {
  const BinaryMask a = box_mask(4, 4, 0, 0, 2, 2);
  const std::vector<BinaryMask> same{a, a, a};
  EXPECT_EQ(select::consistency(same), 0.0);
  const std::vector<BinaryMask> disjoint{mask_from(4, 4, {{0, 0}}), mask_from(4, 4, {{1, 1}}),
                                         mask_from(4, 4, {{2, 2}})};
  EXPECT_EQ(select::consistency(disjoint), 1.0);
  // |AND| = 4 (top-left 2x2), |OR| = 10.
  const BinaryMask m1 = mask_from(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {2, 0}, {2, 1}, {3, 0}});
  const BinaryMask m2 = mask_from(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {0, 2}, {0, 3}});
  const BinaryMask m3 = mask_from(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {3, 3}});
  const std::vector<BinaryMask> counted{m1, m2, m3};
  EXPECT_DOUBLE_EQ(select::consistency(counted), 0.6);
}

TEST(Consistency, EmptyUnionIsWorstCase) {
  const std::vector<BinaryMask> empty(3, BinaryMask{"m", BitGrid(4, 4, 0)});
  EXPECT_EQ(select::consistency(empty), 1.0);
}

TEST(Consistency, WrongCountOrShapeThrows) {
  const std::vector<BinaryMask> two(2, box_mask(4, 4, 0, 0, 2, 2));
  EXPECT_THROW(select::consistency(two, 3), std::invalid_argument);
  const std::vector<BinaryMask> mixed{box_mask(4, 4, 0, 0, 2, 2), box_mask(5, 5, 0, 0, 2, 2)};
  EXPECT_THROW(select::consistency(mixed), std::invalid_argument);
}

TEST(Consistency, MatchesBruteForceAndIsPermutationInvariant) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u01(0, 1);
  for (int t = 0; t < 500; ++t) {
    std::vector<BinaryMask> m;
    for (int k = 0; k < 3; ++k) m.push_back(random_mask(rng, 6, 5, u01(rng)));
    const double r = select::consistency(m, 3);
    EXPECT_NEAR(r, consistency_reference(m), 1e-12);
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
    std::vector<BinaryMask> rotated{m[2], m[0], m[1]};
    EXPECT_EQ(select::consistency(rotated), r);
    std::vector<std::size_t> perm(30);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<BinaryMask> shuffled = m;
    for (int k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < 30; ++i) shuffled[k].pixels[i] = m[k].pixels[perm[i]];
    EXPECT_EQ(select::consistency(shuffled), r);
  }
}

TEST(Select, OnlySurvivorChosen) {
  // Edge 0: R = 0.2 (|AND| 4, |OR| 5); edge 1: R = 0.4 (|AND| 3, |OR| 5).
  const BinaryMask a4 = mask_from(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  BinaryMask a5 = a4;
  a5.pixels(2, 2) = 1;
  const BinaryMask b3 = mask_from(4, 4, {{0, 0}, {0, 1}, {1, 0}});
  BinaryMask b5 = b3;
  b5.pixels(1, 1) = 1;
  b5.pixels(3, 3) = 1;
  GenerationGrid grid{{make_gen(0, 0, a4, flat_u(4, 4, 0)), make_gen(0, 1, a5, flat_u(4, 4, 0)),
                       make_gen(0, 2, a4, flat_u(4, 4, 0))},
                      {make_gen(1, 0, b3, flat_u(4, 4, 0)), make_gen(1, 1, b5, flat_u(4, 4, 0)),
                       make_gen(1, 2, b3, flat_u(4, 4, 0))}};
  select::SelectorConfig cfg;
  const auto r = select::select(grid, cfg, "t");
  EXPECT_DOUBLE_EQ(r.edge_consistency[0], 0.2);
  EXPECT_DOUBLE_EQ(r.edge_consistency[1], 0.4);
  ASSERT_TRUE(r.accepted);
  EXPECT_EQ(r.chosen_edge_index, 0);
  EXPECT_TRUE(validate(r, cfg.t_r).ok());
}

TEST(Select, AllFilteredIsRejected) {
  std::mt19937_64 rng(5);
  GenerationGrid grid(2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) grid[i].push_back(make_gen(i, j, mask_from(4, 4, {{std::size_t(i), std::size_t(j)}}), flat_u(4, 4, 0)));
  const auto r = select::select(grid, {});
  EXPECT_FALSE(r.accepted);
  EXPECT_FALSE(r.generation.has_value());
  EXPECT_TRUE(validate(r, 0.3).ok());
}

TEST(Select, MajorityVoteTieBrokenByUncertainty) {
  const BinaryMask a = box_mask(4, 4, 0, 0, 2, 2);
  const BinaryMask c = box_mask(4, 4, 2, 2, 2, 2);
  GenerationGrid grid{{make_gen(0, 0, a, flat_u(4, 4, 0.3)), make_gen(0, 1, a, flat_u(4, 4, 0.1)),
                       make_gen(0, 2, c, flat_u(4, 4, 0.0))}};
  select::SelectorConfig cfg;
  cfg.n = 1;
  cfg.t_r = 1.0;
  const auto r = select::select(grid, cfg);
  ASSERT_TRUE(r.accepted);
  EXPECT_EQ(r.chosen_sample_index, 1);
  EXPECT_EQ(select::majority_vote(std::vector<BinaryMask>{a, a, c}).pixels, a.pixels);
}

TEST(Select, IncompleteGridThrows) {
  GenerationGrid grid{{make_gen(0, 0, box_mask(4, 4, 0, 0, 2, 2), flat_u(4, 4, 0))}};
  EXPECT_THROW(select::select(grid, {}), std::invalid_argument);
}

TEST(Select, AgreesWithExhaustiveScan) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u01(0, 1);
  int accepted = 0;
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + int(u01(rng) * 4);
    GenerationGrid grid = random_grid(rng, n, 3, 5);
    select::SelectorConfig cfg;
    cfg.n = n;
    cfg.t_r = std::max(0.05, u01(rng));
    const auto r = select::select(grid, cfg);
    const Pick want = exhaustive(grid, cfg.t_r);
    ASSERT_EQ(r.accepted, want.accepted) << "grid " << t;
    if (r.accepted) {
      ++accepted;
      EXPECT_EQ(r.chosen_edge_index, want.edge) << "grid " << t;
      EXPECT_EQ(r.chosen_sample_index, want.sample) << "grid " << t;
      EXPECT_LE(r.consistency, cfg.t_r);
    }
  }
  EXPECT_GT(accepted, 20);
  EXPECT_LT(accepted, 200);
}

TEST(Select, TighterThresholdNeverAcceptsMore) {
  std::mt19937_64 rng(7);
  std::vector<GenerationGrid> grids;
  for (int t = 0; t < 100; ++t) grids.push_back(random_grid(rng, 2, 3, 6));
  std::size_t prev = grids.size() + 1;
  for (double tr : {0.9, 0.7, 0.5, 0.3, 0.1}) {
    select::SelectorConfig cfg;
    cfg.t_r = tr;
    std::size_t count = 0;
    for (const auto& g : grids) count += select::select(g, cfg).accepted;
    EXPECT_LE(count, prev);
    prev = count;
  }
}

TEST(Select, ScoreOnRawIgnoresRefinement) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 30; ++t) {
    GenerationGrid grid = random_grid(rng, 2, 3, 6);
    select::SelectorConfig cfg;
    cfg.score_on_raw = true;
    const auto before = select::select(grid, cfg).edge_consistency;
    cfg.t_un = 0.15;
    select::refine_grid(grid, cfg);
    EXPECT_EQ(select::select(grid, cfg).edge_consistency, before);
  }
}
