#include "rsa/selector.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "rsa/seed.hpp"

namespace rsa::select {

void SelectorConfig::validate() const {
  if (!(t_r > 0.0 && t_r <= 1.0)) throw std::invalid_argument("selector needs 0 < t_r <= 1");
  if (!(t_un > 0.0)) throw std::invalid_argument("selector needs t_un > 0");
  if (n < 1) throw std::invalid_argument("selector needs n >= 1");
  if (samples_per_edge < 1) throw std::invalid_argument("selector needs samples_per_edge >= 1");
  if (boundary_band_px < 0) throw std::invalid_argument("boundary_band_px must be non-negative");
}

BinaryMask refine_mask(const BinaryMask& raw, const UncertaintyMap& u, double t_un, int boundary_band_px) {
  require_same_shape(raw.shape(), u.shape(), "refine_mask");
  const std::size_t rows = raw.pixels.rows(), cols = raw.pixels.cols();
  BitGrid high(rows, cols, 0);
  for (std::size_t i = 0; i < high.size(); ++i) high[i] = u.pixels[i] > t_un ? 1 : 0;

  if (boundary_band_px > 0) {
    const long band = boundary_band_px;
    BitGrid near(rows, cols, 0);
    for (long r = 0; r < long(rows); ++r) {
      for (long c = 0; c < long(cols); ++c) {
        if (!raw.pixels(r, c)) continue;
        for (long dr = -band; dr <= band; ++dr) {
          for (long dc = -band; dc <= band; ++dc) {
            const long nr = r + dr, nc = c + dc;
            if (nr >= 0 && nc >= 0 && nr < long(rows) && nc < long(cols)) near(nr, nc) = 1;
          }
        }
      }
    }
    for (std::size_t i = 0; i < high.size(); ++i) high[i] &= near[i];
  }

  BinaryMask out{raw.id, BitGrid(rows, cols, 0)};
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const std::uint8_t x = high[i] ^ raw.pixels[i];  // non-tumour pixels with high uncertainty (and raw ones)
    out.pixels[i] = x | raw.pixels[i];
  }
  return out;
}

double consistency(std::span<const BinaryMask> masks, std::size_t expected_count) {
  if (masks.empty()) throw std::invalid_argument("consistency needs at least one mask");
  if (expected_count && masks.size() != expected_count) {
    throw std::invalid_argument("consistency expects " + std::to_string(expected_count) + " masks, got " +
                                std::to_string(masks.size()));
  }
  const Shape shape = masks.front().shape();
  for (const auto& m : masks) require_same_shape(shape, m.shape(), "consistency");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    std::uint8_t all = 1, any = 0;
    for (const auto& m : masks) {
      all &= m.pixels[i];
      any |= m.pixels[i];
    }
    inter += all;
    uni += any;
  }
  if (uni == 0) return 1.0;
  return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMask majority_vote(std::span<const BinaryMask> masks) {
  if (masks.empty()) throw std::invalid_argument("majority_vote needs at least one mask");
  const Shape shape = masks.front().shape();
  BinaryMask out{"", BitGrid(shape.rows, shape.cols, 0)};
  for (std::size_t i = 0; i < shape.size(); ++i) {
    std::size_t votes = 0;
    for (const auto& m : masks) votes += m.pixels[i];
    out.pixels[i] = 2 * votes > masks.size() ? 1 : 0;
  }
  return out;
}

void refine_grid(GenerationGrid& grid, const SelectorConfig& cfg) {
  for (auto& row : grid) {
    for (auto& g : row) g.refined_mask = refine_mask(g.raw_mask, g.uncertainty, cfg.t_un, cfg.boundary_band_px);
  }
}

namespace {

const BinaryMask& scored_mask(const Generation& g, const SelectorConfig& cfg) {
  return cfg.score_on_raw ? g.raw_mask : g.refined_mask;
}

double mean_uncertainty_over(const BinaryMask& mask, const UncertaintyMap& u) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    if (mask.pixels[i]) {
      sum += u.pixels[i];
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::infinity();
}

std::size_t hamming(const BinaryMask& a, const BinaryMask& b) {
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) d += a.pixels[i] != b.pixels[i];
  return d;
}

}  // namespace

ApproximationResult select(const GenerationGrid& grid, const SelectorConfig& cfg, const std::string& target_id) {
  cfg.validate();
  if (grid.size() != static_cast<std::size_t>(cfg.n)) {
    throw std::invalid_argument("incomplete grid: expected " + std::to_string(cfg.n) + " edges, got " +
                                std::to_string(grid.size()));
  }
  ApproximationResult result;
  result.target_id = target_id;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i].size() != static_cast<std::size_t>(cfg.samples_per_edge)) {
      throw std::invalid_argument("incomplete grid: edge " + std::to_string(i) + " has " +
                                  std::to_string(grid[i].size()) + " samples");
    }
    std::vector<BinaryMask> masks;
    std::vector<std::uint64_t> seeds;
    for (const auto& g : grid[i]) {
      masks.push_back(scored_mask(g, cfg));
      seeds.push_back(g.seed);
    }
    result.edge_consistency.push_back(consistency(masks, static_cast<std::size_t>(cfg.samples_per_edge)));
    result.thresholds.push_back(grid[i].front().edge.threshold);
    result.seeds.push_back(std::move(seeds));
  }

  int best = -1;
  for (std::size_t i = 0; i < result.edge_consistency.size(); ++i) {
    const double r = result.edge_consistency[i];
    if (r > cfg.t_r) continue;
    if (best < 0 || r < result.edge_consistency[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  if (best < 0) {
    double min_r = 1.0;
    for (double r : result.edge_consistency) min_r = std::min(min_r, r);
    result.consistency = min_r;
    return result;
  }

  const auto& row = grid[static_cast<std::size_t>(best)];
  std::vector<BinaryMask> masks;
  for (const auto& g : row) masks.push_back(scored_mask(g, cfg));
  const BinaryMask vote = majority_vote(masks);
  std::size_t chosen = 0;
  std::size_t best_dist = std::numeric_limits<std::size_t>::max();
  double best_unc = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < row.size(); ++j) {
    const std::size_t dist = hamming(masks[j], vote);
    const double unc = mean_uncertainty_over(masks[j], row[j].uncertainty);
    if (dist < best_dist || (dist == best_dist && unc < best_unc)) {
      chosen = j;
      best_dist = dist;
      best_unc = unc;
    }
  }

  result.accepted = true;
  result.chosen_edge_index = best;
  result.chosen_sample_index = static_cast<int>(chosen);
  result.consistency = result.edge_consistency[static_cast<std::size_t>(best)];
  result.generation = row[chosen];
  return result;
}

std::uint64_t target_seed(std::uint64_t master, const std::string& target_id) {
  return derive_seed(master, {fnv1a(target_id.data(), target_id.size())});
}

GenerationGrid build_grid(const Image2D& target, diffusion::TranslatorModel& translator, seg::SegModel& segmenter,
                          int samples_per_edge, const ApproximateOptions& opt) {
  const auto edge_maps = edges::sweep_edges(target, opt.sweep, opt.canny);
  const std::uint64_t seed = target_seed(opt.seed, target.id);
  auto images = diffusion::generate_grid(translator, edge_maps, samples_per_edge, seed, opt.ddim_steps);

  std::vector<Image2D> flat;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j = 0; j < images[i].size(); ++j) {
      images[i][j].id = target.id + "/e" + std::to_string(i) + "s" + std::to_string(j);
      images[i][j].spacing_mm = target.spacing_mm;
      flat.push_back(images[i][j]);
    }
  }
  auto preds = seg::predict_batch(segmenter, flat);

  GenerationGrid grid(images.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j = 0; j < images[i].size(); ++j, ++k) {
      Generation g;
      g.edge_index = static_cast<int>(i);
      g.sample_index = static_cast<int>(j);
      g.seed = diffusion::grid_seed(seed, static_cast<int>(i), static_cast<int>(j));
      g.image = std::move(images[i][j]);
      g.raw_mask = std::move(preds[k].mask);
      g.refined_mask = g.raw_mask;
      g.uncertainty = std::move(preds[k].uncertainty);
      g.edge = edge_maps[i];
      grid[i].push_back(std::move(g));
    }
  }
  return grid;
}

ApproximationResult approximate(const Image2D& target, diffusion::TranslatorModel& translator, seg::SegModel& segmenter,
                                const SelectorConfig& cfg, const ApproximateOptions& opt) {
  cfg.validate();
  if (opt.sweep.n != cfg.n) throw std::invalid_argument("approximate: sweep n differs from selector n");
  auto grid = build_grid(target, translator, segmenter, cfg.samples_per_edge, opt);
  refine_grid(grid, cfg);
  return select(grid, cfg, target.id);
}

nlohmann::json provenance(const ApproximationResult& r) {
  nlohmann::json j = {{"target_id", r.target_id},
                      {"accepted", r.accepted},
                      {"edge_index", r.chosen_edge_index},
                      {"sample_index", r.chosen_sample_index},
                      {"R", r.consistency},
                      {"thresholds", r.thresholds},
                      {"edge_R", r.edge_consistency},
                      {"seeds", r.seeds},
                      {"sample_rule", r.sample_rule}};
  if (r.accepted) j["threshold"] = r.thresholds.at(static_cast<std::size_t>(r.chosen_edge_index));
  return j;
}

}  // namespace rsa::select
