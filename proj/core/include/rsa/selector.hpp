#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "rsa/diffusion.hpp"
#include "rsa/domain.hpp"
#include "rsa/edges.hpp"
#include "rsa/segmenter.hpp"

namespace rsa::select {

struct SelectorConfig {
  double t_un = 0.2;
  double t_r = 0.3;
  int n = 2;
  int samples_per_edge = 3;
  int boundary_band_px = 0;    // 0 keeps the high-uncertainty union unrestricted
  bool score_on_raw = false;   // compute R on unrefined masks instead

  void validate() const;
};

// Refined = (1{u > t_un} XOR raw) OR raw, evaluated literally. With a positive
// band, the high-uncertainty set is first limited to pixels within
// band_px (Chebyshev) of a raw-positive pixel.
BinaryMask refine_mask(const BinaryMask& raw, const UncertaintyMap& u, double t_un, int boundary_band_px = 0);

// R = 1 - |AND of masks| / |OR of masks|; R = 1 for an empty union.
double consistency(std::span<const BinaryMask> masks, std::size_t expected_count = 0);

// Pixel is set when more than half the masks set it.
BinaryMask majority_vote(std::span<const BinaryMask> masks);

// Recomputes refined masks of every generation with the given settings.
void refine_grid(GenerationGrid& grid, const SelectorConfig& cfg);

// Per-edge R (on refined masks unless score_on_raw), rejection above t_r,
// argmin over survivors (ties to the smaller index), then within the chosen
// edge the sample closest to the majority vote (ties: lower mean uncertainty
// over its mask, then lower index).
ApproximationResult select(const GenerationGrid& grid, const SelectorConfig& cfg, const std::string& target_id = "");

struct ApproximateOptions {
  edges::ThresholdSweep sweep{};
  edges::CannyOptions canny{};
  int ddim_steps = 50;
  std::uint64_t seed = 0;
};

// Target-specific master seed for the generation grid.
std::uint64_t target_seed(std::uint64_t master, const std::string& target_id);

// sweep_edges -> generate_grid -> predict -> refine -> select.
ApproximationResult approximate(const Image2D& target, diffusion::TranslatorModel& translator, seg::SegModel& segmenter,
                                const SelectorConfig& cfg, const ApproximateOptions& opt);

// The unrefined grid (generations with raw masks and uncertainty); refine and
// select can then be rerun cheaply for different selector settings.
GenerationGrid build_grid(const Image2D& target, diffusion::TranslatorModel& translator, seg::SegModel& segmenter,
                          int samples_per_edge, const ApproximateOptions& opt);

nlohmann::json provenance(const ApproximationResult& result);

}  // namespace rsa::select
