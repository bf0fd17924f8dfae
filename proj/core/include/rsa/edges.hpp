#pragma once

#include <span>
#include <vector>

#include "rsa/domain.hpp"

namespace rsa::edges {

struct CannyOptions {
  double low_ratio = 0.5;      // hysteresis low threshold = low_ratio * T
  double gaussian_sigma = 1.0;
};

// Canny on raw intensities: Gaussian smoothing, Sobel gradients, non-maximum
// suppression and 8-connected hysteresis. No rescaling is applied, so scaling
// the image and `high` by the same positive factor gives the same edges.
BitGrid canny_raw(const RealGrid& pixels, double high, const CannyOptions& opt = {});

// Canny with the image mapped from its value_range onto 0..255 first, so the
// threshold T follows the usual 8-bit convention. Throws on T <= 0.
EdgeMap canny(const Image2D& image, double threshold, const CannyOptions& opt = {});

// Gradient magnitude after smoothing (exposed for diagnostics and tests).
RealGrid gradient_magnitude(const RealGrid& pixels, double gaussian_sigma = 1.0);

struct ThresholdSweep {
  double lo = 30.0;
  double hi = 80.0;
  int n = 2;

  // n values equally dividing [lo, hi] including both ends; the midpoint for n = 1.
  std::vector<double> thresholds() const;
  void validate() const;
};

std::vector<EdgeMap> sweep_edges(const Image2D& image, const ThresholdSweep& sweep,
                                 const CannyOptions& opt = {});

// Mask boundary pixels: foreground pixels with a 4-neighbour outside the mask
// (pixels outside the grid count as background).
BitGrid mask_boundary(const BitGrid& mask);

// Fraction of reference pixels lying within `tolerance_px` (Euclidean) of some
// set pixel in `edges`. An empty reference gives 1.
double pixel_recall(const BitGrid& reference, const BitGrid& edges, double tolerance_px);

// Fraction of the mask's boundary pixels within tolerance of a Canny edge.
double boundary_recall(const BinaryMask& mask, const EdgeMap& edge, double tolerance_px = 2.0);

// Candidate T maximising boundary recall; ties go to the larger T.
// Throws std::invalid_argument("no annotation") for an empty mask.
double annotation_threshold(const Image2D& image, const BinaryMask& mask, std::span<const double> candidates,
                            double tolerance_px = 2.0, const CannyOptions& opt = {});

}  // namespace rsa::edges
