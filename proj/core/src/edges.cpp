#include "rsa/edges.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rsa::edges {

namespace {

std::size_t clamp_index(long i, std::size_t n) {
  return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(n) - 1));
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable convolution with replicated borders.
RealGrid smooth(const RealGrid& in, double sigma) {
  if (sigma <= 0.0) return in;
  const auto k = gaussian_kernel(sigma);
  const long radius = static_cast<long>(k.size() / 2);
  const std::size_t rows = in.rows(), cols = in.cols();
  RealGrid tmp(rows, cols), out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (long d = -radius; d <= radius; ++d) acc += k[d + radius] * in(r, clamp_index(long(c) + d, cols));
      tmp(r, c) = acc;
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (long d = -radius; d <= radius; ++d) acc += k[d + radius] * tmp(clamp_index(long(r) + d, rows), c);
      out(r, c) = acc;
    }
  }
  return out;
}

struct Gradients {
  RealGrid gx, gy, mag;
};

Gradients sobel(const RealGrid& s) {
  const std::size_t rows = s.rows(), cols = s.cols();
  Gradients g{RealGrid(rows, cols), RealGrid(rows, cols), RealGrid(rows, cols)};
  auto at = [&](long r, long c) { return s(clamp_index(r, rows), clamp_index(c, cols)); };
  for (std::size_t ur = 0; ur < rows; ++ur) {
    for (std::size_t uc = 0; uc < cols; ++uc) {
      const long r = static_cast<long>(ur), c = static_cast<long>(uc);
      const double gx = (at(r - 1, c + 1) + 2 * at(r, c + 1) + at(r + 1, c + 1)) -
                        (at(r - 1, c - 1) + 2 * at(r, c - 1) + at(r + 1, c - 1));
      const double gy = (at(r + 1, c - 1) + 2 * at(r + 1, c) + at(r + 1, c + 1)) -
                        (at(r - 1, c - 1) + 2 * at(r - 1, c) + at(r - 1, c + 1));
      g.gx(ur, uc) = gx;
      g.gy(ur, uc) = gy;
      g.mag(ur, uc) = std::sqrt(gx * gx + gy * gy);
    }
  }
  return g;
}

}  // namespace

RealGrid gradient_magnitude(const RealGrid& pixels, double gaussian_sigma) {
  return sobel(smooth(pixels, gaussian_sigma)).mag;
}

BitGrid canny_raw(const RealGrid& pixels, double high, const CannyOptions& opt) {
  if (!(high > 0.0)) throw std::invalid_argument("Canny threshold must be positive");
  const double low = opt.low_ratio * high;
  const std::size_t rows = pixels.rows(), cols = pixels.cols();
  const Gradients g = sobel(smooth(pixels, opt.gaussian_sigma));

  // 0 = suppressed, 1 = weak candidate, 2 = strong.
  BitGrid state(rows, cols, 0);
  constexpr double kTan22 = 0.41421356237309503;  // tan(22.5 deg)
  for (std::size_t r = 1; r + 1 < rows; ++r) {
    for (std::size_t c = 1; c + 1 < cols; ++c) {
      const double m = g.mag(r, c);
      if (!(m > low)) continue;
      const double ax = std::abs(g.gx(r, c)), ay = std::abs(g.gy(r, c));
      double before, after;
      if (ay <= kTan22 * ax) {
        before = g.mag(r, c - 1);
        after = g.mag(r, c + 1);
      } else if (ax <= kTan22 * ay) {
        before = g.mag(r - 1, c);
        after = g.mag(r + 1, c);
      } else if ((g.gx(r, c) > 0) == (g.gy(r, c) > 0)) {
        before = g.mag(r - 1, c - 1);
        after = g.mag(r + 1, c + 1);
      } else {
        before = g.mag(r - 1, c + 1);
        after = g.mag(r + 1, c - 1);
      }
      if (m > before && m >= after) state(r, c) = m > high ? 2 : 1;
    }
  }

  BitGrid edges(rows, cols, 0);
  std::vector<std::pair<std::size_t, std::size_t>> stack;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (state(r, c) == 2 && !edges(r, c)) {
        edges(r, c) = 1;
        stack.emplace_back(r, c);
      }
      while (!stack.empty()) {
        const auto [pr, pc] = stack.back();
        stack.pop_back();
        for (int dr = -1; dr <= 1; ++dr) {
          for (int dc = -1; dc <= 1; ++dc) {
            const long nr = long(pr) + dr, nc = long(pc) + dc;
            if (nr < 0 || nc < 0 || nr >= long(rows) || nc >= long(cols)) continue;
            if (state(nr, nc) && !edges(nr, nc)) {
              edges(nr, nc) = 1;
              stack.emplace_back(nr, nc);
            }
          }
        }
      }
    }
  }
  return edges;
}

EdgeMap canny(const Image2D& image, double threshold, const CannyOptions& opt) {
  if (!(threshold > 0.0)) throw std::invalid_argument("Canny threshold must be positive");
  const double span = image.value_range.hi - image.value_range.lo;
  if (!(span > 0.0)) throw std::invalid_argument("image value_range must be non-degenerate");
  RealGrid scaled = image.pixels;
  for (auto& v : scaled) v = (v - image.value_range.lo) * (255.0 / span);
  return EdgeMap{canny_raw(scaled, threshold, opt), threshold};
}

std::vector<double> ThresholdSweep::thresholds() const {
  validate();
  if (n == 1) return {0.5 * (lo + hi)};
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = lo + (hi - lo) * static_cast<double>(i) / (n - 1);
  out.back() = hi;
  return out;
}

void ThresholdSweep::validate() const {
  if (!(lo < hi)) throw std::invalid_argument("threshold sweep needs lo < hi");
  if (!(lo > 0.0)) throw std::invalid_argument("threshold sweep needs lo > 0");
  if (n < 1) throw std::invalid_argument("threshold sweep needs n >= 1");
}

std::vector<EdgeMap> sweep_edges(const Image2D& image, const ThresholdSweep& sweep, const CannyOptions& opt) {
  std::vector<EdgeMap> out;
  for (double t : sweep.thresholds()) out.push_back(canny(image, t, opt));
  return out;
}

BitGrid mask_boundary(const BitGrid& mask) {
  const std::size_t rows = mask.rows(), cols = mask.cols();
  BitGrid out(rows, cols, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mask(r, c)) continue;
      const bool interior = r > 0 && c > 0 && r + 1 < rows && c + 1 < cols && mask(r - 1, c) &&
                            mask(r + 1, c) && mask(r, c - 1) && mask(r, c + 1);
      out(r, c) = interior ? 0 : 1;
    }
  }
  return out;
}

double pixel_recall(const BitGrid& reference, const BitGrid& edges, double tolerance_px) {
  require_same_shape(reference.shape(), edges.shape(), "pixel_recall");
  const long rows = long(reference.rows()), cols = long(reference.cols());
  const long reach = static_cast<long>(std::floor(tolerance_px));
  const double tol2 = tolerance_px * tolerance_px;
  std::size_t total = 0, hit = 0;
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      if (!reference(r, c)) continue;
      ++total;
      bool found = false;
      for (long dr = -reach; dr <= reach && !found; ++dr) {
        for (long dc = -reach; dc <= reach && !found; ++dc) {
          const long nr = r + dr, nc = c + dc;
          if (nr < 0 || nc < 0 || nr >= rows || nc >= cols) continue;
          if (double(dr * dr + dc * dc) <= tol2 && edges(nr, nc)) found = true;
        }
      }
      hit += found ? 1 : 0;
    }
  }
  return total == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(total);
}

double boundary_recall(const BinaryMask& mask, const EdgeMap& edge, double tolerance_px) {
  return pixel_recall(mask_boundary(mask.pixels), edge.pixels, tolerance_px);
}

double annotation_threshold(const Image2D& image, const BinaryMask& mask, std::span<const double> candidates,
                            double tolerance_px, const CannyOptions& opt) {
  if (mask.count() == 0) throw std::invalid_argument("no annotation");
  if (candidates.empty()) throw std::invalid_argument("annotation_threshold needs candidates");
  require_same_shape(image.shape(), mask.shape(), "annotation_threshold");
  double best_t = 0.0, best_recall = -1.0;
  for (double t : candidates) {
    const double recall = boundary_recall(mask, canny(image, t, opt), tolerance_px);
    if (recall > best_recall || (recall == best_recall && t > best_t)) {
      best_recall = recall;
      best_t = t;
    }
  }
  return best_t;
}

}  // namespace rsa::edges
