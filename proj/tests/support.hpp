#pragma once

// Shared fixtures and brute-force reference implementations for the tests.
// The references are written from the formulas, not from the library code.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "rsa/domain.hpp"

namespace rsa::testing {

namespace fs = std::filesystem;

inline fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rsa-test-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

inline BinaryMask random_mask(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double p = 0.5) {
  std::bernoulli_distribution bit(p);
  BinaryMask m{"m", BitGrid(rows, cols, 0)};
  for (auto& v : m.pixels) v = bit(rng) ? 1 : 0;
  return m;
}

inline BinaryMask mask_from(std::size_t rows, std::size_t cols,
                            const std::vector<std::pair<std::size_t, std::size_t>>& on) {
  BinaryMask m{"m", BitGrid(rows, cols, 0)};
  for (auto [r, c] : on) m.pixels(r, c) = 1;
  return m;
}

inline BinaryMask box_mask(std::size_t rows, std::size_t cols, std::size_t r0, std::size_t c0, std::size_t h,
                           std::size_t w) {
  BinaryMask m{"m", BitGrid(rows, cols, 0)};
  for (std::size_t r = r0; r < r0 + h; ++r)
    for (std::size_t c = c0; c < c0 + w; ++c) m.pixels(r, c) = 1;
  return m;
}

inline Image2D image_from(RealGrid g, const std::string& id = "img") {
  Image2D im;
  im.id = id;
  im.pixels = std::move(g);
  return im;
}

// Filled square of value `hi` on a background of `lo`.
inline Image2D square_image(std::size_t size, std::size_t r0, std::size_t side, double lo = 0.0, double hi = 1.0) {
  RealGrid g(size, size, lo);
  for (std::size_t r = r0; r < r0 + side; ++r)
    for (std::size_t c = r0; c < r0 + side; ++c) g(r, c) = hi;
  return image_from(std::move(g));
}

// NIG negative log-likelihood of one pixel, in long double with std::lgamma.
inline long double nll_reference(long double y, long double g, long double w, long double a, long double b) {
  const long double pi = 3.141592653589793238462643383279502884L;
  const long double big = 2.0L * b * (1.0L + w);
  return 0.5L * std::log(pi / w) - a * std::log(big) + (a + 0.5L) * std::log((y - g) * (y - g) * w + big) +
         std::lgamma(a) - std::lgamma(a + 0.5L);
}

inline long double reg_reference(long double y, long double g, long double w, long double a) {
  return std::fabs(y - g) * (2.0L * w + a);
}

// 1 - |AND| / |OR| counted pixel by pixel; 1 for an empty union.
inline double consistency_reference(const std::vector<BinaryMask>& masks) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t r = 0; r < masks[0].pixels.rows(); ++r) {
    for (std::size_t c = 0; c < masks[0].pixels.cols(); ++c) {
      bool all = true, any = false;
      for (const auto& m : masks) {
        all = all && m.pixels(r, c) == 1;
        any = any || m.pixels(r, c) == 1;
      }
      inter += all;
      uni += any;
    }
  }
  return uni == 0 ? 1.0 : 1.0 - double(inter) / double(uni);
}

inline double dice_reference(const BinaryMask& p, const BinaryMask& g) {
  double tp = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < p.pixels.size(); ++i) {
    tp += p.pixels[i] && g.pixels[i];
    np += p.pixels[i];
    ng += g.pixels[i];
  }
  return np + ng == 0 ? 1.0 : 2 * tp / (np + ng);
}

// Boundary: foreground pixels with a 4-neighbour that is background or off-grid.
inline std::vector<std::pair<long, long>> boundary_reference(const BitGrid& m) {
  std::vector<std::pair<long, long>> out;
  const long rows = long(m.rows()), cols = long(m.cols());
  auto on = [&](long r, long c) { return r >= 0 && c >= 0 && r < rows && c < cols && m(r, c); };
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c)
      if (on(r, c) && !(on(r - 1, c) && on(r + 1, c) && on(r, c - 1) && on(r, c + 1))) out.emplace_back(r, c);
  return out;
}

// O(B^2) all-pairs average symmetric surface distance.
inline double assd_reference(const BinaryMask& p, const BinaryMask& g, Spacing s = {}) {
  const auto bp = boundary_reference(p.pixels), bg = boundary_reference(g.pixels);
  auto directed = [&](const auto& from, const auto& to) {
    double sum = 0;
    for (auto [r, c] : from) {
      double best = std::numeric_limits<double>::infinity();
      for (auto [r2, c2] : to) {
        const double dr = double(r - r2) * s.row, dc = double(c - c2) * s.col;
        best = std::min(best, std::sqrt(dr * dr + dc * dc));
      }
      sum += best;
    }
    return sum / double(from.size());
  };
  return 0.5 * (directed(bp, bg) + directed(bg, bp));
}

}  // namespace rsa::testing
