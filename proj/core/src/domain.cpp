#include "rsa/domain.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rsa {

std::string to_string(const Shape& s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
}

std::size_t EdgeMap::count() const {
  return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1}));
}

UncertaintyMap uncertainty_of(const NIGField& field) {
  UncertaintyMap u{RealGrid(field.gamma.rows(), field.gamma.cols())};
  for (std::size_t i = 0; i < u.pixels.size(); ++i) {
    u.pixels[i] = field.beta[i] / (field.omega[i] * (field.alpha[i] - 1.0));
  }
  return u;
}

void require_same_shape(Shape a, Shape b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + to_string(a) + " vs " +
                                to_string(b));
  }
}

std::string ValidationReport::summary() const {
  if (ok()) return "ok";
  std::ostringstream out;
  out << violations.size() << " violation(s)";
  for (const auto& v : violations) {
    out << "; " << v.message;
    if (v.row && v.col) out << " at (" << *v.row << "," << *v.col << ")";
  }
  return out.str();
}

namespace {

class Reporter {
 public:
  void add(std::string msg) { report_.violations.push_back({std::move(msg), {}, {}}); }
  void add_at(std::string msg, std::size_t index, Shape shape) {
    std::size_t r = shape.cols ? index / shape.cols : 0;
    std::size_t c = shape.cols ? index % shape.cols : 0;
    report_.violations.push_back({std::move(msg), r, c});
  }
  void merge(const ValidationReport& other, const std::string& prefix) {
    for (auto v : other.violations) {
      v.message = prefix + v.message;
      report_.violations.push_back(std::move(v));
    }
  }
  ValidationReport take() { return std::move(report_); }

 private:
  ValidationReport report_;
};

// Only the first offending pixel of each kind is reported.
template <typename T, typename Pred>
void first_bad(Reporter& rep, const Grid<T>& g, Pred bad, const std::string& msg) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (bad(g[i])) {
      rep.add_at(msg, i, g.shape());
      return;
    }
  }
}

void check_side(Reporter& rep, Shape s) {
  if (s.rows < kMinImageSide || s.cols < kMinImageSide) {
    rep.add("shape " + to_string(s) + " below minimum side " + std::to_string(kMinImageSide));
  }
}

void check_binary(Reporter& rep, const BitGrid& g) {
  first_bad(rep, g, [](std::uint8_t v) { return v > 1; }, "values must be exactly 0 or 1");
}

}  // namespace

ValidationReport validate(const Image2D& image) {
  Reporter rep;
  check_side(rep, image.shape());
  const auto [lo, hi] = image.value_range;
  if (!(std::isfinite(lo) && std::isfinite(hi) && lo < hi)) rep.add("value_range must satisfy lo < hi");
  first_bad(rep, image.pixels, [&](double v) { return !(v >= lo && v <= hi); },
            "pixel outside value_range");
  if (!(image.spacing_mm.row > 0.0) || !(image.spacing_mm.col > 0.0)) {
    rep.add("spacing components must be strictly positive");
  }
  return rep.take();
}

ValidationReport validate(const BinaryMask& mask) {
  Reporter rep;
  check_binary(rep, mask.pixels);
  return rep.take();
}

ValidationReport validate(const BinaryMask& mask, const Image2D& paired) {
  Reporter rep;
  check_binary(rep, mask.pixels);
  if (mask.shape() != paired.shape()) {
    rep.add("mask shape " + to_string(mask.shape()) + " does not match image shape " +
            to_string(paired.shape()));
  }
  return rep.take();
}

ValidationReport validate(const EdgeMap& edge) {
  Reporter rep;
  check_binary(rep, edge.pixels);
  if (!(edge.threshold > 0.0)) rep.add("edge threshold must be positive");
  return rep.take();
}

ValidationReport validate(const NIGField& field) {
  Reporter rep;
  const Shape s = field.gamma.shape();
  if (field.omega.shape() != s || field.alpha.shape() != s || field.beta.shape() != s) {
    rep.add("NIG parameter maps must share one shape");
    return rep.take();
  }
  first_bad(rep, field.gamma, [](double v) { return !std::isfinite(v); }, "gamma must be finite");
  first_bad(rep, field.omega, [](double v) { return !(v > 1.0) || !std::isfinite(v); },
            "omega must exceed 1");
  first_bad(rep, field.alpha, [](double v) { return !(v > 1.0) || !std::isfinite(v); },
            "alpha must exceed 1");
  first_bad(rep, field.beta, [](double v) { return !(v > 0.0) || !std::isfinite(v); },
            "beta must be positive");
  return rep.take();
}

ValidationReport validate(const UncertaintyMap& u) {
  Reporter rep;
  first_bad(rep, u.pixels, [](double v) { return !std::isfinite(v) || v < 0.0; },
            "uncertainty must be finite and non-negative");
  return rep.take();
}

ValidationReport validate(const Generation& g, int num_edges, int samples_per_edge) {
  Reporter rep;
  if (g.edge_index < 0 || g.edge_index >= num_edges) rep.add("edge_index out of range");
  if (g.sample_index < 0 || g.sample_index >= samples_per_edge) rep.add("sample_index out of range");
  const Shape s = g.image.shape();
  if (g.raw_mask.shape() != s || g.refined_mask.shape() != s || g.uncertainty.shape() != s ||
      g.edge.shape() != s) {
    rep.add("generation arrays must share one shape");
  }
  rep.merge(validate(g.image), "image: ");
  rep.merge(validate(g.raw_mask), "raw_mask: ");
  rep.merge(validate(g.refined_mask), "refined_mask: ");
  rep.merge(validate(g.uncertainty), "uncertainty: ");
  rep.merge(validate(g.edge), "edge: ");
  return rep.take();
}

ValidationReport validate(const ApproximationResult& r, double t_r) {
  Reporter rep;
  if (!(r.consistency >= 0.0 && r.consistency <= 1.0)) rep.add("consistency must lie in [0,1]");
  if (r.accepted) {
    if (!r.generation) rep.add("accepted result must carry a generation");
    if (r.consistency > t_r) rep.add("accepted consistency exceeds t_r");
    if (r.chosen_edge_index < 0 || r.chosen_sample_index < 0) rep.add("accepted result lacks indices");
  } else if (r.generation || r.chosen_edge_index != -1 || r.chosen_sample_index != -1) {
    rep.add("rejected result must not carry a generation");
  }
  return rep.take();
}

}  // namespace rsa
