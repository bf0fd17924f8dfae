#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsa {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

// Dense row-major 2D array. Value semantics; no aliasing between copies.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{})
      : shape_{rows, cols}, data_(rows * cols, fill) {}
  Grid(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw std::invalid_argument("grid data size " + std::to_string(data_.size()) +
                                  " does not match shape " + to_string(shape_));
    }
  }

  Shape shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  bool operator==(const Grid&) const = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

using RealGrid = Grid<double>;
using BitGrid = Grid<std::uint8_t>;

struct ValueRange {
  double lo = 0.0;
  double hi = 1.0;
  bool operator==(const ValueRange&) const = default;
};

struct Spacing {
  double row = 1.0;
  double col = 1.0;
  bool operator==(const Spacing&) const = default;
};

struct Image2D {
  std::string id;
  RealGrid pixels;
  ValueRange value_range{};
  Spacing spacing_mm{};

  Shape shape() const { return pixels.shape(); }
  bool operator==(const Image2D&) const = default;
};

struct BinaryMask {
  std::string id;
  BitGrid pixels;

  Shape shape() const { return pixels.shape(); }
  std::size_t count() const;
  bool operator==(const BinaryMask&) const = default;
};

struct EdgeMap {
  BitGrid pixels;
  double threshold = 0.0;  // Canny high threshold on the 0-255 scale

  Shape shape() const { return pixels.shape(); }
  std::size_t count() const;
  bool operator==(const EdgeMap&) const = default;
};

// Per-pixel Normal-Inverse-Gamma parameters (gamma, omega, alpha, beta).
struct NIGField {
  RealGrid gamma;
  RealGrid omega;
  RealGrid alpha;
  RealGrid beta;

  Shape shape() const { return gamma.shape(); }
  bool operator==(const NIGField&) const = default;
};

struct UncertaintyMap {
  RealGrid pixels;

  Shape shape() const { return pixels.shape(); }
  bool operator==(const UncertaintyMap&) const = default;
};

// u = beta / (omega * (alpha - 1)), elementwise.
UncertaintyMap uncertainty_of(const NIGField& field);

// One translated image x_ij together with its pseudo-label bookkeeping.
struct Generation {
  int edge_index = 0;
  int sample_index = 0;
  std::uint64_t seed = 0;
  Image2D image;
  BinaryMask raw_mask;
  BinaryMask refined_mask;
  UncertaintyMap uncertainty;
  EdgeMap edge;

  bool operator==(const Generation&) const = default;
};

using GenerationGrid = std::vector<std::vector<Generation>>;  // [edge][sample]

struct ApproximationResult {
  std::string target_id;
  bool accepted = false;
  int chosen_edge_index = -1;
  int chosen_sample_index = -1;
  double consistency = 1.0;  // R of the chosen edge, or the best rejected R
  std::optional<Generation> generation;

  // Provenance.
  std::vector<double> thresholds;
  std::vector<double> edge_consistency;
  std::vector<std::vector<std::uint64_t>> seeds;
  std::string sample_rule = "majority-vote/uncertainty/index";

  bool operator==(const ApproximationResult&) const = default;
};

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string message;
  std::optional<std::size_t> row;
  std::optional<std::size_t> col;

  bool operator==(const Violation&) const = default;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  std::string summary() const;
  bool operator==(const ValidationReport&) const = default;
};

constexpr std::size_t kMinImageSide = 8;

ValidationReport validate(const Image2D& image);
ValidationReport validate(const BinaryMask& mask);
ValidationReport validate(const BinaryMask& mask, const Image2D& paired);
ValidationReport validate(const EdgeMap& edge);
ValidationReport validate(const NIGField& field);
ValidationReport validate(const UncertaintyMap& u);
ValidationReport validate(const Generation& g, int num_edges, int samples_per_edge);
ValidationReport validate(const ApproximationResult& r, double t_r);

// Throws std::invalid_argument carrying the report summary when validation fails.
template <typename T, typename... Args>
const T& checked(const T& entity, Args&&... args) {
  auto report = validate(entity, std::forward<Args>(args)...);
  if (!report.ok()) throw std::invalid_argument(report.summary());
  return entity;
}

void require_same_shape(Shape a, Shape b, const char* what);

}  // namespace rsa
