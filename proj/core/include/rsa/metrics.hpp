#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "rsa/dataset.hpp"
#include "rsa/domain.hpp"

namespace rsa::metrics {

// 2|P n G| / (|P| + |G|); both empty gives 1.
double dice(const BinaryMask& pred, const BinaryMask& gt);

class UndefinedSurface : public std::domain_error {
 public:
  UndefinedSurface() : std::domain_error("undefined surface distance") {}
};

// Boundary pixels of a mask under 4-connectivity erosion.
std::vector<std::pair<std::size_t, std::size_t>> surface_pixels(const BitGrid& mask);

// Average symmetric surface distance in mm: the mean of the two directed
// average nearest-boundary distances. Throws UndefinedSurface if either mask
// is empty.
double assd(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing_mm = {});

enum class StdConvention { population, sample };

struct ImageScore {
  std::string id;
  double dice = 0;                 // in [0,1]
  std::optional<double> assd_mm;   // missing when a surface is undefined
};

struct EvalReport {
  std::vector<ImageScore> per_image;
  double dice_mean = 0, dice_std = 0;  // percent
  double assd_mean = 0, assd_std = 0;  // mm, over images with a defined ASSD
  std::size_t count = 0;
  std::size_t assd_excluded = 0;
  std::vector<std::string> missing;    // ground-truth ids with no prediction
  StdConvention convention = StdConvention::population;

  // "77.83 ± 0.98" style cells.
  std::string dice_cell() const;
  std::string assd_cell() const;
  std::string table() const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

// Recomputes means and standard deviations from per_image.
void summarize(EvalReport& report);

std::string format_mean_std(double mean, double std, int decimals = 2);
// Inverse of format_mean_std; throws on malformed cells.
std::pair<double, double> parse_mean_std(const std::string& cell);

EvalReport evaluate(const std::map<std::string, BinaryMask>& predictions, const GroundTruth& truth,
                    StdConvention convention = StdConvention::population);

// Loads <dir>/<id>/mask.arr for every ground-truth id.
std::map<std::string, BinaryMask> load_predictions(const std::filesystem::path& dir);
void save_predictions(const std::filesystem::path& dir, const std::map<std::string, BinaryMask>& predictions);

struct ApproximationQuality {
  std::optional<double> quality_percent;  // undefined when nothing was accepted
  std::size_t quantity = 0;
};

// Mean Dice (percent) of accepted pseudo-labels against ground truth.
ApproximationQuality approximation_quality(const std::vector<std::pair<std::string, BinaryMask>>& accepted,
                                           const GroundTruth& truth);

}  // namespace rsa::metrics
