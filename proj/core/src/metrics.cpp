#include "rsa/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "rsa/array_io.hpp"

namespace rsa::metrics {

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred.shape(), gt.shape(), "dice");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
    p += pred.pixels[i];
    g += gt.pixels[i];
    both += pred.pixels[i] & gt.pixels[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::pair<std::size_t, std::size_t>> surface_pixels(const BitGrid& mask) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t rows = mask.rows(), cols = mask.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mask(r, c)) continue;
      const bool interior = r > 0 && c > 0 && r + 1 < rows && c + 1 < cols && mask(r - 1, c) &&
                            mask(r + 1, c) && mask(r, c - 1) && mask(r, c + 1);
      if (!interior) out.emplace_back(r, c);
    }
  }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Squared-distance transform of a sampled function along one axis
// (lower envelope of parabolas).
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const std::size_t n = f.size();
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] < kInf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!(f[q] < kInf)) continue;
    const double qd = static_cast<double>(q);
    auto intersect = [&](std::size_t p) {
      const double pd = static_cast<double>(p);
      return ((f[q] + qd * qd) - (f[p] + pd * pd)) / (2.0 * (qd - pd));
    };
    double s = intersect(v[k]);
    while (s <= z[k]) s = intersect(v[--k]);  // z[0] = -inf stops the walk
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double qd = static_cast<double>(q);
    while (z[k + 1] < qd) ++k;
    const double diff = qd - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

// Exact Euclidean distance (mm) from every pixel to the nearest set pixel of
// `sites`, with per-axis spacing.
RealGrid distance_to(const BitGrid& sites, Spacing sp) {
  const std::size_t rows = sites.rows(), cols = sites.cols();
  RealGrid g(rows, cols);
  const double sr2 = sp.row * sp.row, sc2 = sp.col * sp.col;
  std::vector<double> f, d;
  // Columns (row axis).
  f.resize(rows);
  d.resize(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t r = 0; r < rows; ++r) f[r] = sites(r, c) ? 0.0 : kInf;
    edt_1d(f, d);
    for (std::size_t r = 0; r < rows; ++r) g(r, c) = d[r] * sr2;
  }
  // Rows (column axis), in units of the column spacing.
  f.resize(cols);
  d.resize(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) f[c] = g(r, c) / sc2;
    edt_1d(f, d);
    for (std::size_t c = 0; c < cols; ++c) g(r, c) = std::sqrt(d[c] * sc2);
  }
  return g;
}

}  // namespace

double assd(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing_mm) {
  require_same_shape(pred.shape(), gt.shape(), "assd");
  const auto sp = surface_pixels(pred.pixels);
  const auto sg = surface_pixels(gt.pixels);
  if (sp.empty() || sg.empty()) throw UndefinedSurface();

  auto as_grid = [&](const std::vector<std::pair<std::size_t, std::size_t>>& pts) {
    BitGrid g(pred.pixels.rows(), pred.pixels.cols(), 0);
    for (auto [r, c] : pts) g(r, c) = 1;
    return g;
  };
  const RealGrid to_g = distance_to(as_grid(sg), spacing_mm);
  const RealGrid to_p = distance_to(as_grid(sp), spacing_mm);
  double sum_pg = 0.0, sum_gp = 0.0;
  for (auto [r, c] : sp) sum_pg += to_g(r, c);
  for (auto [r, c] : sg) sum_gp += to_p(r, c);
  return 0.5 * (sum_pg / static_cast<double>(sp.size()) + sum_gp / static_cast<double>(sg.size()));
}

// ---------------------------------------------------------------------------

std::string format_mean_std(double mean, double std, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", decimals, mean, decimals, std);
  return buf;
}

std::pair<double, double> parse_mean_std(const std::string& cell) {
  const std::string sep = " ± ";
  const auto pos = cell.find(sep);
  if (pos == std::string::npos) throw std::invalid_argument("malformed mean/std cell '" + cell + "'");
  std::size_t used_a = 0, used_b = 0;
  const std::string a = cell.substr(0, pos), b = cell.substr(pos + sep.size());
  const double mean = std::stod(a, &used_a);
  const double sd = std::stod(b, &used_b);
  if (used_a != a.size() || used_b != b.size()) {
    throw std::invalid_argument("malformed mean/std cell '" + cell + "'");
  }
  return {mean, sd};
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v, StdConvention conv) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double denom = conv == StdConvention::sample && v.size() > 1 ? static_cast<double>(v.size() - 1)
                                                                     : static_cast<double>(v.size());
  return {mean, std::sqrt(ss / denom)};
}

}  // namespace

void summarize(EvalReport& report) {
  std::vector<double> dices, assds;
  for (const auto& s : report.per_image) {
    dices.push_back(100.0 * s.dice);
    if (s.assd_mm) assds.push_back(*s.assd_mm);
  }
  report.count = report.per_image.size();
  report.assd_excluded = report.count - assds.size();
  std::tie(report.dice_mean, report.dice_std) = mean_std(dices, report.convention);
  std::tie(report.assd_mean, report.assd_std) = mean_std(assds, report.convention);
}

std::string EvalReport::dice_cell() const { return format_mean_std(dice_mean, dice_std); }
// Undefined when every image was excluded (empty prediction or truth).
std::string EvalReport::assd_cell() const {
  return std::isfinite(assd_mean) ? format_mean_std(assd_mean, assd_std) : "n/a";
}

std::string EvalReport::table() const {
  std::ostringstream out;
  out << "| Images | Dice (%) | ASSD (mm) | ASSD excluded | Missing |\n";
  out << "|---|---|---|---|---|\n";
  out << "| " << count << " | " << dice_cell() << " | " << assd_cell() << " | " << assd_excluded << " | "
      << missing.size() << " |\n";
  return out.str();
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : per_image) {
    rows.push_back({{"id", s.id}, {"dice", s.dice}, {"assd_mm", s.assd_mm ? nlohmann::json(*s.assd_mm) : nlohmann::json(nullptr)}});
  }
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"per_image", rows},
          {"dice_mean", num(dice_mean)},
          {"dice_std", num(dice_std)},
          {"assd_mean", num(assd_mean)},
          {"assd_std", num(assd_std)},
          {"count", count},
          {"assd_excluded", assd_excluded},
          {"missing", missing},
          {"std_convention", convention == StdConvention::population ? "population" : "sample"},
          {"dice_cell", dice_cell()},
          {"assd_cell", assd_cell()}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  for (const auto& row : j.at("per_image")) {
    ImageScore s{row.at("id").get<std::string>(), row.at("dice").get<double>(), std::nullopt};
    if (!row.at("assd_mm").is_null()) s.assd_mm = row.at("assd_mm").get<double>();
    r.per_image.push_back(std::move(s));
  }
  r.missing = j.value("missing", std::vector<std::string>{});
  r.convention = j.value("std_convention", "population") == "sample" ? StdConvention::sample
                                                                      : StdConvention::population;
  summarize(r);
  return r;
}

EvalReport evaluate(const std::map<std::string, BinaryMask>& predictions, const GroundTruth& truth,
                    StdConvention convention) {
  EvalReport report;
  report.convention = convention;
  for (const auto& [id, sample] : truth.samples()) {
    auto it = predictions.find(id);
    if (it == predictions.end()) {
      report.missing.push_back(id);
      continue;
    }
    ImageScore s{id, dice(it->second, sample.mask), std::nullopt};
    try {
      s.assd_mm = assd(it->second, sample.mask, sample.image.spacing_mm);
    } catch (const UndefinedSurface&) {
    }
    report.per_image.push_back(std::move(s));
  }
  summarize(report);
  return report;
}

std::map<std::string, BinaryMask> load_predictions(const std::filesystem::path& dir) {
  std::map<std::string, BinaryMask> out;
  if (!std::filesystem::exists(dir)) throw std::runtime_error("missing predictions directory " + dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_directory() || !std::filesystem::exists(entry.path() / "mask.arr")) continue;
    const std::string id = entry.path().filename().string();
    out.emplace(id, BinaryMask{id, io::read_bit_array(entry.path() / "mask.arr")});
  }
  return out;
}

void save_predictions(const std::filesystem::path& dir, const std::map<std::string, BinaryMask>& predictions) {
  for (const auto& [id, mask] : predictions) io::save(dir / id, mask);
}

ApproximationQuality approximation_quality(const std::vector<std::pair<std::string, BinaryMask>>& accepted,
                                           const GroundTruth& truth) {
  ApproximationQuality q;
  q.quantity = accepted.size();
  if (accepted.empty()) return q;
  double sum = 0.0;
  for (const auto& [id, mask] : accepted) sum += dice(mask, truth.mask(id));
  q.quality_percent = 100.0 * sum / static_cast<double>(accepted.size());
  return q;
}

}  // namespace rsa::metrics
