#include "rsa/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <stdexcept>

#include "rsa/array_io.hpp"
#include "rsa/seed.hpp"

namespace rsa::synth {

namespace {

constexpr double kBackground = 0.05;
constexpr double kSkull = 0.65;
constexpr double kBrain = 0.35;
constexpr double kNerve = 0.55;
constexpr double kLesionBright = 0.85;
constexpr double kLesionDark = 0.15;

struct Ellipse {
  double cr, cc, a, b, angle;

  // Pixel (r, c) is inside when its centre satisfies the ellipse equation.
  bool contains(std::size_t r, std::size_t c) const {
    const double dr = (static_cast<double>(r) + 0.5) - cr;
    const double dc = (static_cast<double>(c) + 0.5) - cc;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double u = dc * ca + dr * sa;
    const double v = -dc * sa + dr * ca;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
  double extent() const { return std::max(a, b); }
};

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  double normal(double sigma) { return std::normal_distribution<double>(0.0, sigma)(gen_); }

 private:
  std::mt19937_64 gen_;
};

// Smooth low-frequency texture in roughly [-1, 1].
struct Texture {
  std::array<double, 4> fr{}, fc{}, phase{}, amp{};

  explicit Texture(Sampler& s) {
    for (int k = 0; k < 4; ++k) {
      fr[k] = s.uniform(0.02, 0.12);
      fc[k] = s.uniform(0.02, 0.12);
      phase[k] = s.uniform(0.0, 2.0 * std::numbers::pi);
      amp[k] = s.uniform(0.15, 0.35);
    }
  }
  double at(std::size_t r, std::size_t c) const {
    double v = 0.0;
    for (int k = 0; k < 4; ++k) {
      v += amp[k] * std::sin(2.0 * std::numbers::pi * (fr[k] * r + fc[k] * c) + phase[k]);
    }
    return v;
  }
};

}  // namespace

void validate(const SynthConfig& cfg) {
  if (cfg.image_size < 32) throw std::invalid_argument("image_size must be at least 32");
  const auto [rmin, rmax] = cfg.lesion_radius_range;
  if (!(rmin >= 3.0 && rmax <= cfg.image_size / 3.0 && rmin <= rmax)) {
    throw std::invalid_argument("lesion_radius_range must lie within [3, image_size/3]");
  }
  if (cfg.num_train_source < 0 || cfg.num_train_target < 0 || cfg.num_test_target < 0) {
    throw std::invalid_argument("sample counts must be non-negative");
  }
  if (!(cfg.target_style.gamma > 0.0) || cfg.target_style.noise_sigma < 0.0) {
    throw std::invalid_argument("target style needs gamma > 0 and noise_sigma >= 0");
  }
}

Image2D apply_target_style(const Image2D& source, const TargetStyle& style, std::uint64_t noise_seed) {
  Sampler noise(noise_seed);
  Image2D out = source;
  for (auto& v : out.pixels) {
    double x = style.invert ? 1.0 - v : v;
    x = std::pow(std::clamp(x, 0.0, 1.0), style.gamma);
    if (style.noise_sigma > 0.0) x += noise.normal(style.noise_sigma);
    v = std::clamp(x, 0.0, 1.0);
  }
  return out;
}

Anatomy render_anatomy(const SynthConfig& cfg, std::uint64_t anatomy_seed, const std::string& id) {
  validate(cfg);
  Sampler s(anatomy_seed);
  const auto n = static_cast<std::size_t>(cfg.image_size);
  const double size = cfg.image_size;
  const double scale = size / 64.0;

  const Ellipse head{size / 2 + s.uniform(-2, 2) * scale, size / 2 + s.uniform(-2, 2) * scale,
                     size * s.uniform(0.40, 0.46), size * s.uniform(0.36, 0.43), s.uniform(-0.3, 0.3)};
  const Ellipse brain{head.cr, head.cc, head.a * 0.88, head.b * 0.86, head.angle};

  std::vector<Ellipse> nerves;
  const int num_nerves = s.integer(1, 2);
  for (int k = 0; k < num_nerves; ++k) {
    const double ang = s.uniform(0, 2 * std::numbers::pi);
    const double dist = s.uniform(0.2, 0.5);
    nerves.push_back({brain.cr + std::sin(ang) * dist * brain.b, brain.cc + std::cos(ang) * dist * brain.a,
                      s.uniform(6, 10) * scale, s.uniform(1.2, 2.0) * scale, s.uniform(0, std::numbers::pi)});
  }

  const auto [rmin, rmax] = cfg.lesion_radius_range;
  const double a = s.uniform(rmin, rmax);
  const double b = s.uniform(std::max(rmin, a / 1.5), std::min(rmax, a * 1.5));
  Ellipse lesion{0, 0, a, b, s.uniform(0, std::numbers::pi)};
  // Keep the lesion well inside the brain so the mask is never clipped.
  for (int attempt = 0;; ++attempt) {
    const double ang = s.uniform(0, 2 * std::numbers::pi);
    const double dist = s.uniform(0.0, 1.0);
    const double reach_r = std::max(0.0, brain.b - lesion.extent() - 1.0);
    const double reach_c = std::max(0.0, brain.a - lesion.extent() - 1.0);
    lesion.cr = brain.cr + std::sin(ang) * dist * reach_r;
    lesion.cc = brain.cc + std::cos(ang) * dist * reach_c;
    const bool inside = lesion.cr - lesion.extent() > 1 && lesion.cr + lesion.extent() < size - 1 &&
                        lesion.cc - lesion.extent() > 1 && lesion.cc + lesion.extent() < size - 1;
    if (inside || attempt > 100) break;
  }

  Sampler tex_rng(derive_seed(cfg.source_style.texture_seed, {anatomy_seed}));
  const Texture texture(tex_rng);
  const double lesion_level = cfg.source_style.lesion_brighter ? kLesionBright : kLesionDark;

  Image2D src{id, RealGrid(n, n, kBackground), {0.0, 1.0}, {1.0, 1.0}};
  BinaryMask mask{id, BitGrid(n, n, 0)};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double t = texture.at(r, c);
      double v = kBackground;
      if (head.contains(r, c)) v = kSkull + 0.03 * t;
      if (brain.contains(r, c)) v = kBrain + 0.05 * t;
      for (const auto& nv : nerves) {
        if (brain.contains(r, c) && nv.contains(r, c)) v = kNerve + 0.03 * t;
      }
      if (lesion.contains(r, c)) {
        v = lesion_level + 0.04 * t;
        mask.pixels(r, c) = 1;
      }
      src.pixels(r, c) = std::clamp(v, 0.0, 1.0);
    }
  }

  Anatomy out;
  out.lesion = {lesion.cr, lesion.cc, lesion.a, lesion.b, lesion.angle};
  out.target = apply_target_style(src, cfg.target_style, derive_seed(anatomy_seed, {0x7a7}));
  out.source = std::move(src);
  out.mask = std::move(mask);
  return out;
}

fs::path generate_dataset(const SynthConfig& cfg, const fs::path& out, bool overwrite) {
  validate(cfg);
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!overwrite) throw std::runtime_error("output directory " + out.string() + " exists (use overwrite)");
    fs::remove_all(out);
  }
  fs::create_directories(out);

  auto name = [](const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%04d", prefix, i);
    return std::string(buf);
  };

  std::vector<ManifestRecord> records;
  auto emit = [&](const ManifestRecord& rec, const Image2D& image, const BinaryMask& mask) {
    io::save_sample(sample_dir(out, rec), image, &mask, rec.domain == Domain::target);
    records.push_back(rec);
  };

  for (int i = 0; i < cfg.num_train_source; ++i) {
    const auto id = name("src", i);
    const auto a = render_anatomy(cfg, derive_seed(cfg.rng_seed, {1, static_cast<std::uint64_t>(i)}), id);
    emit({id, Split::train, Domain::source}, a.source, a.mask);
  }
  for (int i = 0; i < cfg.num_train_target; ++i) {
    const auto id = name("tgt", i);
    const auto a = render_anatomy(cfg, derive_seed(cfg.rng_seed, {2, static_cast<std::uint64_t>(i)}), id);
    emit({id, Split::train, Domain::target}, a.target, a.mask);
  }
  for (int i = 0; i < cfg.num_test_target; ++i) {
    const auto id = name("test", i);
    const auto a = render_anatomy(cfg, derive_seed(cfg.rng_seed, {3, static_cast<std::uint64_t>(i)}), id);
    emit({id, Split::test, Domain::source}, a.source, a.mask);
    emit({id, Split::test, Domain::target}, a.target, a.mask);
  }

  const fs::path manifest = out / "manifest.jsonl";
  write_manifest(manifest, records);
  const nlohmann::json meta = {
      {"image_size", cfg.image_size},
      {"num_train_source", cfg.num_train_source},
      {"num_train_target", cfg.num_train_target},
      {"num_test_target", cfg.num_test_target},
      {"lesion_radius_range", {cfg.lesion_radius_range.first, cfg.lesion_radius_range.second}},
      {"source_style", {{"lesion_brighter", cfg.source_style.lesion_brighter},
                        {"texture_seed", cfg.source_style.texture_seed}}},
      {"target_style", {{"invert", cfg.target_style.invert},
                        {"gamma", cfg.target_style.gamma},
                        {"noise_sigma", cfg.target_style.noise_sigma}}},
      {"rng_seed", cfg.rng_seed}};
  io::write_text(out / "synth_config.json", meta.dump(2) + "\n");
  return manifest;
}

}  // namespace rsa::synth
