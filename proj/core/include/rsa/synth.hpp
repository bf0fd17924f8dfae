#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>

#include "rsa/dataset.hpp"
#include "rsa/domain.hpp"

namespace rsa::synth {

namespace fs = std::filesystem;

struct SourceStyle {
  bool lesion_brighter = true;
  std::uint64_t texture_seed = 11;
};

// Applied to a clean source rendering: optional inversion, then gamma, then
// additive Gaussian noise (sigma in units of the [0,1] range), then clipping.
struct TargetStyle {
  bool invert = true;
  double gamma = 1.8;
  double noise_sigma = 0.05;
};

struct SynthConfig {
  int image_size = 64;
  int num_train_source = 400;
  int num_train_target = 400;
  int num_test_target = 100;  // also rendered in the source style as source-test
  std::pair<double, double> lesion_radius_range{4.0, 10.0};
  SourceStyle source_style{};
  TargetStyle target_style{};
  std::uint64_t rng_seed = 7;
};

// Throws std::invalid_argument on violated invariants.
void validate(const SynthConfig& cfg);

struct Lesion {
  double center_row = 0, center_col = 0;
  double semi_a = 0, semi_b = 0;  // pixels
  double angle = 0;               // radians
};

// One sampled anatomy rendered in both styles; the mask is shared.
struct Anatomy {
  Lesion lesion;
  Image2D source;
  Image2D target;
  BinaryMask mask;
};

Anatomy render_anatomy(const SynthConfig& cfg, std::uint64_t anatomy_seed, const std::string& id);

// Target style transform on a [0,1] source image (noise drawn from noise_seed).
Image2D apply_target_style(const Image2D& source, const TargetStyle& style, std::uint64_t noise_seed);

// Writes <out>/manifest.jsonl, <out>/synth_config.json and one sample
// directory per record. Ids: src-NNNN (source train), tgt-NNNN (target train),
// test-NNNN (test; the same id exists in both domains with one shared mask).
// Returns the manifest path.
fs::path generate_dataset(const SynthConfig& cfg, const fs::path& out, bool overwrite = false);

}  // namespace rsa::synth
