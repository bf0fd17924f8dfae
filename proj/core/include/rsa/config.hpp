#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "rsa/adaptation.hpp"
#include "rsa/diffusion.hpp"
#include "rsa/edges.hpp"
#include "rsa/metrics.hpp"
#include "rsa/segmenter.hpp"
#include "rsa/selector.hpp"
#include "rsa/synth.hpp"

namespace rsa {

struct DataSection {
  synth::SynthConfig synth{};
  std::string ingest_manifest;  // non-empty: use an existing dataset instead of synthesizing
};

struct TranslatorSection {
  diffusion::TranslatorConfig model{};
  diffusion::TrainTranslatorConfig train{};
  std::vector<double> annotation_candidates{30, 40, 50, 60, 70, 80};
  double annotation_tolerance_px = 2.0;
};

struct SegmenterSection {
  seg::SegModelConfig model{};
  seg::SegTrainConfig train{};
  int heldout = 40;  // source-train images kept for the held-out Dice
};

struct SelectorSection {
  select::SelectorConfig selector{};
  edges::ThresholdSweep sweep{};
  edges::CannyOptions canny{};
  int ddim_steps = 50;
};

struct AdaptSection {
  adapt::AdaptConfig centralized{};  // mode = centralized
  adapt::AdaptConfig batch_based{};  // mode = batch_based
};

struct EvalSection {
  metrics::StdConvention convention = metrics::StdConvention::population;
  bool target_only_baseline = true;  // supervised on target labels, for reference only
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  bool deterministic = true;
  DataSection data{};
  TranslatorSection translator{};
  SegmenterSection segmenter{};
  SelectorSection selector{};
  AdaptSection adapt{};
  EvalSection eval{};

  // Desk-scale defaults (32x32 images, narrow networks; see README).
  static ExperimentConfig desk();
  // Full-size settings (320x320, 400 + 100 translator epochs). Documented
  // only; not expected to run on a workstation.
  static ExperimentConfig full_scale();

  nlohmann::json to_json() const;
  // Missing keys keep the desk defaults; unknown keys throw ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);

  // Copies the derived values (sweep n from selector n, batch-based epochs...)
  // into place and validates every section.
  void finalize();
  void validate() const;

  // Stage hashes. Each covers the sections the stage depends on, so changing
  // only selector settings keeps the data, translator and segmenter hashes.
  std::string data_hash() const;
  std::string translator_hash() const;
  std::string segmenter_hash() const;
  std::string approximation_hash() const;
  std::string adaptation_hash() const;
  std::string config_hash() const;  // whole document
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 16 hex digits of FNV-1a over the canonical JSON dump.
std::string digest(const nlohmann::json& j);

}  // namespace rsa
