#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rsa/dataset.hpp"
#include "rsa/diffusion.hpp"
#include "rsa/segmenter.hpp"
#include "rsa/selector.hpp"

// Nothing in this module accepts a Dataset or GroundTruth: target data
// arrives as an UnlabeledView or as pseudo-labelled approximation records.
namespace rsa::adapt {

namespace fs = std::filesystem;

enum class Mode { batch_based, centralized };
Mode parse_mode(const std::string& s);
std::string to_string(Mode m);

struct AdaptConfig {
  Mode mode = Mode::centralized;
  int epochs = 20;  // forced to 1 for batch_based
  int batch_size = 8;
  double learning_rate = 1e-4;
  bool include_target_pairs = true;  // also train on (x_t, pseudo-label)
  std::uint64_t seed = 0;

  AdaptConfig normalized() const;
  void validate() const;
};

// One line of the approximation manifest. Paths are relative to the manifest.
struct ApproximationRecord {
  std::string target_id;
  bool accepted = false;
  int edge_index = -1;
  double threshold = 0;
  int sample_index = -1;
  double R = 1;
  std::string image_path;         // generated x_ij
  std::string pseudo_label_path;  // refined pseudo-label
  std::string target_path;        // x_t

  bool operator==(const ApproximationRecord&) const = default;
};

void write_approximation_manifest(const fs::path& path, const std::vector<ApproximationRecord>& records);
std::vector<ApproximationRecord> read_approximation_manifest(const fs::path& path);

// Writes the chosen generation, its pseudo-label and the target image under
// <root>/<target_id>/ and returns the manifest record.
ApproximationRecord persist(const ApproximationResult& result, const Image2D& target, const fs::path& root);

struct ApproximationPair {
  std::string target_id;
  int edge_index = -1;
  int sample_index = -1;
  Image2D generated;
  BinaryMask pseudo_label;
  Image2D target;
};

// Accepted records only, deduplicated by (target_id, edge_index, sample_index).
std::vector<ApproximationPair> load_accepted(const fs::path& manifest_path);
std::vector<ApproximationPair> accepted_pairs(const std::vector<ApproximationResult>& results,
                                              const UnlabeledView& targets);
std::vector<ApproximationPair> deduplicate(std::vector<ApproximationPair> pairs);

std::vector<seg::TrainPair> training_pairs(const std::vector<ApproximationPair>& pairs, bool include_target_pairs);

class NothingToAdapt : public std::runtime_error {
 public:
  NothingToAdapt() : std::runtime_error("nothing to adapt: no accepted approximations") {}
};

// Multi-epoch supervised fine-tuning on every accepted pair, using the
// segmenter's own training objective. The input model is left untouched.
seg::SegModel adapt_centralized(const seg::SegModel& model, const std::vector<ApproximationPair>& pairs,
                                const AdaptConfig& cfg, std::function<void(const std::string&)> log = {});
seg::SegModel adapt_centralized(const seg::SegModel& model, const fs::path& approximation_manifest,
                                const AdaptConfig& cfg, std::function<void(const std::string&)> log = {});

struct BatchBasedResult {
  seg::SegModel model;
  std::map<std::string, BinaryMask> predictions;
  std::vector<ApproximationResult> approximations;
  int update_steps = 0;
};

// For each batch of the stream: approximate every image, take one optimizer
// step on the accepted pairs (skipped when none), then predict the batch with
// the updated weights. Every batch is seen once, in stream order.
BatchBasedResult adapt_batch_based(const seg::SegModel& model, const UnlabeledView& stream,
                                   diffusion::TranslatorModel& translator, const select::SelectorConfig& selector,
                                   const select::ApproximateOptions& approx, const AdaptConfig& cfg,
                                   std::function<void(const std::string&)> log = {});

// Predicted masks keyed by image id.
std::map<std::string, BinaryMask> predict_masks(seg::SegModel& model, const UnlabeledView& images);

}  // namespace rsa::adapt
