#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "rsa/dataset.hpp"
#include "rsa/domain.hpp"

namespace rsa::seg {

namespace fs = std::filesystem;

struct SegNetConfig {
  int base_width = 32;
  int levels = 4;
  int groups = 8;

  nlohmann::json to_json() const;
  static SegNetConfig from_json(const nlohmann::json& j);
};

// Offset keeping omega and alpha strictly above 1 and beta above 0 even when
// softplus underflows in single precision.
inline constexpr double kEvidenceFloor = 1e-4;

struct NigOutput {
  torch::Tensor gamma, omega, alpha, beta;  // each [B,1,H,W]
};

// omega = 1 + softplus + floor, alpha = 1 + softplus + floor,
// beta = softplus + floor, gamma unconstrained.
NigOutput nig_transform(const torch::Tensor& raw);

class SegNetImpl : public torch::nn::Module {
 public:
  explicit SegNetImpl(const SegNetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);  // raw [B,4,H,W]

 private:
  SegNetConfig cfg_;
  torch::nn::ModuleList enc{nullptr}, dec{nullptr}, ups{nullptr};
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(SegNet);

struct SegModelConfig {
  SegNetConfig net{};
  double lambda_reg = 0.01;
  double loss_mix = 1.0;
  double mask_threshold = 0.5;

  nlohmann::json to_json() const;
  static SegModelConfig from_json(const nlohmann::json& j);
};

class SegModel {
 public:
  explicit SegModel(const SegModelConfig& cfg);

  const SegModelConfig& config() const { return cfg_; }
  SegNet& net() { return net_; }
  const SegNet& net() const { return net_; }
  NigOutput forward(const torch::Tensor& x);

  SegModel clone() const;
  void save(const fs::path& dir, const std::string& config_hash) const;
  static SegModel load(const fs::path& dir, std::string* config_hash = nullptr);

 private:
  SegModelConfig cfg_;
  SegNet net_{nullptr};
};

struct Prediction {
  NIGField field;
  BinaryMask mask;
  UncertaintyMap uncertainty;
};

// Binarises gamma with a strict `>` and derives u from the field.
Prediction prediction_from_field(NIGField field, double mask_threshold, const std::string& id);

Prediction predict(SegModel& model, const Image2D& image);
std::vector<Prediction> predict_batch(SegModel& model, std::span<const Image2D> images);

// Cross-entropy (two classes, mean over pixels) plus the smoothed Dice term
// 1 - (2*sum(y*p) + 1) / (sum(y) + sum(p) + 1). Probabilities are clamped to
// [eps, 1 - eps] for the log. Batched form averages per-image values.
inline constexpr double kProbClamp = 1e-7;
double seg_loss(const RealGrid& probs, const BinaryMask& target);
torch::Tensor seg_loss(const torch::Tensor& probs, const torch::Tensor& target);

// Mean NIG negative log-likelihood plus lambda * mean(|y - gamma| * (2 omega + alpha)).
double nig_loss(const NIGField& field, const BinaryMask& target, double lambda_reg);
torch::Tensor nig_loss(const NigOutput& out, const torch::Tensor& target, double lambda_reg);
torch::Tensor nig_nll(const NigOutput& out, const torch::Tensor& target);  // per pixel
torch::Tensor nig_regularizer(const NigOutput& out, const torch::Tensor& target);  // per pixel

// L_seg(clamp(gamma)) + w * L_un.
torch::Tensor total_loss(const SegModelConfig& cfg, const NigOutput& out, const torch::Tensor& target);

struct TrainPair {
  Image2D image;
  BinaryMask mask;
};

struct SegTrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double learning_rate = 1e-4;  // Adam
  std::uint64_t seed = 0;
  fs::path checkpoint_dir;      // when set, saved after every finite epoch
  std::string config_hash;
  std::function<void(const std::string&)> log;
};

struct SegTrainReport {
  std::vector<double> epoch_loss;
  double heldout_dice = 0;  // mean Dice on the held-out pairs, in [0,1]
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Supervised training (also used for fine-tuning an existing model).
void fit(SegModel& model, const std::vector<TrainPair>& pairs, const SegTrainConfig& cfg,
         SegTrainReport* report = nullptr);

SegModel train_segmenter(const SegModelConfig& model_cfg, const std::vector<TrainPair>& train,
                         const std::vector<TrainPair>& heldout, const SegTrainConfig& cfg,
                         SegTrainReport* report = nullptr);

std::vector<TrainPair> to_pairs(const std::vector<LabeledSample>& samples);

}  // namespace rsa::seg
