#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "rsa/domain.hpp"

namespace rsa::diffusion {

namespace fs = std::filesystem;

// Linear variance schedule and its cumulative products.
struct DiffusionSchedule {
  int num_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  static DiffusionSchedule linear(int num_steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2);
  void validate() const;
};

// x_t = sqrt(abar_t) * x + sqrt(1 - abar_t) * noise. Throws on t out of range.
RealGrid forward_diffuse(const RealGrid& x, int t, const RealGrid& noise, const DiffusionSchedule& schedule);

// Batched form: t is an int64 tensor [B]; alpha_bars a float tensor [T].
torch::Tensor forward_diffuse(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& noise,
                              const torch::Tensor& alpha_bars);

// ---------------------------------------------------------------------------
// Networks

struct UNetConfig {
  int base_width = 64;
  std::vector<int> channel_mult{1, 2, 2};  // one entry per resolution level
  int groups = 8;

  int width(std::size_t level) const { return base_width * channel_mult.at(level); }
  int time_dim() const { return base_width * 2; }
  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
};

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_ch, int out_ch, int time_dim, int groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

// Encoder half shared by the noise predictor and its control copy.
class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const UNetConfig& cfg);

  torch::Tensor embed_time(const torch::Tensor& t);
  // Returns one feature map per level followed by the middle-block output.
  std::vector<torch::Tensor> forward(const torch::Tensor& h_in, const torch::Tensor& emb);
  torch::Tensor stem(const torch::Tensor& x) { return in_conv->forward(x); }

 private:
  UNetConfig cfg_;
  torch::nn::Conv2d in_conv{nullptr};
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::ModuleList downs{nullptr};
  ResBlock mid{nullptr};
};
TORCH_MODULE(Encoder);

// Unconditional noise predictor eps_f(x_t, t), optionally taking additive
// residuals for every encoder level and the middle block.
class NoisePredictorImpl : public torch::nn::Module {
 public:
  explicit NoisePredictorImpl(const UNetConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t,
                        const std::vector<torch::Tensor>* residuals = nullptr);
  Encoder& encoder() { return encoder_; }

 private:
  UNetConfig cfg_;
  Encoder encoder_{nullptr};
  torch::nn::ModuleList dec_blocks{nullptr};
  torch::nn::ModuleList ups{nullptr};
  torch::nn::GroupNorm out_norm{nullptr};
  torch::nn::Conv2d out_conv{nullptr};
};
TORCH_MODULE(NoisePredictor);

// Trainable copy of the encoder fed with the edge map; every output goes
// through a zero-initialised 1x1 projection.
class ControlBranchImpl : public torch::nn::Module {
 public:
  explicit ControlBranchImpl(const UNetConfig& cfg);
  std::vector<torch::Tensor> forward(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& edge);

  // Copies the base encoder's weights into the trainable copy.
  void copy_from(NoisePredictorImpl& base);
  std::vector<torch::Tensor> zero_projection_parameters();
  Encoder& encoder() { return encoder_; }

 private:
  UNetConfig cfg_;
  Encoder encoder_{nullptr};
  torch::nn::Sequential hint{nullptr};
  torch::nn::Conv2d hint_zero{nullptr};
  torch::nn::ModuleList zero_out{nullptr};
};
TORCH_MODULE(ControlBranch);

// ---------------------------------------------------------------------------
// Translator model

struct TranslatorConfig {
  UNetConfig net{};
  int num_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  int image_size = 64;

  nlohmann::json to_json() const;
  static TranslatorConfig from_json(const nlohmann::json& j);
};

class TranslatorModel : public torch::nn::Module {
 public:
  explicit TranslatorModel(const TranslatorConfig& cfg);

  const TranslatorConfig& config() const { return cfg_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  const torch::Tensor& alpha_bars() const { return alpha_bars_; }

  NoisePredictor& base() { return base_; }
  bool has_control() const { return !control_.is_empty(); }
  ControlBranch& control() { return control_; }

  // Creates the control copy from the current base weights (zero gates).
  void attach_control();
  void set_lock_base(bool lock);
  bool lock_base() const { return lock_base_; }

  // x_t in [-1, 1] scale, t int64 [B], edge [B,1,H,W] in {0,1} or undefined
  // for the unconditional predictor.
  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor& t,
                              const torch::Tensor& edge = torch::Tensor());

  void save(const fs::path& dir, const std::string& config_hash) const;
  static std::shared_ptr<TranslatorModel> load(const fs::path& dir, std::string* config_hash = nullptr);

 private:
  TranslatorConfig cfg_;
  DiffusionSchedule schedule_;
  torch::Tensor alpha_bars_;
  NoisePredictor base_{nullptr};
  ControlBranch control_{nullptr};
  bool lock_base_ = true;
};

// ---------------------------------------------------------------------------
// Training

struct TranslatorExample {
  Image2D image;
  EdgeMap edge;
};

struct TrainTranslatorConfig {
  int phase1_epochs = 30;
  int phase2_epochs = 15;
  int batch_size = 16;
  double learning_rate = 1e-4;  // AdamW
  double weight_decay = 1e-2;
  bool unlock_base = false;
  int heldout = 16;  // source images kept aside for the held-out loss
  std::uint64_t seed = 0;
  std::function<void(const std::string&)> log;
};

struct TranslatorTrainingLog {
  std::vector<double> phase1_epoch_loss;
  std::vector<double> phase2_epoch_loss;
  double heldout_uncond_initial = 0;  // before any training
  double heldout_uncond_final = 0;
  double heldout_cond_initial = 0;    // at control attachment (zero gates)
  double heldout_cond_final = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Noise-prediction loss (mean squared error) on a batch with fixed timesteps
// and noise. edges undefined means the unconditional predictor.
torch::Tensor noise_loss(TranslatorModel& model, const torch::Tensor& x0, const torch::Tensor& t,
                         const torch::Tensor& noise, const torch::Tensor& edges = torch::Tensor());

std::shared_ptr<TranslatorModel> train_translator(const TranslatorConfig& model_cfg,
                                                  const std::vector<TranslatorExample>& data,
                                                  const TrainTranslatorConfig& cfg,
                                                  TranslatorTrainingLog* log = nullptr);

// ---------------------------------------------------------------------------
// Sampling

// Predicts noise for x_t (float [B,1,H,W]) at integer timestep t.
using NoiseFn = std::function<torch::Tensor(const torch::Tensor& x_t, std::int64_t t)>;

// Evenly strided timestep sub-sequence 0, s, 2s, ... with s = num_steps / steps.
std::vector<int> ddim_timesteps(int num_steps, int steps);

// Deterministic DDIM (eta = 0) from the given initial noise x_T.
torch::Tensor ddim_loop(const NoiseFn& eps, const std::vector<double>& alpha_bars, const torch::Tensor& x_T,
                        int steps, bool clip_x0 = true);

struct SampleRequest {
  EdgeMap edge;
  std::uint64_t seed = 0;
};

// Images in [0, 1]; all requests share one batched denoising loop.
std::vector<Image2D> ddim_sample_batch(TranslatorModel& model, const std::vector<SampleRequest>& requests,
                                       int steps = 50);

Image2D ddim_sample(TranslatorModel& model, const EdgeMap& edge, int steps, std::uint64_t seed);

// Seed of grid cell (i, j) under a master seed.
std::uint64_t grid_seed(std::uint64_t master, int edge_index, int sample_index);

// [edge_index][sample_index] images.
std::vector<std::vector<Image2D>> generate_grid(TranslatorModel& model, const std::vector<EdgeMap>& edges,
                                                int samples_per_edge, std::uint64_t seed, int steps = 50);

}  // namespace rsa::diffusion
