#include "rsa/segmenter.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "rsa/checkpoint.hpp"
#include "rsa/metrics.hpp"
#include "rsa/seed.hpp"
#include "rsa/tensor_util.hpp"

namespace rsa::seg {

namespace nn = torch::nn;

nlohmann::json SegNetConfig::to_json() const {
  return {{"base_width", base_width}, {"levels", levels}, {"groups", groups}};
}

SegNetConfig SegNetConfig::from_json(const nlohmann::json& j) {
  return SegNetConfig{j.at("base_width").get<int>(), j.at("levels").get<int>(), j.at("groups").get<int>()};
}

nlohmann::json SegModelConfig::to_json() const {
  return {{"net", net.to_json()},
          {"lambda_reg", lambda_reg},
          {"loss_mix", loss_mix},
          {"mask_threshold", mask_threshold}};
}

SegModelConfig SegModelConfig::from_json(const nlohmann::json& j) {
  SegModelConfig c;
  c.net = SegNetConfig::from_json(j.at("net"));
  c.lambda_reg = j.at("lambda_reg").get<double>();
  c.loss_mix = j.at("loss_mix").get<double>();
  c.mask_threshold = j.at("mask_threshold").get<double>();
  return c;
}

NigOutput nig_transform(const torch::Tensor& raw) {
  auto parts = raw.split(1, 1);
  return NigOutput{parts[0], 1.0 + torch::softplus(parts[1]) + kEvidenceFloor,
                   1.0 + torch::softplus(parts[2]) + kEvidenceFloor, torch::softplus(parts[3]) + kEvidenceFloor};
}

namespace {

nn::Sequential double_conv(int in, int out, int groups) {
  while (groups > 1 && out % groups) --groups;
  return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)), nn::GroupNorm(groups, out),
                        nn::ReLU(), nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)),
                        nn::GroupNorm(groups, out), nn::ReLU());
}

}  // namespace

SegNetImpl::SegNetImpl(const SegNetConfig& cfg) : cfg_(cfg) {
  if (cfg.levels < 1) throw std::invalid_argument("SegNet needs at least one level");
  enc = register_module("enc", nn::ModuleList());
  dec = register_module("dec", nn::ModuleList());
  ups = register_module("ups", nn::ModuleList());
  auto width = [&](int l) { return cfg.base_width << l; };
  int in = 1;
  for (int l = 0; l < cfg.levels; ++l) {
    enc->push_back(double_conv(in, width(l), cfg.groups));
    in = width(l);
  }
  for (int l = cfg.levels - 1; l > 0; --l) {
    ups->push_back(nn::Conv2d(nn::Conv2dOptions(width(l), width(l - 1), 3).padding(1)));
    dec->push_back(double_conv(2 * width(l - 1), width(l - 1), cfg.groups));
  }
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(cfg.base_width, 4, 1)));
}

torch::Tensor SegNetImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> skips;
  auto h = x;
  for (int l = 0; l < cfg_.levels; ++l) {
    if (l > 0) h = torch::max_pool2d(h, 2);
    h = enc[l]->as<nn::Sequential>()->forward(h);
    skips.push_back(h);
  }
  for (int k = 0; k + 1 < cfg_.levels; ++k) {
    const int l = cfg_.levels - 2 - k;  // target level
    h = torch::upsample_nearest2d(h, std::vector<int64_t>{skips[l].size(2), skips[l].size(3)});
    h = ups[k]->as<nn::Conv2d>()->forward(h);
    h = dec[k]->as<nn::Sequential>()->forward(torch::cat({h, skips[l]}, 1));
  }
  return head(h);
}

SegModel::SegModel(const SegModelConfig& cfg) : cfg_(cfg), net_(SegNet(cfg.net)) {}

NigOutput SegModel::forward(const torch::Tensor& x) { return nig_transform(net_->forward(x)); }

SegModel SegModel::clone() const {
  SegModel copy(cfg_);
  torch::NoGradGuard guard;
  auto src = net_->parameters();
  auto dst = copy.net_->parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
  copy.net_->train(net_->is_training());
  return copy;
}

void SegModel::save(const fs::path& dir, const std::string& config_hash) const {
  ckpt::save(dir, "segmenter", config_hash, cfg_.to_json(), *net_);
}

SegModel SegModel::load(const fs::path& dir, std::string* config_hash) {
  const auto meta = ckpt::read_meta(dir, "segmenter");
  SegModel model(SegModelConfig::from_json(meta.config));
  ckpt::load_weights(dir, *model.net_);
  model.net_->eval();
  if (config_hash) *config_hash = meta.config_hash;
  return model;
}

// ---------------------------------------------------------------------------

Prediction prediction_from_field(NIGField field, double mask_threshold, const std::string& id) {
  BinaryMask mask{id, BitGrid(field.gamma.rows(), field.gamma.cols(), 0)};
  for (std::size_t i = 0; i < field.gamma.size(); ++i) mask.pixels[i] = field.gamma[i] > mask_threshold ? 1 : 0;
  UncertaintyMap u = uncertainty_of(field);
  return Prediction{std::move(field), std::move(mask), std::move(u)};
}

std::vector<Prediction> predict_batch(SegModel& model, std::span<const Image2D> images) {
  std::vector<Prediction> out;
  if (images.empty()) return out;
  const Shape shape = images.front().shape();
  for (const auto& im : images) require_same_shape(shape, im.shape(), "predict");
  if (shape.rows % (1u << (model.config().net.levels - 1)) || shape.cols % (1u << (model.config().net.levels - 1))) {
    throw std::invalid_argument("image shape " + to_string(shape) + " incompatible with a " +
                                std::to_string(model.config().net.levels) + "-level segmenter");
  }
  torch::NoGradGuard guard;
  const bool was_training = model.net()->is_training();
  model.net()->eval();
  constexpr std::size_t kChunk = 32;
  for (std::size_t s = 0; s < images.size(); s += kChunk) {
    const auto chunk = images.subspan(s, std::min(kChunk, images.size() - s));
    const auto o = model.forward(stack_unit(chunk));
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      const auto i = static_cast<int64_t>(b);
      NIGField f{to_real_grid(o.gamma[i][0]), to_real_grid(o.omega[i][0]), to_real_grid(o.alpha[i][0]),
                 to_real_grid(o.beta[i][0])};
      out.push_back(prediction_from_field(std::move(f), model.config().mask_threshold, chunk[b].id));
    }
  }
  model.net()->train(was_training);
  return out;
}

Prediction predict(SegModel& model, const Image2D& image) {
  return std::move(predict_batch(model, std::span<const Image2D>(&image, 1)).front());
}

// ---------------------------------------------------------------------------

torch::Tensor seg_loss(const torch::Tensor& probs, const torch::Tensor& target) {
  auto p = probs.clamp(kProbClamp, 1.0 - kProbClamp);
  auto y = target.to(p.dtype());
  auto ce = -(y * torch::log(p) + (1.0 - y) * torch::log(1.0 - p));
  const std::vector<int64_t> dims{1, 2, 3};
  auto ce_img = ce.mean(dims);
  // The Dice term uses the unclamped probabilities so that y = p gives exactly 0.
  auto pr = probs.to(p.dtype());
  auto inter = (y * pr).sum(dims);
  auto dice = 1.0 - (2.0 * inter + 1.0) / (y.sum(dims) + pr.sum(dims) + 1.0);
  return (ce_img + dice).mean();
}

double seg_loss(const RealGrid& probs, const BinaryMask& target) {
  require_same_shape(probs.shape(), target.shape(), "seg_loss");
  for (double v : probs) {
    if (!(v >= -1e-6 && v <= 1.0 + 1e-6)) throw std::invalid_argument("seg_loss: probabilities outside [0,1]");
  }
  auto p = to_tensor(probs).clamp(0.0, 1.0);
  return seg_loss(p, to_tensor(target.pixels).to(torch::kFloat64)).item<double>();
}

torch::Tensor nig_nll(const NigOutput& o, const torch::Tensor& target) {
  auto y = target.to(o.gamma.dtype());
  auto big_omega = 2.0 * o.beta * (1.0 + o.omega);
  return 0.5 * torch::log(std::numbers::pi / o.omega) - o.alpha * torch::log(big_omega) +
         (o.alpha + 0.5) * torch::log((y - o.gamma).pow(2) * o.omega + big_omega) + torch::lgamma(o.alpha) -
         torch::lgamma(o.alpha + 0.5);
}

torch::Tensor nig_regularizer(const NigOutput& o, const torch::Tensor& target) {
  auto y = target.to(o.gamma.dtype());
  return (y - o.gamma).abs() * (2.0 * o.omega + o.alpha);
}

torch::Tensor nig_loss(const NigOutput& out, const torch::Tensor& target, double lambda_reg) {
  return nig_nll(out, target).mean() + lambda_reg * nig_regularizer(out, target).mean();
}

double nig_loss(const NIGField& field, const BinaryMask& target, double lambda_reg) {
  if (!validate(field).ok()) throw std::invalid_argument("nig_loss: " + validate(field).summary());
  require_same_shape(field.shape(), target.shape(), "nig_loss");
  NigOutput o{to_tensor(field.gamma), to_tensor(field.omega), to_tensor(field.alpha), to_tensor(field.beta)};
  const double v = nig_loss(o, to_tensor(target.pixels).to(torch::kFloat64), lambda_reg).item<double>();
  if (!std::isfinite(v)) throw std::domain_error("nig_loss is not finite");
  return v;
}

torch::Tensor total_loss(const SegModelConfig& cfg, const NigOutput& out, const torch::Tensor& target) {
  return seg_loss(out.gamma.clamp(0.0, 1.0), target) + cfg.loss_mix * nig_loss(out, target, cfg.lambda_reg);
}

// ---------------------------------------------------------------------------

std::vector<TrainPair> to_pairs(const std::vector<LabeledSample>& samples) {
  std::vector<TrainPair> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.image, s.mask});
  return out;
}

void fit(SegModel& model, const std::vector<TrainPair>& pairs, const SegTrainConfig& cfg, SegTrainReport* report) {
  if (cfg.epochs <= 0) return;
  if (pairs.empty()) throw std::invalid_argument("segmenter training needs at least one pair");
  std::vector<torch::Tensor> xs, ys;
  for (const auto& p : pairs) {
    require_same_shape(p.image.shape(), p.mask.shape(), "segmenter training pair");
    xs.push_back(to_unit_tensor(p.image));
    ys.push_back(to_tensor(p.mask.pixels));
  }
  const auto x_all = torch::cat(xs, 0);
  const auto y_all = torch::cat(ys, 0);
  const int64_t n = x_all.size(0);

  auto gen = make_generator(derive_seed(cfg.seed, {0x5e6}));
  torch::optim::Adam opt(model.net()->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  model.net()->train();
  auto last_good = snapshot(*model.net());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::kInt64);
    double total = 0.0;
    for (int64_t s = 0; s < n; s += cfg.batch_size) {
      const int64_t e = std::min<int64_t>(n, s + cfg.batch_size);
      auto idx = perm.slice(0, s, e);
      opt.zero_grad();
      auto loss = total_loss(model.config(), model.forward(x_all.index_select(0, idx)), y_all.index_select(0, idx));
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        restore(*model.net(), last_good);
        std::ostringstream msg;
        msg << "non-finite segmenter loss at epoch " << epoch << " batch " << s / cfg.batch_size
            << "; weights restored to the last finite epoch";
        throw TrainingDiverged(msg.str());
      }
      loss.backward();
      opt.step();
      total += value * static_cast<double>(e - s);
    }
    last_good = snapshot(*model.net());
    const double mean = total / static_cast<double>(n);
    if (report) report->epoch_loss.push_back(mean);
    if (!cfg.checkpoint_dir.empty()) model.save(cfg.checkpoint_dir, cfg.config_hash);
    if (cfg.log) cfg.log("segmenter epoch " + std::to_string(epoch + 1) + " loss " + std::to_string(mean));
  }
  model.net()->eval();
}

SegModel train_segmenter(const SegModelConfig& model_cfg, const std::vector<TrainPair>& train,
                         const std::vector<TrainPair>& heldout, const SegTrainConfig& cfg, SegTrainReport* report) {
  if (train.empty()) throw std::invalid_argument("train_segmenter: no labeled source data");
  torch::manual_seed(cfg.seed);
  SegModel model(model_cfg);
  SegTrainReport local;
  SegTrainReport& rep = report ? *report : local;
  fit(model, train, cfg, &rep);
  if (!heldout.empty()) {
    std::vector<Image2D> images;
    for (const auto& p : heldout) images.push_back(p.image);
    const auto preds = predict_batch(model, images);
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) sum += metrics::dice(preds[i].mask, heldout[i].mask);
    rep.heldout_dice = sum / static_cast<double>(preds.size());
  }
  return model;
}

}  // namespace rsa::seg
