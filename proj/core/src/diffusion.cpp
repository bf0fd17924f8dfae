#include "rsa/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "rsa/checkpoint.hpp"
#include "rsa/seed.hpp"
#include "rsa/tensor_util.hpp"

namespace rsa::diffusion {

namespace nn = torch::nn;

DiffusionSchedule DiffusionSchedule::linear(int num_steps, double beta_start, double beta_end) {
  DiffusionSchedule s;
  s.num_steps = num_steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.validate();
  s.betas.resize(num_steps);
  s.alphas.resize(num_steps);
  s.alpha_bars.resize(num_steps);
  double prod = 1.0;
  for (int t = 0; t < num_steps; ++t) {
    const double frac = num_steps == 1 ? 0.0 : static_cast<double>(t) / (num_steps - 1);
    s.betas[t] = beta_start + (beta_end - beta_start) * frac;
    s.alphas[t] = 1.0 - s.betas[t];
    prod *= s.alphas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

void DiffusionSchedule::validate() const {
  if (num_steps < 1) throw std::invalid_argument("diffusion schedule needs num_steps >= 1");
  if (!(0.0 < beta_start && beta_start < 1.0 && beta_end < 1.0 && (num_steps == 1 || beta_start < beta_end))) {
    throw std::invalid_argument("diffusion schedule needs 0 < beta_start < beta_end < 1");
  }
}

RealGrid forward_diffuse(const RealGrid& x, int t, const RealGrid& noise, const DiffusionSchedule& schedule) {
  if (t < 0 || t >= schedule.num_steps) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(schedule.num_steps) + ")");
  }
  require_same_shape(x.shape(), noise.shape(), "forward_diffuse");
  const double a = std::sqrt(schedule.alpha_bars[t]);
  const double b = std::sqrt(1.0 - schedule.alpha_bars[t]);
  RealGrid out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * noise[i];
  return out;
}

torch::Tensor forward_diffuse(const torch::Tensor& x, const torch::Tensor& t, const torch::Tensor& noise,
                              const torch::Tensor& alpha_bars) {
  auto ab = alpha_bars.to(x.dtype()).index_select(0, t).view({-1, 1, 1, 1});
  return ab.sqrt() * x + (1.0 - ab).sqrt() * noise;
}

// ---------------------------------------------------------------------------

nlohmann::json UNetConfig::to_json() const {
  return {{"base_width", base_width}, {"channel_mult", channel_mult}, {"groups", groups}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.base_width = j.at("base_width").get<int>();
  c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  c.groups = j.at("groups").get<int>();
  return c;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / half);
  auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1).to(torch::kFloat32);
}

namespace {

nn::Conv2d conv3(int in, int out, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

nn::Conv2d zero_conv(int in, int out) {
  nn::Conv2d c(nn::Conv2dOptions(in, out, 1));
  torch::NoGradGuard guard;
  c->weight.zero_();
  c->bias.zero_();
  return c;
}

int groups_for(int channels, int groups) {
  while (groups > 1 && channels % groups != 0) --groups;
  return groups;
}

}  // namespace

ResBlockImpl::ResBlockImpl(int in_ch, int out_ch, int time_dim, int groups) {
  norm1 = register_module("norm1", nn::GroupNorm(groups_for(in_ch, groups), in_ch));
  conv1 = register_module("conv1", conv3(in_ch, out_ch));
  time_proj = register_module("time_proj", nn::Linear(time_dim, out_ch));
  norm2 = register_module("norm2", nn::GroupNorm(groups_for(out_ch, groups), out_ch));
  conv2 = register_module("conv2", conv3(out_ch, out_ch));
  if (in_ch != out_ch) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + time_proj(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1).to(h.dtype());
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

EncoderImpl::EncoderImpl(const UNetConfig& cfg) : cfg_(cfg) {
  const int td = cfg.time_dim();
  in_conv = register_module("in_conv", conv3(1, cfg.base_width));
  time_mlp = register_module(
      "time_mlp", nn::Sequential(nn::Linear(cfg.base_width, td), nn::SiLU(), nn::Linear(td, td)));
  blocks = register_module("blocks", nn::ModuleList());
  downs = register_module("downs", nn::ModuleList());
  int ch = cfg.base_width;
  for (std::size_t l = 0; l < cfg.channel_mult.size(); ++l) {
    blocks->push_back(ResBlock(ch, cfg.width(l), td, cfg.groups));
    ch = cfg.width(l);
    if (l + 1 < cfg.channel_mult.size()) downs->push_back(conv3(ch, ch, 2));
  }
  mid = register_module("mid", ResBlock(ch, ch, td, cfg.groups));
}

torch::Tensor EncoderImpl::embed_time(const torch::Tensor& t) {
  return time_mlp->forward(timestep_embedding(t, cfg_.base_width).to(in_conv->weight.dtype()));
}

std::vector<torch::Tensor> EncoderImpl::forward(const torch::Tensor& h_in, const torch::Tensor& emb) {
  std::vector<torch::Tensor> feats;
  auto h = h_in;
  for (std::size_t l = 0; l < blocks->size(); ++l) {
    h = blocks[l]->as<ResBlock>()->forward(h, emb);
    feats.push_back(h);
    if (l < downs->size()) h = downs[l]->as<nn::Conv2d>()->forward(h);
  }
  feats.push_back(mid->forward(h, emb));
  return feats;
}

NoisePredictorImpl::NoisePredictorImpl(const UNetConfig& cfg) : cfg_(cfg) {
  encoder_ = register_module("encoder", Encoder(cfg));
  dec_blocks = register_module("dec_blocks", nn::ModuleList());
  ups = register_module("ups", nn::ModuleList());
  const std::size_t levels = cfg.channel_mult.size();
  for (std::size_t l = 0; l < levels; ++l) {
    dec_blocks->push_back(ResBlock(2 * cfg.width(l), cfg.width(l), cfg.time_dim(), cfg.groups));
  }
  for (std::size_t l = 1; l < levels; ++l) ups->push_back(conv3(cfg.width(l), cfg.width(l - 1)));
  out_norm = register_module("out_norm", nn::GroupNorm(groups_for(cfg.base_width, cfg.groups), cfg.base_width));
  out_conv = register_module("out_conv", conv3(cfg.base_width, 1));
}

torch::Tensor NoisePredictorImpl::forward(const torch::Tensor& x, const torch::Tensor& t,
                                          const std::vector<torch::Tensor>* residuals) {
  auto emb = encoder_->embed_time(t);
  auto feats = encoder_->forward(encoder_->stem(x), emb);
  if (residuals) {
    if (residuals->size() != feats.size()) throw std::invalid_argument("control residual count mismatch");
    for (std::size_t k = 0; k < feats.size(); ++k) feats[k] = feats[k] + (*residuals)[k];
  }
  const std::size_t levels = cfg_.channel_mult.size();
  auto h = feats.back();
  for (std::size_t i = levels; i-- > 0;) {
    h = dec_blocks[i]->as<ResBlock>()->forward(torch::cat({h, feats[i]}, 1), emb);
    if (i > 0) {
      h = torch::upsample_nearest2d(h, std::vector<int64_t>{h.size(2) * 2, h.size(3) * 2});
      h = ups[i - 1]->as<nn::Conv2d>()->forward(h);
    }
  }
  return out_conv(torch::silu(out_norm(h)));
}

ControlBranchImpl::ControlBranchImpl(const UNetConfig& cfg) : cfg_(cfg) {
  encoder_ = register_module("encoder", Encoder(cfg));
  const int w = cfg.base_width;
  hint = register_module("hint", nn::Sequential(conv3(1, w), nn::SiLU(), conv3(w, w), nn::SiLU()));
  hint_zero = register_module("hint_zero", zero_conv(w, w));
  zero_out = register_module("zero_out", nn::ModuleList());
  for (std::size_t l = 0; l < cfg.channel_mult.size(); ++l) zero_out->push_back(zero_conv(cfg.width(l), cfg.width(l)));
  const int last = cfg.width(cfg.channel_mult.size() - 1);
  zero_out->push_back(zero_conv(last, last));
}

std::vector<torch::Tensor> ControlBranchImpl::forward(const torch::Tensor& x, const torch::Tensor& t,
                                                      const torch::Tensor& edge) {
  auto emb = encoder_->embed_time(t);
  auto h = encoder_->stem(x) + hint_zero(hint->forward(edge.to(x.dtype())));
  auto feats = encoder_->forward(h, emb);
  for (std::size_t k = 0; k < feats.size(); ++k) feats[k] = zero_out[k]->as<nn::Conv2d>()->forward(feats[k]);
  return feats;
}

void ControlBranchImpl::copy_from(NoisePredictorImpl& base) {
  torch::NoGradGuard guard;
  auto src = base.encoder()->named_parameters();
  for (auto& p : encoder_->named_parameters()) p.value().copy_(src[p.key()]);
}

std::vector<torch::Tensor> ControlBranchImpl::zero_projection_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& p : hint_zero->parameters()) out.push_back(p);
  for (auto& p : zero_out->parameters()) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json TranslatorConfig::to_json() const {
  return {{"net", net.to_json()},
          {"num_steps", num_steps},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"image_size", image_size}};
}

TranslatorConfig TranslatorConfig::from_json(const nlohmann::json& j) {
  TranslatorConfig c;
  c.net = UNetConfig::from_json(j.at("net"));
  c.num_steps = j.at("num_steps").get<int>();
  c.beta_start = j.at("beta_start").get<double>();
  c.beta_end = j.at("beta_end").get<double>();
  c.image_size = j.at("image_size").get<int>();
  return c;
}

TranslatorModel::TranslatorModel(const TranslatorConfig& cfg)
    : cfg_(cfg), schedule_(DiffusionSchedule::linear(cfg.num_steps, cfg.beta_start, cfg.beta_end)) {
  alpha_bars_ = torch::tensor(schedule_.alpha_bars, torch::kFloat64);
  base_ = register_module("base", NoisePredictor(cfg.net));
}

void TranslatorModel::attach_control() {
  if (has_control()) return;
  control_ = register_module("control", ControlBranch(cfg_.net));
  control_->to(base_->encoder()->parameters().front().scalar_type());
  control_->copy_from(*base_);
  set_lock_base(lock_base_);
}

void TranslatorModel::set_lock_base(bool lock) {
  lock_base_ = lock;
  const bool trainable = !(lock && has_control());
  for (auto& p : base_->parameters()) p.set_requires_grad(trainable);
}

torch::Tensor TranslatorModel::predict_noise(const torch::Tensor& x_t, const torch::Tensor& t,
                                             const torch::Tensor& edge) {
  if (!edge.defined() || !has_control()) return base_->forward(x_t, t);
  auto residuals = control_->forward(x_t, t, edge);
  return base_->forward(x_t, t, &residuals);
}

void TranslatorModel::save(const fs::path& dir, const std::string& config_hash) const {
  nlohmann::json config = cfg_.to_json();
  config["has_control"] = has_control();
  config["lock_base"] = lock_base_;
  ckpt::save(dir, "translator", config_hash, config, *this);
}

std::shared_ptr<TranslatorModel> TranslatorModel::load(const fs::path& dir, std::string* config_hash) {
  const auto meta = ckpt::read_meta(dir, "translator");
  auto model = std::make_shared<TranslatorModel>(TranslatorConfig::from_json(meta.config));
  if (meta.config.value("has_control", false)) model->attach_control();
  ckpt::load_weights(dir, *model);
  model->set_lock_base(meta.config.value("lock_base", true));
  model->eval();
  if (config_hash) *config_hash = meta.config_hash;
  return model;
}

// ---------------------------------------------------------------------------

torch::Tensor noise_loss(TranslatorModel& model, const torch::Tensor& x0, const torch::Tensor& t,
                         const torch::Tensor& noise, const torch::Tensor& edges) {
  auto x_t = forward_diffuse(x0, t, noise, model.alpha_bars());
  auto pred = model.predict_noise(x_t, t, edges);
  return torch::mse_loss(pred, noise);
}

namespace {

struct Batches {
  torch::Tensor images;  // [N,1,H,W] in [-1,1]
  torch::Tensor edges;   // [N,1,H,W] in {0,1}
};

Batches to_tensors(const std::vector<TranslatorExample>& data, std::size_t begin, std::size_t end) {
  std::vector<torch::Tensor> ims, eds;
  for (std::size_t i = begin; i < end; ++i) {
    ims.push_back(to_unit_tensor(data[i].image) * 2.0 - 1.0);
    eds.push_back(to_tensor(data[i].edge.pixels));
  }
  return {torch::cat(ims, 0), torch::cat(eds, 0)};
}

double heldout_loss(TranslatorModel& model, const Batches& held, const torch::Tensor& t, const torch::Tensor& noise,
                    bool conditioned) {
  torch::NoGradGuard guard;
  const bool was_training = model.is_training();
  model.eval();
  double total = 0.0;
  const int64_t n = held.images.size(0);
  for (int64_t s = 0; s < n; s += 32) {
    const int64_t e = std::min<int64_t>(n, s + 32);
    auto loss = noise_loss(model, held.images.slice(0, s, e), t.slice(0, s, e), noise.slice(0, s, e),
                           conditioned ? held.edges.slice(0, s, e) : torch::Tensor());
    total += loss.item<double>() * static_cast<double>(e - s);
  }
  model.train(was_training);
  return total / static_cast<double>(n);
}

double run_epoch(TranslatorModel& model, torch::optim::Optimizer& opt, const Batches& train, int batch_size,
                 bool conditioned, torch::Generator& gen, const char* phase, int epoch) {
  const int64_t n = train.images.size(0);
  auto perm = torch::randperm(n, gen, torch::kInt64);
  double total = 0.0;
  int64_t seen = 0;
  for (int64_t s = 0; s < n; s += batch_size) {
    const int64_t e = std::min<int64_t>(n, s + batch_size);
    auto idx = perm.slice(0, s, e);
    auto x0 = train.images.index_select(0, idx);
    auto t = torch::randint(model.schedule().num_steps, {e - s}, gen, torch::kInt64);
    auto noise = torch::randn(x0.sizes(), gen, torch::kFloat32);
    opt.zero_grad();
    auto loss = noise_loss(model, x0, t, noise, conditioned ? train.edges.index_select(0, idx) : torch::Tensor());
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "non-finite diffusion loss in " << phase << " epoch " << epoch << " batch " << s / batch_size;
      throw TrainingDiverged(msg.str());
    }
    loss.backward();
    opt.step();
    total += value * static_cast<double>(e - s);
    seen += e - s;
  }
  return total / static_cast<double>(seen);
}

std::vector<torch::Tensor> trainable(const std::vector<torch::Tensor>& params) {
  std::vector<torch::Tensor> out;
  for (const auto& p : params) {
    if (p.requires_grad()) out.push_back(p);
  }
  return out;
}

}  // namespace

std::shared_ptr<TranslatorModel> train_translator(const TranslatorConfig& model_cfg,
                                                  const std::vector<TranslatorExample>& data,
                                                  const TrainTranslatorConfig& cfg, TranslatorTrainingLog* log) {
  if (data.empty()) throw std::invalid_argument("train_translator: empty dataset");
  const std::size_t held_n =
      std::min<std::size_t>(static_cast<std::size_t>(std::max(cfg.heldout, 0)), data.size() / 4);
  const std::size_t train_n = data.size() - held_n;
  if (held_n == 0) throw std::invalid_argument("train_translator: dataset too small for a held-out batch");

  torch::manual_seed(cfg.seed);
  auto model = std::make_shared<TranslatorModel>(model_cfg);
  model->train();
  auto gen = make_generator(derive_seed(cfg.seed, {0xd1ff}));

  const Batches train = to_tensors(data, 0, train_n);
  const Batches held = to_tensors(data, train_n, data.size());
  auto held_gen = make_generator(derive_seed(cfg.seed, {0x4e1d}));
  const auto held_t = torch::randint(model->schedule().num_steps, {static_cast<int64_t>(held_n)}, held_gen,
                                     torch::kInt64);
  const auto held_noise = torch::randn(held.images.sizes(), held_gen, torch::kFloat32);

  TranslatorTrainingLog local;
  TranslatorTrainingLog& lg = log ? *log : local;
  auto say = [&](const std::string& s) {
    if (cfg.log) cfg.log(s);
  };

  lg.heldout_uncond_initial = heldout_loss(*model, held, held_t, held_noise, false);
  {
    torch::optim::AdamW opt(model->base()->parameters(),
                            torch::optim::AdamWOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
    for (int epoch = 0; epoch < cfg.phase1_epochs; ++epoch) {
      lg.phase1_epoch_loss.push_back(run_epoch(*model, opt, train, cfg.batch_size, false, gen, "phase1", epoch));
      say("translator phase1 epoch " + std::to_string(epoch + 1) + " loss " +
          std::to_string(lg.phase1_epoch_loss.back()));
    }
  }
  lg.heldout_uncond_final = heldout_loss(*model, held, held_t, held_noise, false);

  model->attach_control();
  model->set_lock_base(!cfg.unlock_base);
  lg.heldout_cond_initial = heldout_loss(*model, held, held_t, held_noise, true);
  {
    torch::optim::AdamW opt(trainable(model->parameters()),
                            torch::optim::AdamWOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
    for (int epoch = 0; epoch < cfg.phase2_epochs; ++epoch) {
      lg.phase2_epoch_loss.push_back(run_epoch(*model, opt, train, cfg.batch_size, true, gen, "phase2", epoch));
      say("translator phase2 epoch " + std::to_string(epoch + 1) + " loss " +
          std::to_string(lg.phase2_epoch_loss.back()));
    }
  }
  lg.heldout_cond_final = heldout_loss(*model, held, held_t, held_noise, true);
  model->eval();
  return model;
}

// ---------------------------------------------------------------------------

std::vector<int> ddim_timesteps(int num_steps, int steps) {
  if (steps < 1) throw std::invalid_argument("DDIM needs at least one step");
  if (steps > num_steps) {
    throw std::invalid_argument("DDIM steps (" + std::to_string(steps) + ") exceed schedule length (" +
                                std::to_string(num_steps) + ")");
  }
  const int stride = num_steps / steps;
  std::vector<int> ts(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) ts[i] = i * stride;
  return ts;
}

torch::Tensor ddim_loop(const NoiseFn& eps, const std::vector<double>& alpha_bars, const torch::Tensor& x_T,
                        int steps, bool clip_x0) {
  const auto ts = ddim_timesteps(static_cast<int>(alpha_bars.size()), steps);
  torch::NoGradGuard guard;
  auto x = x_T.clone();
  for (std::size_t i = ts.size(); i-- > 0;) {
    const int t = ts[i];
    const double ab = alpha_bars[t];
    const double ab_prev = i > 0 ? alpha_bars[ts[i - 1]] : 1.0;
    auto e = eps(x, t);
    auto x0 = (x - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
    if (clip_x0) x0 = x0.clamp(-1.0, 1.0);
    x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * e;
  }
  return x;
}

std::vector<Image2D> ddim_sample_batch(TranslatorModel& model, const std::vector<SampleRequest>& requests,
                                       int steps) {
  if (requests.empty()) return {};
  if (steps > model.schedule().num_steps) {
    throw std::invalid_argument("DDIM steps exceed the model's schedule length");
  }
  const auto rows = static_cast<int64_t>(requests.front().edge.pixels.rows());
  const auto cols = static_cast<int64_t>(requests.front().edge.pixels.cols());
  std::vector<torch::Tensor> noises, edges;
  for (const auto& r : requests) {
    if (r.edge.pixels.rows() != static_cast<std::size_t>(rows) ||
        r.edge.pixels.cols() != static_cast<std::size_t>(cols)) {
      throw std::invalid_argument("ddim_sample_batch: edge maps must share one shape");
    }
    auto gen = make_generator(r.seed);
    noises.push_back(torch::randn({1, 1, rows, cols}, gen, torch::kFloat32));
    edges.push_back(to_tensor(r.edge.pixels));
  }
  const auto edge_batch = torch::cat(edges, 0);
  const bool was_training = model.is_training();
  model.eval();
  const auto batch = static_cast<int64_t>(requests.size());
  NoiseFn eps = [&](const torch::Tensor& x_t, std::int64_t t) {
    return model.predict_noise(x_t, torch::full({batch}, t, torch::kInt64), edge_batch);
  };
  auto x = ddim_loop(eps, model.schedule().alpha_bars, torch::cat(noises, 0), steps, true);
  model.train(was_training);
  x = ((x + 1.0) * 0.5).clamp(0.0, 1.0);

  std::vector<Image2D> out;
  for (int64_t b = 0; b < batch; ++b) {
    out.push_back(Image2D{"", to_real_grid(x[b][0]), {0.0, 1.0}, {1.0, 1.0}});
  }
  return out;
}

Image2D ddim_sample(TranslatorModel& model, const EdgeMap& edge, int steps, std::uint64_t seed) {
  return ddim_sample_batch(model, {SampleRequest{edge, seed}}, steps).front();
}

std::uint64_t grid_seed(std::uint64_t master, int edge_index, int sample_index) {
  return derive_seed(master, {static_cast<std::uint64_t>(edge_index), static_cast<std::uint64_t>(sample_index)});
}

std::vector<std::vector<Image2D>> generate_grid(TranslatorModel& model, const std::vector<EdgeMap>& edges,
                                                int samples_per_edge, std::uint64_t seed, int steps) {
  if (samples_per_edge < 1) throw std::invalid_argument("samples_per_edge must be positive");
  std::vector<SampleRequest> requests;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    for (int j = 0; j < samples_per_edge; ++j) {
      requests.push_back({edges[i], grid_seed(seed, static_cast<int>(i), j)});
    }
  }
  auto flat = ddim_sample_batch(model, requests, steps);
  std::vector<std::vector<Image2D>> grid(edges.size());
  for (std::size_t i = 0; i < edges.size(); ++i) {
    for (int j = 0; j < samples_per_edge; ++j) {
      grid[i].push_back(std::move(flat[i * samples_per_edge + static_cast<std::size_t>(j)]));
    }
  }
  return grid;
}

}  // namespace rsa::diffusion
