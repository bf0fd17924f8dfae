#include "rsa/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "rsa/seed.hpp"

namespace rsa {

using nlohmann::json;

namespace {

// Reads known keys from one JSON object and rejects whatever is left over.
class SectionReader {
 public:
  SectionReader(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("bad value for " + name_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) throw ConfigError("unknown config key '" + name_ + "." + item.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> used_;
};

json data_json(const DataSection& d) {
  const auto& s = d.synth;
  return {{"image_size", s.image_size},
          {"n_source", s.num_train_source},
          {"n_target", s.num_train_target},
          {"n_test", s.num_test_target},
          {"lesion_radius_min", s.lesion_radius_range.first},
          {"lesion_radius_max", s.lesion_radius_range.second},
          {"lesion_brighter", s.source_style.lesion_brighter},
          {"texture_seed", s.source_style.texture_seed},
          {"target_invert", s.target_style.invert},
          {"target_gamma", s.target_style.gamma},
          {"target_noise_sigma", s.target_style.noise_sigma},
          {"ingest_manifest", d.ingest_manifest}};
}

void read_data(const json& j, DataSection& d) {
  SectionReader r(j, "data");
  auto& s = d.synth;
  r.get("image_size", s.image_size);
  r.get("n_source", s.num_train_source);
  r.get("n_target", s.num_train_target);
  r.get("n_test", s.num_test_target);
  r.get("lesion_radius_min", s.lesion_radius_range.first);
  r.get("lesion_radius_max", s.lesion_radius_range.second);
  r.get("lesion_brighter", s.source_style.lesion_brighter);
  r.get("texture_seed", s.source_style.texture_seed);
  r.get("target_invert", s.target_style.invert);
  r.get("target_gamma", s.target_style.gamma);
  r.get("target_noise_sigma", s.target_style.noise_sigma);
  r.get("ingest_manifest", d.ingest_manifest);
  r.finish();
}

json translator_json(const TranslatorSection& t) {
  return {{"base_width", t.model.net.base_width},
          {"channel_mult", t.model.net.channel_mult},
          {"groups", t.model.net.groups},
          {"num_steps", t.model.num_steps},
          {"beta_start", t.model.beta_start},
          {"beta_end", t.model.beta_end},
          {"phase1_epochs", t.train.phase1_epochs},
          {"phase2_epochs", t.train.phase2_epochs},
          {"batch_size", t.train.batch_size},
          {"learning_rate", t.train.learning_rate},
          {"weight_decay", t.train.weight_decay},
          {"unlock_base", t.train.unlock_base},
          {"heldout", t.train.heldout},
          {"annotation_candidates", t.annotation_candidates},
          {"annotation_tolerance_px", t.annotation_tolerance_px}};
}

void read_translator(const json& j, TranslatorSection& t) {
  SectionReader r(j, "translator");
  r.get("base_width", t.model.net.base_width);
  r.get("channel_mult", t.model.net.channel_mult);
  r.get("groups", t.model.net.groups);
  r.get("num_steps", t.model.num_steps);
  r.get("beta_start", t.model.beta_start);
  r.get("beta_end", t.model.beta_end);
  r.get("phase1_epochs", t.train.phase1_epochs);
  r.get("phase2_epochs", t.train.phase2_epochs);
  r.get("batch_size", t.train.batch_size);
  r.get("learning_rate", t.train.learning_rate);
  r.get("weight_decay", t.train.weight_decay);
  r.get("unlock_base", t.train.unlock_base);
  r.get("heldout", t.train.heldout);
  r.get("annotation_candidates", t.annotation_candidates);
  r.get("annotation_tolerance_px", t.annotation_tolerance_px);
  r.finish();
}

json segmenter_json(const SegmenterSection& s) {
  return {{"base_width", s.model.net.base_width},
          {"levels", s.model.net.levels},
          {"groups", s.model.net.groups},
          {"lambda_reg", s.model.lambda_reg},
          {"loss_mix", s.model.loss_mix},
          {"mask_threshold", s.model.mask_threshold},
          {"epochs", s.train.epochs},
          {"batch_size", s.train.batch_size},
          {"learning_rate", s.train.learning_rate},
          {"heldout", s.heldout}};
}

void read_segmenter(const json& j, SegmenterSection& s) {
  SectionReader r(j, "segmenter");
  r.get("base_width", s.model.net.base_width);
  r.get("levels", s.model.net.levels);
  r.get("groups", s.model.net.groups);
  r.get("lambda_reg", s.model.lambda_reg);
  r.get("loss_mix", s.model.loss_mix);
  r.get("mask_threshold", s.model.mask_threshold);
  r.get("epochs", s.train.epochs);
  r.get("batch_size", s.train.batch_size);
  r.get("learning_rate", s.train.learning_rate);
  r.get("heldout", s.heldout);
  r.finish();
}

json selector_json(const SelectorSection& s) {
  return {{"t_un", s.selector.t_un},
          {"t_r", s.selector.t_r},
          {"n", s.selector.n},
          {"samples_per_edge", s.selector.samples_per_edge},
          {"boundary_band_px", s.selector.boundary_band_px},
          {"score_on_raw", s.selector.score_on_raw},
          {"sweep_low", s.sweep.lo},
          {"sweep_high", s.sweep.hi},
          {"canny_sigma", s.canny.gaussian_sigma},
          {"canny_low_ratio", s.canny.low_ratio},
          {"ddim_steps", s.ddim_steps}};
}

void read_selector(const json& j, SelectorSection& s) {
  SectionReader r(j, "selector");
  r.get("t_un", s.selector.t_un);
  r.get("t_r", s.selector.t_r);
  r.get("n", s.selector.n);
  r.get("samples_per_edge", s.selector.samples_per_edge);
  r.get("boundary_band_px", s.selector.boundary_band_px);
  r.get("score_on_raw", s.selector.score_on_raw);
  r.get("sweep_low", s.sweep.lo);
  r.get("sweep_high", s.sweep.hi);
  r.get("canny_sigma", s.canny.gaussian_sigma);
  r.get("canny_low_ratio", s.canny.low_ratio);
  r.get("ddim_steps", s.ddim_steps);
  r.finish();
}

json adapt_mode_json(const adapt::AdaptConfig& a, bool with_epochs) {
  json j = {{"batch_size", a.batch_size},
            {"learning_rate", a.learning_rate},
            {"include_target_pairs", a.include_target_pairs}};
  if (with_epochs) j["epochs"] = a.epochs;
  return j;
}

void read_adapt_mode(const json& j, const std::string& name, adapt::AdaptConfig& a, bool with_epochs) {
  SectionReader r(j, name);
  if (with_epochs) r.get("epochs", a.epochs);
  r.get("batch_size", a.batch_size);
  r.get("learning_rate", a.learning_rate);
  r.get("include_target_pairs", a.include_target_pairs);
  r.finish();
}

json adapt_json(const AdaptSection& a) {
  return {{"centralized", adapt_mode_json(a.centralized, true)},
          {"batch_based", adapt_mode_json(a.batch_based, false)}};
}

void read_adapt(const json& j, AdaptSection& a) {
  SectionReader r(j, "adapt");
  if (const json* c = r.sub("centralized")) read_adapt_mode(*c, "adapt.centralized", a.centralized, true);
  if (const json* b = r.sub("batch_based")) read_adapt_mode(*b, "adapt.batch_based", a.batch_based, false);
  r.finish();
}

json eval_json(const EvalSection& e) {
  return {{"std_convention", e.convention == metrics::StdConvention::population ? "population" : "sample"},
          {"target_only_baseline", e.target_only_baseline}};
}

void read_eval(const json& j, EvalSection& e) {
  SectionReader r(j, "eval");
  std::string conv = e.convention == metrics::StdConvention::population ? "population" : "sample";
  r.get("std_convention", conv);
  if (conv == "population") {
    e.convention = metrics::StdConvention::population;
  } else if (conv == "sample") {
    e.convention = metrics::StdConvention::sample;
  } else {
    throw ConfigError("eval.std_convention must be 'population' or 'sample'");
  }
  r.get("target_only_baseline", e.target_only_baseline);
  r.finish();
}

}  // namespace

std::string digest(const json& j) {
  const std::string s = j.dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(s.data(), s.size())));
  return buf;
}

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.data.synth.image_size = 32;
  c.data.synth.lesion_radius_range = {3.0, 6.0};
  c.data.synth.num_train_target = 200;

  c.translator.model.net.base_width = 16;
  c.translator.model.net.channel_mult = {1, 2, 2};
  c.translator.train.phase1_epochs = 200;
  c.translator.train.phase2_epochs = 120;
  c.translator.train.batch_size = 16;
  c.translator.train.learning_rate = 5e-4;

  c.segmenter.model.net.base_width = 16;
  c.segmenter.model.net.levels = 4;
  c.segmenter.train.epochs = 40;
  c.segmenter.train.batch_size = 32;
  c.segmenter.train.learning_rate = 1e-3;

  c.adapt.centralized.mode = adapt::Mode::centralized;
  c.adapt.centralized.epochs = 20;
  c.adapt.centralized.batch_size = 16;
  c.adapt.centralized.learning_rate = 1e-4;
  c.adapt.batch_based.mode = adapt::Mode::batch_based;
  c.adapt.batch_based.batch_size = 8;
  c.adapt.batch_based.learning_rate = 1e-4;
  c.finalize();
  return c;
}

ExperimentConfig ExperimentConfig::full_scale() {
  ExperimentConfig c = desk();
  c.data.synth.image_size = 320;
  c.data.synth.lesion_radius_range = {8.0, 40.0};
  c.translator.model.net.base_width = 64;
  c.translator.train.phase1_epochs = 400;
  c.translator.train.phase2_epochs = 100;
  c.translator.train.learning_rate = 1e-4;
  c.segmenter.model.net.base_width = 32;
  c.segmenter.train.learning_rate = 1e-4;
  c.finalize();
  return c;
}

json ExperimentConfig::to_json() const {
  return {{"seed", seed},
          {"deterministic", deterministic},
          {"data", data_json(data)},
          {"translator", translator_json(translator)},
          {"segmenter", segmenter_json(segmenter)},
          {"selector", selector_json(selector)},
          {"adapt", adapt_json(adapt)},
          {"eval", eval_json(eval)}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c = desk();
  SectionReader r(j, "config");
  r.get("seed", c.seed);
  r.get("deterministic", c.deterministic);
  if (const json* s = r.sub("data")) read_data(*s, c.data);
  if (const json* s = r.sub("translator")) read_translator(*s, c.translator);
  if (const json* s = r.sub("segmenter")) read_segmenter(*s, c.segmenter);
  if (const json* s = r.sub("selector")) read_selector(*s, c.selector);
  if (const json* s = r.sub("adapt")) read_adapt(*s, c.adapt);
  if (const json* s = r.sub("eval")) read_eval(*s, c.eval);
  r.finish();
  c.finalize();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::finalize() {
  data.synth.rng_seed = seed;
  translator.model.image_size = data.synth.image_size;
  translator.train.seed = derive_seed(seed, {1});
  segmenter.train.seed = derive_seed(seed, {2});
  selector.sweep.n = selector.selector.n;
  adapt.centralized.mode = adapt::Mode::centralized;
  adapt.centralized.seed = derive_seed(seed, {4});
  adapt.batch_based.mode = adapt::Mode::batch_based;
  adapt.batch_based.epochs = 1;
  adapt.batch_based.seed = derive_seed(seed, {5});
  validate();
}

void ExperimentConfig::validate() const {
  try {
    synth::validate(data.synth);
    diffusion::DiffusionSchedule::linear(translator.model.num_steps, translator.model.beta_start,
                                         translator.model.beta_end)
        .validate();
    selector.selector.validate();
    selector.sweep.validate();
    adapt.centralized.validate();
    adapt.batch_based.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (translator.annotation_candidates.empty()) throw ConfigError("translator.annotation_candidates is empty");
  if (selector.ddim_steps < 1 || selector.ddim_steps > translator.model.num_steps) {
    throw ConfigError("selector.ddim_steps must lie in [1, num_steps]");
  }
  const int divisor = 1 << (segmenter.model.net.levels - 1);
  if (data.synth.image_size % divisor != 0) {
    throw ConfigError("image_size must be divisible by " + std::to_string(divisor) + " for the segmenter");
  }
  const int tdiv = 1 << (static_cast<int>(translator.model.net.channel_mult.size()) - 1);
  if (data.synth.image_size % tdiv != 0) {
    throw ConfigError("image_size must be divisible by " + std::to_string(tdiv) + " for the translator");
  }
  if (segmenter.heldout < 0 || segmenter.heldout >= data.synth.num_train_source) {
    throw ConfigError("segmenter.heldout must be smaller than data.n_source");
  }
}

std::string ExperimentConfig::data_hash() const { return digest({{"seed", seed}, {"data", data_json(data)}}); }

std::string ExperimentConfig::translator_hash() const {
  return digest({{"data", data_hash()}, {"translator", translator_json(translator)}, {"seed", seed}});
}

std::string ExperimentConfig::segmenter_hash() const {
  return digest({{"data", data_hash()}, {"segmenter", segmenter_json(segmenter)}, {"seed", seed}});
}

std::string ExperimentConfig::approximation_hash() const {
  return digest({{"translator", translator_hash()},
                 {"segmenter", segmenter_hash()},
                 {"selector", selector_json(selector)}});
}

std::string ExperimentConfig::adaptation_hash() const {
  return digest({{"approximation", approximation_hash()}, {"adapt", adapt_json(adapt)}});
}

std::string ExperimentConfig::config_hash() const { return digest(to_json()); }

}  // namespace rsa
