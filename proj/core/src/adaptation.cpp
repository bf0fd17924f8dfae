#include "rsa/adaptation.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <tuple>

#include "rsa/array_io.hpp"
#include "rsa/seed.hpp"
#include "rsa/tensor_util.hpp"

namespace rsa::adapt {

using nlohmann::json;

Mode parse_mode(const std::string& s) {
  if (s == "batch-based" || s == "batch_based") return Mode::batch_based;
  if (s == "centralized") return Mode::centralized;
  throw std::invalid_argument("unknown adaptation mode '" + s + "'");
}

std::string to_string(Mode m) { return m == Mode::batch_based ? "batch-based" : "centralized"; }

AdaptConfig AdaptConfig::normalized() const {
  AdaptConfig c = *this;
  if (c.mode == Mode::batch_based) c.epochs = 1;
  return c;
}

void AdaptConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("adaptation learning_rate must be positive");
  if (batch_size < 1) throw std::invalid_argument("adaptation batch_size must be positive");
  if (epochs < 0) throw std::invalid_argument("adaptation epochs must be non-negative");
}

void write_approximation_manifest(const fs::path& path, const std::vector<ApproximationRecord>& records) {
  std::string text;
  for (const auto& r : records) {
    json j = {{"target_id", r.target_id}, {"accepted", r.accepted}, {"R", r.R}};
    if (r.accepted) {
      j["edge_index"] = r.edge_index;
      j["threshold"] = r.threshold;
      j["sample_index"] = r.sample_index;
      j["paths"] = {{"image", r.image_path}, {"pseudo_label", r.pseudo_label_path}, {"target", r.target_path}};
    }
    text += j.dump() + "\n";
  }
  io::write_text(path, text);
}

std::vector<ApproximationRecord> read_approximation_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing approximation manifest " + path.string());
  std::vector<ApproximationRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ApproximationRecord r;
      r.target_id = j.at("target_id").get<std::string>();
      r.accepted = j.at("accepted").get<bool>();
      r.R = j.at("R").get<double>();
      if (r.accepted) {
        r.edge_index = j.at("edge_index").get<int>();
        r.threshold = j.at("threshold").get<double>();
        r.sample_index = j.at("sample_index").get<int>();
        r.image_path = j.at("paths").at("image").get<std::string>();
        r.pseudo_label_path = j.at("paths").at("pseudo_label").get<std::string>();
        r.target_path = j.at("paths").at("target").get<std::string>();
      }
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw io::FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

ApproximationRecord persist(const ApproximationResult& result, const Image2D& target, const fs::path& root) {
  ApproximationRecord rec;
  rec.target_id = result.target_id;
  rec.accepted = result.accepted;
  rec.R = result.consistency;
  if (!result.accepted) return rec;
  const auto& g = *result.generation;
  rec.edge_index = result.chosen_edge_index;
  rec.sample_index = result.chosen_sample_index;
  rec.threshold = result.thresholds.at(static_cast<std::size_t>(result.chosen_edge_index));
  const fs::path rel = result.target_id;
  rec.image_path = (rel / "generated").string();
  rec.pseudo_label_path = (rel / "pseudo_label").string();
  rec.target_path = (rel / "target").string();
  io::save(root / rec.image_path, g.image);
  io::save(root / rec.pseudo_label_path, g.refined_mask);
  io::save(root / rec.target_path, target);
  io::save(root / rel / "edge", g.edge);
  io::save(root / rel / "uncertainty", g.uncertainty);
  return rec;
}

std::vector<ApproximationPair> deduplicate(std::vector<ApproximationPair> pairs) {
  std::set<std::tuple<std::string, int, int>> seen;
  std::vector<ApproximationPair> out;
  for (auto& p : pairs) {
    if (seen.emplace(p.target_id, p.edge_index, p.sample_index).second) out.push_back(std::move(p));
  }
  return out;
}

std::vector<ApproximationPair> load_accepted(const fs::path& manifest_path) {
  const fs::path root = manifest_path.parent_path();
  std::vector<ApproximationPair> pairs;
  for (const auto& r : read_approximation_manifest(manifest_path)) {
    if (!r.accepted) continue;
    ApproximationPair p;
    p.target_id = r.target_id;
    p.edge_index = r.edge_index;
    p.sample_index = r.sample_index;
    p.generated = io::load_image(root / r.image_path);
    p.pseudo_label = io::load_mask(root / r.pseudo_label_path);
    p.target = io::load_image(root / r.target_path);
    pairs.push_back(std::move(p));
  }
  return deduplicate(std::move(pairs));
}

std::vector<ApproximationPair> accepted_pairs(const std::vector<ApproximationResult>& results,
                                              const UnlabeledView& targets) {
  std::map<std::string, const Image2D*> by_id;
  for (const auto& t : targets) by_id[t.id] = &t;
  std::vector<ApproximationPair> pairs;
  for (const auto& r : results) {
    if (!r.accepted) continue;
    auto it = by_id.find(r.target_id);
    if (it == by_id.end()) throw std::invalid_argument("approximation for unknown target " + r.target_id);
    pairs.push_back({r.target_id, r.chosen_edge_index, r.chosen_sample_index, r.generation->image,
                     r.generation->refined_mask, *it->second});
  }
  return deduplicate(std::move(pairs));
}

std::vector<seg::TrainPair> training_pairs(const std::vector<ApproximationPair>& pairs, bool include_target_pairs) {
  std::vector<seg::TrainPair> out;
  for (const auto& p : pairs) {
    out.push_back({p.generated, p.pseudo_label});
    if (include_target_pairs) out.push_back({p.target, p.pseudo_label});
  }
  return out;
}

seg::SegModel adapt_centralized(const seg::SegModel& model, const std::vector<ApproximationPair>& pairs,
                                const AdaptConfig& cfg_in, std::function<void(const std::string&)> log) {
  const AdaptConfig cfg = cfg_in.normalized();
  cfg.validate();
  if (pairs.empty()) throw NothingToAdapt();
  seg::SegModel adapted = model.clone();
  seg::SegTrainConfig train;
  train.epochs = cfg.epochs;
  train.batch_size = cfg.batch_size;
  train.learning_rate = cfg.learning_rate;
  train.seed = cfg.seed;
  train.log = std::move(log);
  torch::manual_seed(cfg.seed);
  seg::fit(adapted, training_pairs(deduplicate(pairs), cfg.include_target_pairs), train);
  adapted.net()->eval();
  return adapted;
}

seg::SegModel adapt_centralized(const seg::SegModel& model, const fs::path& approximation_manifest,
                                const AdaptConfig& cfg, std::function<void(const std::string&)> log) {
  return adapt_centralized(model, load_accepted(approximation_manifest), cfg, std::move(log));
}

std::map<std::string, BinaryMask> predict_masks(seg::SegModel& model, const UnlabeledView& images) {
  std::vector<Image2D> flat(images.begin(), images.end());
  auto preds = seg::predict_batch(model, flat);
  std::map<std::string, BinaryMask> out;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    preds[i].mask.id = flat[i].id;
    out.emplace(flat[i].id, std::move(preds[i].mask));
  }
  return out;
}

BatchBasedResult adapt_batch_based(const seg::SegModel& model, const UnlabeledView& stream,
                                   diffusion::TranslatorModel& translator, const select::SelectorConfig& selector,
                                   const select::ApproximateOptions& approx, const AdaptConfig& cfg_in,
                                   std::function<void(const std::string&)> log) {
  AdaptConfig cfg = cfg_in;
  cfg.mode = Mode::batch_based;
  cfg = cfg.normalized();
  cfg.validate();
  if (stream.empty()) throw std::invalid_argument("batch-based adaptation needs a non-empty stream");

  BatchBasedResult result{model.clone(), {}, {}, 0};
  torch::manual_seed(cfg.seed);
  torch::optim::Adam opt(result.model.net()->parameters(), torch::optim::AdamOptions(cfg.learning_rate));

  const std::size_t n = stream.size();
  for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t e = std::min(n, s + static_cast<std::size_t>(cfg.batch_size));
    std::vector<Image2D> batch(stream.begin() + static_cast<std::ptrdiff_t>(s),
                               stream.begin() + static_cast<std::ptrdiff_t>(e));
    const UnlabeledView view(batch);

    std::vector<ApproximationResult> found;
    for (const auto& image : batch) {
      found.push_back(select::approximate(image, translator, result.model, selector, approx));
    }
    const auto pairs = accepted_pairs(found, view);
    if (!pairs.empty()) {
      std::vector<torch::Tensor> xs, ys;
      for (const auto& p : training_pairs(pairs, cfg.include_target_pairs)) {
        xs.push_back(to_unit_tensor(p.image));
        ys.push_back(to_tensor(p.mask.pixels));
      }
      result.model.net()->train();
      opt.zero_grad();
      auto loss = seg::total_loss(result.model.config(), result.model.forward(torch::cat(xs, 0)), torch::cat(ys, 0));
      if (!std::isfinite(loss.item<double>())) {
        throw seg::TrainingDiverged("non-finite loss in batch-based adaptation at batch " +
                                    std::to_string(s / static_cast<std::size_t>(cfg.batch_size)));
      }
      loss.backward();
      opt.step();
      result.model.net()->eval();
      ++result.update_steps;
    }
    for (auto& [id, mask] : predict_masks(result.model, view)) result.predictions.emplace(id, std::move(mask));
    if (log) {
      log("batch " + std::to_string(s / static_cast<std::size_t>(cfg.batch_size) + 1) + ": " +
          std::to_string(pairs.size()) + "/" + std::to_string(batch.size()) + " accepted");
    }
    for (auto& r : found) result.approximations.push_back(std::move(r));
  }
  return result;
}

}  // namespace rsa::adapt
