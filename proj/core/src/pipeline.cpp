#include "rsa/pipeline.hpp"

#include <sstream>

#include "rsa/adaptation.hpp"
#include "rsa/array_io.hpp"
#include "rsa/checkpoint.hpp"
#include "rsa/edges.hpp"
#include "rsa/seed.hpp"
#include "rsa/synth.hpp"
#include "rsa/tensor_util.hpp"

namespace rsa::pipeline {

using nlohmann::json;

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

template <class F>
auto guarded(const std::string& stage, F&& f) {
  try {
    return f();
  } catch (const StageFailed&) {
    throw;
  } catch (const std::exception& e) {
    throw StageFailed(stage, e.what());
  }
}

std::uint64_t stage_seed(const ExperimentConfig& cfg, std::uint64_t stage) { return derive_seed(cfg.seed, {stage}); }

void begin_stage(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.deterministic) {
    set_deterministic(seed);
  } else {
    torch::manual_seed(seed);
  }
}

std::string stage_hash_of(const fs::path& dir) {
  const json j = json::parse(io::read_text(dir / "stage.json"));
  return j.at("hash").get<std::string>();
}

std::vector<seg::TrainPair> labeled_pairs(const std::vector<LabeledSample>& samples) { return seg::to_pairs(samples); }

seg::SegModel load_segmenter(const fs::path& dir, const std::string& expected_hash) {
  std::string hash;
  seg::SegModel model = seg::SegModel::load(dir, &hash);
  if (hash != expected_hash) {
    throw ConfigMismatch("checkpoint " + dir.string() + " was written for config " + hash + ", expected " +
                         expected_hash);
  }
  model.net()->eval();
  return model;
}

std::shared_ptr<diffusion::TranslatorModel> load_translator(const fs::path& dir, const std::string& expected_hash) {
  std::string hash;
  auto model = diffusion::TranslatorModel::load(dir, &hash);
  if (hash != expected_hash) {
    throw ConfigMismatch("checkpoint " + dir.string() + " was written for config " + hash + ", expected " +
                         expected_hash);
  }
  model->eval();
  return model;
}

select::ApproximateOptions approximate_options(const ExperimentConfig& cfg) {
  select::ApproximateOptions opt;
  opt.sweep = cfg.selector.sweep;
  opt.canny = cfg.selector.canny;
  opt.ddim_steps = cfg.selector.ddim_steps;
  opt.seed = stage_seed(cfg, 3);
  return opt;
}

metrics::ApproximationQuality quality_of(const fs::path& manifest, const GroundTruth& truth) {
  std::vector<std::pair<std::string, BinaryMask>> accepted;
  for (const auto& p : adapt::load_accepted(manifest)) accepted.emplace_back(p.target_id, p.pseudo_label);
  return metrics::approximation_quality(accepted, truth);
}

json quality_json(const metrics::ApproximationQuality& q) {
  return {{"quality_percent", q.quality_percent ? json(*q.quality_percent) : json(nullptr)}, {"quantity", q.quantity}};
}

metrics::ApproximationQuality quality_from_json(const json& j) {
  metrics::ApproximationQuality q;
  q.quantity = j.at("quantity").get<std::size_t>();
  if (!j.at("quality_percent").is_null()) q.quality_percent = j.at("quality_percent").get<double>();
  return q;
}

}  // namespace

// ---------------------------------------------------------------------------

Layout::Layout(fs::path root, const ExperimentConfig& cfg) : root_(std::move(root)), cfg_(cfg) {}

fs::path Layout::data() const {
  if (!cfg_.data.ingest_manifest.empty()) return fs::path(cfg_.data.ingest_manifest).parent_path();
  return root_ / ("data-" + cfg_.data_hash());
}
fs::path Layout::manifest() const {
  if (!cfg_.data.ingest_manifest.empty()) return cfg_.data.ingest_manifest;
  return data() / "manifest.jsonl";
}
fs::path Layout::translator() const { return root_ / ("translator-" + cfg_.translator_hash()); }
fs::path Layout::segmenter() const { return root_ / ("segmenter-" + cfg_.segmenter_hash()); }
std::string Layout::target_only_hash() const {
  return digest({{"segmenter", cfg_.segmenter_hash()}, {"domain", "target"}});
}
fs::path Layout::target_only() const { return root_ / ("target-only-" + target_only_hash()); }
std::string Layout::grid_hash() const {
  const auto& s = cfg_.selector;
  return digest({{"translator", cfg_.translator_hash()},
                 {"segmenter", cfg_.segmenter_hash()},
                 {"n", s.selector.n},
                 {"samples_per_edge", s.selector.samples_per_edge},
                 {"sweep", {s.sweep.lo, s.sweep.hi}},
                 {"canny", {s.canny.gaussian_sigma, s.canny.low_ratio}},
                 {"ddim_steps", s.ddim_steps}});
}
fs::path Layout::grid() const { return root_ / ("grid-" + grid_hash()); }
fs::path Layout::approximation() const { return root_ / ("approx-" + cfg_.approximation_hash()); }
fs::path Layout::approximation_manifest() const { return approximation() / "manifest.jsonl"; }
fs::path Layout::centralized() const { return root_ / ("centralized-" + cfg_.adaptation_hash()); }
fs::path Layout::batch_based() const { return root_ / ("batch-based-" + cfg_.adaptation_hash()); }
fs::path Layout::evaluation() const { return root_ / ("eval-" + cfg_.config_hash()); }

bool stage_done(const fs::path& dir) { return fs::exists(dir / "stage.json"); }

void mark_done(const fs::path& dir, const std::string& stage, const std::string& hash, const json& seeds) {
  fs::create_directories(dir);
  io::write_text(dir / "stage.json", json{{"stage", stage}, {"hash", hash}, {"seeds", seeds}}.dump(2) + "\n");
}

void check_artifacts(const Layout& layout, const ExperimentConfig& cfg) {
  auto expect = [](const fs::path& dir, const std::string& hash) {
    if (!stage_done(dir)) return;
    std::string found;
    try {
      found = stage_hash_of(dir);
    } catch (const std::exception& e) {
      throw ConfigMismatch("unreadable stage marker in " + dir.string() + ": " + e.what());
    }
    if (found != hash) {
      throw ConfigMismatch("artifact " + dir.string() + " records config " + found + ", current config expects " +
                           hash);
    }
  };
  auto expect_ckpt = [](const fs::path& dir, const std::string& kind, const std::string& hash) {
    if (!fs::exists(dir / "meta.json")) return;
    std::string found;
    try {
      found = ckpt::read_meta(dir, kind).config_hash;
    } catch (const ckpt::CheckpointError&) {
      return;  // reported by the stage that consumes it
    }
    if (found != hash) {
      throw ConfigMismatch("checkpoint " + dir.string() + " records config " + found + ", current config expects " +
                           hash);
    }
  };
  if (cfg.data.ingest_manifest.empty()) expect(layout.data(), cfg.data_hash());
  expect(layout.translator(), cfg.translator_hash());
  expect_ckpt(layout.translator() / "model", "translator", cfg.translator_hash());
  expect(layout.segmenter(), cfg.segmenter_hash());
  expect_ckpt(layout.segmenter() / "model", "segmenter", cfg.segmenter_hash());
  expect(layout.grid(), layout.grid_hash());
  expect(layout.approximation(), cfg.approximation_hash());
  expect(layout.centralized(), cfg.adaptation_hash());
  expect_ckpt(layout.centralized() / "model", "segmenter", cfg.adaptation_hash());
  expect(layout.batch_based(), cfg.adaptation_hash());
  expect(layout.evaluation(), cfg.config_hash());
}

// ---------------------------------------------------------------------------
// Grid cache

void save_grid(const fs::path& dir, const GenerationGrid& grid) {
  if (grid.empty() || grid.front().empty()) throw std::invalid_argument("save_grid: empty grid");
  const std::size_t n = grid.size(), k = grid.front().size();
  const Shape s = grid.front().front().image.shape();
  RealGrid images(n * k * s.rows, s.cols), unc(n * k * s.rows, s.cols);
  BitGrid raw(n * k * s.rows, s.cols), edge(n * s.rows, s.cols);
  json meta = {{"n", n}, {"k", k}, {"rows", s.rows}, {"cols", s.cols}};
  json cells = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    if (grid[i].size() != k) throw std::invalid_argument("save_grid: ragged grid");
    for (std::size_t r = 0; r < s.rows; ++r) {
      for (std::size_t c = 0; c < s.cols; ++c) edge(i * s.rows + r, c) = grid[i][0].edge.pixels(r, c);
    }
    for (std::size_t j = 0; j < k; ++j) {
      const Generation& g = grid[i][j];
      const std::size_t off = (i * k + j) * s.rows;
      for (std::size_t r = 0; r < s.rows; ++r) {
        for (std::size_t c = 0; c < s.cols; ++c) {
          images(off + r, c) = g.image.pixels(r, c);
          unc(off + r, c) = g.uncertainty.pixels(r, c);
          raw(off + r, c) = g.raw_mask.pixels(r, c);
        }
      }
      cells.push_back({{"edge_index", g.edge_index},
                       {"sample_index", g.sample_index},
                       {"seed", g.seed},
                       {"image_id", g.image.id},
                       {"threshold", g.edge.threshold},
                       {"spacing", {g.image.spacing_mm.row, g.image.spacing_mm.col}}});
    }
  }
  meta["cells"] = cells;
  fs::create_directories(dir);
  io::write_array(dir / "images.arr", images);
  io::write_array(dir / "uncertainty.arr", unc);
  io::write_array(dir / "raw_masks.arr", raw);
  io::write_array(dir / "edges.arr", edge);
  io::write_text(dir / "grid.json", meta.dump() + "\n");  // written last: presence marks completion
}

GenerationGrid load_grid(const fs::path& dir) {
  const json meta = json::parse(io::read_text(dir / "grid.json"));
  const std::size_t n = meta.at("n"), k = meta.at("k"), rows = meta.at("rows"), cols = meta.at("cols");
  const RealGrid images = io::read_real_array(dir / "images.arr");
  const RealGrid unc = io::read_real_array(dir / "uncertainty.arr");
  const BitGrid raw = io::read_bit_array(dir / "raw_masks.arr");
  const BitGrid edge = io::read_bit_array(dir / "edges.arr");
  if (images.rows() != n * k * rows || images.cols() != cols || edge.rows() != n * rows) {
    throw io::FormatError("generation grid in " + dir.string() + " has inconsistent shapes");
  }
  GenerationGrid grid(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const json& cell = meta.at("cells").at(i * k + j);
      Generation g;
      g.edge_index = cell.at("edge_index");
      g.sample_index = cell.at("sample_index");
      g.seed = cell.at("seed");
      g.image.id = cell.at("image_id");
      g.image.spacing_mm = {cell.at("spacing")[0].get<double>(), cell.at("spacing")[1].get<double>()};
      g.image.pixels = RealGrid(rows, cols);
      g.uncertainty.pixels = RealGrid(rows, cols);
      g.raw_mask = {g.image.id, BitGrid(rows, cols)};
      g.edge = {BitGrid(rows, cols), cell.at("threshold").get<double>()};
      const std::size_t off = (i * k + j) * rows;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          g.image.pixels(r, c) = images(off + r, c);
          g.uncertainty.pixels(r, c) = unc(off + r, c);
          g.raw_mask.pixels(r, c) = raw(off + r, c);
          g.edge.pixels(r, c) = edge(i * rows + r, c);
        }
      }
      g.refined_mask = g.raw_mask;
      grid[i].push_back(std::move(g));
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Stages

fs::path stage_data(const ExperimentConfig& cfg, const Layout& layout, const Logger& log) {
  return guarded("synth-data", [&] {
    if (!cfg.data.ingest_manifest.empty()) {
      if (!fs::exists(layout.manifest())) throw std::runtime_error("missing manifest " + layout.manifest().string());
      say(log, "synth-data: using ingested dataset " + layout.manifest().string());
      return layout.manifest();
    }
    if (stage_done(layout.data())) {
      say(log, "synth-data: present, skipped");
      return layout.manifest();
    }
    say(log, "synth-data: rng_seed=" + std::to_string(cfg.data.synth.rng_seed));
    synth::generate_dataset(cfg.data.synth, layout.data(), true);
    mark_done(layout.data(), "synth-data", cfg.data_hash(), {{"rng_seed", cfg.data.synth.rng_seed}});
    return layout.manifest();
  });
}

void stage_translator(const ExperimentConfig& cfg, const Layout& layout, const Logger& log) {
  guarded("train-translator", [&] {
    const fs::path dir = layout.translator();
    if (stage_done(dir)) {
      say(log, "train-translator: present, skipped");
      return;
    }
    begin_stage(cfg, cfg.translator.train.seed);
    const Dataset ds = Dataset::open(layout.manifest());
    std::vector<diffusion::TranslatorExample> examples;
    for (const auto& s : ds.source(Split::train)) {
      const double t = edges::annotation_threshold(s.image, s.mask, cfg.translator.annotation_candidates,
                                                   cfg.translator.annotation_tolerance_px, cfg.selector.canny);
      examples.push_back({s.image, edges::canny(s.image, t, cfg.selector.canny)});
    }
    auto train = cfg.translator.train;
    train.log = [&](const std::string& m) { say(log, "train-translator: " + m); };
    say(log, "train-translator: seed=" + std::to_string(train.seed) + " examples=" + std::to_string(examples.size()));
    diffusion::TranslatorTrainingLog tlog;
    auto model = diffusion::train_translator(cfg.translator.model, examples, train, &tlog);
    model->save(dir / "model", cfg.translator_hash());
    io::write_text(dir / "training.json", json{{"phase1_epoch_loss", tlog.phase1_epoch_loss},
                                               {"phase2_epoch_loss", tlog.phase2_epoch_loss},
                                               {"heldout_uncond_initial", tlog.heldout_uncond_initial},
                                               {"heldout_uncond_final", tlog.heldout_uncond_final},
                                               {"heldout_cond_initial", tlog.heldout_cond_initial},
                                               {"heldout_cond_final", tlog.heldout_cond_final}}
                                                  .dump(2) +
                                              "\n");
    mark_done(dir, "train-translator", cfg.translator_hash(), {{"train", train.seed}});
  });
}

namespace {

void train_seg_stage(const ExperimentConfig& cfg, const fs::path& dir, const std::string& stage,
                     const std::string& hash, std::vector<seg::TrainPair> pairs, const GroundTruth* test_truth,
                     std::uint64_t seed, const Logger& log) {
  if (stage_done(dir)) {
    say(log, stage + ": present, skipped");
    return;
  }
  begin_stage(cfg, seed);
  const auto held = static_cast<std::size_t>(cfg.segmenter.heldout);
  if (pairs.size() <= held) throw std::runtime_error("not enough training pairs");
  std::vector<seg::TrainPair> heldout(pairs.end() - static_cast<std::ptrdiff_t>(held), pairs.end());
  pairs.resize(pairs.size() - held);
  auto train = cfg.segmenter.train;
  train.seed = seed;
  train.log = [&](const std::string& m) { say(log, stage + ": " + m); };
  say(log, stage + ": seed=" + std::to_string(seed) + " pairs=" + std::to_string(pairs.size()));
  seg::SegTrainReport report;
  seg::SegModel model = seg::train_segmenter(cfg.segmenter.model, pairs, heldout, train, &report);
  model.save(dir / "model", hash);
  json j = {{"epoch_loss", report.epoch_loss}, {"heldout_dice", report.heldout_dice}};
  if (test_truth) {
    const auto preds = adapt::predict_masks(model, UnlabeledView([&] {
                                              std::vector<Image2D> v;
                                              for (const auto& [id, s] : test_truth->samples()) v.push_back(s.image);
                                              return v;
                                            }()));
    j["test_dice_percent"] = metrics::evaluate(preds, *test_truth).dice_mean;
    say(log, stage + ": test Dice " + std::to_string(j["test_dice_percent"].get<double>()));
  }
  io::write_text(dir / "training.json", j.dump(2) + "\n");
  mark_done(dir, stage, hash, {{"train", seed}});
}

}  // namespace

void stage_segmenter(const ExperimentConfig& cfg, const Layout& layout, const Logger& log) {
  guarded("train-seg", [&] {
    if (stage_done(layout.segmenter())) {
      say(log, "train-seg: present, skipped");
      return;
    }
    const Dataset ds = Dataset::open(layout.manifest());
    const GroundTruth source_test = ds.evaluation_truth(Split::test, Domain::source);
    train_seg_stage(cfg, layout.segmenter(), "train-seg", cfg.segmenter_hash(), labeled_pairs(ds.source(Split::train)),
                    &source_test, cfg.segmenter.train.seed, log);
  });
}

void stage_target_only(const ExperimentConfig& cfg, const Layout& layout, const Logger& log) {
  guarded("train-target-only", [&] {
    if (stage_done(layout.target_only())) {
      say(log, "train-target-only: present, skipped");
      return;
    }
    const Dataset ds = Dataset::open(layout.manifest());
    // Reference upper bound: supervised on target labels. Never feeds adaptation.
    const auto pairs = labeled_pairs(ds.evaluation_truth(Split::train, Domain::target).pairs());
    train_seg_stage(cfg, layout.target_only(), "train-target-only",
                    layout.target_only_hash(), pairs,
                    nullptr, stage_seed(cfg, 6), log);
  });
}

void stage_grid(const ExperimentConfig& cfg, const Layout& layout, const Logger& log) {
  guarded("approximate", [&] {
    const fs::path dir = layout.grid();
    if (stage_done(dir)) {
      say(log, "approximate: generation grid present, skipped");
      return;
    }
    const auto opt = approximate_options(cfg);
    begin_stage(cfg, opt.seed);
    auto translator = load_translator(layout.translator() / "model", cfg.translator_hash());
    auto segmenter = load_segmenter(layout.segmenter() / "model", cfg.segmenter_hash());
    const Dataset ds = Dataset::open(layout.manifest());
    const UnlabeledView targets = ds.target_images(Split::train);
    say(log, "approximate: generating grids for " + std::to_string(targets.size()) + " targets, n=" +
                 std::to_string(cfg.selector.selector.n) + " seed=" + std::to_string(opt.seed));
    std::size_t done = 0;
    for (const auto& target : targets) {
      const fs::path tdir = dir / "targets" / target.id;
      if (!fs::exists(tdir / "grid.json")) {
        torch::NoGradGuard no_grad;
        save_grid(tdir, select::build_grid(target, *translator, segmenter, cfg.selector.selector.samples_per_edge, opt));
      }
      if (++done % 25 == 0) say(log, "approximate: " + std::to_string(done) + "/" + std::to_string(targets.size()));
    }
    mark_done(dir, "approximate.grid", layout.grid_hash(), {{"master", opt.seed}});
  });
}

void stage_approximate(const ExperimentConfig& cfg, const Layout& layout, const Logger& log) {
  stage_grid(cfg, layout, log);
  guarded("approximate", [&] {
    const fs::path dir = layout.approximation();
    if (stage_done(dir)) {
      say(log, "approximate: selection present, skipped");
      return;
    }
    const Dataset ds = Dataset::open(layout.manifest());
    const UnlabeledView targets = ds.target_images(Split::train);
    std::vector<adapt::ApproximationRecord> records;
    std::string provenance;
    std::size_t accepted = 0;
    for (const auto& target : targets) {
      GenerationGrid grid = load_grid(layout.grid() / "targets" / target.id);
      select::refine_grid(grid, cfg.selector.selector);
      const ApproximationResult r = select::select(grid, cfg.selector.selector, target.id);
      accepted += r.accepted;
      records.push_back(adapt::persist(r, target, dir));
      provenance += select::provenance(r).dump() + "\n";
    }
    adapt::write_approximation_manifest(dir / "manifest.jsonl", records);
    io::write_text(dir / "provenance.jsonl", provenance);
    say(log, "approximate: accepted " + std::to_string(accepted) + "/" + std::to_string(targets.size()));
    mark_done(dir, "approximate", cfg.approximation_hash(), {{"master", approximate_options(cfg).seed}});
  });
}

void stage_centralized(const ExperimentConfig& cfg, const Layout& layout, const Logger& log) {
  guarded("adapt-centralized", [&] {
    const fs::path dir = layout.centralized();
    if (stage_done(dir)) {
      say(log, "adapt-centralized: present, skipped");
      return;
    }
    begin_stage(cfg, cfg.adapt.centralized.seed);
    const seg::SegModel source = load_segmenter(layout.segmenter() / "model", cfg.segmenter_hash());
    say(log, "adapt-centralized: seed=" + std::to_string(cfg.adapt.centralized.seed));
    const seg::SegModel adapted =
        adapt::adapt_centralized(source, layout.approximation_manifest(), cfg.adapt.centralized,
                                 [&](const std::string& m) { say(log, "adapt-centralized: " + m); });
    adapted.save(dir / "model", cfg.adaptation_hash());
    mark_done(dir, "adapt-centralized", cfg.adaptation_hash(), {{"train", cfg.adapt.centralized.seed}});
  });
}

void stage_batch_based(const ExperimentConfig& cfg, const Layout& layout, const Logger& log) {
  guarded("adapt-batch-based", [&] {
    const fs::path dir = layout.batch_based();
    if (stage_done(dir)) {
      say(log, "adapt-batch-based: present, skipped");
      return;
    }
    begin_stage(cfg, cfg.adapt.batch_based.seed);
    auto translator = load_translator(layout.translator() / "model", cfg.translator_hash());
    const seg::SegModel source = load_segmenter(layout.segmenter() / "model", cfg.segmenter_hash());
    const Dataset ds = Dataset::open(layout.manifest());
    const UnlabeledView stream = ds.target_images(Split::test);
    auto opt = approximate_options(cfg);
    opt.seed = stage_seed(cfg, 7);
    say(log, "adapt-batch-based: seed=" + std::to_string(cfg.adapt.batch_based.seed) +
                 " generation master=" + std::to_string(opt.seed));
    auto result = adapt::adapt_batch_based(source, stream, *translator, cfg.selector.selector, opt,
                                           cfg.adapt.batch_based,
                                           [&](const std::string& m) { say(log, "adapt-batch-based: " + m); });
    metrics::save_predictions(dir / "predictions", result.predictions);
    std::map<std::string, const Image2D*> by_id;
    for (const auto& t : stream) by_id[t.id] = &t;
    std::vector<adapt::ApproximationRecord> records;
    for (const auto& r : result.approximations) {
      records.push_back(adapt::persist(r, *by_id.at(r.target_id), dir / "approximations"));
    }
    adapt::write_approximation_manifest(dir / "approximations" / "manifest.jsonl", records);
    result.model.save(dir / "model", cfg.adaptation_hash());
    mark_done(dir, "adapt-batch-based", cfg.adaptation_hash(),
              {{"train", cfg.adapt.batch_based.seed}, {"generation", opt.seed}, {"updates", result.update_steps}});
  });
}

json Reports::to_json() const {
  json j = {{"source_only", source_only.to_json()},
            {"batch_based", batch_based.to_json()},
            {"centralized", centralized.to_json()},
            {"approximation", quality_json(approximation)},
            {"source_test_dice", source_test_dice}};
  j["target_only"] = target_only ? target_only->to_json() : json(nullptr);
  return j;
}

std::string Reports::table() const {
  std::ostringstream out;
  out << "| Method | Dice (%) | ASSD (mm) |\n|---|---|---|\n";
  if (target_only) out << "| Target-only (supervised) | " << target_only->dice_cell() << " | " << target_only->assd_cell() << " |\n";
  out << "| Source-only | " << source_only.dice_cell() << " | " << source_only.assd_cell() << " |\n";
  out << "| Batch-based | " << batch_based.dice_cell() << " | " << batch_based.assd_cell() << " |\n";
  out << "| Centralized | " << centralized.dice_cell() << " | " << centralized.assd_cell() << " |\n";
  out << "\nApproximations accepted: " << approximation.quantity;
  if (approximation.quality_percent) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *approximation.quality_percent);
    out << ", pseudo-label Dice " << buf << "%";
  }
  out << "\n";
  return out.str();
}

namespace {

Reports reports_from_json(const json& j) {
  Reports r;
  r.source_only = metrics::EvalReport::from_json(j.at("source_only"));
  r.batch_based = metrics::EvalReport::from_json(j.at("batch_based"));
  r.centralized = metrics::EvalReport::from_json(j.at("centralized"));
  if (!j.at("target_only").is_null()) r.target_only = metrics::EvalReport::from_json(j.at("target_only"));
  r.approximation = quality_from_json(j.at("approximation"));
  r.source_test_dice = j.at("source_test_dice").get<double>();
  return r;
}

}  // namespace

Reports stage_evaluate(const ExperimentConfig& cfg, const Layout& layout, const Logger& log) {
  return guarded("evaluate", [&] {
    const fs::path dir = layout.evaluation();
    if (stage_done(dir)) {
      say(log, "evaluate: present, skipped");
      return reports_from_json(json::parse(io::read_text(dir / "report.json")));
    }
    const Dataset ds = Dataset::open(layout.manifest());
    const UnlabeledView test = ds.target_images(Split::test);
    const GroundTruth truth = ds.evaluation_truth(Split::test, Domain::target);
    const auto conv = cfg.eval.convention;

    Reports r;
    seg::SegModel source = load_segmenter(layout.segmenter() / "model", cfg.segmenter_hash());
    r.source_only = metrics::evaluate(adapt::predict_masks(source, test), truth, conv);
    seg::SegModel central = load_segmenter(layout.centralized() / "model", cfg.adaptation_hash());
    r.centralized = metrics::evaluate(adapt::predict_masks(central, test), truth, conv);
    r.batch_based = metrics::evaluate(metrics::load_predictions(layout.batch_based() / "predictions"), truth, conv);
    if (cfg.eval.target_only_baseline) {
      seg::SegModel target = load_segmenter(layout.target_only() / "model", layout.target_only_hash());
      r.target_only = metrics::evaluate(adapt::predict_masks(target, test), truth, conv);
    }
    r.approximation = quality_of(layout.approximation_manifest(), ds.evaluation_truth(Split::train, Domain::target));
    const json seg_log = json::parse(io::read_text(layout.segmenter() / "training.json"));
    r.source_test_dice = seg_log.value("test_dice_percent", 0.0);

    fs::create_directories(dir);
    io::write_text(dir / "report.md", r.table());
    io::write_text(dir / "report.json", r.to_json().dump(2) + "\n");
    mark_done(dir, "evaluate", cfg.config_hash());
    say(log, "evaluate:\n" + r.table());
    return r;
  });
}

Reports run_pipeline(const ExperimentConfig& cfg, const fs::path& root, const Logger& log) {
  fs::create_directories(root);
  const Layout layout(root, cfg);
  check_artifacts(layout, cfg);
  io::write_text(root / "config.json", cfg.to_json().dump(2) + "\n");
  say(log, "pipeline: config " + cfg.config_hash() + " seed=" + std::to_string(cfg.seed));

  stage_data(cfg, layout, log);
  stage_translator(cfg, layout, log);
  stage_segmenter(cfg, layout, log);
  if (cfg.eval.target_only_baseline) stage_target_only(cfg, layout, log);
  stage_approximate(cfg, layout, log);
  stage_centralized(cfg, layout, log);
  stage_batch_based(cfg, layout, log);
  Reports r = stage_evaluate(cfg, layout, log);

  io::write_text(root / "report.json", r.to_json().dump(2) + "\n");
  io::write_text(root / "report.md", r.table());
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

AblationParameter parse_parameter(const std::string& s) {
  if (s == "t_r" || s == "t-r") return AblationParameter::t_r;
  if (s == "t_un" || s == "t-un") return AblationParameter::t_un;
  if (s == "n") return AblationParameter::n;
  throw std::invalid_argument("unknown ablation parameter '" + s + "' (expected t_r, t_un or n)");
}

std::string to_string(AblationParameter p) {
  switch (p) {
    case AblationParameter::t_r: return "t_r";
    case AblationParameter::t_un: return "t_un";
    case AblationParameter::n: return "n";
  }
  return "?";
}

ExperimentConfig with_parameter(ExperimentConfig cfg, AblationParameter parameter, double value) {
  switch (parameter) {
    case AblationParameter::t_r: cfg.selector.selector.t_r = value; break;
    case AblationParameter::t_un: cfg.selector.selector.t_un = value; break;
    case AblationParameter::n:
      if (value < 1 || value != static_cast<int>(value)) throw std::invalid_argument("n must be a positive integer");
      cfg.selector.selector.n = static_cast<int>(value);
      break;
  }
  cfg.finalize();
  return cfg;
}

std::string AblationTable::markdown() const {
  std::ostringstream out;
  out << "| " << to_string(parameter) << " | Quality (%) | Quantity (n) | Dice (%) | ASSD (mm) |\n";
  out << "|---|---|---|---|---|\n";
  for (const auto& row : rows) {
    char v[32], q[32];
    std::snprintf(v, sizeof v, "%g", row.value);
    if (row.approximation.quality_percent) {
      std::snprintf(q, sizeof q, "%.2f", *row.approximation.quality_percent);
    } else {
      std::snprintf(q, sizeof q, "n/a");
    }
    out << "| " << v << " | " << q << " | " << row.approximation.quantity << " | " << row.centralized.dice_cell()
        << " | " << row.centralized.assd_cell() << " |\n";
  }
  return out.str();
}

json AblationTable::to_json() const {
  json rows_j = json::array();
  for (const auto& row : rows) {
    rows_j.push_back({{"value", row.value},
                      {"approximation", quality_json(row.approximation)},
                      {"centralized", row.centralized.to_json()}});
  }
  return {{"parameter", to_string(parameter)}, {"rows", rows_j}};
}

AblationTable ablate(const ExperimentConfig& base, const fs::path& root, AblationParameter parameter,
                     const std::vector<double>& values, const Logger& log) {
  if (values.empty()) throw std::invalid_argument("ablate needs at least one value");
  const Layout base_layout(root, base);
  if (!stage_done(base_layout.translator()) || !stage_done(base_layout.segmenter())) {
    throw std::runtime_error("ablate needs trained translator and segmenter checkpoints under " + root.string() +
                             " (run the pipeline first)");
  }
  AblationTable table;
  table.parameter = parameter;
  for (double value : values) {
    const ExperimentConfig cfg = with_parameter(base, parameter, value);
    const Layout layout(root, cfg);
    check_artifacts(layout, cfg);
    say(log, "ablate: " + to_string(parameter) + "=" + std::to_string(value));
    const fs::path row_file = layout.centralized() / "ablation_row.json";
    AblationRow row;
    row.value = value;
    if (fs::exists(row_file)) {
      const json j = json::parse(io::read_text(row_file));
      row.approximation = quality_from_json(j.at("approximation"));
      row.centralized = metrics::EvalReport::from_json(j.at("centralized"));
      table.rows.push_back(std::move(row));
      continue;
    }
    stage_approximate(cfg, layout, log);
    const Dataset ds = Dataset::open(layout.manifest());
    row.approximation =
        quality_of(layout.approximation_manifest(), ds.evaluation_truth(Split::train, Domain::target));
    const UnlabeledView test = ds.target_images(Split::test);
    const GroundTruth truth = ds.evaluation_truth(Split::test, Domain::target);
    if (row.approximation.quantity == 0) {
      // Nothing to adapt on: the row reports the unadapted source model.
      say(log, "ablate: nothing accepted, reporting the source model");
      seg::SegModel source = load_segmenter(layout.segmenter() / "model", cfg.segmenter_hash());
      row.centralized = metrics::evaluate(adapt::predict_masks(source, test), truth, cfg.eval.convention);
      fs::create_directories(layout.centralized());
    } else {
      stage_centralized(cfg, layout, log);
      seg::SegModel central = load_segmenter(layout.centralized() / "model", cfg.adaptation_hash());
      row.centralized = metrics::evaluate(adapt::predict_masks(central, test), truth, cfg.eval.convention);
    }
    io::write_text(row_file, json{{"approximation", quality_json(row.approximation)},
                                  {"centralized", row.centralized.to_json()}}
                                     .dump(2) +
                                 "\n");
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace rsa::pipeline
