// rsa: command line front-end for the source-approximation pipeline.

#include <CLI11.hpp>
#include <chrono>
#include <fstream>
#include <iostream>

#include "rsa/adaptation.hpp"
#include "rsa/array_io.hpp"
#include "rsa/config.hpp"
#include "rsa/dataset.hpp"
#include "rsa/diffusion.hpp"
#include "rsa/edges.hpp"
#include "rsa/metrics.hpp"
#include "rsa/pipeline.hpp"
#include "rsa/seed.hpp"
#include "rsa/segmenter.hpp"
#include "rsa/selector.hpp"
#include "rsa/synth.hpp"
#include "rsa/tensor_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rsa;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  bool full_scale = false;
  std::string out;
};

class Log {
 public:
  explicit Log(const fs::path& file = {}) {
    if (!file.empty()) {
      fs::create_directories(file.parent_path());
      file_.open(file, std::ios::app);
    }
  }
  void operator()(const std::string& msg) {
    std::cerr << msg << "\n";
    if (file_) file_ << msg << "\n" << std::flush;
  }
  pipeline::Logger fn() {
    return [this](const std::string& m) { (*this)(m); };
  }

 private:
  std::ofstream file_;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig cfg = g.full_scale ? ExperimentConfig::full_scale() : ExperimentConfig::desk();
  if (!g.config.empty()) cfg = ExperimentConfig::load(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (g.deterministic) cfg.deterministic = true;
  cfg.finalize();
  if (cfg.deterministic) set_deterministic(cfg.seed);
  return cfg;
}

fs::path manifest_in(const fs::path& p) { return fs::is_directory(p) ? p / "manifest.jsonl" : p; }

Split split_of(const std::string& s) { return parse_split(s); }

edges::ThresholdSweep parse_sweep(const std::string& s) {
  edges::ThresholdSweep sw;
  char c1 = 0, c2 = 0;
  std::istringstream in(s);
  if (!(in >> sw.lo >> c1 >> sw.hi >> c2 >> sw.n) || c1 != ':' || c2 != ':') {
    throw CLI::ValidationError("--sweep", "expected LO:HI:N, got '" + s + "'");
  }
  sw.validate();
  return sw;
}

std::string require_out(const Globals& g) {
  if (g.out.empty()) throw CLI::RequiredError("--out");
  return g.out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reliable source approximation: edge-guided diffusion translation and uncertainty-filtered adaptation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_flag("--deterministic", g.deterministic, "Single thread, deterministic kernels");
  app.add_flag("--full-scale", g.full_scale, "Start from the full-scale profile instead of desk scale");
  app.add_option("--out", g.out, "Output path");

  // synth-data
  auto* synth_cmd = app.add_subcommand("synth-data", "Generate the synthetic two-domain benchmark");
  std::optional<int> size, n_source, n_target, n_test;
  synth_cmd->add_option("--size", size);
  synth_cmd->add_option("--n-source", n_source);
  synth_cmd->add_option("--n-target", n_target);
  synth_cmd->add_option("--n-test", n_test);
  bool overwrite = false;
  synth_cmd->add_flag("--overwrite", overwrite);
  synth_cmd->callback([&] {
    ExperimentConfig cfg = load_config(g);
    auto s = cfg.data.synth;
    if (size) s.image_size = *size;
    if (n_source) s.num_train_source = *n_source;
    if (n_target) s.num_train_target = *n_target;
    if (n_test) s.num_test_target = *n_test;
    const fs::path m = synth::generate_dataset(s, require_out(g), overwrite);
    std::cout << m.string() << "\n";
  });

  // edges
  auto* edges_cmd = app.add_subcommand("edges", "Canny edge sweep for every sample of a dataset");
  std::string edges_in, sweep_spec = "30:80:2";
  edges_cmd->add_option("--in", edges_in, "Dataset directory or manifest")->required();
  edges_cmd->add_option("--sweep", sweep_spec, "LO:HI:N");
  edges_cmd->callback([&] {
    const ExperimentConfig cfg = load_config(g);
    const auto sweep = parse_sweep(sweep_spec);
    const fs::path out = g.out.empty() ? fs::path(manifest_in(edges_in)).parent_path() : fs::path(g.out);
    const Dataset ds = Dataset::open(manifest_in(edges_in));
    std::size_t k = 0;
    for (const auto& [image, mask] : ds.samples()) {
      const auto& rec = ds.records()[k++];
      const auto maps = edges::sweep_edges(image, sweep, cfg.selector.canny);
      for (std::size_t i = 0; i < maps.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "edge-%02zu", i);
        io::save(out / to_string(rec.domain) / rec.id / name, maps[i]);
      }
    }
    std::cout << "wrote edge maps for " << k << " samples under " << out.string() << "\n";
  });

  // train-translator
  auto* tt_cmd = app.add_subcommand("train-translator", "Two-phase training of the edge-guided diffusion model");
  std::string tt_data;
  std::optional<int> e1, e2;
  bool unlock = false;
  tt_cmd->add_option("--data", tt_data, "Dataset directory or manifest")->required();
  tt_cmd->add_option("--phase1-epochs", e1);
  tt_cmd->add_option("--phase2-epochs", e2);
  tt_cmd->add_flag("--unlock-base", unlock, "Also update the base network in phase 2");
  tt_cmd->callback([&] {
    ExperimentConfig cfg = load_config(g);
    if (e1) cfg.translator.train.phase1_epochs = *e1;
    if (e2) cfg.translator.train.phase2_epochs = *e2;
    if (unlock) cfg.translator.train.unlock_base = true;
    cfg.data.ingest_manifest = manifest_in(tt_data).string();
    const fs::path out = require_out(g);
    Log log(out.parent_path() / (out.filename().string() + ".log"));
    const Dataset ds = Dataset::open(cfg.data.ingest_manifest);
    std::vector<diffusion::TranslatorExample> ex;
    for (const auto& s : ds.source(Split::train)) {
      const double t = edges::annotation_threshold(s.image, s.mask, cfg.translator.annotation_candidates,
                                                   cfg.translator.annotation_tolerance_px, cfg.selector.canny);
      ex.push_back({s.image, edges::canny(s.image, t, cfg.selector.canny)});
    }
    auto train = cfg.translator.train;
    train.log = log.fn();
    log("seed " + std::to_string(train.seed));
    diffusion::TranslatorTrainingLog tl;
    auto model = diffusion::train_translator(cfg.translator.model, ex, train, &tl);
    model->save(out, cfg.translator_hash());
    log("held-out loss " + std::to_string(tl.heldout_uncond_initial) + " -> " + std::to_string(tl.heldout_uncond_final) +
        " (unconditional), " + std::to_string(tl.heldout_cond_initial) + " -> " +
        std::to_string(tl.heldout_cond_final) + " (edge-guided)");
  });

  // train-seg
  auto* ts_cmd = app.add_subcommand("train-seg", "Train the evidential segmenter on labelled source data");
  std::string ts_data;
  std::optional<int> seg_epochs;
  std::optional<double> lambda;
  ts_cmd->add_option("--data", ts_data, "Dataset directory or manifest")->required();
  ts_cmd->add_option("--epochs", seg_epochs);
  ts_cmd->add_option("--lambda", lambda, "Evidential regulariser weight");
  ts_cmd->callback([&] {
    ExperimentConfig cfg = load_config(g);
    if (seg_epochs) cfg.segmenter.train.epochs = *seg_epochs;
    if (lambda) cfg.segmenter.model.lambda_reg = *lambda;
    const fs::path out = require_out(g);
    Log log;
    const Dataset ds = Dataset::open(manifest_in(ts_data));
    auto pairs = seg::to_pairs(ds.source(Split::train));
    const auto held = std::min<std::size_t>(static_cast<std::size_t>(cfg.segmenter.heldout), pairs.size() / 4);
    std::vector<seg::TrainPair> heldout(pairs.end() - static_cast<std::ptrdiff_t>(held), pairs.end());
    pairs.resize(pairs.size() - held);
    auto train = cfg.segmenter.train;
    train.log = log.fn();
    seg::SegTrainReport report;
    auto model = seg::train_segmenter(cfg.segmenter.model, pairs, heldout, train, &report);
    model.save(out, cfg.segmenter_hash());
    log("held-out Dice " + std::to_string(100.0 * report.heldout_dice));
  });

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "Sample an n x samples grid of edge-guided images");
  std::string gen_ckpt, gen_edges;
  int gen_n = 2, gen_samples = 3, gen_steps = 50;
  gen_cmd->add_option("--ckpt", gen_ckpt, "Translator checkpoint")->required();
  gen_cmd->add_option("--edges", gen_edges, "Directory of edge maps (as written by `edges`)")->required();
  gen_cmd->add_option("--n", gen_n);
  gen_cmd->add_option("--samples", gen_samples);
  gen_cmd->add_option("--steps", gen_steps);
  gen_cmd->callback([&] {
    const ExperimentConfig cfg = load_config(g);
    auto model = diffusion::TranslatorModel::load(gen_ckpt);
    model->eval();
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(gen_edges)) {
      if (e.is_directory() && fs::exists(e.path() / "meta.json")) dirs.push_back(e.path());
    }
    std::vector<EdgeMap> maps;
    for (const auto& d : dirs) maps.push_back(io::load_edge(d));
    std::sort(maps.begin(), maps.end(), [](const EdgeMap& a, const EdgeMap& b) { return a.threshold < b.threshold; });
    if (maps.size() < static_cast<std::size_t>(gen_n)) {
      throw std::runtime_error("found " + std::to_string(maps.size()) + " edge maps, need --n " + std::to_string(gen_n));
    }
    maps.resize(static_cast<std::size_t>(gen_n));
    torch::NoGradGuard no_grad;
    const auto grid = diffusion::generate_grid(*model, maps, gen_samples, cfg.seed, gen_steps);
    const fs::path out = require_out(g);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      for (std::size_t j = 0; j < grid[i].size(); ++j) {
        io::save(out / ("e" + std::to_string(i) + "s" + std::to_string(j)), grid[i][j]);
      }
    }
    std::cout << "wrote " << grid.size() * static_cast<std::size_t>(gen_samples) << " images to " << out.string()
              << "\n";
  });

  // approximate
  auto* ap_cmd = app.add_subcommand("approximate", "Select reliable source approximations for target images");
  std::string ap_tr, ap_seg, ap_targets, ap_split = "train";
  std::optional<double> t_un, t_r;
  std::optional<int> ap_n;
  ap_cmd->add_option("--translator", ap_tr)->required();
  ap_cmd->add_option("--seg", ap_seg)->required();
  ap_cmd->add_option("--targets", ap_targets, "Dataset directory or manifest")->required();
  ap_cmd->add_option("--split", ap_split);
  ap_cmd->add_option("--t-un", t_un);
  ap_cmd->add_option("--t-r", t_r);
  ap_cmd->add_option("--n", ap_n);
  ap_cmd->callback([&] {
    ExperimentConfig cfg = load_config(g);
    if (t_un) cfg.selector.selector.t_un = *t_un;
    if (t_r) cfg.selector.selector.t_r = *t_r;
    if (ap_n) cfg.selector.selector.n = *ap_n;
    cfg.finalize();
    const fs::path out = require_out(g);
    Log log(out / "approximate.log");
    auto translator = diffusion::TranslatorModel::load(ap_tr);
    translator->eval();
    auto segmenter = seg::SegModel::load(ap_seg);
    segmenter.net()->eval();
    const Dataset ds = Dataset::open(manifest_in(ap_targets));
    select::ApproximateOptions opt{cfg.selector.sweep, cfg.selector.canny, cfg.selector.ddim_steps,
                                   derive_seed(cfg.seed, {3})};
    log("generation master seed " + std::to_string(opt.seed));
    std::vector<adapt::ApproximationRecord> records;
    std::ofstream prov(out / "provenance.jsonl");
    std::size_t accepted = 0;
    torch::NoGradGuard no_grad;
    for (const auto& t : ds.target_images(split_of(ap_split))) {
      const auto r = select::approximate(t, *translator, segmenter, cfg.selector.selector, opt);
      accepted += r.accepted;
      records.push_back(adapt::persist(r, t, out));
      prov << select::provenance(r).dump() << "\n";
    }
    adapt::write_approximation_manifest(out / "manifest.jsonl", records);
    log("accepted " + std::to_string(accepted) + "/" + std::to_string(records.size()));
  });

  // adapt
  auto* ad_cmd = app.add_subcommand("adapt", "Fine-tune the segmenter on accepted approximations");
  std::string ad_mode = "centralized", ad_manifest, ad_targets, ad_seg, ad_tr;
  std::optional<int> ad_epochs, ad_batch;
  std::optional<double> ad_lr;
  bool no_target_pairs = false;
  ad_cmd->add_option("--mode", ad_mode)->check(CLI::IsMember({"centralized", "batch-based"}));
  ad_cmd->add_option("--manifest", ad_manifest, "Approximation manifest (centralized)");
  ad_cmd->add_option("--targets", ad_targets, "Dataset directory or manifest; target-test stream (batch-based)");
  ad_cmd->add_option("--seg", ad_seg, "Source segmenter checkpoint")->required();
  ad_cmd->add_option("--translator", ad_tr, "Translator checkpoint (batch-based)");
  ad_cmd->add_option("--epochs", ad_epochs);
  ad_cmd->add_option("--batch-size", ad_batch);
  ad_cmd->add_option("--lr", ad_lr);
  ad_cmd->add_flag("--no-target-pairs", no_target_pairs, "Train on generated images only");
  ad_cmd->callback([&] {
    const ExperimentConfig cfg = load_config(g);
    const fs::path out = require_out(g);
    Log log;
    const seg::SegModel source = seg::SegModel::load(ad_seg);
    const bool batch = ad_mode == "batch-based";
    adapt::AdaptConfig ac = batch ? cfg.adapt.batch_based : cfg.adapt.centralized;
    if (ad_epochs) ac.epochs = *ad_epochs;
    if (ad_batch) ac.batch_size = *ad_batch;
    if (ad_lr) ac.learning_rate = *ad_lr;
    if (no_target_pairs) ac.include_target_pairs = false;
    if (!batch) {
      if (ad_manifest.empty()) throw CLI::RequiredError("--manifest");
      adapt::adapt_centralized(source, fs::path(ad_manifest), ac, log.fn()).save(out, cfg.adaptation_hash());
      return;
    }
    if (ad_targets.empty() || ad_tr.empty()) throw CLI::RequiredError("--targets and --translator");
    auto translator = diffusion::TranslatorModel::load(ad_tr);
    translator->eval();
    const Dataset ds = Dataset::open(manifest_in(ad_targets));
    const UnlabeledView stream = ds.target_images(Split::test);
    select::ApproximateOptions opt{cfg.selector.sweep, cfg.selector.canny, cfg.selector.ddim_steps,
                                   derive_seed(cfg.seed, {7})};
    auto result = adapt::adapt_batch_based(source, stream, *translator, cfg.selector.selector, opt, ac, log.fn());
    metrics::save_predictions(out / "predictions", result.predictions);
    std::vector<adapt::ApproximationRecord> records;
    std::map<std::string, const Image2D*> by_id;
    for (const auto& t : stream) by_id[t.id] = &t;
    for (const auto& r : result.approximations) {
      records.push_back(adapt::persist(r, *by_id.at(r.target_id), out / "approximations"));
    }
    adapt::write_approximation_manifest(out / "approximations" / "manifest.jsonl", records);
    result.model.save(out / "model", cfg.adaptation_hash());
    log("update steps: " + std::to_string(result.update_steps));
  });

  // evaluate
  auto* ev_cmd = app.add_subcommand("evaluate", "Dice / ASSD report for a predictions directory");
  std::string ev_pred, ev_gt, ev_split = "test", ev_domain = "target";
  ev_cmd->add_option("--pred", ev_pred, "Predictions directory (<id>/mask.arr)")->required();
  ev_cmd->add_option("--gt", ev_gt, "Dataset directory or manifest")->required();
  ev_cmd->add_option("--split", ev_split);
  ev_cmd->add_option("--domain", ev_domain);
  ev_cmd->callback([&] {
    const ExperimentConfig cfg = load_config(g);
    const Dataset ds = Dataset::open(manifest_in(ev_gt));
    const auto truth = ds.evaluation_truth(parse_split(ev_split), parse_domain(ev_domain));
    const auto report = metrics::evaluate(metrics::load_predictions(ev_pred), truth, cfg.eval.convention);
    if (!g.out.empty()) io::write_text(g.out, report.to_json().dump(2) + "\n");
    std::cout << report.table();
    if (!report.missing.empty()) {
      std::cerr << "warning: " << report.missing.size() << " ground-truth ids have no prediction\n";
    }
  });

  // ablate
  auto* ab_cmd = app.add_subcommand("ablate", "Sweep t_r, t_un or n over a completed experiment");
  std::string ab_param;
  std::vector<double> ab_values;
  ab_cmd->add_option("--param", ab_param)->required()->check(CLI::IsMember({"t_r", "t_un", "n"}));
  ab_cmd->add_option("--values", ab_values)->required()->delimiter(',');
  ab_cmd->callback([&] {
    const ExperimentConfig cfg = load_config(g);
    const fs::path root = require_out(g);
    Log log(root / "pipeline.log");
    const auto table = pipeline::ablate(cfg, root, pipeline::parse_parameter(ab_param), ab_values, log.fn());
    io::write_text(root / ("ablation-" + ab_param + ".json"), table.to_json().dump(2) + "\n");
    io::write_text(root / ("ablation-" + ab_param + ".md"), table.markdown());
    std::cout << table.markdown();
  });

  // pipeline
  auto* pl_cmd = app.add_subcommand("pipeline", "Run every stage end to end (resumable)");
  bool print_config = false;
  pl_cmd->add_flag("--print-config", print_config, "Print the effective config and exit");
  pl_cmd->callback([&] {
    const ExperimentConfig cfg = load_config(g);
    if (print_config) {
      std::cout << cfg.to_json().dump(2) << "\n";
      return;
    }
    const fs::path root = require_out(g);
    Log log(root / "pipeline.log");
    const auto reports = pipeline::run_pipeline(cfg, root, log.fn());
    std::cout << reports.table();
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const pipeline::StageFailed& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
