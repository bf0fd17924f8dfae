#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rsa/config.hpp"
#include "rsa/dataset.hpp"
#include "rsa/metrics.hpp"

namespace rsa::pipeline {

namespace fs = std::filesystem;

using Logger = std::function<void(const std::string&)>;

class StageFailed : public std::runtime_error {
 public:
  StageFailed(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

class ConfigMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Experiment directory layout. Every stage lives in <root>/<stage>-<hash>/ and
// is complete once its stage.json marker exists.
class Layout {
 public:
  Layout(fs::path root, const ExperimentConfig& cfg);

  const fs::path& root() const { return root_; }
  fs::path data() const;
  fs::path manifest() const;
  fs::path translator() const;
  fs::path segmenter() const;
  fs::path target_only() const;
  std::string target_only_hash() const;
  fs::path grid() const;
  fs::path approximation() const;
  fs::path approximation_manifest() const;
  fs::path centralized() const;
  fs::path batch_based() const;
  fs::path evaluation() const;
  std::string grid_hash() const;

 private:
  fs::path root_;
  const ExperimentConfig& cfg_;
};

bool stage_done(const fs::path& dir);
// Writes the completion marker recording the stage hash and its seeds.
void mark_done(const fs::path& dir, const std::string& stage, const std::string& hash,
               const nlohmann::json& seeds = nlohmann::json::object());
// Checks every existing stage marker and checkpoint under the layout against
// the hashes the current config expects. Throws ConfigMismatch.
void check_artifacts(const Layout& layout, const ExperimentConfig& cfg);

struct Reports {
  metrics::EvalReport source_only;
  metrics::EvalReport batch_based;
  metrics::EvalReport centralized;
  std::optional<metrics::EvalReport> target_only;
  metrics::ApproximationQuality approximation;  // pseudo-labels of the adaptation targets
  double source_test_dice = 0;                  // percent, source model on source-test

  nlohmann::json to_json() const;
  std::string table() const;
};

// Stages, each a no-op when its marker is present.
fs::path stage_data(const ExperimentConfig& cfg, const Layout& layout, const Logger& log);
void stage_translator(const ExperimentConfig& cfg, const Layout& layout, const Logger& log);
void stage_segmenter(const ExperimentConfig& cfg, const Layout& layout, const Logger& log);
void stage_target_only(const ExperimentConfig& cfg, const Layout& layout, const Logger& log);
void stage_grid(const ExperimentConfig& cfg, const Layout& layout, const Logger& log);
void stage_approximate(const ExperimentConfig& cfg, const Layout& layout, const Logger& log);
void stage_centralized(const ExperimentConfig& cfg, const Layout& layout, const Logger& log);
void stage_batch_based(const ExperimentConfig& cfg, const Layout& layout, const Logger& log);
Reports stage_evaluate(const ExperimentConfig& cfg, const Layout& layout, const Logger& log);

// synth-data -> train-translator -> train-seg -> approximate -> adapt -> evaluate.
// Writes <root>/report.json and <root>/report.md.
Reports run_pipeline(const ExperimentConfig& cfg, const fs::path& root, const Logger& log = {});

// Generation grid cache: one directory per target with stacked arrays.
void save_grid(const fs::path& dir, const GenerationGrid& grid);
GenerationGrid load_grid(const fs::path& dir);

enum class AblationParameter { t_r, t_un, n };
AblationParameter parse_parameter(const std::string& s);
std::string to_string(AblationParameter p);

struct AblationRow {
  double value = 0;
  metrics::ApproximationQuality approximation;
  metrics::EvalReport centralized;
};

struct AblationTable {
  AblationParameter parameter = AblationParameter::t_r;
  std::vector<AblationRow> rows;

  std::string markdown() const;
  nlohmann::json to_json() const;
};

// Reruns approximate + centralized adaptation + evaluation for every value,
// reusing the trained checkpoints (and generation grids when n is unchanged).
AblationTable ablate(const ExperimentConfig& cfg, const fs::path& root, AblationParameter parameter,
                     const std::vector<double>& values, const Logger& log = {});

// Config with one ablation parameter replaced.
ExperimentConfig with_parameter(ExperimentConfig cfg, AblationParameter parameter, double value);

}  // namespace rsa::pipeline
