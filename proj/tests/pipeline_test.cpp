#include <gtest/gtest.h>

#include <fstream>

#include "rsa/array_io.hpp"
#include "rsa/pipeline.hpp"
#include "support.hpp"
#include "tiny_config.hpp"

using namespace rsa;
using namespace rsa::testing;
namespace pl = rsa::pipeline;

namespace {

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch_dir("pipeline"));
    cfg_ = new ExperimentConfig(tiny_experiment());
    first_ = new pl::Reports(pl::run_pipeline(*cfg_, *root_));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
    delete cfg_;
    delete first_;
  }

  static fs::path copy_run(const std::string& name) {
    const fs::path dst = scratch_dir(name);
    fs::copy(*root_, dst, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    return dst;
  }

  static fs::path* root_;
  static ExperimentConfig* cfg_;
  static pl::Reports* first_;
};

fs::path* Pipeline::root_ = nullptr;
ExperimentConfig* Pipeline::cfg_ = nullptr;
pl::Reports* Pipeline::first_ = nullptr;

}  // namespace

TEST_F(Pipeline, EmitsAllReportsAndArtifacts) {
  const pl::Layout layout(*root_, *cfg_);
  for (const auto& dir : {layout.data(), layout.translator(), layout.segmenter(), layout.grid(), layout.approximation(),
                          layout.centralized(), layout.batch_based(), layout.evaluation()}) {
    EXPECT_TRUE(pl::stage_done(dir)) << dir;
    const auto marker = nlohmann::json::parse(io::read_text(dir / "stage.json"));
    EXPECT_TRUE(marker.contains("hash"));
    EXPECT_TRUE(marker.contains("seeds"));
  }
  EXPECT_TRUE(fs::exists(*root_ / "report.json"));
  EXPECT_TRUE(fs::exists(*root_ / "report.md"));
  EXPECT_EQ(first_->source_only.count, 5u);
  EXPECT_EQ(first_->centralized.count, 5u);
  EXPECT_EQ(first_->batch_based.count, 5u);
  ASSERT_TRUE(first_->target_only.has_value());
  EXPECT_EQ(first_->approximation.quantity, 6u);  // t_r = 1 accepts every target
}

TEST_F(Pipeline, RerunSkipsEveryStageWithIdenticalReport) {
  std::vector<std::string> lines;
  const auto again = pl::run_pipeline(*cfg_, *root_, [&](const std::string& m) { lines.push_back(m); });
  EXPECT_EQ(again.to_json(), first_->to_json());
  for (const auto& l : lines) {
    if (l.rfind("pipeline:", 0) == 0) continue;
    EXPECT_NE(l.find("skipped"), std::string::npos) << l;
  }
}

TEST_F(Pipeline, CorruptedCheckpointHaltsTheConsumingStage) {
  const fs::path run = copy_run("pipeline-corrupt");
  const pl::Layout layout(run, *cfg_);
  {
    std::ofstream out(layout.segmenter() / "model" / "weights.pt", std::ios::binary | std::ios::trunc);
    out << "garbage";
  }
  fs::remove_all(layout.grid());
  fs::remove_all(layout.approximation());
  try {
    pl::run_pipeline(*cfg_, run);
    FAIL() << "expected StageFailed";
  } catch (const pl::StageFailed& e) {
    EXPECT_EQ(e.stage(), "approximate");
  }
  EXPECT_TRUE(fs::exists(layout.translator() / "model"));  // earlier artifacts are preserved
  fs::remove_all(run);
}

TEST_F(Pipeline, MismatchedArtifactDetectedBeforeAnyStage) {
  const fs::path run = copy_run("pipeline-mismatch");
  const pl::Layout layout(run, *cfg_);
  auto marker = nlohmann::json::parse(io::read_text(layout.translator() / "stage.json"));
  marker["hash"] = "0000000000000000";
  io::write_text(layout.translator() / "stage.json", marker.dump());
  const auto before = fs::last_write_time(run / "report.json");
  EXPECT_THROW(pl::run_pipeline(*cfg_, run), pl::ConfigMismatch);
  EXPECT_EQ(fs::last_write_time(run / "report.json"), before);
  fs::remove_all(run);
}

TEST_F(Pipeline, AblationOverThresholdAndEdgeCount) {
  const fs::path run = copy_run("pipeline-ablate");
  const auto tr = pl::ablate(*cfg_, run, pl::AblationParameter::t_r, {0.1, 0.5, 1.0});
  ASSERT_EQ(tr.rows.size(), 3u);
  for (std::size_t i = 1; i < tr.rows.size(); ++i) {
    EXPECT_GE(tr.rows[i].approximation.quantity, tr.rows[i - 1].approximation.quantity);
  }
  const auto md = tr.markdown();
  for (const char* col : {"Quality (%)", "Quantity (n)", "Dice (%)", "ASSD (mm)"}) {
    EXPECT_NE(md.find(col), std::string::npos) << col;
  }

  const auto tun = pl::ablate(*cfg_, run, pl::AblationParameter::t_un, {0.1, 0.2, 0.4});
  ASSERT_EQ(tun.rows.size(), 3u);

  const auto n = pl::ablate(*cfg_, run, pl::AblationParameter::n, {1, 2, 3});
  ASSERT_EQ(n.rows.size(), 3u);
  for (const auto& row : n.rows) EXPECT_EQ(row.centralized.count, 5u);
  fs::remove_all(run);
}

TEST(PipelineAblation, RequiresTrainedModels) {
  const fs::path run = scratch_dir("pipeline-untrained");
  EXPECT_ANY_THROW(pl::ablate(tiny_experiment(), run, pl::AblationParameter::t_r, {0.3}));
  fs::remove_all(run);
}

TEST(PipelineAblation, ParameterParsing) {
  EXPECT_EQ(pl::parse_parameter("t_r"), pl::AblationParameter::t_r);
  EXPECT_EQ(pl::parse_parameter("t_un"), pl::AblationParameter::t_un);
  EXPECT_EQ(pl::parse_parameter("n"), pl::AblationParameter::n);
  EXPECT_THROW(pl::parse_parameter("lambda"), std::invalid_argument);
  EXPECT_THROW(pl::with_parameter(tiny_experiment(), pl::AblationParameter::n, 2.5), std::invalid_argument);
}
