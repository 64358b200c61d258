#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "refine/harness.hpp"

using namespace refine;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.data.scene.side = 16;
  c.data.scene.max_shapes = 2;
  c.data.scene.min_size = 2.0;
  c.data.scene.max_size = 3.0;
  c.data.scene.min_center_distance = 4.0;
  c.data.scene.mask_dilation = 1;
  c.data.sl = {24, 0};
  c.data.ssl = {16, 100};
  c.data.test = {8, 200};
  c.data.prompt_eval = {4, 300};
  c.model.grid = {16, 4};
  c.model.width = 8;
  c.model.cond_dim = 8;
  c.model.embed_dim = 4;
  c.model.backbone_layers = 4;
  c.model.teacher_layers = 4;
  c.model.student_layers = 2;
  c.backbone.steps = 6;
  c.backbone.batch = 8;
  c.teacher.max_steps = 6;
  c.teacher.batch = 8;
  c.teacher.eval_every = 6;
  c.teacher.holdout = 4;
  c.train.stage1_steps = 4;
  c.train.stage2_steps = 2;
  c.train.batch = 4;
  c.train.heldout_samples = 4;
  c.eval.steps = 3;
  c.eval.batch = 8;
  return c;
}

// One pipeline (data, backbone, teacher) shared by the tests of this binary.
struct Pipeline {
  fs::path root;
  Layout layout;
  ExperimentConfig cfg = tiny_config();

  Pipeline() {
    root = fs::temp_directory_path() / ("refine_harness_" + std::to_string(::getpid()));
    fs::remove_all(root);
    layout.root = root;
    std::ostringstream log;
    cmd_gen_data(cfg, layout, false, log);
    cmd_train_teacher(cfg, layout, false, log);
  }
  ~Pipeline() { fs::remove_all(root); }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

void write_report(const fs::path& dir, const std::string& variant, std::uint64_t seed, double psnr_m, double mmd,
                  const std::string& dataset_hash) {
  fs::create_directories(dir);
  MetricReport r;
  r.raw = {20.0, psnr_m, 0.8, 0.5, mmd};
  r.composited = r.raw;
  r.dataset_hash = dataset_hash;
  auto j = to_json(r);
  j["variant"] = variant;
  j["run_seed"] = seed;
  std::ofstream(dir / "report.json") << j.dump(2);
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::DomainError;
}

}  // namespace

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(exit_code(ErrorKind::ConfigError), 2);
  EXPECT_EQ(exit_code(ErrorKind::UnknownToken), 2);
  EXPECT_EQ(exit_code(ErrorKind::NumericFailure), 3);
  EXPECT_EQ(exit_code(ErrorKind::ValidityRefusal), 4);
  EXPECT_EQ(exit_code(ErrorKind::GroundTruthExposure), 4);
  EXPECT_EQ(exit_code(ErrorKind::IOFailure), 1);
  EXPECT_EQ(exit_code(ErrorKind::MissingArtifact), 1);
}

TEST(OutputRoot, EnvironmentWins) {
  ::unsetenv("REFINE_OUT");
  EXPECT_EQ(output_root("x"), fs::path("x"));
  ::setenv("REFINE_OUT", "/tmp/elsewhere", 1);
  EXPECT_EQ(output_root("x"), fs::path("/tmp/elsewhere"));
  ::unsetenv("REFINE_OUT");
}

TEST(Table, RefusesMixedDatasets) {
  const fs::path root = fs::temp_directory_path() / ("refine_table_" + std::to_string(::getpid()));
  write_report(root / "ours-seed0", "ours", 0, 15.0, 0.01, "aaa");
  write_report(root / "fc-seed0", "fc", 0, 14.0, 0.02, "bbb");
  EXPECT_EQ(kind_of([&] { build_comparison({root / "ours-seed0", root / "fc-seed0"}); }), ErrorKind::ValidityRefusal);
  EXPECT_EQ(kind_of([&] { build_comparison({root / "missing"}); }), ErrorKind::MissingArtifact);
  fs::remove_all(root);
}

TEST(Table, MediansBestFlagsAndGaps) {
  const fs::path root = fs::temp_directory_path() / ("refine_table2_" + std::to_string(::getpid()));
  std::vector<fs::path> dirs;
  const double ours[] = {15.0, 15.4, 14.8}, fc[] = {16.0, 15.9, 15.5};
  for (int s = 0; s < 3; ++s) {
    dirs.push_back(root / ("ours-seed" + std::to_string(s)));
    write_report(dirs.back(), "ours", s, ours[s], 0.01, "h");
    dirs.push_back(root / ("fc-seed" + std::to_string(s)));
    write_report(dirs.back(), "fc", s, fc[s], 0.02, "h");
  }
  const Comparison c = build_comparison(dirs);
  ASSERT_EQ(c.rows.size(), 6u);
  ASSERT_EQ(c.medians.size(), 2u);
  EXPECT_DOUBLE_EQ(c.medians[0].metrics.psnr_masked, 15.0);
  EXPECT_DOUBLE_EQ(c.medians[1].metrics.psnr_masked, 15.9);
  const std::string csv = c.csv();
  EXPECT_NE(csv.find("name,variant,seed,psnr_masked(up)"), std::string::npos);
  EXPECT_NE(csv.find("median:fc,fc,,15.9,"), std::string::npos) << csv;
  EXPECT_NE(csv.find(",0.9000"), std::string::npos) << csv;
  const std::string text = c.text();
  EXPECT_NE(text.find("(!!)"), std::string::npos);
  EXPECT_NE(text.find("Per-variant medians"), std::string::npos);
  fs::remove_all(root);
}

TEST(Commands, GenDataRefusesExistingWithoutForce) {
  Pipeline& p = pipeline();
  std::ostringstream log;
  EXPECT_EQ(kind_of([&] { cmd_gen_data(p.cfg, p.layout, false, log); }), ErrorKind::ValidityRefusal);
  EXPECT_EQ(kind_of([&] { cmd_train_teacher(p.cfg, p.layout, false, log); }), ErrorKind::ValidityRefusal);
}

TEST(Commands, ConfigDriftIsRefused) {
  Pipeline& p = pipeline();
  ExperimentConfig other = p.cfg;
  other.data.sl.count = 23;
  std::ostringstream log;
  EXPECT_EQ(kind_of([&] { cmd_run(other, p.layout, Variant::Ours, 0, log); }), ErrorKind::ValidityRefusal);
  other = p.cfg;
  other.backbone.steps = 7;
  EXPECT_EQ(kind_of([&] { cmd_run(other, p.layout, Variant::Ours, 0, log); }), ErrorKind::ValidityRefusal);
}

TEST(Commands, FcNeverOpensTeacher) {
  Pipeline& p = pipeline();
  std::ostringstream log;
  const RunOutcome r = cmd_run(p.cfg, p.layout, Variant::Fc, 11, log);
  ASSERT_EQ(r.audit.opened.size(), 1u);
  EXPECT_NE(r.audit.opened[0].find("backbone"), std::string::npos);
  for (const auto& a : r.summary.at("artifacts_opened")) EXPECT_EQ(a.get<std::string>().find("teacher"), std::string::npos);
  for (const char* f : {"report.json", "summary.json", "losses.csv", "losses.png", "run_manifest.json", "config.json"})
    EXPECT_TRUE(fs::exists(r.dir / f)) << f;
  const auto manifest = nlohmann::json::parse(std::ifstream(r.dir / "run_manifest.json"));
  EXPECT_EQ(manifest.at("seed"), 11);
  EXPECT_FALSE(manifest.at("config_hash").get<std::string>().empty());
  EXPECT_FALSE(manifest.at("code_version").get<std::string>().empty());
}

TEST(Commands, OursOpensTeacherAndRefusesRerun) {
  Pipeline& p = pipeline();
  std::ostringstream log;
  const RunOutcome r = cmd_run(p.cfg, p.layout, Variant::Ours, 12, log);
  EXPECT_EQ(r.audit.opened.size(), 2u);
  EXPECT_EQ(kind_of([&] { cmd_run(p.cfg, p.layout, Variant::Ours, 12, log); }), ErrorKind::ValidityRefusal);
  const Comparison c = build_comparison({r.dir});
  EXPECT_EQ(c.rows[0].variant, "ours");
  EXPECT_EQ(c.rows[0].seed, 12u);
  EXPECT_NO_THROW(load_run_student(r.dir));
}

TEST(Commands, RunIsReproducible) {
  Pipeline& p = pipeline();
  std::ostringstream log;
  const RunOutcome a = cmd_run(p.cfg, p.layout, Variant::WoCf, 13, log);
  fs::rename(a.dir, a.dir.string() + "-first");
  const RunOutcome b = cmd_run(p.cfg, p.layout, Variant::WoCf, 13, log);
  EXPECT_EQ(to_json(a.report.raw), to_json(b.report.raw));
}

TEST(PromptScenes, TwoShapesOfOneKind) {
  const DataConfig d = tiny_config().data;
  for (int i = 0; i < d.prompt_eval.count; ++i) {
    const Sample a = prompt_scene(d, i, 0), b = prompt_scene(d, i, 1);
    EXPECT_EQ(a.global_prompt, b.global_prompt);
    EXPECT_NE(a.local_prompt, b.local_prompt);
    EXPECT_EQ(a.local_prompt.substr(a.local_prompt.find(' ')), b.local_prompt.substr(b.local_prompt.find(' ')));
    EXPECT_NE(a.target_color, b.target_color);
  }
  EXPECT_EQ(kind_of([&] { prompt_scene(d, d.prompt_eval.count, 0); }), ErrorKind::IndexError);
}

TEST(Gradcheck, FormatsOneLinePerOp) {
  const auto entries = run_gradcheck();
  const std::string s = format_gradcheck(entries);
  EXPECT_EQ(static_cast<size_t>(std::count(s.begin(), s.end(), '\n')), entries.size());
  for (const auto& e : entries) EXPECT_NE(s.find((e.pass ? "PASS " : "FAIL ") + e.op), std::string::npos) << e.op;
}
