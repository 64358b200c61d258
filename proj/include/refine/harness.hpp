#pragma once

// Command implementations behind refine_cli. Each command throws refine::Error
// on failure; exit_code() maps error kinds to process exit codes.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refine/checkpoint.hpp"
#include "refine/config.hpp"
#include "refine/gradcheck.hpp"
#include "refine/metrics.hpp"
#include "refine/trainer.hpp"

namespace refine {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitRefusal = 4;

int exit_code(ErrorKind kind);

/// Code version baked in at build time (git describe), "unknown" otherwise.
std::string code_version();

/// $REFINE_OUT when set, else `fallback`.
std::filesystem::path output_root(const std::filesystem::path& fallback = "refine_out");

/// Artifact layout below an output root.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path backbone() const { return root / "backbone"; }
  std::filesystem::path teacher() const { return root / "teacher"; }
  std::filesystem::path runs() const { return root / "runs"; }
  std::filesystem::path run(Variant v, std::uint64_t seed) const {
    return runs() / (to_string(v) + "-seed" + std::to_string(seed));
  }
};

struct RunManifest {
  std::string command;
  nlohmann::json config;  // canonical
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::vector<std::string> artifacts;
  std::string code_version;
};

nlohmann::json to_json(const RunManifest& m);
std::string utc_timestamp();

/// Writes {data}/..., refusing an existing dataset unless force.
nlohmann::json cmd_gen_data(const ExperimentConfig& cfg, const Layout& layout, bool force, std::ostream& log);

/// Pretrains the backbone and trains the teacher; writes backbone/ and teacher/.
nlohmann::json cmd_train_teacher(const ExperimentConfig& cfg, const Layout& layout, bool force, std::ostream& log);

struct RunOutcome {
  std::filesystem::path dir;
  MetricReport report;
  nlohmann::json summary;
  ArtifactAudit audit;
};

/// Trains and evaluates one variant into runs/{variant}-seed{seed}; refuses a completed run.
RunOutcome cmd_run(const ExperimentConfig& cfg, const Layout& layout, Variant variant, std::uint64_t seed,
                   std::ostream& log);

struct TableRow {
  std::string name;
  std::string variant;
  std::uint64_t seed = 0;
  MetricValues metrics;
  std::string dataset_hash;
};

struct Comparison {
  std::vector<TableRow> rows;
  std::vector<TableRow> medians;  // one per variant when any variant has several seeds

  std::string csv() const;
  std::string text() const;
};

/// Loads report.json from each run directory. Refuses (ValidityRefusal) when
/// the runs were evaluated on different datasets.
Comparison build_comparison(const std::vector<std::filesystem::path>& run_dirs, bool composited = false);

/// Writes comparison.csv, comparison.txt and one bar chart per metric column into dir.
void write_comparison(const Comparison& c, const std::filesystem::path& dir);

/// Metric columns: name, higher-is-better.
const std::vector<std::pair<std::string, bool>>& metric_columns();
double metric_value(const MetricValues& m, const std::string& column);

struct PromptEvalResult {
  int scenes = 0;
  double local_accuracy = 0.0;
  double global_accuracy = 0.0;
  std::vector<int> truth, local_pred, global_pred;
};

/// Two-same-kind scene `index` of the prompt_eval range, target shape `target`.
Sample prompt_scene(const DataConfig& data, int index, int target);

/// Inpaints every prompt_eval scene with local and with global prompts and
/// classifies the mask-region color of each generation.
PromptEvalResult prompt_accuracy(const Backbone<float>& backbone, const ControlModule<float>& control,
                                 const DataConfig& data, const EvalConfig& eval);

/// PNG grid: original | mask | masked input | global-prompt result | local-prompt result.
void render_prompt_demo(const Backbone<float>& backbone, const ControlModule<float>& control, const DataConfig& data,
                        const EvalConfig& eval, int index, int target, const std::filesystem::path& png);

/// Loads the final student checkpoint of a run directory.
ControlModule<float> load_run_student(const std::filesystem::path& run_dir, ArtifactAudit* audit = nullptr);

std::string format_gradcheck(const std::vector<GradcheckEntry>& entries);

}  // namespace refine
