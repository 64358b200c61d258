// refine_cli: data generation, training, evaluation and reporting.

#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "refine/checkpoint.hpp"
#include "refine/config.hpp"
#include "refine/gradcheck.hpp"
#include "refine/harness.hpp"

namespace fs = std::filesystem;
using namespace refine;

namespace {

ExperimentConfig config_from(const std::string& path) {
  return path.empty() ? parse_config(default_config_text(), "<default>") : load_config(path);
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IOFailure, "cannot write " + path.string());
  f << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage distillation of inpainting control modules on synthetic shape scenes"};
  app.require_subcommand(1);
  std::string out_dir = "refine_out";
  app.add_option("--out", out_dir, "Output root (REFINE_OUT takes precedence)");

  std::string config_path;
  bool force = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the sl/ssl/test datasets");
  gen->add_option("--config", config_path, "Config JSON (built-in defaults when omitted)");
  gen->add_flag("--force", force, "Replace an existing dataset");

  auto* teach = app.add_subcommand("train-teacher", "Pretrain the backbone and train the teacher");
  teach->add_option("--config", config_path, "Config JSON");
  teach->add_flag("--force", force, "Replace existing backbone/teacher checkpoints");

  std::string variant_name;
  std::uint64_t seed = 0;
  auto* run = app.add_subcommand("run", "Train and evaluate one student variant");
  run->add_option("--variant", variant_name, "ours|fc|wo_mask|one_stage|sl|wo_cf")->required();
  run->add_option("--seed", seed, "Run seed")->required();
  run->add_option("--config", config_path, "Config JSON");

  std::vector<std::string> table_dirs;
  bool table_csv = false, composited = false;
  std::string table_write;
  auto* table = app.add_subcommand("table", "Compare run reports");
  table->add_option("dirs", table_dirs, "Run directories")->required();
  table->add_flag("--csv", table_csv, "Print CSV instead of the formatted table");
  table->add_flag("--composited", composited, "Use metrics of unmasked-region composites");
  table->add_option("--write", table_write, "Also write comparison.csv/.txt and bar charts into this directory");

  std::string demo_run, demo_png = "promptdemo.png", demo_json;
  int demo_scene = 0, demo_target = 0;
  auto* demo = app.add_subcommand("promptdemo", "Global vs local prompt inpainting on two-same-shape scenes");
  demo->add_option("--run", demo_run, "Run directory holding the student")->required();
  demo->add_option("--config", config_path, "Config JSON");
  demo->add_option("--scene", demo_scene, "Prompt-eval scene index");
  demo->add_option("--target", demo_target, "Target shape index (0 or 1)");
  demo->add_option("--png", demo_png, "Output PNG grid");
  demo->add_option("--accuracy-json", demo_json, "Also score all prompt-eval scenes and write accuracies here");

  GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  grad->add_option("--perturb", gc.perturb, "Scale one op's analytic gradient (sensitivity check)");
  grad->add_option("--instances", gc.instances, "Random instances per op");

  app.add_subcommand("default-config", "Print the built-in default config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  const Layout layout{output_root(out_dir)};
  try {
    if (*gen) {
      std::cout << cmd_gen_data(config_from(config_path), layout, force, std::cerr).dump(2) << "\n";
    } else if (*teach) {
      std::cout << cmd_train_teacher(config_from(config_path), layout, force, std::cerr).dump(2) << "\n";
    } else if (*run) {
      const auto outcome = cmd_run(config_from(config_path), layout, variant_from_string(variant_name), seed, std::cerr);
      std::cout << outcome.summary.dump(2) << "\n";
    } else if (*table) {
      std::vector<fs::path> dirs(table_dirs.begin(), table_dirs.end());
      const Comparison c = build_comparison(dirs, composited);
      std::cout << (table_csv ? c.csv() : c.text());
      if (!table_write.empty()) write_comparison(c, table_write);
    } else if (*demo) {
      const ExperimentConfig cfg = config_from(config_path);
      const Backbone<float> backbone = load_backbone(layout.backbone());
      const ControlModule<float> student = load_run_student(demo_run);
      require(demo_target == 0 || demo_target == 1, ErrorKind::IndexError,
              "target index must be 0 or 1, got " + std::to_string(demo_target));
      render_prompt_demo(backbone, student, cfg.data, cfg.eval, demo_scene, demo_target, demo_png);
      std::cout << "wrote " << demo_png << "\n";
      if (!demo_json.empty()) {
        const auto acc = prompt_accuracy(backbone, student, cfg.data, cfg.eval);
        const nlohmann::json j{{"scenes", acc.scenes},
                               {"local_accuracy", acc.local_accuracy},
                               {"global_accuracy", acc.global_accuracy},
                               {"truth", acc.truth},
                               {"local_pred", acc.local_pred},
                               {"global_pred", acc.global_pred}};
        write_file(demo_json, j.dump(2) + "\n");
        std::cout << "local accuracy " << acc.local_accuracy << ", global accuracy " << acc.global_accuracy << "\n";
      }
    } else if (*grad) {
      const auto entries = run_gradcheck(gc);
      std::cout << format_gradcheck(entries);
      for (const auto& e : entries)
        if (!e.pass) return kExitFailure;
    } else {
      std::cout << default_config_text();
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}
