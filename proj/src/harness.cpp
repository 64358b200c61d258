#include "refine/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "refine/hashing.hpp"
#include "refine/image_io.hpp"
#include "refine/plot.hpp"

#ifndef REFINE_CODE_VERSION
#define REFINE_CODE_VERSION "unknown"
#endif

namespace fs = std::filesystem;

namespace refine {

namespace {

nlohmann::json read_json(const fs::path& path, ErrorKind missing = ErrorKind::MissingArtifact) {
  std::ifstream in(path);
  require(in.good(), missing, "cannot read " + path.string());
  return nlohmann::json::parse(in);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::IOFailure, "cannot write " + path.string());
  out << text;
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p)); }

// Verifies that {data}/dataset.json was built from this config.
nlohmann::json check_dataset(const ExperimentConfig& cfg, const Layout& layout) {
  const fs::path path = layout.data() / "dataset.json";
  require(fs::exists(path), ErrorKind::MissingArtifact,
          "no dataset at " + layout.data().string() + "; run `refine_cli gen-data` first");
  const auto doc = read_json(path);
  bool same = doc.at("seed").get<std::uint64_t>() == cfg.data.seed &&
              doc.at("generator_hash").get<std::string>() == generator_hash(cfg.data);
  for (Split s : {Split::SL, Split::SSL, Split::Test}) {
    const auto& split = doc.at("splits").at(to_string(s));
    same = same && split.at("count").get<int>() == cfg.data.split(s).count &&
           split.at("seed_offset").get<std::uint64_t>() == cfg.data.split(s).seed_offset;
  }
  require(same, ErrorKind::ValidityRefusal,
          "dataset at " + layout.data().string() + " was built from a different config; rerun gen-data --force");
  return doc;
}

// Hash of everything the backbone and teacher depend on.
std::string upstream_hash(const ExperimentConfig& cfg, const std::string& dataset_hash) {
  const auto full = to_json(cfg);
  return config_hash({{"dataset_hash", dataset_hash},
                      {"seed", cfg.seed},
                      {"model", full.at("model")},
                      {"backbone", full.at("backbone")},
                      {"teacher", full.at("teacher")},
                      {"eval", full.at("eval")}});
}

void plot_losses(const fs::path& path, const LossLog& log) {
  std::vector<Series> series(4);
  const Rgb colors[] = {{200, 60, 50}, {50, 110, 200}, {60, 160, 70}, {30, 30, 30}};
  std::vector<double> x, y[4];
  for (const auto& r : log.rows()) {
    x.push_back(static_cast<double>(r.step));
    y[0].push_back(r.terms.task);
    y[1].push_back(r.terms.distill);
    y[2].push_back(r.terms.af);
    y[3].push_back(r.terms.total);
  }
  for (int k = 0; k < 4; ++k) series[k] = {x, smooth(y[k], 50), colors[k]};
  plot_lines(path, series, true);
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Eigen::VectorXf upscale(const Eigen::VectorXf& chw, int side, int channels, int factor) {
  const int big = side * factor;
  Eigen::VectorXf out(static_cast<Eigen::Index>(channels) * big * big);
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < big; ++y)
      for (int x = 0; x < big; ++x)
        out[(c * big + y) * big + x] = chw[(c * side + y / factor) * side + x / factor];
  return out;
}

}  // namespace

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigError:
    case ErrorKind::UnknownToken:
      return kExitConfig;
    case ErrorKind::NumericFailure:
      return kExitNumeric;
    case ErrorKind::ValidityRefusal:
    case ErrorKind::GroundTruthExposure:
      return kExitRefusal;
    default:
      return kExitFailure;
  }
}

std::string code_version() { return REFINE_CODE_VERSION; }

fs::path output_root(const fs::path& fallback) {
  if (const char* env = std::getenv("REFINE_OUT"); env && *env) return env;
  return fallback;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json to_json(const RunManifest& m) {
  return {{"command", m.command},   {"config", m.config},       {"config_hash", m.config_hash},
          {"seed", m.seed},         {"started", m.started},     {"finished", m.finished},
          {"artifacts", m.artifacts}, {"code_version", m.code_version}};
}

nlohmann::json cmd_gen_data(const ExperimentConfig& cfg, const Layout& layout, bool force, std::ostream& log) {
  const fs::path dir = layout.data();
  if (non_empty_dir(dir)) {
    require(force, ErrorKind::ValidityRefusal,
            "dataset directory " + dir.string() + " already exists; pass --force to rebuild it");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  log << "generating " << cfg.data.sl.count << " sl / " << cfg.data.ssl.count << " ssl / " << cfg.data.test.count
      << " test samples into " << dir << "\n";
  const auto manifest = build_datasets(cfg.data, dir);
  log << "dataset_hash " << manifest.doc.at("dataset_hash").get<std::string>() << "\n";
  return manifest.doc;
}

nlohmann::json cmd_train_teacher(const ExperimentConfig& cfg, const Layout& layout, bool force, std::ostream& log) {
  const auto dataset = check_dataset(cfg, layout);
  for (const fs::path& d : {layout.backbone(), layout.teacher()}) {
    if (!non_empty_dir(d)) continue;
    require(force, ErrorKind::ValidityRefusal, d.string() + " already exists; pass --force to retrain");
    fs::remove_all(d);
  }
  RunManifest rm;
  rm.command = "train-teacher";
  rm.started = utc_timestamp();
  rm.seed = cfg.seed;
  rm.code_version = code_version();
  const std::string dataset_hash = dataset.at("dataset_hash").get<std::string>();
  rm.config = nlohmann::json::parse(canonical_json(to_json(cfg)));
  rm.config_hash = upstream_hash(cfg, dataset_hash);

  const auto sl = load_split(layout.data(), Split::SL);
  require(static_cast<int>(sl.size()) > cfg.teacher.holdout, ErrorKind::TooFewSamples, "sl split smaller than holdout");
  const size_t n_train = sl.size() - static_cast<size_t>(cfg.teacher.holdout);
  const PreparedSet train = prepare(sl, 0, static_cast<long>(n_train));
  const std::vector<Sample> holdout(sl.begin() + static_cast<std::ptrdiff_t>(n_train), sl.end());

  log << "pretraining backbone for " << cfg.backbone.steps << " steps\n";
  TrainContext ctx;
  fs::create_directories(layout.backbone());
  ctx.crash_path = layout.backbone() / "crash.json";
  const auto bb = pretrain_backbone(cfg.model, train, cfg.backbone, cfg.seed, ctx);
  save_backbone(layout.backbone(), bb.backbone,
                {{"stage", "backbone"}, {"step", cfg.backbone.steps}, {"upstream_hash", rm.config_hash},
                 {"seed", cfg.seed}, {"dataset_hash", dataset_hash}});
  bb.log.write_csv(layout.backbone() / "losses.csv");
  plot_losses(layout.backbone() / "losses.png", bb.log);

  log << "training teacher (max " << cfg.teacher.max_steps << " steps, masked-PSNR floor " << cfg.teacher.psnr_floor
      << " dB)\n";
  fs::create_directories(layout.teacher());
  ctx.crash_path = layout.teacher() / "crash.json";
  const auto te = train_teacher(bb.backbone, train, holdout, cfg.teacher, cfg.eval, cfg.seed, ctx);
  nlohmann::json validation = nlohmann::json::array();
  for (const auto& [step, p] : te.validation) validation.push_back({{"step", step}, {"psnr_masked", p}});
  const auto plan = build_injection_plan(build_alignment_plan(cfg.model.student_layers, cfg.model.teacher_layers),
                                         identity_teacher_injection(cfg.model.teacher_layers),
                                         cfg.model.backbone_layers);
  save_control(layout.teacher(), te.teacher,
               {{"stage", "teacher"},
                {"step", te.steps},
                {"upstream_hash", rm.config_hash},
                {"seed", cfg.seed},
                {"dataset_hash", dataset_hash},
                {"heldout_psnr_masked", te.heldout_psnr_masked},
                {"psnr_floor", cfg.teacher.psnr_floor},
                {"converged", te.converged},
                {"flags", te.converged ? nlohmann::json::array() : nlohmann::json::array({"NonConvergence"})},
                {"validation", validation},
                {"plan", to_json(plan)}});
  te.log.write_csv(layout.teacher() / "losses.csv");
  plot_losses(layout.teacher() / "losses.png", te.log);
  if (!te.converged)
    log << "warning: NonConvergence: teacher held-out masked PSNR " << te.heldout_psnr_masked << " dB is below the "
        << cfg.teacher.psnr_floor << " dB floor after " << te.steps << " steps\n";
  log << "teacher: " << te.steps << " steps, held-out masked PSNR " << fixed(te.heldout_psnr_masked, 3) << " dB\n";

  rm.finished = utc_timestamp();
  rm.artifacts = {layout.backbone().string(), layout.teacher().string()};
  write_text(layout.teacher() / "run_manifest.json", to_json(rm).dump(2) + "\n");
  return read_manifest(layout.teacher());
}

RunOutcome cmd_run(const ExperimentConfig& cfg, const Layout& layout, Variant variant, std::uint64_t seed,
                   std::ostream& log) {
  RunOutcome out;
  out.dir = layout.run(variant, seed);
  require(!fs::exists(out.dir / "report.json"), ErrorKind::ValidityRefusal,
          "run directory " + out.dir.string() + " is complete; refusing to modify it");
  const auto dataset = check_dataset(cfg, layout);
  const std::string dataset_hash = dataset.at("dataset_hash").get<std::string>();
  const std::string upstream = upstream_hash(cfg, dataset_hash);

  require(fs::exists(layout.backbone() / "manifest.json"), ErrorKind::MissingArtifact,
          "no backbone checkpoint at " + layout.backbone().string() + "; run `refine_cli train-teacher` first");
  require(read_manifest(layout.backbone()).at("upstream_hash") == upstream, ErrorKind::ValidityRefusal,
          "backbone was trained with a different config; rerun `refine_cli train-teacher --force`");
  Backbone<float> backbone = load_backbone(layout.backbone(), &out.audit);
  std::optional<ControlModule<float>> teacher;
  if (uses_teacher(variant)) {
    require(fs::exists(layout.teacher() / "manifest.json"), ErrorKind::MissingArtifact,
            "variant " + to_string(variant) + " needs a teacher checkpoint at " + layout.teacher().string() +
                "; run `refine_cli train-teacher` (cmd_train_teacher) first");
    require(read_manifest(layout.teacher()).at("upstream_hash") == upstream, ErrorKind::ValidityRefusal,
            "teacher was trained with a different config; rerun `refine_cli train-teacher --force`");
    teacher = load_control(layout.teacher(), &out.audit);
  }

  TrainConfig base = cfg.train;
  base.seed = seed;
  const TrainConfig tc = resolve_variant(base, variant);
  nlohmann::json run_config = {{"experiment", to_json(cfg)},
                               {"variant", to_string(variant)},
                               {"seed", seed},
                               {"train", to_json(tc)},
                               {"upstream_hash", upstream},
                               {"dataset_hash", dataset_hash}};
  const std::string hash = config_hash(run_config);

  if (fs::exists(out.dir)) fs::remove_all(out.dir);  // incomplete earlier attempt
  fs::create_directories(out.dir);
  RunManifest rm;
  rm.command = "run --variant " + to_string(variant) + " --seed " + std::to_string(seed);
  rm.started = utc_timestamp();
  rm.seed = seed;
  rm.config = nlohmann::json::parse(canonical_json(run_config));
  rm.config_hash = hash;
  rm.code_version = code_version();
  write_text(out.dir / "config.json", canonical_json(run_config) + "\n");

  const auto sl = load_split(layout.data(), Split::SL);
  const auto ssl = load_split(layout.data(), Split::SSL);
  const auto test = load_split(layout.data(), Split::Test);
  log << "run " << to_string(variant) << " seed " << seed << ": " << tc.stage1_steps << " + " << tc.stage2_steps
      << " steps\n";
  VariantInputs in{&backbone, teacher ? &*teacher : nullptr, &sl, &ssl, &test};
  VariantResult r = run_variant(tc, in, cfg.eval, out.dir, hash);
  r.report.dataset_hash = dataset_hash;

  r.log.write_csv(out.dir / "losses.csv");
  plot_losses(out.dir / "losses.png", r.log);
  out.report = r.report;
  out.summary = r.summary();
  out.summary["variant"] = to_string(variant);
  out.summary["seed"] = seed;
  out.summary["artifacts_opened"] = out.audit.opened;
  write_text(out.dir / "summary.json", out.summary.dump(2) + "\n");
  nlohmann::json report = to_json(r.report);
  report["variant"] = to_string(variant);
  report["run_seed"] = seed;
  rm.finished = utc_timestamp();
  for (const char* a : {"config.json", "losses.csv", "losses.png", "summary.json", "report.json"})
    rm.artifacts.push_back((out.dir / a).string());
  rm.artifacts.push_back((out.dir / "checkpoints" / r.report.checkpoint).string());
  write_text(out.dir / "run_manifest.json", to_json(rm).dump(2) + "\n");
  write_text(out.dir / "report.json", report.dump(2) + "\n");  // last: marks the run complete
  log << "masked PSNR " << fixed(r.report.raw.psnr_masked, 3) << " dB, MMD " << fixed(r.report.raw.mmd, 5) << "\n";
  return out;
}

const std::vector<std::pair<std::string, bool>>& metric_columns() {
  static const std::vector<std::pair<std::string, bool>> cols = {{"psnr_masked", true},
                                                                 {"psnr_full", true},
                                                                 {"ssim_masked", true},
                                                                 {"ssim_full", true},
                                                                 {"mmd", false}};
  return cols;
}

double metric_value(const MetricValues& m, const std::string& column) {
  if (column == "psnr_masked") return m.psnr_masked;
  if (column == "psnr_full") return m.psnr_full;
  if (column == "ssim_masked") return m.ssim_masked;
  if (column == "ssim_full") return m.ssim_full;
  if (column == "mmd") return m.mmd;
  throw Error(ErrorKind::ConfigError, "unknown metric column " + column);
}

Comparison build_comparison(const std::vector<fs::path>& run_dirs, bool composited) {
  require(!run_dirs.empty(), ErrorKind::ConfigError, "table needs at least one run directory");
  Comparison c;
  for (const auto& dir : run_dirs) {
    const auto doc = read_json(dir / "report.json");
    const MetricReport rep = metric_report_from_json(doc);
    TableRow row;
    row.name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    row.variant = doc.value("variant", row.name);
    row.seed = doc.value("run_seed", std::uint64_t{0});
    row.metrics = composited ? rep.composited : rep.raw;
    row.dataset_hash = rep.dataset_hash;
    if (!c.rows.empty())
      require(row.dataset_hash == c.rows.front().dataset_hash, ErrorKind::ValidityRefusal,
              "runs " + c.rows.front().name + " and " + row.name +
                  " were evaluated on different datasets; refusing to compare");
    c.rows.push_back(row);
  }
  std::map<std::string, std::vector<const TableRow*>> groups;
  std::vector<std::string> order;
  for (const auto& r : c.rows) {
    if (!groups.count(r.variant)) order.push_back(r.variant);
    groups[r.variant].push_back(&r);
  }
  const bool multi = std::any_of(groups.begin(), groups.end(), [](const auto& g) { return g.second.size() > 1; });
  if (multi) {
    for (const auto& v : order) {
      TableRow m;
      m.name = "median:" + v;
      m.variant = v;
      m.dataset_hash = c.rows.front().dataset_hash;
      auto med = [&](auto get) {
        std::vector<double> xs;
        for (const auto* r : groups[v]) xs.push_back(get(r->metrics));
        return median(xs);
      };
      m.metrics.psnr_masked = med([](const MetricValues& x) { return x.psnr_masked; });
      m.metrics.psnr_full = med([](const MetricValues& x) { return x.psnr_full; });
      m.metrics.ssim_masked = med([](const MetricValues& x) { return x.ssim_masked; });
      m.metrics.ssim_full = med([](const MetricValues& x) { return x.ssim_full; });
      m.metrics.mmd = med([](const MetricValues& x) { return x.mmd; });
      c.medians.push_back(m);
    }
  }
  return c;
}

namespace {

// Best-row flags per column ("" when fewer than two rows).
std::vector<std::string> best_flags(const std::vector<TableRow>& rows) {
  std::vector<std::string> flags(rows.size());
  if (rows.size() < 2) return flags;
  for (const auto& [col, higher] : metric_columns()) {
    size_t best = 0;
    for (size_t i = 1; i < rows.size(); ++i) {
      const double a = metric_value(rows[i].metrics, col), b = metric_value(rows[best].metrics, col);
      if (higher ? a > b : a < b) best = i;
    }
    flags[best] += (flags[best].empty() ? "" : ";") + col;
  }
  return flags;
}

// Masked-PSNR gap to the ours row of the same seed (or the ours median).
std::optional<double> gap_to_ours(const TableRow& r, const std::vector<TableRow>& rows) {
  for (const auto& o : rows)
    if (o.variant == "ours" && o.seed == r.seed && o.name.rfind("median:", 0) == r.name.rfind("median:", 0))
      return r.metrics.psnr_masked - o.metrics.psnr_masked;
  return std::nullopt;
}

}  // namespace

std::string Comparison::csv() const {
  std::ostringstream out;
  out << "name,variant,seed";
  for (const auto& [col, higher] : metric_columns()) out << ',' << col << (higher ? "(up)" : "(down)");
  out << ",best,gap_psnr_masked_vs_ours\n";
  auto emit = [&](const std::vector<TableRow>& rows) {
    const auto flags = best_flags(rows);
    for (size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      out << r.name << ',' << r.variant << ',' << (r.name.rfind("median:", 0) == 0 ? std::string() : std::to_string(r.seed));
      for (const auto& [col, higher] : metric_columns()) out << ',' << std::setprecision(8) << metric_value(r.metrics, col);
      const auto gap = gap_to_ours(r, rows);
      out << ',' << flags[i] << ',' << (gap ? fixed(*gap, 4) : "") << '\n';
    }
  };
  emit(rows);
  emit(medians);
  return out.str();
}

std::string Comparison::text() const {
  std::ostringstream out;
  auto emit = [&](const std::vector<TableRow>& rows, const std::string& title) {
    if (rows.empty()) return;
    const auto flags = best_flags(rows);
    out << title << "\n";
    out << std::left << std::setw(22) << "run";
    for (const auto& [col, higher] : metric_columns()) out << std::right << std::setw(15) << (col + (higher ? " ↑" : " ↓"));
    out << std::setw(14) << "gap vs ours" << "\n";
    for (size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      out << std::left << std::setw(22) << r.name << std::right;
      for (const auto& [col, higher] : metric_columns()) {
        const bool best = (";" + flags[i] + ";").find(";" + col + ";") != std::string::npos;
        const double v = metric_value(r.metrics, col);
        out << std::setw(14) << fixed(v, col == "mmd" ? 5 : (col.rfind("ssim", 0) == 0 ? 4 : 3)) << (best ? "*" : " ");
      }
      const auto gap = gap_to_ours(r, rows);
      std::string g = gap && r.variant != "ours" ? fixed(*gap, 3) : "";
      if (gap && *gap > 0 && r.variant != "ours") g += *gap > 0.3 ? " (!!)" : " (!)";
      out << std::setw(14) << g << "\n";
    }
    out << "\n";
  };
  emit(rows, "Per-run metrics (* = best in column)");
  emit(medians, "Per-variant medians (* = best in column)");
  out << "↑ higher is better, ↓ lower is better. mmd: RBF-kernel MMD on random conv features.\n";
  out << "gap vs ours = variant minus ours masked PSNR; (!) above ours, (!!) more than 0.3 dB above ours.\n";
  return out.str();
}

void write_comparison(const Comparison& c, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "comparison.csv", c.csv());
  write_text(dir / "comparison.txt", c.text());
  const auto& rows = c.medians.empty() ? c.rows : c.medians;
  std::vector<Rgb> colors;
  for (const auto& r : rows) colors.push_back(r.variant == "ours" ? Rgb{200, 40, 40} : Rgb{90, 90, 90});
  for (const auto& [col, higher] : metric_columns()) {
    std::vector<double> values;
    for (const auto& r : rows) values.push_back(metric_value(r.metrics, col));
    plot_bars(dir / ("bars_" + col + ".png"), values, colors);
  }
}

Sample prompt_scene(const DataConfig& data, int index, int target) {
  require(index >= 0 && index < data.prompt_eval.count, ErrorKind::IndexError,
          "prompt scene index " + std::to_string(index) + " outside [0, " + std::to_string(data.prompt_eval.count) + ")");
  const std::uint64_t scene_seed = data.prompt_eval.seed_offset + static_cast<std::uint64_t>(index);
  auto rng = scene_rng(data.seed, scene_seed);
  const Scene scene = generate_pair_scene(rng, data.scene);
  Sample s = make_sample(scene, target, Split::Test, data.scene);
  s.id = "prompt-" + std::to_string(index);
  s.scene_seed = scene_seed;
  return s;
}

PromptEvalResult prompt_accuracy(const Backbone<float>& backbone, const ControlModule<float>& control,
                                 const DataConfig& data, const EvalConfig& eval) {
  std::vector<Sample> scenes;
  for (int i = 0; i < data.prompt_eval.count; ++i) scenes.push_back(prompt_scene(data, i, i % 2));
  EvalConfig cfg = eval;
  cfg.max_samples = -1;
  const auto local = generate(backbone, &control, scenes, cfg, PromptMode::Local);
  const auto global = generate(backbone, &control, scenes, cfg, PromptMode::Global);
  PromptEvalResult r;
  r.scenes = static_cast<int>(scenes.size());
  int hit_local = 0, hit_global = 0;
  for (size_t i = 0; i < scenes.size(); ++i) {
    const int side = data.scene.side;
    r.truth.push_back(scenes[i].target_color);
    r.local_pred.push_back(classify_region_color(local[i], scenes[i].mask, side));
    r.global_pred.push_back(classify_region_color(global[i], scenes[i].mask, side));
    hit_local += r.local_pred.back() == r.truth.back();
    hit_global += r.global_pred.back() == r.truth.back();
  }
  r.local_accuracy = static_cast<double>(hit_local) / r.scenes;
  r.global_accuracy = static_cast<double>(hit_global) / r.scenes;
  return r;
}

void render_prompt_demo(const Backbone<float>& backbone, const ControlModule<float>& control, const DataConfig& data,
                        const EvalConfig& eval, int index, int target, const fs::path& png) {
  const Sample s = prompt_scene(data, index, target);
  const std::vector<Sample> one{s};
  EvalConfig cfg = eval;
  cfg.max_samples = -1;
  const auto local = generate(backbone, &control, one, cfg, PromptMode::Local);
  const auto global = generate(backbone, &control, one, cfg, PromptMode::Global);
  const int side = data.scene.side;
  const int factor = 4, gap = 4, big = side * factor;
  Eigen::VectorXf mask_rgb(3 * s.mask.size());
  mask_rgb << s.mask, s.mask, s.mask;
  const std::vector<Eigen::VectorXf> panels = {s.clean_image(), mask_rgb, s.masked_image, global[0], local[0]};
  RawImage grid;
  grid.width = static_cast<int>(panels.size()) * big + (static_cast<int>(panels.size()) - 1) * gap;
  grid.height = big;
  grid.channels = 3;
  grid.data.assign(static_cast<size_t>(grid.width * grid.height * 3), 255);
  for (size_t p = 0; p < panels.size(); ++p) {
    const RawImage tile = to_raw(upscale(panels[p], side, 3, factor), big, 3);
    const int x0 = static_cast<int>(p) * (big + gap);
    for (int y = 0; y < big; ++y)
      std::copy_n(tile.data.begin() + static_cast<std::ptrdiff_t>(y) * big * 3, big * 3,
                  grid.data.begin() + (static_cast<std::ptrdiff_t>(y) * grid.width + x0) * 3);
  }
  write_png(png, grid);
}

ControlModule<float> load_run_student(const fs::path& run_dir, ArtifactAudit* audit) {
  const auto report = read_json(run_dir / "report.json");
  const std::string ckpt = report.at("checkpoint").get<std::string>();
  return load_control(run_dir / "checkpoints" / ckpt, audit);
}

std::string format_gradcheck(const std::vector<GradcheckEntry>& entries) {
  std::ostringstream out;
  for (const auto& e : entries) {
    out << (e.pass ? "PASS " : "FAIL ") << std::left << std::setw(26) << e.op << " instances=" << e.instances
        << " max_rel_err=" << std::scientific << std::setprecision(2) << e.max_relative_error << std::defaultfloat
        << "\n";
  }
  return out.str();
}

}  // namespace refine
