#include "refine/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace refine {

namespace {

// 1-based line of the first occurrence of "key": at or after `from`.
size_t find_key(const std::string& text, const std::string& key, size_t from) {
  const std::string quoted = "\"" + key + "\"";
  size_t pos = from;
  while ((pos = text.find(quoted, pos)) != std::string::npos) {
    size_t after = pos + quoted.size();
    while (after < text.size() && std::isspace(static_cast<unsigned char>(text[after]))) ++after;
    if (after < text.size() && text[after] == ':') return pos;
    pos = after;
  }
  return std::string::npos;
}

size_t line_of(const std::string& text, size_t offset) {
  return 1 + static_cast<size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(
                                                                            std::min(offset, text.size())),
                                            '\n'));
}

class SchemaReader {
 public:
  SchemaReader(const std::string& text, std::string source) : text_(text), source_(std::move(source)) {}

  // Offset of a dotted path's key in the text (best effort, npos if absent).
  size_t locate(const std::string& path) const {
    size_t pos = 0;
    std::istringstream parts(path);
    for (std::string part; std::getline(parts, part, '.');) {
      pos = find_key(text_, part, pos);
      if (pos == std::string::npos) return pos;
    }
    return pos;
  }

  [[noreturn]] void fail(const std::string& path, const std::string& what, const std::string& anchor) const {
    const size_t pos = locate(anchor);
    std::string where = source_;
    if (pos != std::string::npos) where += ":" + std::to_string(line_of(text_, pos));
    throw Error(ErrorKind::ConfigError, where + ": " + what + " '" + path + "'");
  }

  const nlohmann::json& object(const nlohmann::json& parent, const std::string& parent_path, const std::string& key,
                               const std::vector<std::string>& allowed) const {
    const std::string path = join(parent_path, key);
    if (!parent.contains(key)) fail(path, "missing required field", parent_path);
    const auto& obj = parent.at(key);
    if (!obj.is_object()) fail(path, "expected an object for field", path);
    check_keys(obj, path, allowed);
    return obj;
  }

  void check_keys(const nlohmann::json& obj, const std::string& path, const std::vector<std::string>& allowed) const {
    for (const auto& [k, v] : obj.items())
      if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) fail(join(path, k), "unknown field", join(path, k));
  }

  const nlohmann::json& field(const nlohmann::json& obj, const std::string& path, const std::string& key) const {
    if (!obj.contains(key)) fail(join(path, key), "missing required field", path);
    return obj.at(key);
  }

  long integer(const nlohmann::json& obj, const std::string& path, const std::string& key, long min_value) const {
    const auto& v = field(obj, path, key);
    if (!v.is_number_integer()) fail(join(path, key), "expected an integer for field", join(path, key));
    const long x = v.get<long>();
    if (x < min_value) fail(join(path, key), "value below " + std::to_string(min_value) + " for field", join(path, key));
    return x;
  }

  std::uint64_t unsigned_integer(const nlohmann::json& obj, const std::string& path, const std::string& key) const {
    const auto& v = field(obj, path, key);
    if (!v.is_number_unsigned()) fail(join(path, key), "expected a non-negative integer for field", join(path, key));
    return v.get<std::uint64_t>();
  }

  double number(const nlohmann::json& obj, const std::string& path, const std::string& key) const {
    const auto& v = field(obj, path, key);
    if (!v.is_number()) fail(join(path, key), "expected a number for field", join(path, key));
    return v.get<double>();
  }

  static std::string join(const std::string& a, const std::string& b) { return a.empty() ? b : a + "." + b; }

 private:
  const std::string& text_;
  std::string source_;
};

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
  const DataConfig& d = c.data;
  nlohmann::json scene = to_json(d.scene);
  scene.erase("side");
  return {
      {"seed", c.seed},
      {"data",
       {{"counts", {{"sl", d.sl.count}, {"ssl", d.ssl.count}, {"test", d.test.count}, {"prompt_eval", d.prompt_eval.count}}},
        {"seed_offsets",
         {{"sl", d.sl.seed_offset},
          {"ssl", d.ssl.seed_offset},
          {"test", d.test.seed_offset},
          {"prompt_eval", d.prompt_eval.seed_offset}}},
        {"scene", scene}}},
      {"model", to_json(c.model)},
      {"backbone", {{"steps", c.backbone.steps}, {"batch", c.backbone.batch}, {"lr", c.backbone.lr}}},
      {"teacher",
       {{"max_steps", c.teacher.max_steps},
        {"batch", c.teacher.batch},
        {"lr", c.teacher.lr},
        {"psnr_floor", c.teacher.psnr_floor},
        {"eval_every", c.teacher.eval_every},
        {"holdout", c.teacher.holdout}}},
      {"train",
       {{"stage1_steps", c.train.stage1_steps},
        {"stage2_steps", c.train.stage2_steps},
        {"batch", c.train.batch},
        {"lr", c.train.lr},
        {"lambda_task", c.train.weights.lambda_task},
        {"lambda_distill", c.train.weights.lambda_distill},
        {"lambda_af", c.train.weights.lambda_af},
        {"alpha", c.train.weights.alpha},
        {"heldout_samples", c.train.heldout_samples}}},
      {"eval",
       {{"steps", c.eval.steps},
        {"max_samples", c.eval.max_samples},
        {"seed", c.eval.seed},
        {"feature_seed", c.eval.feature_seed},
        {"batch", c.eval.batch}}},
  };
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const size_t offset = e.byte > 0 ? e.byte - 1 : 0;
    const size_t line = line_of(text, offset);
    const size_t line_start = text.rfind('\n', offset == 0 ? 0 : offset - 1);
    const size_t column = offset - (line_start == std::string::npos ? 0 : line_start + 1) + 1;
    std::string msg = e.what();
    if (const auto p = msg.find("syntax error"); p != std::string::npos) msg = msg.substr(p);
    throw Error(ErrorKind::ConfigError,
                source + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + msg);
  }
  SchemaReader r(text, source);
  if (!doc.is_object()) r.fail("<root>", "expected an object at", "");
  r.check_keys(doc, "", {"seed", "data", "model", "backbone", "teacher", "train", "eval"});

  ExperimentConfig c;
  c.seed = r.unsigned_integer(doc, "", "seed");

  const auto& data = r.object(doc, "", "data", {"counts", "seed_offsets", "scene"});
  const std::vector<std::string> splits = {"sl", "ssl", "test", "prompt_eval"};
  const auto& counts = r.object(data, "data", "counts", splits);
  const auto& offsets = r.object(data, "data", "seed_offsets", splits);
  SplitSpec* targets[] = {&c.data.sl, &c.data.ssl, &c.data.test, &c.data.prompt_eval};
  for (size_t i = 0; i < splits.size(); ++i) {
    targets[i]->count = static_cast<int>(r.integer(counts, "data.counts", splits[i], 1));
    targets[i]->seed_offset = r.unsigned_integer(offsets, "data.seed_offsets", splits[i]);
  }
  const auto& scene = r.object(data, "data", "scene",
                               {"min_shapes", "max_shapes", "min_size", "max_size", "mask_dilation",
                                "min_center_distance", "max_attempts", "max_restarts"});
  SceneOptions& so = c.data.scene;
  so.min_shapes = static_cast<int>(r.integer(scene, "data.scene", "min_shapes", 2));
  so.max_shapes = static_cast<int>(r.integer(scene, "data.scene", "max_shapes", so.min_shapes));
  so.min_size = r.number(scene, "data.scene", "min_size");
  so.max_size = r.number(scene, "data.scene", "max_size");
  so.mask_dilation = static_cast<int>(r.integer(scene, "data.scene", "mask_dilation", 0));
  so.min_center_distance = r.number(scene, "data.scene", "min_center_distance");
  so.max_attempts = static_cast<int>(r.integer(scene, "data.scene", "max_attempts", 1));
  so.max_restarts = static_cast<int>(r.integer(scene, "data.scene", "max_restarts", 1));
  if (!(so.min_size > 0 && so.max_size >= so.min_size)) r.fail("data.scene.max_size", "need 0 < min_size <= max_size in", "data.scene.max_size");

  const auto& model = r.object(doc, "", "model",
                               {"image_side", "patch", "width", "cond_dim", "embed_dim", "vocab", "backbone_layers",
                                "teacher_layers", "student_layers", "sigma_data"});
  ModelSpec& m = c.model;
  m.grid.side = static_cast<int>(r.integer(model, "model", "image_side", 8));
  m.grid.patch = static_cast<int>(r.integer(model, "model", "patch", 1));
  m.width = static_cast<int>(r.integer(model, "model", "width", 1));
  m.cond_dim = static_cast<int>(r.integer(model, "model", "cond_dim", 1));
  m.embed_dim = static_cast<int>(r.integer(model, "model", "embed_dim", 1));
  m.vocab = static_cast<int>(r.integer(model, "model", "vocab", kVocabSize));
  m.backbone_layers = static_cast<int>(r.integer(model, "model", "backbone_layers", 1));
  m.teacher_layers = static_cast<int>(r.integer(model, "model", "teacher_layers", 1));
  m.student_layers = static_cast<int>(r.integer(model, "model", "student_layers", 1));
  m.sigma_data = r.number(model, "model", "sigma_data");
  if (!(m.sigma_data > 0.0)) r.fail("model.sigma_data", "sigma_data must be positive in", "model.sigma_data");
  if (m.grid.side % m.grid.patch != 0) r.fail("model.patch", "image_side must be a multiple of", "model.patch");
  if (m.teacher_layers > m.backbone_layers)
    r.fail("model.teacher_layers", "teacher layers exceed backbone layers in", "model.teacher_layers");
  if (m.teacher_layers != 2 * m.student_layers && m.teacher_layers != 2 * m.student_layers - 1)
    r.fail("model.teacher_layers", "teacher_layers must equal 2*student_layers or 2*student_layers-1 in",
           "model.teacher_layers");
  so.side = m.grid.side;

  const auto& bb = r.object(doc, "", "backbone", {"steps", "batch", "lr"});
  c.backbone.steps = static_cast<int>(r.integer(bb, "backbone", "steps", 0));
  c.backbone.batch = static_cast<int>(r.integer(bb, "backbone", "batch", 1));
  c.backbone.lr = r.number(bb, "backbone", "lr");

  const auto& te =
      r.object(doc, "", "teacher", {"max_steps", "batch", "lr", "psnr_floor", "eval_every", "holdout"});
  c.teacher.max_steps = static_cast<int>(r.integer(te, "teacher", "max_steps", 0));
  c.teacher.batch = static_cast<int>(r.integer(te, "teacher", "batch", 1));
  c.teacher.lr = r.number(te, "teacher", "lr");
  c.teacher.psnr_floor = r.number(te, "teacher", "psnr_floor");
  c.teacher.eval_every = static_cast<int>(r.integer(te, "teacher", "eval_every", 0));
  c.teacher.holdout = static_cast<int>(r.integer(te, "teacher", "holdout", 1));
  if (c.teacher.holdout >= c.data.sl.count)
    r.fail("teacher.holdout", "holdout must be smaller than data.counts.sl for field", "teacher.holdout");

  const auto& tr = r.object(doc, "", "train",
                            {"stage1_steps", "stage2_steps", "batch", "lr", "lambda_task", "lambda_distill",
                             "lambda_af", "alpha", "heldout_samples"});
  c.train.stage1_steps = static_cast<int>(r.integer(tr, "train", "stage1_steps", 0));
  c.train.stage2_steps = static_cast<int>(r.integer(tr, "train", "stage2_steps", 0));
  c.train.batch = static_cast<int>(r.integer(tr, "train", "batch", 1));
  c.train.lr = r.number(tr, "train", "lr");
  c.train.weights.lambda_task = r.number(tr, "train", "lambda_task");
  c.train.weights.lambda_distill = r.number(tr, "train", "lambda_distill");
  c.train.weights.lambda_af = r.number(tr, "train", "lambda_af");
  c.train.weights.alpha = r.number(tr, "train", "alpha");
  c.train.heldout_samples = static_cast<int>(r.integer(tr, "train", "heldout_samples", 1));
  try {
    c.train.weights.validate();
  } catch (const Error& e) {
    r.fail("train", e.what() + std::string(" in"), "train");
  }

  const auto& ev = r.object(doc, "", "eval", {"steps", "max_samples", "seed", "feature_seed", "batch"});
  c.eval.steps = static_cast<int>(r.integer(ev, "eval", "steps", 1));
  c.eval.max_samples = static_cast<int>(r.integer(ev, "eval", "max_samples", -1));
  c.eval.seed = r.unsigned_integer(ev, "eval", "seed");
  c.eval.feature_seed = r.unsigned_integer(ev, "eval", "feature_seed");
  c.eval.batch = static_cast<int>(r.integer(ev, "eval", "batch", 1));

  for (double lr : {c.backbone.lr, c.teacher.lr, c.train.lr})
    if (!(lr > 0.0)) throw Error(ErrorKind::ConfigError, source + ": learning rates must be positive");
  c.data.seed = c.seed;
  try {
    validate_seed_ranges(c.data);
  } catch (const Error& e) {
    r.fail("data.seed_offsets", e.what() + std::string(" in"), "data.seed_offsets");
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::ConfigError, "cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

std::string default_config_text() { return to_json(ExperimentConfig{}).dump(2) + "\n"; }

}  // namespace refine
