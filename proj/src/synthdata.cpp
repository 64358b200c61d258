#include "refine/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "refine/errors.hpp"
#include "refine/hashing.hpp"
#include "refine/image_io.hpp"
#include "refine/tensor.hpp"

namespace refine {

namespace fs = std::filesystem;

nlohmann::json to_json(const SceneOptions& o) {
  return {{"side", o.side},
          {"min_shapes", o.min_shapes},
          {"max_shapes", o.max_shapes},
          {"min_size", o.min_size},
          {"max_size", o.max_size},
          {"mask_dilation", o.mask_dilation},
          {"min_center_distance", o.min_center_distance},
          {"max_attempts", o.max_attempts},
          {"max_restarts", o.max_restarts}};
}

namespace {

constexpr int kSupersample = 4;

bool inside(const ShapeRecord& s, double x, double y) {
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  switch (s.kind) {
    case ShapeKind::Circle:
      return dx * dx + dy * dy <= s.size * s.size;
    case ShapeKind::Square:
      return std::fabs(dx) <= s.size && std::fabs(dy) <= s.size;
    case ShapeKind::Triangle: {
      // Apex at the top centre, base along the bottom edge of the box.
      if (dy < -s.size || dy > s.size) return false;
      const double half_width = s.size * (dy + s.size) / (2.0 * s.size);
      return std::fabs(dx) <= half_width;
    }
  }
  return false;
}

}  // namespace

double coverage(const ShapeRecord& s, int px, int py) {
  int hits = 0;
  for (int i = 0; i < kSupersample; ++i) {
    for (int j = 0; j < kSupersample; ++j) {
      const double x = px + (j + 0.5) / kSupersample;
      const double y = py + (i + 0.5) / kSupersample;
      hits += inside(s, x, y) ? 1 : 0;
    }
  }
  return static_cast<double>(hits) / (kSupersample * kSupersample);
}

PixelBox shape_box(const ShapeRecord& s, int side) {
  PixelBox b{side, side, -1, -1};
  const int lo_x = std::max(0, static_cast<int>(std::floor(s.cx - s.size)) - 1);
  const int hi_x = std::min(side - 1, static_cast<int>(std::ceil(s.cx + s.size)) + 1);
  const int lo_y = std::max(0, static_cast<int>(std::floor(s.cy - s.size)) - 1);
  const int hi_y = std::min(side - 1, static_cast<int>(std::ceil(s.cy + s.size)) + 1);
  for (int y = lo_y; y <= hi_y; ++y) {
    for (int x = lo_x; x <= hi_x; ++x) {
      if (coverage(s, x, y) > 0.0) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x);
        b.y1 = std::max(b.y1, y);
      }
    }
  }
  return b;
}

PixelBox dilate(const PixelBox& b, int by, int side) {
  return {std::max(0, b.x0 - by), std::max(0, b.y0 - by), std::min(side - 1, b.x1 + by), std::min(side - 1, b.y1 + by)};
}

namespace {

PixelBox placement_box(const ShapeRecord& s, int side, int dilation) {
  // Unclipped so neighbours near the border still keep their distance.
  const PixelBox b = shape_box(s, side);
  return {b.x0 - dilation, b.y0 - dilation, b.x1 + dilation, b.y1 + dilation};
}

bool try_place(std::mt19937_64& rng, const SceneOptions& opts, std::vector<ShapeRecord>& shapes,
               ShapeRecord candidate) {
  std::uniform_real_distribution<double> size_dist(opts.min_size, opts.max_size);
  for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
    candidate.size = size_dist(rng);
    const double margin = candidate.size + 0.5;
    std::uniform_real_distribution<double> pos(margin, opts.side - margin);
    candidate.cx = pos(rng);
    candidate.cy = pos(rng);
    const PixelBox cb = placement_box(candidate, opts.side, opts.mask_dilation);
    bool ok = true;
    for (const auto& other : shapes) {
      const double d = std::hypot(candidate.cx - other.cx, candidate.cy - other.cy);
      if (d < opts.min_center_distance || cb.intersects(placement_box(other, opts.side, opts.mask_dilation))) {
        ok = false;
        break;
      }
    }
    if (ok) {
      shapes.push_back(candidate);
      return true;
    }
  }
  return false;
}

template <typename Pick>
Scene place_all(std::mt19937_64& rng, const SceneOptions& opts, int count, Pick&& pick) {
  for (int restart = 0; restart < opts.max_restarts; ++restart) {
    Scene scene;
    scene.side = opts.side;
    bool ok = true;
    for (int i = 0; i < count && ok; ++i) ok = try_place(rng, opts, scene.shapes, pick(i, scene));
    if (ok) return scene;
  }
  throw Error(ErrorKind::ConstraintError,
              "could not place " + std::to_string(count) + " shapes after bounded retries");
}

}  // namespace

Scene generate_scene(std::mt19937_64& rng, const SceneOptions& opts, int shape_count) {
  require(shape_count >= 1, ErrorKind::ConstraintError, "a scene needs at least one shape");
  require(shape_count <= opts.max_shapes, ErrorKind::ConstraintError, "too many shapes requested");
  std::uniform_int_distribution<int> kind(0, kNumKinds - 1);
  std::uniform_int_distribution<int> color(0, kNumColors - 1);
  return place_all(rng, opts, shape_count, [&](int, const Scene&) {
    ShapeRecord s;
    s.kind = static_cast<ShapeKind>(kind(rng));
    s.color = color(rng);
    return s;
  });
}

Scene generate_scene(std::mt19937_64& rng, const SceneOptions& opts) {
  std::uniform_int_distribution<int> count(opts.min_shapes, opts.max_shapes);
  return generate_scene(rng, opts, count(rng));
}

Scene generate_pair_scene(std::mt19937_64& rng, const SceneOptions& opts) {
  std::uniform_int_distribution<int> kind_dist(0, kNumKinds - 1);
  std::uniform_int_distribution<int> color_dist(0, kNumColors - 1);
  std::uniform_int_distribution<int> other_dist(1, kNumColors - 1);
  const auto kind = static_cast<ShapeKind>(kind_dist(rng));
  const int c0 = color_dist(rng);
  const int c1 = (c0 + other_dist(rng)) % kNumColors;
  return place_all(rng, opts, 2, [&](int i, const Scene&) {
    ShapeRecord s;
    s.kind = kind;
    s.color = i == 0 ? c0 : c1;
    return s;
  });
}

Eigen::VectorXf render_scene(const Scene& scene, std::optional<int> only) {
  const int side = scene.side;
  const int pixels = side * side;
  Eigen::VectorXf img(kImageChannels * pixels);
  for (int c = 0; c < kImageChannels; ++c) img.segment(c * pixels, pixels).setConstant(static_cast<float>(kBackground[c]));
  for (size_t k = 0; k < scene.shapes.size(); ++k) {
    if (only && static_cast<int>(k) != *only) continue;
    const ShapeRecord& s = scene.shapes[k];
    const PixelBox b = shape_box(s, side);
    for (int y = b.y0; y <= b.y1; ++y) {
      for (int x = b.x0; x <= b.x1; ++x) {
        const double cov = coverage(s, x, y);
        if (cov <= 0.0) continue;
        for (int c = 0; c < kImageChannels; ++c) {
          float& v = img[c * pixels + y * side + x];
          v = static_cast<float>((1.0 - cov) * v + cov * kPalette[s.color][c]);
        }
      }
    }
  }
  return img;
}

std::string local_prompt(const ShapeRecord& s) {
  return std::string(kColorNames[s.color]) + " " + std::string(kKindNames[static_cast<int>(s.kind)]);
}

std::string global_prompt(const Scene& scene) {
  std::vector<ShapeRecord> sorted = scene.shapes;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ShapeRecord& a, const ShapeRecord& b) {
    if (a.kind != b.kind) return static_cast<int>(a.kind) < static_cast<int>(b.kind);
    return a.color < b.color;
  });
  std::string out;
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (i) out += " " + std::string(kConnective) + " ";
    out += local_prompt(sorted[i]);
  }
  return out;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::SL: return "sl";
    case Split::SSL: return "ssl";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "sl") return Split::SL;
  if (s == "ssl") return Split::SSL;
  if (s == "test") return Split::Test;
  throw Error(ErrorKind::ConfigError, "unknown split '" + s + "'");
}

const Eigen::VectorXf& Sample::clean_image() const {
  if (!image_) throw Error(ErrorKind::GroundTruthExposure, "sample " + id + " carries no clean image");
  return *image_;
}

Eigen::VectorXf box_mask(const PixelBox& box, int side) {
  Eigen::VectorXf m = Eigen::VectorXf::Zero(side * side);
  for (int y = box.y0; y <= box.y1; ++y)
    for (int x = box.x0; x <= box.x1; ++x) m[y * side + x] = 1.0f;
  return m;
}

namespace {

Eigen::VectorXf apply_fill(const Eigen::VectorXf& image, const Eigen::VectorXf& mask) {
  Eigen::VectorXf out = image;
  const Eigen::Index p = mask.size();
  for (int c = 0; c < kImageChannels; ++c)
    for (Eigen::Index i = 0; i < p; ++i)
      if (mask[i] != 0.0f) out[c * p + i] = static_cast<float>(kSentinelFill);
  return out;
}

}  // namespace

Sample make_sample(const Scene& scene, int target_index, Split split, const SceneOptions& opts) {
  require(target_index >= 0 && target_index < static_cast<int>(scene.shapes.size()), ErrorKind::IndexError,
          "target index " + std::to_string(target_index) + " out of range");
  const ShapeRecord& target = scene.shapes[target_index];
  Sample s;
  s.split = split;
  s.target = target_index;
  s.target_color = target.color;
  s.mask = box_mask(dilate(shape_box(target, scene.side), opts.mask_dilation, scene.side), scene.side);
  Eigen::VectorXf image = render_scene(scene);
  s.masked_image = apply_fill(image, s.mask);
  s.local_prompt = local_prompt(target);
  s.global_prompt = global_prompt(scene);
  if (split != Split::SSL) s.set_clean_image(std::move(image));
  return s;
}

std::mt19937_64 scene_rng(std::uint64_t master_seed, std::uint64_t scene_seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(master_seed), static_cast<std::uint32_t>(master_seed >> 32),
                    static_cast<std::uint32_t>(scene_seed), static_cast<std::uint32_t>(scene_seed >> 32)};
  return std::mt19937_64(seq);
}

const SplitSpec& DataConfig::split(Split s) const {
  switch (s) {
    case Split::SL: return sl;
    case Split::SSL: return ssl;
    case Split::Test: return test;
  }
  return sl;
}

void validate_seed_ranges(const DataConfig& cfg) {
  const std::vector<std::pair<std::string, SplitSpec>> ranges = {
      {"sl", cfg.sl}, {"ssl", cfg.ssl}, {"test", cfg.test}, {"prompt_eval", cfg.prompt_eval}};
  for (size_t a = 0; a < ranges.size(); ++a) {
    require(ranges[a].second.count >= 0, ErrorKind::ConfigError, ranges[a].first + ".count must be >= 0");
    for (size_t b = a + 1; b < ranges.size(); ++b) {
      const auto& x = ranges[a].second;
      const auto& y = ranges[b].second;
      if (x.count == 0 || y.count == 0) continue;
      const bool disjoint = x.seed_offset + x.count <= y.seed_offset || y.seed_offset + y.count <= x.seed_offset;
      require(disjoint, ErrorKind::ConfigError,
              "seed ranges of splits '" + ranges[a].first + "' and '" + ranges[b].first + "' overlap");
    }
  }
}

Sample generate_sample(const DataConfig& cfg, Split split, int index) {
  const SplitSpec& spec = cfg.split(split);
  require(index >= 0 && index < spec.count, ErrorKind::IndexError, "sample index out of range");
  const std::uint64_t scene_seed = spec.seed_offset + static_cast<std::uint64_t>(index);
  auto rng = scene_rng(cfg.seed, scene_seed);
  const Scene scene = generate_scene(rng, cfg.scene);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(scene.shapes.size()) - 1);
  Sample s = make_sample(scene, pick(rng), split, cfg.scene);
  char id[32];
  std::snprintf(id, sizeof(id), "%s-%05d", to_string(split).c_str(), index);
  s.id = id;
  s.scene_seed = scene_seed;
  return s;
}

nlohmann::json manifest_line(const Sample& s) {
  return {{"id", s.id},
          {"split", to_string(s.split)},
          {"local_prompt", s.local_prompt},
          {"global_prompt", s.global_prompt},
          {"scene_seed", s.scene_seed},
          {"has_ground_truth", s.has_ground_truth()}};
}

std::string generator_hash(const DataConfig& cfg) {
  nlohmann::json doc = {{"version", kGeneratorVersion}, {"scene", to_json(cfg.scene)}};
  for (int c = 0; c < kNumColors; ++c) doc["palette"][std::string(kColorNames[c])] = kPalette[c];
  doc["background"] = kBackground;
  return config_hash(doc);
}

DatasetManifest build_datasets(const DataConfig& cfg, const fs::path& root) {
  validate_seed_ranges(cfg);
  const int side = cfg.scene.side;
  DatasetManifest m;
  m.doc = {{"generator_version", kGeneratorVersion},
           {"generator_hash", generator_hash(cfg)},
           {"seed", cfg.seed},
           {"image_side", side},
           {"prompt_eval", {{"count", cfg.prompt_eval.count}, {"seed_offset", cfg.prompt_eval.seed_offset}}}};
  Sha256 all;
  for (Split split : {Split::SL, Split::SSL, Split::Test}) {
    const SplitSpec& spec = cfg.split(split);
    const fs::path dir = root / to_string(split);
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    fs::create_directories(dir / "masks", ec);
    require(!ec, ErrorKind::IOFailure, "cannot create " + dir.string());
    std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
    require(manifest.good(), ErrorKind::IOFailure, "cannot write manifest in " + dir.string());
    Sha256 split_hash;
    for (int i = 0; i < spec.count; ++i) {
      const Sample s = generate_sample(cfg, split, i);
      const fs::path img_path = dir / "images" / (s.id + ".png");
      const fs::path mask_path = dir / "masks" / (s.id + ".png");
      write_png(img_path, to_raw(s.has_ground_truth() ? s.clean_image() : s.masked_image, side, kImageChannels));
      write_png(mask_path, to_raw(s.mask, side, 1));
      const std::string line = manifest_line(s).dump() + "\n";
      manifest << line;
      split_hash.update(line);
      split_hash.update(sha256_file(img_path));
      split_hash.update(sha256_file(mask_path));
    }
    manifest.close();
    require(manifest.good(), ErrorKind::IOFailure, "failed writing manifest in " + dir.string());
    const std::string h = split_hash.hex();
    all.update(h);
    m.doc["splits"][to_string(split)] = {{"count", spec.count}, {"seed_offset", spec.seed_offset}, {"hash", h}};
  }
  m.doc["dataset_hash"] = all.hex();
  std::ofstream out(root / "dataset.json", std::ios::binary);
  require(out.good(), ErrorKind::IOFailure, "cannot write dataset.json");
  out << m.doc.dump(2) << "\n";
  return m;
}

std::vector<Sample> load_split(const fs::path& root, Split split) {
  const fs::path dir = root / to_string(split);
  std::ifstream manifest(dir / "manifest.jsonl");
  require(manifest.good(), ErrorKind::IOFailure, "missing manifest for split '" + to_string(split) + "' under " +
                                                     root.string());
  std::vector<Sample> out;
  for (std::string line; std::getline(manifest, line);) {
    if (line.empty()) continue;
    const auto doc = nlohmann::json::parse(line);
    Sample s;
    s.id = doc.at("id").get<std::string>();
    s.split = split_from_string(doc.at("split").get<std::string>());
    require(s.split == split, ErrorKind::IOFailure, "manifest line from another split in " + dir.string());
    s.local_prompt = doc.at("local_prompt").get<std::string>();
    s.global_prompt = doc.at("global_prompt").get<std::string>();
    s.scene_seed = doc.at("scene_seed").get<std::uint64_t>();
    const bool gt = doc.at("has_ground_truth").get<bool>();
    const auto words = tokenize(s.local_prompt);
    s.target_color = words.empty() ? -1 : words.front();
    s.mask = from_raw(read_png(dir / "masks" / (s.id + ".png")));
    for (Eigen::Index i = 0; i < s.mask.size(); ++i) s.mask[i] = s.mask[i] > 0.5f ? 1.0f : 0.0f;
    const Eigen::VectorXf img = from_raw(read_png(dir / "images" / (s.id + ".png")));
    s.masked_image = apply_fill(img, s.mask);
    if (gt) {
      require(split != Split::SSL, ErrorKind::GroundTruthExposure, "ssl manifest claims ground truth for " + s.id);
      s.set_clean_image(img);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace refine
