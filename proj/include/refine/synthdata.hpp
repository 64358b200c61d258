#pragma once

// Procedural inpainting benchmark: scenes of 2-4 colored shapes, a mask over
// one target shape, a local prompt naming only that shape and a global prompt
// naming every shape.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "refine/vocab.hpp"

namespace refine {

inline constexpr std::string_view kGeneratorVersion = "shapes-v1";

struct ShapeRecord {
  ShapeKind kind = ShapeKind::Circle;
  int color = 0;
  double cx = 0.0;
  double cy = 0.0;
  double size = 0.0;  // half extent of the bounding square

  bool operator==(const ShapeRecord&) const = default;
};

struct Scene {
  int side = 32;
  std::vector<ShapeRecord> shapes;

  bool operator==(const Scene&) const = default;
};

struct SceneOptions {
  int side = 32;
  int min_shapes = 2;
  int max_shapes = 4;
  double min_size = 3.0;
  double max_size = 6.0;
  int mask_dilation = 2;
  double min_center_distance = 6.0;
  int max_attempts = 200;
  int max_restarts = 100;
};

nlohmann::json to_json(const SceneOptions& o);

/// Pixel box, inclusive bounds.
struct PixelBox {
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;
  bool empty() const { return x1 < x0 || y1 < y0; }
  bool intersects(const PixelBox& o) const { return !(x1 < o.x0 || o.x1 < x0 || y1 < o.y0 || o.y1 < y0); }
};

/// Fractional coverage of pixel (px, py) by the shape, 4x4 supersampled.
double coverage(const ShapeRecord& s, int px, int py);
PixelBox shape_box(const ShapeRecord& s, int side);
PixelBox dilate(const PixelBox& b, int by, int side);

/// Rejection-samples a scene with a random shape count.
Scene generate_scene(std::mt19937_64& rng, const SceneOptions& opts = {});
/// Fixed shape count; zero or too many shapes -> ConstraintError.
Scene generate_scene(std::mt19937_64& rng, const SceneOptions& opts, int shape_count);
/// Two shapes of one kind in two different colors.
Scene generate_pair_scene(std::mt19937_64& rng, const SceneOptions& opts = {});

/// CHW float image in [0,1]. `only` renders a single shape on the background.
Eigen::VectorXf render_scene(const Scene& scene, std::optional<int> only = std::nullopt);

std::string local_prompt(const ShapeRecord& s);
std::string global_prompt(const Scene& scene);

enum class Split { SL, SSL, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Sample {
  std::string id;
  Split split = Split::SL;
  std::uint64_t scene_seed = 0;
  int target = 0;
  int target_color = 0;
  Eigen::VectorXf mask;          // pixels, {0,1}
  Eigen::VectorXf masked_image;  // channels*pixels, sentinel inside the mask
  std::string local_prompt;
  std::string global_prompt;

  bool has_ground_truth() const { return image_.has_value(); }
  /// Throws GroundTruthExposure for samples without a clean image.
  const Eigen::VectorXf& clean_image() const;

  void set_clean_image(Eigen::VectorXf img) { image_ = std::move(img); }
  void drop_clean_image() { image_.reset(); }

 private:
  std::optional<Eigen::VectorXf> image_;
};

Eigen::VectorXf box_mask(const PixelBox& box, int side);

/// Builds a sample; ssl samples never carry the clean image.
Sample make_sample(const Scene& scene, int target_index, Split split, const SceneOptions& opts = {});

/// Per-sample RNG stream derived from (master seed, scene seed).
std::mt19937_64 scene_rng(std::uint64_t master_seed, std::uint64_t scene_seed);

struct SplitSpec {
  int count = 0;
  std::uint64_t seed_offset = 0;
};

struct DataConfig {
  std::uint64_t seed = 0;
  SceneOptions scene;
  SplitSpec sl{4096, 0};
  SplitSpec ssl{4096, 1'000'000};
  SplitSpec test{512, 2'000'000};
  SplitSpec prompt_eval{64, 3'000'000};

  const SplitSpec& split(Split s) const;
};

/// Rejects overlapping seed ranges across all splits (including prompt_eval).
void validate_seed_ranges(const DataConfig& cfg);

/// Deterministic in-memory sample `index` of a split.
Sample generate_sample(const DataConfig& cfg, Split split, int index);

struct DatasetManifest {
  nlohmann::json doc;  // counts, seed, generator version/hash, per-split hashes
};

/// Hash of the generator version, scene options and palette.
std::string generator_hash(const DataConfig& cfg);

/// Writes {root}/{split}/images, masks, manifest.jsonl and {root}/dataset.json.
DatasetManifest build_datasets(const DataConfig& cfg, const std::filesystem::path& root);

/// Loads a split written by build_datasets.
std::vector<Sample> load_split(const std::filesystem::path& root, Split split);

nlohmann::json manifest_line(const Sample& s);

}  // namespace refine
