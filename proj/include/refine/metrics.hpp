#pragma once

// Image-quality metrics and the model evaluation loop.
//
// Images are CHW float vectors in [0,1]; masks are per-pixel {0,1} vectors.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "refine/nets.hpp"
#include "refine/synthdata.hpp"

namespace refine {

inline constexpr double kPsnrCap = 100.0;
inline constexpr int kSsimWindow = 8;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

double psnr(const Eigen::VectorXf& a, const Eigen::VectorXf& b, double max_value = 1.0);
/// PSNR over masked pixels only (all channels).
double psnr_masked(const Eigen::VectorXf& a, const Eigen::VectorXf& b, const Eigen::VectorXf& mask,
                   double max_value = 1.0);

/// Rec.601 luma of a CHW RGB image.
Eigen::VectorXd grayscale(const Eigen::VectorXf& chw);

/// Mean SSIM over all 8x8 uniform windows (stride 1) of the luma images.
double ssim(const Eigen::VectorXf& a, const Eigen::VectorXf& b, int side);
/// Window statistics restricted to masked pixels; windows weighted by their
/// masked-pixel count.
double ssim_masked(const Eigen::VectorXf& a, const Eigen::VectorXf& b, const Eigen::VectorXf& mask, int side);

/// Unbiased squared MMD with kernel exp(-|x-y|^2 / (2 bw^2)); rows are samples.
double mmd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth);
/// Median pairwise Euclidean distance between rows.
double median_bandwidth(const Eigen::MatrixXd& features);

/// Fixed random two-layer conv net; pooled activations as embedding.
class RandomFeatureExtractor {
 public:
  RandomFeatureExtractor(int side, std::uint64_t seed);
  Eigen::VectorXd operator()(const Eigen::VectorXf& image) const;
  Eigen::MatrixXd embed(const std::vector<Eigen::VectorXf>& images) const;
  int dim() const;

 private:
  int side_;
  Eigen::MatrixXd w1_;  // 16 x 27
  Eigen::VectorXd b1_;
  Eigen::MatrixXd w2_;  // 32 x 144
  Eigen::VectorXd b2_;
};

/// Dominant non-background palette color inside the mask, or -1 if the region
/// holds no foreground.
int classify_region_color(const Eigen::VectorXf& image, const Eigen::VectorXf& mask, int side);

struct MetricValues {
  double psnr_full = 0.0;
  double psnr_masked = 0.0;
  double ssim_full = 0.0;
  double ssim_masked = 0.0;
  double mmd = 0.0;
};

nlohmann::json to_json(const MetricValues& m);
MetricValues metric_values_from_json(const nlohmann::json& j);

struct MetricReport {
  MetricValues raw;
  MetricValues composited;  // unmasked pixels copied from the input
  int n_samples = 0;
  int sampler_steps = 0;
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string config_hash;
  std::string dataset_hash;
};

nlohmann::json to_json(const MetricReport& r);
MetricReport metric_report_from_json(const nlohmann::json& j);

struct EvalConfig {
  int steps = 16;
  int max_samples = -1;  // -1 = all
  std::uint64_t seed = 0;
  std::uint64_t feature_seed = 7;
  int batch = 64;
};

enum class PromptMode { Local, Global };

/// Inpaints each sample from per-sample noise streams seeded by (cfg.seed, index).
/// control == nullptr runs the bare backbone. Returns [0,1] pixel images.
std::vector<Eigen::VectorXf> generate(const Backbone<float>& backbone, const ControlModule<float>* control,
                                      const std::vector<Sample>& samples, const EvalConfig& cfg,
                                      PromptMode mode = PromptMode::Local);

/// Copies unmasked pixels of the masked input over a generation.
Eigen::VectorXf composite(const Eigen::VectorXf& generated, const Sample& s);

MetricReport score(const std::vector<Eigen::VectorXf>& generated, const std::vector<Sample>& samples,
                   const EvalConfig& cfg);

MetricReport evaluate(const Backbone<float>& backbone, const ControlModule<float>* control,
                      const std::vector<Sample>& test, const EvalConfig& cfg);

}  // namespace refine
