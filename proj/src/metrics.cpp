#include "refine/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "refine/flowmatch.hpp"

namespace refine {

namespace {

double psnr_from_mse(double mse, double max_value) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(max_value * max_value / mse));
}

void check_same(const Eigen::VectorXf& a, const Eigen::VectorXf& b) {
  require(a.size() == b.size(), ErrorKind::ShapeMismatch, "images differ in size");
}

}  // namespace

double psnr(const Eigen::VectorXf& a, const Eigen::VectorXf& b, double max_value) {
  check_same(a, b);
  require(max_value > 0.0, ErrorKind::DomainError, "max_value must be positive");
  const double mse = (a.cast<double>() - b.cast<double>()).squaredNorm() / static_cast<double>(a.size());
  return psnr_from_mse(mse, max_value);
}

double psnr_masked(const Eigen::VectorXf& a, const Eigen::VectorXf& b, const Eigen::VectorXf& mask, double max_value) {
  check_same(a, b);
  require(max_value > 0.0, ErrorKind::DomainError, "max_value must be positive");
  require(a.size() % mask.size() == 0, ErrorKind::ShapeMismatch, "mask does not tile the image");
  const Eigen::Index p = mask.size();
  const Eigen::Index channels = a.size() / p;
  double sum = 0.0;
  long count = 0;
  for (Eigen::Index c = 0; c < channels; ++c) {
    for (Eigen::Index i = 0; i < p; ++i) {
      if (mask[i] == 0.0f) continue;
      const double d = static_cast<double>(a[c * p + i]) - static_cast<double>(b[c * p + i]);
      sum += d * d;
      ++count;
    }
  }
  require(count > 0, ErrorKind::DomainError, "empty mask");
  return psnr_from_mse(sum / static_cast<double>(count), max_value);
}

Eigen::VectorXd grayscale(const Eigen::VectorXf& chw) {
  require(chw.size() % kImageChannels == 0, ErrorKind::ShapeMismatch, "grayscale: not an RGB image");
  const Eigen::Index p = chw.size() / kImageChannels;
  return 0.299 * chw.segment(0, p).cast<double>() + 0.587 * chw.segment(p, p).cast<double>() +
         0.114 * chw.segment(2 * p, p).cast<double>();
}

namespace {

double ssim_term(double ma, double mb, double va, double vb, double cov) {
  const double c1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
  const double c2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);
  return ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
}

// Population statistics over the pixels of one window selected by `use`.
template <typename Use>
std::optional<std::pair<double, double>> window_ssim(const Eigen::VectorXd& ga, const Eigen::VectorXd& gb, int side,
                                                     int wx, int wy, Use&& use) {
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  int n = 0;
  for (int y = wy; y < wy + kSsimWindow; ++y) {
    for (int x = wx; x < wx + kSsimWindow; ++x) {
      const int i = y * side + x;
      if (!use(i)) continue;
      sa += ga[i];
      sb += gb[i];
      saa += ga[i] * ga[i];
      sbb += gb[i] * gb[i];
      sab += ga[i] * gb[i];
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  const double ma = sa / n, mb = sb / n;
  const double va = std::max(0.0, saa / n - ma * ma);
  const double vb = std::max(0.0, sbb / n - mb * mb);
  const double cov = sab / n - ma * mb;
  return std::make_pair(ssim_term(ma, mb, va, vb, cov), static_cast<double>(n));
}

}  // namespace

double ssim(const Eigen::VectorXf& a, const Eigen::VectorXf& b, int side) {
  check_same(a, b);
  require(side >= kSsimWindow, ErrorKind::ImageTooSmall, "ssim needs side >= 8");
  require(a.size() == static_cast<Eigen::Index>(kImageChannels) * side * side, ErrorKind::ShapeMismatch,
          "ssim: image size does not match side");
  const Eigen::VectorXd ga = grayscale(a);
  const Eigen::VectorXd gb = grayscale(b);
  double total = 0.0;
  int windows = 0;
  for (int wy = 0; wy + kSsimWindow <= side; ++wy) {
    for (int wx = 0; wx + kSsimWindow <= side; ++wx) {
      total += window_ssim(ga, gb, side, wx, wy, [](int) { return true; })->first;
      ++windows;
    }
  }
  return total / windows;
}

double ssim_masked(const Eigen::VectorXf& a, const Eigen::VectorXf& b, const Eigen::VectorXf& mask, int side) {
  check_same(a, b);
  require(side >= kSsimWindow, ErrorKind::ImageTooSmall, "ssim needs side >= 8");
  require(mask.size() == static_cast<Eigen::Index>(side) * side, ErrorKind::ShapeMismatch, "ssim: mask size");
  const Eigen::VectorXd ga = grayscale(a);
  const Eigen::VectorXd gb = grayscale(b);
  double total = 0.0;
  double weight = 0.0;
  for (int wy = 0; wy + kSsimWindow <= side; ++wy) {
    for (int wx = 0; wx + kSsimWindow <= side; ++wx) {
      const auto w = window_ssim(ga, gb, side, wx, wy, [&](int i) { return mask[i] != 0.0f; });
      if (!w) continue;
      total += w->first * w->second;
      weight += w->second;
    }
  }
  require(weight > 0.0, ErrorKind::DomainError, "empty mask");
  return total / weight;
}

double mmd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth) {
  require(a.rows() >= 2 && b.rows() >= 2, ErrorKind::TooFewSamples, "mmd needs at least two samples per set");
  require(a.cols() == b.cols(), ErrorKind::ShapeMismatch, "mmd: feature dimensions differ");
  require(bandwidth > 0.0, ErrorKind::DomainError, "mmd: bandwidth must be positive");
  const double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
  auto kernel_sum = [gamma](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, bool skip_diagonal) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < y.rows(); ++j) {
        if (skip_diagonal && i == j) continue;
        s += std::exp(-gamma * (x.row(i) - y.row(j)).squaredNorm());
      }
    return s;
  };
  const double m = static_cast<double>(a.rows());
  const double n = static_cast<double>(b.rows());
  return kernel_sum(a, a, true) / (m * (m - 1)) + kernel_sum(b, b, true) / (n * (n - 1)) -
         2.0 * kernel_sum(a, b, false) / (m * n);
}

double median_bandwidth(const Eigen::MatrixXd& features) {
  require(features.rows() >= 2, ErrorKind::TooFewSamples, "bandwidth needs at least two samples");
  std::vector<double> d;
  d.reserve(static_cast<size_t>(features.rows() * (features.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < features.rows(); ++i)
    for (Eigen::Index j = i + 1; j < features.rows(); ++j) d.push_back((features.row(i) - features.row(j)).norm());
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return std::max(*mid, 1e-12);
}

RandomFeatureExtractor::RandomFeatureExtractor(int side, std::uint64_t seed) : side_(side) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n1(0.0, std::sqrt(2.0 / 27.0));
  std::normal_distribution<double> n2(0.0, std::sqrt(2.0 / 144.0));
  w1_ = Eigen::MatrixXd::NullaryExpr(16, 27, [&]() { return n1(rng); });
  b1_ = Eigen::VectorXd::NullaryExpr(16, [&]() { return 0.1 * n1(rng); });
  w2_ = Eigen::MatrixXd::NullaryExpr(32, 144, [&]() { return n2(rng); });
  b2_ = Eigen::VectorXd::NullaryExpr(32, [&]() { return 0.1 * n2(rng); });
}

int RandomFeatureExtractor::dim() const { return 16 + 32 + kImageChannels; }

namespace {

// 3x3 stride-2 conv with zero padding followed by ReLU. in: channels x (s*s).
Eigen::MatrixXd conv_s2_relu(const Eigen::MatrixXd& in, int s, const Eigen::MatrixXd& w, const Eigen::VectorXd& b) {
  const int cin = static_cast<int>(in.rows());
  const int so = s / 2;
  Eigen::MatrixXd patches = Eigen::MatrixXd::Zero(cin * 9, so * so);
  for (int oy = 0; oy < so; ++oy)
    for (int ox = 0; ox < so; ++ox)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int y = 2 * oy + ky - 1;
          const int x = 2 * ox + kx - 1;
          if (y < 0 || y >= s || x < 0 || x >= s) continue;
          patches.block(static_cast<Eigen::Index>(ky * 3 + kx) * cin, oy * so + ox, cin, 1) = in.col(y * s + x);
        }
  Eigen::MatrixXd out = w * patches;
  out.colwise() += b;
  return out.cwiseMax(0.0);
}

}  // namespace

Eigen::VectorXd RandomFeatureExtractor::operator()(const Eigen::VectorXf& image) const {
  const int p = side_ * side_;
  require(image.size() == kImageChannels * p, ErrorKind::ShapeMismatch, "feature extractor: image size");
  Eigen::MatrixXd in(kImageChannels, p);
  for (int c = 0; c < kImageChannels; ++c) in.row(c) = image.segment(c * p, p).cast<double>().transpose();
  const Eigen::MatrixXd h1 = conv_s2_relu(in, side_, w1_, b1_);
  const Eigen::MatrixXd h2 = conv_s2_relu(h1, side_ / 2, w2_, b2_);
  Eigen::VectorXd f(dim());
  f << h1.rowwise().mean(), h2.rowwise().mean(), in.rowwise().mean();
  return f;
}

Eigen::MatrixXd RandomFeatureExtractor::embed(const std::vector<Eigen::VectorXf>& images) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), dim());
  for (size_t i = 0; i < images.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = (*this)(images[i]).transpose();
  return out;
}

int classify_region_color(const Eigen::VectorXf& image, const Eigen::VectorXf& mask, int side) {
  const int p = side * side;
  require(image.size() == kImageChannels * p && mask.size() == p, ErrorKind::ShapeMismatch,
          "classify_region_color: sizes");
  constexpr double kForegroundDistance = 0.25;
  constexpr int kMinForeground = 4;
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  int count = 0;
  for (int i = 0; i < p; ++i) {
    if (mask[i] == 0.0f) continue;
    const Eigen::Vector3d rgb(image[i], image[p + i], image[2 * p + i]);
    const Eigen::Vector3d bg(kBackground[0], kBackground[1], kBackground[2]);
    if ((rgb - bg).norm() <= kForegroundDistance) continue;
    sum += rgb;
    ++count;
  }
  if (count < kMinForeground) return -1;
  const Eigen::Vector3d mean = sum / count;
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < kNumColors; ++c) {
    const double d = (mean - Eigen::Vector3d(kPalette[c][0], kPalette[c][1], kPalette[c][2])).norm();
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

nlohmann::json to_json(const MetricValues& m) {
  return {{"psnr_full", m.psnr_full},
          {"psnr_masked", m.psnr_masked},
          {"ssim_full", m.ssim_full},
          {"ssim_masked", m.ssim_masked},
          {"mmd", m.mmd}};
}

MetricValues metric_values_from_json(const nlohmann::json& j) {
  MetricValues m;
  m.psnr_full = j.at("psnr_full").get<double>();
  m.psnr_masked = j.at("psnr_masked").get<double>();
  m.ssim_full = j.at("ssim_full").get<double>();
  m.ssim_masked = j.at("ssim_masked").get<double>();
  m.mmd = j.at("mmd").get<double>();
  return m;
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json metrics = to_json(r.raw);
  metrics["composited"] = to_json(r.composited);
  return {{"metrics", metrics},
          {"substitutions", {{"fid_cmmd", "rbf_mmd_random_features"}}},
          {"sampler", {{"steps", r.sampler_steps}}},
          {"ssim", {{"window", kSsimWindow}, {"kind", "uniform"}, {"k1", kSsimK1}, {"k2", kSsimK2}}},
          {"n_samples", r.n_samples},
          {"seed", r.seed},
          {"checkpoint", r.checkpoint},
          {"config_hash", r.config_hash},
          {"dataset_hash", r.dataset_hash}};
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.raw = metric_values_from_json(j.at("metrics"));
  r.composited = metric_values_from_json(j.at("metrics").at("composited"));
  r.sampler_steps = j.at("sampler").at("steps").get<int>();
  r.n_samples = j.at("n_samples").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.dataset_hash = j.value("dataset_hash", "");
  return r;
}

std::vector<Eigen::VectorXf> generate(const Backbone<float>& backbone, const ControlModule<float>* control,
                                      const std::vector<Sample>& samples, const EvalConfig& cfg, PromptMode mode) {
  const int dim = backbone.spec().grid.image_dim();
  const size_t total = cfg.max_samples < 0 ? samples.size() : std::min(samples.size(), static_cast<size_t>(cfg.max_samples));
  std::vector<Eigen::VectorXf> out;
  out.reserve(total);
  std::vector<Condition> conds(total);
  for (size_t i = 0; i < total; ++i) {
    const Sample& s = samples[i];
    conds[i].tokens = tokenize(mode == PromptMode::Local ? s.local_prompt : s.global_prompt);
    conds[i].mask = s.mask;
    conds[i].masked_image = s.masked_image;
  }
  const size_t batch = static_cast<size_t>(std::max(1, cfg.batch));
  for (size_t start = 0; start < total; start += batch) {
    const size_t n = std::min(batch, total - start);
    std::vector<const Condition*> ptrs;
    MatF noise(dim, static_cast<Eigen::Index>(n));
    for (size_t k = 0; k < n; ++k) {
      ptrs.push_back(&conds[start + k]);
      auto rng = scene_rng(cfg.seed, start + k);
      noise.col(static_cast<Eigen::Index>(k)) = standard_normal<float>(dim, 1, rng);
    }
    const auto cb = make_condition_batch<float>(ptrs);
    auto denoiser = [&](const MatF& x, const std::vector<float>& t) -> MatF {
      if (control) return forward_with_control(backbone, *control, x, t, cb).eps_hat;
      return backbone.forward(x, t, cb.prompts, {}, nullptr);
    };
    const MatF x0 = sample_from<float>(denoiser, std::move(noise), cfg.steps);
    const MatF pixels = to_pixel_space(x0);
    for (size_t k = 0; k < n; ++k) out.emplace_back(pixels.col(static_cast<Eigen::Index>(k)));
  }
  return out;
}

Eigen::VectorXf composite(const Eigen::VectorXf& generated, const Sample& s) {
  Eigen::VectorXf out = s.masked_image;
  const Eigen::Index p = s.mask.size();
  for (int c = 0; c < kImageChannels; ++c)
    for (Eigen::Index i = 0; i < p; ++i)
      if (s.mask[i] != 0.0f) out[c * p + i] = generated[c * p + i];
  return out;
}

MetricReport score(const std::vector<Eigen::VectorXf>& generated, const std::vector<Sample>& samples,
                   const EvalConfig& cfg) {
  require(!generated.empty() && generated.size() <= samples.size(), ErrorKind::ShapeMismatch,
          "score: generation count");
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(samples[0].mask.size()))));
  MetricReport r;
  r.n_samples = static_cast<int>(generated.size());
  r.sampler_steps = cfg.steps;
  r.seed = cfg.seed;
  std::vector<Eigen::VectorXf> clean;
  std::vector<Eigen::VectorXf> comp;
  for (size_t i = 0; i < generated.size(); ++i) {
    const Sample& s = samples[i];
    const Eigen::VectorXf& gt = s.clean_image();
    const Eigen::VectorXf c = composite(generated[i], s);
    r.raw.psnr_full += psnr(generated[i], gt);
    r.raw.psnr_masked += psnr_masked(generated[i], gt, s.mask);
    r.raw.ssim_full += ssim(generated[i], gt, side);
    r.raw.ssim_masked += ssim_masked(generated[i], gt, s.mask, side);
    r.composited.psnr_full += psnr(c, gt);
    r.composited.psnr_masked += psnr_masked(c, gt, s.mask);
    r.composited.ssim_full += ssim(c, gt, side);
    r.composited.ssim_masked += ssim_masked(c, gt, s.mask, side);
    clean.push_back(gt);
    comp.push_back(c);
  }
  const double n = static_cast<double>(generated.size());
  for (MetricValues* m : {&r.raw, &r.composited}) {
    m->psnr_full /= n;
    m->psnr_masked /= n;
    m->ssim_full /= n;
    m->ssim_masked /= n;
  }
  const RandomFeatureExtractor fx(side, cfg.feature_seed);
  const Eigen::MatrixXd f_clean = fx.embed(clean);
  const double bw = median_bandwidth(f_clean);
  r.raw.mmd = mmd(fx.embed(generated), f_clean, bw);
  r.composited.mmd = mmd(fx.embed(comp), f_clean, bw);
  return r;
}

MetricReport evaluate(const Backbone<float>& backbone, const ControlModule<float>* control,
                      const std::vector<Sample>& test, const EvalConfig& cfg) {
  const auto gen = generate(backbone, control, test, cfg, PromptMode::Local);
  return score(gen, test, cfg);
}

}  // namespace refine
