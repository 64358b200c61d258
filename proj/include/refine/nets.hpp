#pragma once

// Toy frozen backbone denoiser and control modules with additive per-layer
// injection.
//
// The backbone predicts noise through a preconditioned output. With
// v = sd^2 (1-t)^2 + t^2 (the variance of x_t for data of scale sd):
//   input    c_in(t) * x_t,              c_in = 1 / sqrt(v)
//   eps_hat = a(t) * x_t + b(t) * head,  a = t / v,  b = -(1-t) sd / sqrt(v)
// The implied clean estimate is c_skip * x_t / (1-t) + c_out * head, so the
// head targets a unit-scale clean image at high noise, and eps_hat = x_t
// exactly at t = 1.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "refine/alignment.hpp"
#include "refine/layers.hpp"
#include "refine/vocab.hpp"

namespace refine {

struct Precond {
  double c_in, a, b;
};

inline Precond precondition(double t, double sigma_data) {
  const double sd2 = sigma_data * sigma_data;
  const double v = sd2 * (1.0 - t) * (1.0 - t) + t * t;
  const double r = std::sqrt(v);
  return {1.0 / r, t / v, -(1.0 - t) * sigma_data / r};
}

struct ModelSpec {
  PatchGrid grid{32, 4};
  int width = 32;
  double sigma_data = 0.1;
  int cond_dim = 32;
  int embed_dim = 16;
  int vocab = kVocabSize;
  int backbone_layers = 8;
  int teacher_layers = 8;
  int student_layers = 4;

  int patch_in() const { return kImageChannels * grid.patch_pixels(); }
  // x_t, mask and masked image patches.
  int control_in() const { return (2 * kImageChannels + 1) * grid.patch_pixels(); }

  bool operator==(const ModelSpec&) const = default;
};

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"image_side", s.grid.side},       {"patch", s.grid.patch},
          {"width", s.width},                {"cond_dim", s.cond_dim},
          {"embed_dim", s.embed_dim},        {"vocab", s.vocab},
          {"backbone_layers", s.backbone_layers}, {"teacher_layers", s.teacher_layers},
          {"student_layers", s.student_layers}, {"sigma_data", s.sigma_data}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.grid.side = j.at("image_side").get<int>();
  s.grid.patch = j.at("patch").get<int>();
  s.width = j.at("width").get<int>();
  s.cond_dim = j.at("cond_dim").get<int>();
  s.embed_dim = j.at("embed_dim").get<int>();
  s.vocab = j.at("vocab").get<int>();
  s.backbone_layers = j.at("backbone_layers").get<int>();
  s.teacher_layers = j.at("teacher_layers").get<int>();
  s.student_layers = j.at("student_layers").get<int>();
  s.sigma_data = j.at("sigma_data").get<double>();
  require(s.grid.side > 0 && s.grid.patch > 0 && s.grid.side % s.grid.patch == 0, ErrorKind::ConfigError,
          "image_side must be a positive multiple of patch");
  require(s.width > 0 && s.cond_dim > 0 && s.embed_dim > 0 && s.backbone_layers > 0, ErrorKind::ConfigError,
          "model sizes must be positive");
  require(s.sigma_data > 0.0, ErrorKind::ConfigError, "sigma_data must be positive");
  return s;
}

/// Per-sample conditioning in [0,1] pixel space.
struct Condition {
  std::vector<int> tokens;
  Eigen::VectorXf mask;          // pixels, 1 = inpaint
  Eigen::VectorXf masked_image;  // channels*pixels, sentinel inside the mask
};

/// Tokenizes the prompt and applies the sentinel fill inside the mask.
inline Condition encode_condition(const std::string& prompt, const Eigen::VectorXf& mask,
                                  const Eigen::VectorXf& image) {
  require(image.size() == kImageChannels * mask.size(), ErrorKind::ShapeMismatch,
          "image and mask sizes disagree");
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    require(mask[i] == 0.0f || mask[i] == 1.0f, ErrorKind::DomainError, "mask must be binary");
  Condition c;
  c.tokens = tokenize(prompt);
  c.mask = mask;
  c.masked_image = image;
  const Eigen::Index p = mask.size();
  for (int ch = 0; ch < kImageChannels; ++ch)
    for (Eigen::Index i = 0; i < p; ++i)
      if (mask[i] != 0.0f) c.masked_image[ch * p + i] = static_cast<float>(kSentinelFill);
  return c;
}

/// Batched model-space conditioning.
template <typename T>
struct ConditionBatch {
  TokenBatch prompts;
  Mat<T> mask;    // pixels x N
  Mat<T> masked;  // channels*pixels x N, model space
};

template <typename T>
ConditionBatch<T> make_condition_batch(const std::vector<const Condition*>& conds) {
  ConditionBatch<T> b;
  require(!conds.empty(), ErrorKind::ShapeMismatch, "empty condition batch");
  const auto n = static_cast<Eigen::Index>(conds.size());
  b.mask.resize(conds[0]->mask.size(), n);
  b.masked.resize(conds[0]->masked_image.size(), n);
  for (Eigen::Index s = 0; s < n; ++s) {
    b.prompts.push_back(conds[s]->tokens);
    b.mask.col(s) = conds[s]->mask.template cast<T>();
    b.masked.col(s) = to_model_space(conds[s]->masked_image.template cast<T>());
  }
  return b;
}

/// x_t with each column scaled by c_in(t).
template <typename T>
Mat<T> precondition_input(const Mat<T>& x_t, const std::vector<T>& t, double sigma_data) {
  Mat<T> x = x_t;
  for (Eigen::Index n = 0; n < x.cols(); ++n) x.col(n) *= static_cast<T>(precondition(t[n], sigma_data).c_in);
  return x;
}

template <typename T>
class Backbone {
 public:
  struct Tape {
    Mat<T> tokens;
    typename ConditionEncoder<T>::Tape cond_tape;
    Mat<T> cond;
    std::vector<typename ResidualBlock<T>::Tape> blocks;
    Mat<T> last;
    std::vector<T> t;
  };

  Backbone() = default;
  explicit Backbone(const ModelSpec& spec) : spec_(spec) {
    embed_ = Linear<T>(spec.patch_in(), spec.width);
    pos_ = PositionEmbedding<T>(spec.width, spec.grid.tokens());
    cond_ = ConditionEncoder<T>(spec.vocab, spec.embed_dim, spec.cond_dim);
    blocks_.assign(spec.backbone_layers, ResidualBlock<T>(spec.width, spec.cond_dim, spec.grid.grid()));
    head_ = Linear<T>(spec.width, spec.patch_in());
  }

  static Backbone random(const ModelSpec& spec, std::mt19937_64& rng) {
    Backbone b(spec);
    b.embed_.init_normal(rng);
    b.pos_.init_normal(rng);
    b.cond_.init_normal(rng);
    for (auto& blk : b.blocks_) blk.init_normal(rng);
    b.head_.init_normal(rng, 0.1);
    return b;
  }

  const ModelSpec& spec() const { return spec_; }
  int layers() const { return static_cast<int>(blocks_.size()); }
  const ResidualBlock<T>& block(int index0) const { return blocks_.at(index0); }
  const Linear<T>& embed() const { return embed_; }
  const PositionEmbedding<T>& position() const { return pos_; }
  const ConditionEncoder<T>& cond_encoder() const { return cond_; }

  /// injections: empty, or one matrix per backbone layer (empty matrix = no injection);
  /// injections[l] is added to the output of block l.
  Mat<T> forward(const Mat<T>& x_t, const std::vector<T>& t, const TokenBatch& prompts,
                 const std::vector<Mat<T>>& injections, Tape* tape) const {
    const PatchGrid& g = spec_.grid;
    require(x_t.rows() == g.image_dim(), ErrorKind::ShapeMismatch, "backbone: x_t rows");
    require(static_cast<Eigen::Index>(t.size()) == x_t.cols(), ErrorKind::ShapeMismatch, "backbone: t size");
    require(injections.empty() || static_cast<int>(injections.size()) == layers(), ErrorKind::PlanMismatch,
            "backbone: injection list length != layer count");
    Mat<T> tokens = patchify(precondition_input(x_t, t, spec_.sigma_data), g, kImageChannels);
    typename ConditionEncoder<T>::Tape cond_tape;
    Mat<T> cond = cond_.forward(t, prompts, tape ? &cond_tape : nullptr);
    Mat<T> h = embed_.forward(tokens);
    pos_.forward_inplace(h);
    if (tape) tape->blocks.resize(blocks_.size());
    for (size_t l = 0; l < blocks_.size(); ++l) {
      h = blocks_[l].forward(std::move(h), cond, tape ? &tape->blocks[l] : nullptr);
      if (!injections.empty() && injections[l].size() != 0) {
        require(injections[l].rows() == h.rows() && injections[l].cols() == h.cols(), ErrorKind::ShapeMismatch,
                "injection shape does not match hidden state");
        h += injections[l];
      }
    }
    Mat<T> u = unpatchify(head_.forward(h), g, kImageChannels);
    Mat<T> eps_hat(x_t.rows(), x_t.cols());
    for (Eigen::Index n = 0; n < x_t.cols(); ++n) {
      const Precond pc = precondition(t[n], spec_.sigma_data);
      eps_hat.col(n) = static_cast<T>(pc.a) * x_t.col(n) + static_cast<T>(pc.b) * u.col(n);
    }
    if (tape) {
      tape->tokens = std::move(tokens);
      tape->cond_tape = std::move(cond_tape);
      tape->cond = std::move(cond);
      tape->last = std::move(h);
      tape->t = t;
    }
    return eps_hat;
  }

  /// Backpropagates d(eps_hat). Returns d(injection) per layer. Parameter
  /// gradients accumulate only for parameters with gradient buffers.
  std::vector<Mat<T>> backward(const Tape& tape, const TokenBatch& prompts, const Mat<T>& d_eps) {
    const PatchGrid& g = spec_.grid;
    Mat<T> du = d_eps;
    for (Eigen::Index n = 0; n < du.cols(); ++n) du.col(n) *= static_cast<T>(precondition(tape.t[n], spec_.sigma_data).b);
    Mat<T> dh = head_.backward(tape.last, patchify(du, g, kImageChannels));
    const bool train_cond = cond_.mlp.weight.trainable();
    Mat<T> dcond;
    if (train_cond) dcond = Mat<T>::Zero(tape.cond.rows(), tape.cond.cols());
    std::vector<Mat<T>> d_inj(blocks_.size());
    for (size_t l = blocks_.size(); l-- > 0;) {
      d_inj[l] = dh;
      dh = blocks_[l].backward(tape.blocks[l], tape.cond, dh, train_cond ? &dcond : nullptr);
    }
    pos_.backward(dh);
    if (embed_.weight.trainable()) embed_.backward(tape.tokens, dh, false);
    if (train_cond) cond_.backward(tape.cond_tape, prompts, dcond);
    return d_inj;
  }

  template <typename F>
  void for_each_param(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    visit_all(*this, f);
  }

  void set_trainable(bool on) {
    for_each_param([on](const std::string&, Param<T>& p) { on ? p.enable_grad() : p.disable_grad(); });
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& self, F& f) {
    Linear<T>::visit(self.embed_, f, "embed");
    PositionEmbedding<T>::visit(self.pos_, f, "pos");
    ConditionEncoder<T>::visit(self.cond_, f, "cond");
    for (size_t l = 0; l < self.blocks_.size(); ++l)
      ResidualBlock<T>::visit(self.blocks_[l], f, "block" + std::to_string(l + 1));
    Linear<T>::visit(self.head_, f, "head");
  }

  ModelSpec spec_;
  Linear<T> embed_;
  PositionEmbedding<T> pos_;
  ConditionEncoder<T> cond_;
  std::vector<ResidualBlock<T>> blocks_;
  Linear<T> head_;
};

enum class ControlRole { Teacher, Student };

inline std::string to_string(ControlRole r) { return r == ControlRole::Teacher ? "teacher" : "student"; }

/// Per-layer feature maps emitted by a control module (one per layer): the
/// RMS-normalized hidden state each layer hands to its output projections.
template <typename T>
using ControlFeatures = std::vector<Mat<T>>;

template <typename T>
class ControlModule {
 public:
  struct Output {
    ControlFeatures<T> features;
    // One entry per backbone layer; empty matrix where nothing is injected.
    std::vector<Mat<T>> injections;
  };

  struct Tape {
    Mat<T> input;
    typename ConditionEncoder<T>::Tape cond_tape;
    Mat<T> cond;
    std::vector<typename ResidualBlock<T>::Tape> blocks;
    ControlFeatures<T> features;
    std::vector<RowVec<T>> inv_rms;
  };

  ControlModule() = default;

  /// targets[j] = 1-based backbone layers fed by control layer j (one projection each).
  ControlModule(const ModelSpec& spec, ControlRole role, int layers, std::vector<std::vector<int>> targets)
      : spec_(spec), role_(role), targets_(std::move(targets)) {
    require(layers >= 1, ErrorKind::ShapeMismatch, "control module needs at least one layer");
    require(static_cast<int>(targets_.size()) == layers, ErrorKind::PlanMismatch,
            "control layer count disagrees with its injection plan");
    for (const auto& tg : targets_)
      for (int b : tg)
        require(b >= 1 && b <= spec.backbone_layers, ErrorKind::InvalidTarget,
                "injection target " + std::to_string(b) + " outside backbone");
    embed_ = Linear<T>(spec.control_in(), spec.width);
    pos_ = PositionEmbedding<T>(spec.width, spec.grid.tokens());
    cond_ = ConditionEncoder<T>(spec.vocab, spec.embed_dim, spec.cond_dim);
    blocks_.assign(layers, ResidualBlock<T>(spec.width, spec.cond_dim, spec.grid.grid()));
    projections_.resize(layers);
    for (int j = 0; j < layers; ++j) projections_[j].assign(targets_[j].size(), Linear<T>(spec.width, spec.width));
  }

  /// Trunk copied from the first `layers` backbone blocks; condition inputs and
  /// output projections start at zero, so the initial injection is a no-op.
  static ControlModule from_backbone(const Backbone<T>& backbone, ControlRole role, int layers,
                                     std::vector<std::vector<int>> targets) {
    require(layers <= backbone.layers(), ErrorKind::ShapeMismatch,
            "control layers exceed backbone layers");
    ControlModule c(backbone.spec(), role, layers, std::move(targets));
    const int pin = backbone.spec().patch_in();
    c.embed_.weight.value.setZero();
    c.embed_.weight.value.leftCols(pin) = backbone.embed().weight.value;
    c.embed_.bias.value = backbone.embed().bias.value;
    c.pos_ = backbone.position();
    c.cond_ = backbone.cond_encoder();
    for (int j = 0; j < layers; ++j) c.blocks_[j] = backbone.block(j);
    c.set_trainable(false);
    return c;
  }

  /// Random trunk (from-scratch baseline); projections still zero.
  static ControlModule random(const ModelSpec& spec, ControlRole role, int layers,
                              std::vector<std::vector<int>> targets, std::mt19937_64& rng) {
    ControlModule c(spec, role, layers, std::move(targets));
    c.embed_.init_normal(rng);
    c.pos_.init_normal(rng);
    c.cond_.init_normal(rng);
    for (auto& blk : c.blocks_) blk.init_normal(rng);
    return c;
  }

  ControlRole role() const { return role_; }
  int layers() const { return static_cast<int>(blocks_.size()); }
  const std::vector<std::vector<int>>& targets() const { return targets_; }
  const ModelSpec& spec() const { return spec_; }
  const ResidualBlock<T>& block(int index0) const { return blocks_.at(index0); }

  Output forward(const Mat<T>& x_t, const std::vector<T>& t, const ConditionBatch<T>& cond, Tape* tape) const {
    const PatchGrid& g = spec_.grid;
    require(x_t.rows() == g.image_dim() && cond.masked.rows() == g.image_dim() && cond.mask.rows() == g.pixels(),
            ErrorKind::ShapeMismatch, "control: input shapes");
    require(cond.mask.cols() == x_t.cols() && cond.masked.cols() == x_t.cols(), ErrorKind::ShapeMismatch,
            "control: batch sizes");
    const int pp = g.patch_pixels();
    Mat<T> input(spec_.control_in(), static_cast<Eigen::Index>(g.tokens()) * x_t.cols());
    input.topRows(kImageChannels * pp) = patchify(precondition_input(x_t, t, spec_.sigma_data), g, kImageChannels);
    input.middleRows(kImageChannels * pp, pp) = patchify(cond.mask, g, 1);
    input.bottomRows(kImageChannels * pp) = patchify(cond.masked, g, kImageChannels);

    typename ConditionEncoder<T>::Tape cond_tape;
    Mat<T> cvec = cond_.forward(t, cond.prompts, tape ? &cond_tape : nullptr);
    Output out;
    out.features.resize(blocks_.size());
    out.injections.assign(spec_.backbone_layers, Mat<T>());
    if (tape) {
      tape->blocks.resize(blocks_.size());
      tape->inv_rms.resize(blocks_.size());
    }
    RowVec<T> inv_rms;
    Mat<T> h = embed_.forward(input);
    pos_.forward_inplace(h);
    for (size_t j = 0; j < blocks_.size(); ++j) {
      h = blocks_[j].forward(std::move(h), cvec, tape ? &tape->blocks[j] : nullptr);
      out.features[j] = RmsNorm<T>::forward(h, inv_rms);
      if (tape) tape->inv_rms[j] = inv_rms;
      for (size_t k = 0; k < targets_[j].size(); ++k) {
        Mat<T>& slot = out.injections[targets_[j][k] - 1];
        Mat<T> proj = projections_[j][k].forward(out.features[j]);
        if (slot.size() == 0)
          slot = std::move(proj);
        else
          slot += proj;
      }
    }
    if (tape) {
      tape->input = std::move(input);
      tape->cond_tape = std::move(cond_tape);
      tape->cond = std::move(cvec);
      tape->features = out.features;
    }
    return out;
  }

  /// d_injections: per backbone layer (as returned by Backbone::backward).
  /// d_features: optional per-layer gradient on the emitted features.
  void backward(const Tape& tape, const TokenBatch& prompts, const std::vector<Mat<T>>& d_injections,
                const ControlFeatures<T>* d_features) {
    const bool train_cond = cond_.mlp.weight.trainable();
    Mat<T> dcond;
    if (train_cond) dcond = Mat<T>::Zero(tape.cond.rows(), tape.cond.cols());
    Mat<T> dh;
    for (size_t j = blocks_.size(); j-- > 0;) {
      Mat<T> df = Mat<T>::Zero(tape.features[j].rows(), tape.features[j].cols());
      if (d_features && (*d_features)[j].size() != 0) df += (*d_features)[j];
      for (size_t k = 0; k < targets_[j].size(); ++k) {
        const Mat<T>& d_slot = d_injections.at(targets_[j][k] - 1);
        if (d_slot.size() == 0) continue;
        df += projections_[j][k].backward(tape.features[j], d_slot);
      }
      Mat<T> g = RmsNorm<T>::backward(tape.features[j], tape.inv_rms[j], df);
      if (dh.size()) g += dh;
      dh = blocks_[j].backward(tape.blocks[j], tape.cond, g, train_cond ? &dcond : nullptr);
    }
    pos_.backward(dh);
    if (embed_.weight.trainable()) embed_.backward(tape.input, dh, false);
    if (train_cond) cond_.backward(tape.cond_tape, prompts, dcond);
  }

  template <typename F>
  void for_each_param(F&& f) {
    visit_all(*this, f);
  }
  template <typename F>
  void for_each_param(F&& f) const {
    visit_all(*this, f);
  }

  void set_trainable(bool on) {
    for_each_param([on](const std::string&, Param<T>& p) { on ? p.enable_grad() : p.disable_grad(); });
  }

  bool projections_all_zero() const {
    for (const auto& row : projections_)
      for (const auto& p : row)
        if (!p.weight.value.isZero(0) || !p.bias.value.isZero(0)) return false;
    return true;
  }

 private:
  template <typename Self, typename F>
  static void visit_all(Self& self, F& f) {
    Linear<T>::visit(self.embed_, f, "embed");
    PositionEmbedding<T>::visit(self.pos_, f, "pos");
    ConditionEncoder<T>::visit(self.cond_, f, "cond");
    for (size_t j = 0; j < self.blocks_.size(); ++j) {
      const std::string name = "layer" + std::to_string(j + 1);
      ResidualBlock<T>::visit(self.blocks_[j], f, name);
      for (size_t k = 0; k < self.projections_[j].size(); ++k)
        Linear<T>::visit(self.projections_[j][k], f, name + ".proj_to" + std::to_string(self.targets_[j][k]));
    }
  }

  ModelSpec spec_;
  ControlRole role_ = ControlRole::Student;
  std::vector<std::vector<int>> targets_;
  Linear<T> embed_;
  PositionEmbedding<T> pos_;
  ConditionEncoder<T> cond_;
  std::vector<ResidualBlock<T>> blocks_;
  std::vector<std::vector<Linear<T>>> projections_;
};

/// Student initialised from the backbone prefix with the plan's injection map.
template <typename T>
ControlModule<T> init_student_from_backbone(const Backbone<T>& backbone, const AlignmentPlan& plan) {
  require(plan.student_layers <= backbone.layers(), ErrorKind::ShapeMismatch,
          "student layers exceed backbone layers");
  return ControlModule<T>::from_backbone(backbone, ControlRole::Student, plan.student_layers, plan.injection);
}

template <typename T>
struct ControlledOutput {
  Mat<T> eps_hat;
  ControlFeatures<T> features;
};

/// Inference-mode backbone pass steered by a control module.
template <typename T>
ControlledOutput<T> forward_with_control(const Backbone<T>& backbone, const ControlModule<T>& control,
                                         const Mat<T>& x_t, const std::vector<T>& t, const ConditionBatch<T>& cond) {
  require(control.spec().backbone_layers == backbone.layers(), ErrorKind::PlanMismatch,
          "control module built for a different backbone depth");
  auto out = control.forward(x_t, t, cond, nullptr);
  ControlledOutput<T> res;
  res.eps_hat = backbone.forward(x_t, t, cond.prompts, out.injections, nullptr);
  res.features = std::move(out.features);
  return res;
}

}  // namespace refine
