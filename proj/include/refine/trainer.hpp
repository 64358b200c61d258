#pragma once

// Backbone and teacher pretraining, two-stage distillation, the from-scratch
// baseline and the ablation variants.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refine/alignment.hpp"
#include "refine/losses.hpp"
#include "refine/metrics.hpp"
#include "refine/nets.hpp"
#include "refine/synthdata.hpp"

namespace refine {

enum class Variant { Ours, Fc, WoMask, OneStage, Sl, WoCf };

inline constexpr Variant kAllVariants[] = {Variant::Ours, Variant::Fc, Variant::WoMask,
                                           Variant::OneStage, Variant::Sl, Variant::WoCf};

std::string to_string(Variant v);
/// Throws ConfigError for unknown names.
Variant variant_from_string(const std::string& s);
bool uses_teacher(Variant v);

struct BackboneTrainConfig {
  int steps = 3000;
  int batch = 32;
  double lr = 1e-3;
};

struct TeacherTrainConfig {
  int max_steps = 12000;
  int batch = 32;
  double lr = 1e-3;
  double psnr_floor = 18.0;  // held-out masked PSNR (dB)
  int eval_every = 2000;
  int holdout = 128;  // last samples of D_sl, never trained on
};

struct TrainConfig {
  Variant variant = Variant::Ours;
  int stage1_steps = 3000;
  int stage2_steps = 1000;
  int batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  LossWeights weights;
  bool mask_weighting = true;
  int heldout_samples = 256;  // D_test prefix used for held-out L_distill

  int total_steps() const { return stage1_steps + stage2_steps; }
};

nlohmann::json to_json(const TrainConfig& c);

/// Applies the variant's pipeline composition to the base (ours) budgets.
TrainConfig resolve_variant(const TrainConfig& base, Variant v);

/// Adam with bias correction over every trainable parameter of the given modules.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  template <typename Module>
  void add(Module& m) {
    m.for_each_param([this](const std::string&, Param<float>& p) {
      if (!p.trainable()) return;
      params_.push_back(&p);
      m_.push_back(MatF::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(MatF::Zero(p.value.rows(), p.value.cols()));
    });
  }

  void zero_grad();
  /// Applies one update and clears gradients.
  void step();
  long steps_taken() const { return t_; }
  /// False if any gradient holds a non-finite value.
  bool grads_finite() const;

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Param<float>*> params_;
  std::vector<MatF> m_, v_;
};

/// Shuffles indices once per epoch and hands out fixed-size batches.
class EpochSampler {
 public:
  EpochSampler(size_t n, std::uint64_t seed);
  std::vector<size_t> next(int batch);

 private:
  std::vector<size_t> order_;
  size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

/// Model-space training view of a split.
struct PreparedSet {
  std::vector<std::string> ids;
  std::vector<Condition> local;   // local-prompt conditions
  std::vector<Condition> global;  // global-prompt conditions
  MatF clean;                     // image_dim x N model space; empty without ground truth
  bool has_ground_truth() const { return clean.size() != 0; }
  size_t size() const { return ids.size(); }
};

/// first/count select a contiguous range; count < 0 = to the end.
PreparedSet prepare(const std::vector<Sample>& samples, size_t first = 0, long count = -1);

/// Stage-2 pseudo source: masked image in model space with N(0,1) inside the mask.
MatF pseudo_source(const ConditionBatch<float>& cond, std::mt19937_64& rng);

struct LossLogRow {
  long step = 0;
  std::string stage;
  LossBreakdown terms;
};

class LossLog {
 public:
  void add(long step, const std::string& stage, const LossBreakdown& terms) { rows_.push_back({step, stage, terms}); }
  const std::vector<LossLogRow>& rows() const { return rows_; }
  void write_csv(const std::filesystem::path& path) const;

 private:
  std::vector<LossLogRow> rows_;
};

/// A non-finite loss or gradient writes crash.json here (if set) and throws NumericFailure.
struct TrainContext {
  std::filesystem::path crash_path;
};

struct BackboneResult {
  Backbone<float> backbone;
  LossLog log;
};

/// Trains the denoiser on clean images with global prompts (no control).
BackboneResult pretrain_backbone(const ModelSpec& spec, const PreparedSet& data, const BackboneTrainConfig& cfg,
                                 std::uint64_t seed, const TrainContext& ctx = {});

struct TeacherResult {
  ControlModule<float> teacher;
  LossLog log;
  int steps = 0;
  double heldout_psnr_masked = 0.0;
  bool converged = false;
  std::vector<std::pair<int, double>> validation;  // (step, masked PSNR)
};

/// Teacher initialised from a full backbone copy, trained with the unweighted
/// task loss until the held-out masked PSNR reaches the floor or max_steps.
TeacherResult train_teacher(const Backbone<float>& backbone, const PreparedSet& train,
                            const std::vector<Sample>& holdout, const TeacherTrainConfig& cfg, const EvalConfig& eval,
                            std::uint64_t seed, const TrainContext& ctx = {});

/// Mean L_distill of student vs teacher on fixed (t, eps) draws over true-image inputs.
double heldout_distill(const Backbone<float>& backbone, const ControlModule<float>& teacher,
                       const ControlModule<float>& student, const PreparedSet& heldout, std::uint64_t seed,
                       int batch = 64);

struct DistillState {
  Backbone<float>* backbone = nullptr;
  const ControlModule<float>* teacher = nullptr;
  ControlModule<float>* student = nullptr;
  const AlignmentPlan* plan = nullptr;
};

/// One forward/backward pass for stage 1 (eps != nullptr) or stage 2 (eps == nullptr).
/// Gradients are scaled by grad_scale and accumulate into the student.
LossBreakdown distill_pass(const DistillState& st, const MatF& x_t, const std::vector<float>& t,
                           const ConditionBatch<float>& cond, const MatF* eps, const MatF* pixel_weights,
                           const LossWeights& w, float grad_scale = 1.0f);

void distill_stage1(const DistillState& st, const PreparedSet& sl, const TrainConfig& cfg, Adam& opt,
                    LossLog& log, long& step, const TrainContext& ctx = {});
/// Rejects samples that carry ground truth.
void distill_stage2(const DistillState& st, const std::vector<Sample>& ssl, const PreparedSet& ssl_set,
                    const TrainConfig& cfg, Adam& opt, LossLog& log, long& step, const TrainContext& ctx = {});
/// Shuffled union of sl and ssl in one phase; each batch mixes stage-1 and
/// stage-2 objectives weighted by sub-batch share.
void train_one_stage(const DistillState& st, const PreparedSet& sl, const PreparedSet& ssl, const TrainConfig& cfg,
                     Adam& opt, LossLog& log, long& step, const TrainContext& ctx = {});
/// Mask-weighted task loss only; never touches a teacher.
void train_from_scratch(Backbone<float>& backbone, ControlModule<float>& student, const PreparedSet& sl,
                        const TrainConfig& cfg, Adam& opt, LossLog& log, long& step, const TrainContext& ctx = {});

struct VariantInputs {
  Backbone<float>* backbone = nullptr;
  const ControlModule<float>* teacher = nullptr;  // must be null for fc
  const std::vector<Sample>* sl = nullptr;
  const std::vector<Sample>* ssl = nullptr;
  const std::vector<Sample>* test = nullptr;
};

struct VariantResult {
  ControlModule<float> student;
  MetricReport report;
  LossLog log;
  AlignmentPlan plan;
  std::optional<double> heldout_distill_stage1;
  std::optional<double> heldout_distill_stage2;
  std::string backbone_checksum_before, backbone_checksum_after;
  std::string teacher_checksum_before, teacher_checksum_after;
  long total_steps = 0;
  bool stage2_ids_disjoint = true;
  nlohmann::json summary() const;
};

/// Builds the student, runs the variant's pipeline and evaluates it on D_test.
/// run_dir (optional) receives checkpoints/{stage}-{step} and crash.json on failure.
VariantResult run_variant(const TrainConfig& cfg, const VariantInputs& in, const EvalConfig& eval,
                          const std::filesystem::path& run_dir = {}, const std::string& config_hash = "");

}  // namespace refine
