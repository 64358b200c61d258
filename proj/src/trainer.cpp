#include "refine/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <unordered_set>

#include "refine/checkpoint.hpp"
#include "refine/flowmatch.hpp"

namespace refine {

namespace {

// Independent RNG streams per purpose, derived from the run seed.
enum StreamTag : std::uint64_t {
  kInitStream = 1,
  kStage1Order = 2,
  kStage1Noise = 3,
  kStage2Order = 4,
  kStage2Noise = 5,
  kScratchOrder = 6,
  kScratchNoise = 7,
  kTeacherOrder = 8,
  kTeacherNoise = 9,
  kBackboneOrder = 10,
  kBackboneNoise = 11,
  kHeldoutNoise = 12,
};

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) { return scene_rng(seed, 0x5eed0000ULL + tag); }

std::vector<float> draw_times(size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<float> t(n);
  for (auto& v : t) v = static_cast<float>(u(rng));
  return t;
}

ConditionBatch<float> gather_conditions(const std::vector<Condition>& conds, const std::vector<size_t>& idx) {
  std::vector<const Condition*> ptrs;
  ptrs.reserve(idx.size());
  for (size_t i : idx) ptrs.push_back(&conds.at(i));
  return make_condition_batch<float>(ptrs);
}

MatF gather_columns(const MatF& m, const std::vector<size_t>& idx) {
  MatF out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(static_cast<Eigen::Index>(idx[k]));
  return out;
}

nlohmann::json terms_json(const LossBreakdown& t) {
  return {{"L_task", t.task}, {"L_distill", t.distill}, {"L_af", t.af}, {"total", t.total}};
}

void guard(const LossBreakdown& terms, const Adam& opt, const std::string& stage, long step, const TrainContext& ctx) {
  const bool loss_ok = std::isfinite(terms.total) && std::isfinite(terms.task) && std::isfinite(terms.distill) &&
                       std::isfinite(terms.af);
  if (loss_ok && opt.grads_finite()) return;
  const std::string reason = loss_ok ? "non-finite gradient" : "non-finite loss";
  if (!ctx.crash_path.empty()) {
    nlohmann::json dump = {{"stage", stage}, {"step", step}, {"reason", reason}, {"losses", terms_json(terms)}};
    std::ofstream(ctx.crash_path) << dump.dump(2) << "\n";
  }
  throw Error(ErrorKind::NumericFailure, stage + " step " + std::to_string(step) + ": " + reason);
}

MatF pixel_weights(const ConditionBatch<float>& cond, const TrainConfig& cfg) {
  if (!cfg.mask_weighting) return MatF::Ones(cond.mask.rows(), cond.mask.cols());
  return mask_weight<float>(cond.mask, cfg.weights.alpha);
}

// Single supervised pass of a denoiser steered by `control` (or bare backbone).
LossBreakdown supervised_pass(Backbone<float>& backbone, ControlModule<float>* control, const MatF& x_t,
                              const std::vector<float>& t, const ConditionBatch<float>& cond, const MatF& eps,
                              const MatF& weights, double lambda) {
  ControlModule<float>::Tape ctape;
  Backbone<float>::Tape btape;
  std::vector<MatF> injections;
  if (control) injections = control->forward(x_t, t, cond, &ctape).injections;
  const MatF eps_hat = backbone.forward(x_t, t, cond.prompts, injections, &btape);
  const auto task = task_loss(eps, eps_hat, weights);
  const MatF d = static_cast<float>(lambda) * task.grad;
  auto d_inj = backbone.backward(btape, cond.prompts, d);
  if (control) control->backward(ctape, cond.prompts, d_inj, nullptr);
  LossBreakdown terms;
  terms.task = task.value;
  terms.total = lambda * task.value;
  return terms;
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Ours: return "ours";
    case Variant::Fc: return "fc";
    case Variant::WoMask: return "wo_mask";
    case Variant::OneStage: return "one_stage";
    case Variant::Sl: return "sl";
    case Variant::WoCf: return "wo_cf";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  throw Error(ErrorKind::ConfigError,
              "unknown variant '" + s + "' (expected ours, fc, wo_mask, one_stage, sl or wo_cf)");
}

bool uses_teacher(Variant v) { return v != Variant::Fc; }

nlohmann::json to_json(const TrainConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"stage1_steps", c.stage1_steps},
          {"stage2_steps", c.stage2_steps},
          {"batch", c.batch},
          {"lr", c.lr},
          {"seed", c.seed},
          {"weights", to_json(c.weights)},
          {"mask_weighting", c.mask_weighting},
          {"heldout_samples", c.heldout_samples}};
}

TrainConfig resolve_variant(const TrainConfig& base, Variant v) {
  require(base.stage1_steps >= 0 && base.stage2_steps >= 0, ErrorKind::ConfigError, "step counts must be >= 0");
  require(base.batch >= 1, ErrorKind::ConfigError, "batch must be >= 1");
  base.weights.validate();
  TrainConfig c = base;
  c.variant = v;
  const int total = base.total_steps();
  switch (v) {
    case Variant::Ours: break;
    case Variant::WoMask: c.mask_weighting = false; break;
    case Variant::WoCf: c.weights.lambda_af = 0.0; break;
    case Variant::Fc:
    case Variant::OneStage:
    case Variant::Sl:
      c.stage1_steps = total;
      c.stage2_steps = 0;
      break;
  }
  return c;
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

bool Adam::grads_finite() const {
  for (const auto* p : params_)
    if (!p->grad.allFinite()) return false;
  return true;
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_);
  const float b2 = static_cast<float>(beta2_);
  const float step = static_cast<float>(lr_ / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(eps_);
  for (size_t k = 0; k < params_.size(); ++k) {
    Param<float>& p = *params_[k];
    m_[k] = b1 * m_[k] + (1.0f - b1) * p.grad;
    v_[k] = b2 * v_[k] + (1.0f - b2) * p.grad.cwiseAbs2();
    p.value.array() -= step * m_[k].array() / ((v_[k].array() * inv_c2).sqrt() + eps);
    p.grad.setZero();
  }
}

EpochSampler::EpochSampler(size_t n, std::uint64_t seed) : order_(n), cursor_(n), rng_(seed) {
  require(n > 0, ErrorKind::TooFewSamples, "cannot sample batches from an empty set");
  for (size_t i = 0; i < n; ++i) order_[i] = i;
}

std::vector<size_t> EpochSampler::next(int batch) {
  std::vector<size_t> out;
  out.reserve(static_cast<size_t>(batch));
  while (out.size() < static_cast<size_t>(batch)) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

PreparedSet prepare(const std::vector<Sample>& samples, size_t first, long count) {
  require(first <= samples.size(), ErrorKind::IndexError, "prepare: range start outside the split");
  const size_t end = count < 0 ? samples.size() : std::min(samples.size(), first + static_cast<size_t>(count));
  PreparedSet s;
  const bool gt = end > first && samples[first].has_ground_truth();
  for (size_t i = first; i < end; ++i) {
    const Sample& smp = samples[i];
    require(smp.has_ground_truth() == gt, ErrorKind::ShapeMismatch, "prepare: mixed ground-truth availability");
    s.ids.push_back(smp.id);
    s.local.push_back({tokenize(smp.local_prompt), smp.mask, smp.masked_image});
    s.global.push_back({tokenize(smp.global_prompt), smp.mask, smp.masked_image});
  }
  if (gt) {
    s.clean.resize(samples[first].masked_image.size(), static_cast<Eigen::Index>(end - first));
    for (size_t i = first; i < end; ++i)
      s.clean.col(static_cast<Eigen::Index>(i - first)) = to_model_space(samples[i].clean_image());
  }
  return s;
}

MatF pseudo_source(const ConditionBatch<float>& cond, std::mt19937_64& rng) {
  MatF x = cond.masked;
  const Eigen::Index p = cond.mask.rows();
  std::normal_distribution<double> n01(0.0, 1.0);
  for (Eigen::Index s = 0; s < x.cols(); ++s)
    for (int c = 0; c < kImageChannels; ++c)
      for (Eigen::Index i = 0; i < p; ++i)
        if (cond.mask(i, s) != 0.0f) x(c * p + i, s) = static_cast<float>(n01(rng));
  return x;
}

void LossLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::IOFailure, "cannot write " + path.string());
  out << "step,stage,L_task,L_distill,L_af,total\n";
  out << std::setprecision(9);
  for (const auto& r : rows_)
    out << r.step << ',' << r.stage << ',' << r.terms.task << ',' << r.terms.distill << ',' << r.terms.af << ','
        << r.terms.total << '\n';
}

BackboneResult pretrain_backbone(const ModelSpec& spec, const PreparedSet& data, const BackboneTrainConfig& cfg,
                                 std::uint64_t seed, const TrainContext& ctx) {
  require(data.has_ground_truth(), ErrorKind::GroundTruthExposure, "backbone pretraining needs clean images");
  auto init = stream(seed, kInitStream);
  BackboneResult r{Backbone<float>::random(spec, init), {}};
  r.backbone.set_trainable(true);
  Adam opt(cfg.lr);
  opt.add(r.backbone);
  EpochSampler sampler(data.size(), stream(seed, kBackboneOrder)());
  auto noise = stream(seed, kBackboneNoise);
  for (int k = 1; k <= cfg.steps; ++k) {
    const auto idx = sampler.next(cfg.batch);
    const auto cond = gather_conditions(data.global, idx);
    const MatF x0 = gather_columns(data.clean, idx);
    const MatF eps = standard_normal<float>(x0.rows(), x0.cols(), noise);
    const auto t = draw_times(idx.size(), noise);
    const MatF x_t = add_noise(x0, eps, t);
    const MatF ones = MatF::Ones(cond.mask.rows(), cond.mask.cols());
    const auto terms = supervised_pass(r.backbone, nullptr, x_t, t, cond, eps, ones, 1.0);
    guard(terms, opt, "backbone", k, ctx);
    opt.step();
    r.log.add(k, "backbone", terms);
  }
  r.backbone.set_trainable(false);
  return r;
}

TeacherResult train_teacher(const Backbone<float>& frozen, const PreparedSet& train,
                            const std::vector<Sample>& holdout, const TeacherTrainConfig& cfg, const EvalConfig& eval,
                            std::uint64_t seed, const TrainContext& ctx) {
  require(train.has_ground_truth(), ErrorKind::GroundTruthExposure, "teacher training needs clean images");
  require(!holdout.empty(), ErrorKind::TooFewSamples, "teacher validation needs a held-out set");
  Backbone<float> backbone = frozen;
  backbone.set_trainable(false);
  const int layers = backbone.spec().teacher_layers;
  TeacherResult r;
  r.teacher = ControlModule<float>::from_backbone(backbone, ControlRole::Teacher, layers,
                                                  identity_teacher_injection(layers));
  r.teacher.set_trainable(true);
  Adam opt(cfg.lr);
  opt.add(r.teacher);
  EpochSampler sampler(train.size(), stream(seed, kTeacherOrder)());
  auto noise = stream(seed, kTeacherNoise);

  auto validate_now = [&](int step) {
    const auto gen = generate(backbone, &r.teacher, holdout, eval, PromptMode::Local);
    double sum = 0.0;
    for (size_t i = 0; i < gen.size(); ++i) sum += psnr_masked(gen[i], holdout[i].clean_image(), holdout[i].mask);
    r.heldout_psnr_masked = sum / static_cast<double>(gen.size());
    r.validation.emplace_back(step, r.heldout_psnr_masked);
    r.converged = r.heldout_psnr_masked >= cfg.psnr_floor;
  };

  for (int k = 1; k <= cfg.max_steps; ++k) {
    const auto idx = sampler.next(cfg.batch);
    const auto cond = gather_conditions(train.local, idx);
    const MatF x0 = gather_columns(train.clean, idx);
    const MatF eps = standard_normal<float>(x0.rows(), x0.cols(), noise);
    const auto t = draw_times(idx.size(), noise);
    const MatF x_t = add_noise(x0, eps, t);
    const MatF ones = MatF::Ones(cond.mask.rows(), cond.mask.cols());
    const auto terms = supervised_pass(backbone, &r.teacher, x_t, t, cond, eps, ones, 1.0);
    guard(terms, opt, "teacher", k, ctx);
    opt.step();
    r.log.add(k, "teacher", terms);
    r.steps = k;
    if (cfg.eval_every > 0 && k % cfg.eval_every == 0) {
      validate_now(k);
      if (r.converged) break;
    }
  }
  if (r.validation.empty() || r.validation.back().first != r.steps) validate_now(r.steps);
  r.teacher.set_trainable(false);
  return r;
}

double heldout_distill(const Backbone<float>& backbone, const ControlModule<float>& teacher,
                       const ControlModule<float>& student, const PreparedSet& heldout, std::uint64_t seed,
                       int batch) {
  require(heldout.has_ground_truth() && heldout.size() > 0, ErrorKind::TooFewSamples,
          "held-out distillation loss needs clean images");
  const Eigen::Index dim = heldout.clean.rows();
  double sum = 0.0;
  for (size_t start = 0; start < heldout.size(); start += static_cast<size_t>(batch)) {
    const size_t n = std::min(static_cast<size_t>(batch), heldout.size() - start);
    std::vector<size_t> idx(n);
    MatF eps(dim, static_cast<Eigen::Index>(n));
    std::vector<float> t(n);
    for (size_t k = 0; k < n; ++k) {
      idx[k] = start + k;
      auto rng = stream(seed + start + k, kHeldoutNoise);
      eps.col(static_cast<Eigen::Index>(k)) = standard_normal<float>(dim, 1, rng);
      t[k] = draw_times(1, rng)[0];
    }
    const auto cond = gather_conditions(heldout.local, idx);
    const MatF x_t = add_noise(gather_columns(heldout.clean, idx), eps, t);
    const MatF e_t = forward_with_control(backbone, teacher, x_t, t, cond).eps_hat;
    const MatF e_s = forward_with_control(backbone, student, x_t, t, cond).eps_hat;
    sum += static_cast<double>(distill_loss(e_t, e_s).value) * static_cast<double>(n);
  }
  return sum / static_cast<double>(heldout.size());
}

LossBreakdown distill_pass(const DistillState& st, const MatF& x_t, const std::vector<float>& t,
                           const ConditionBatch<float>& cond, const MatF* eps, const MatF* weights,
                           const LossWeights& w, float grad_scale) {
  DistillOutputs<float> o;
  auto tout = st.teacher->forward(x_t, t, cond, nullptr);
  o.eps_teacher = st.backbone->forward(x_t, t, cond.prompts, tout.injections, nullptr);
  o.f_teacher = std::move(tout.features);
  ControlModule<float>::Tape stape;
  Backbone<float>::Tape btape;
  auto sout = st.student->forward(x_t, t, cond, &stape);
  o.eps_hat = st.backbone->forward(x_t, t, cond.prompts, sout.injections, &btape);
  o.f_student = std::move(sout.features);
  StageLoss<float> loss = eps ? stage1_loss(*eps, *weights, o, *st.plan, w) : stage2_loss(o, *st.plan, w);
  if (grad_scale != 1.0f) {
    loss.d_eps_hat *= grad_scale;
    for (auto& d : loss.d_features) d *= grad_scale;
  }
  const auto d_inj = st.backbone->backward(btape, cond.prompts, loss.d_eps_hat);
  st.student->backward(stape, cond.prompts, d_inj, &loss.d_features);
  return loss.terms;
}

void distill_stage1(const DistillState& st, const PreparedSet& sl, const TrainConfig& cfg, Adam& opt, LossLog& log,
                    long& step, const TrainContext& ctx) {
  require(sl.has_ground_truth(), ErrorKind::GroundTruthExposure, "stage 1 needs clean images");
  EpochSampler sampler(sl.size(), stream(cfg.seed, kStage1Order)());
  auto noise = stream(cfg.seed, kStage1Noise);
  for (int k = 0; k < cfg.stage1_steps; ++k) {
    const auto idx = sampler.next(cfg.batch);
    const auto cond = gather_conditions(sl.local, idx);
    const MatF x0 = gather_columns(sl.clean, idx);
    const MatF eps = standard_normal<float>(x0.rows(), x0.cols(), noise);
    const auto t = draw_times(idx.size(), noise);
    const MatF x_t = add_noise(x0, eps, t);
    const MatF weights = pixel_weights(cond, cfg);
    const auto terms = distill_pass(st, x_t, t, cond, &eps, &weights, cfg.weights);
    ++step;
    guard(terms, opt, "stage1", step, ctx);
    opt.step();
    log.add(step, "stage1", terms);
  }
}

void distill_stage2(const DistillState& st, const std::vector<Sample>& ssl, const PreparedSet& ssl_set,
                    const TrainConfig& cfg, Adam& opt, LossLog& log, long& step, const TrainContext& ctx) {
  for (const Sample& s : ssl)
    require(!s.has_ground_truth(), ErrorKind::GroundTruthExposure,
            "stage 2 refuses sample " + s.id + ": it carries a clean image");
  require(!ssl_set.has_ground_truth(), ErrorKind::GroundTruthExposure, "stage 2 input carries clean images");
  EpochSampler sampler(ssl_set.size(), stream(cfg.seed, kStage2Order)());
  auto noise = stream(cfg.seed, kStage2Noise);
  for (int k = 0; k < cfg.stage2_steps; ++k) {
    const auto idx = sampler.next(cfg.batch);
    const auto cond = gather_conditions(ssl_set.local, idx);
    const MatF x_src = pseudo_source(cond, noise);
    const MatF eps = standard_normal<float>(x_src.rows(), x_src.cols(), noise);
    const auto t = draw_times(idx.size(), noise);
    const MatF x_t = add_noise(x_src, eps, t);
    const auto terms = distill_pass(st, x_t, t, cond, nullptr, nullptr, cfg.weights);
    ++step;
    guard(terms, opt, "stage2", step, ctx);
    opt.step();
    log.add(step, "stage2", terms);
  }
}

void train_one_stage(const DistillState& st, const PreparedSet& sl, const PreparedSet& ssl, const TrainConfig& cfg,
                     Adam& opt, LossLog& log, long& step, const TrainContext& ctx) {
  require(sl.has_ground_truth() && !ssl.has_ground_truth(), ErrorKind::GroundTruthExposure,
          "one-stage training expects labelled sl and unlabelled ssl sets");
  EpochSampler sampler(sl.size() + ssl.size(), stream(cfg.seed, kStage1Order)());
  auto noise = stream(cfg.seed, kStage1Noise);
  const int total = cfg.stage1_steps + cfg.stage2_steps;
  for (int k = 0; k < total; ++k) {
    std::vector<size_t> sl_idx, ssl_idx;
    for (size_t i : sampler.next(cfg.batch)) {
      if (i < sl.size())
        sl_idx.push_back(i);
      else
        ssl_idx.push_back(i - sl.size());
    }
    LossBreakdown terms;
    auto accumulate = [&](const LossBreakdown& part, double share) {
      terms.task += share * part.task;
      terms.distill += share * part.distill;
      terms.af += share * part.af;
      terms.total += share * part.total;
    };
    if (!sl_idx.empty()) {
      const double share = static_cast<double>(sl_idx.size()) / cfg.batch;
      const auto cond = gather_conditions(sl.local, sl_idx);
      const MatF x0 = gather_columns(sl.clean, sl_idx);
      const MatF eps = standard_normal<float>(x0.rows(), x0.cols(), noise);
      const auto t = draw_times(sl_idx.size(), noise);
      const MatF x_t = add_noise(x0, eps, t);
      const MatF weights = pixel_weights(cond, cfg);
      accumulate(distill_pass(st, x_t, t, cond, &eps, &weights, cfg.weights, static_cast<float>(share)), share);
    }
    if (!ssl_idx.empty()) {
      const double share = static_cast<double>(ssl_idx.size()) / cfg.batch;
      const auto cond = gather_conditions(ssl.local, ssl_idx);
      const MatF x_src = pseudo_source(cond, noise);
      const MatF eps = standard_normal<float>(x_src.rows(), x_src.cols(), noise);
      const auto t = draw_times(ssl_idx.size(), noise);
      const MatF x_t = add_noise(x_src, eps, t);
      accumulate(distill_pass(st, x_t, t, cond, nullptr, nullptr, cfg.weights, static_cast<float>(share)), share);
    }
    ++step;
    guard(terms, opt, "one_stage", step, ctx);
    opt.step();
    log.add(step, "one_stage", terms);
  }
}

void train_from_scratch(Backbone<float>& backbone, ControlModule<float>& student, const PreparedSet& sl,
                        const TrainConfig& cfg, Adam& opt, LossLog& log, long& step, const TrainContext& ctx) {
  require(sl.has_ground_truth(), ErrorKind::GroundTruthExposure, "scratch training needs clean images");
  EpochSampler sampler(sl.size(), stream(cfg.seed, kScratchOrder)());
  auto noise = stream(cfg.seed, kScratchNoise);
  const int total = cfg.stage1_steps + cfg.stage2_steps;
  for (int k = 0; k < total; ++k) {
    const auto idx = sampler.next(cfg.batch);
    const auto cond = gather_conditions(sl.local, idx);
    const MatF x0 = gather_columns(sl.clean, idx);
    const MatF eps = standard_normal<float>(x0.rows(), x0.cols(), noise);
    const auto t = draw_times(idx.size(), noise);
    const MatF x_t = add_noise(x0, eps, t);
    const MatF weights = pixel_weights(cond, cfg);
    const auto terms = supervised_pass(backbone, &student, x_t, t, cond, eps, weights, cfg.weights.lambda_task);
    ++step;
    guard(terms, opt, "scratch", step, ctx);
    opt.step();
    log.add(step, "scratch", terms);
  }
}

nlohmann::json VariantResult::summary() const {
  nlohmann::json j = {{"total_steps", total_steps},
                      {"plan", to_json(plan)},
                      {"frozen",
                       {{"backbone_before", backbone_checksum_before},
                        {"backbone_after", backbone_checksum_after},
                        {"teacher_before", teacher_checksum_before},
                        {"teacher_after", teacher_checksum_after}}},
                      {"stage2_ids_disjoint_from_sl", stage2_ids_disjoint}};
  j["heldout_distill"] = {
      {"after_stage1", heldout_distill_stage1 ? nlohmann::json(*heldout_distill_stage1) : nlohmann::json()},
      {"after_stage2", heldout_distill_stage2 ? nlohmann::json(*heldout_distill_stage2) : nlohmann::json()}};
  if (!log.rows().empty()) j["final_losses"] = terms_json(log.rows().back().terms);
  return j;
}

VariantResult run_variant(const TrainConfig& cfg, const VariantInputs& in, const EvalConfig& eval,
                          const std::filesystem::path& run_dir, const std::string& config_hash) {
  require(in.backbone && in.sl && in.ssl && in.test, ErrorKind::ConfigError, "run_variant: missing inputs");
  const Variant v = cfg.variant;
  if (uses_teacher(v))
    require(in.teacher != nullptr, ErrorKind::MissingArtifact, "variant " + to_string(v) + " needs a teacher");
  else
    require(in.teacher == nullptr, ErrorKind::ConfigError, "the fc variant must not receive a teacher");

  Backbone<float>& backbone = *in.backbone;
  backbone.set_trainable(false);
  const ModelSpec& spec = backbone.spec();
  VariantResult r;
  r.plan = build_injection_plan(build_alignment_plan(spec.student_layers, spec.teacher_layers),
                                identity_teacher_injection(spec.teacher_layers), spec.backbone_layers);
  r.backbone_checksum_before = param_checksum(backbone);
  if (in.teacher) r.teacher_checksum_before = param_checksum(*in.teacher);

  auto init = stream(cfg.seed, kInitStream);
  r.student = v == Variant::Fc ? ControlModule<float>::random(spec, ControlRole::Student, spec.student_layers,
                                                               r.plan.injection, init)
                               : init_student_from_backbone(backbone, r.plan);
  r.student.set_trainable(true);
  Adam opt(cfg.lr);
  opt.add(r.student);

  TrainContext ctx;
  if (!run_dir.empty()) ctx.crash_path = run_dir / "crash.json";
  std::string last_checkpoint;
  auto checkpoint = [&](const std::string& stage, long step) {
    last_checkpoint = stage + "-" + std::to_string(step);
    if (run_dir.empty()) return;
    save_control(run_dir / "checkpoints" / last_checkpoint, r.student,
                 {{"stage", stage},
                  {"step", step},
                  {"variant", to_string(v)},
                  {"seed", cfg.seed},
                  {"config_hash", config_hash},
                  {"plan", to_json(r.plan)}});
  };

  const PreparedSet sl = prepare(*in.sl);
  std::optional<PreparedSet> heldout;
  if (in.teacher) heldout = prepare(*in.test, 0, cfg.heldout_samples);
  DistillState st{&backbone, in.teacher, &r.student, &r.plan};
  long step = 0;

  switch (v) {
    case Variant::Fc:
      train_from_scratch(backbone, r.student, sl, cfg, opt, r.log, step, ctx);
      checkpoint("scratch", step);
      break;
    case Variant::OneStage: {
      const PreparedSet ssl = prepare(*in.ssl);
      std::unordered_set<std::string> sl_ids(sl.ids.begin(), sl.ids.end());
      for (const auto& id : ssl.ids) r.stage2_ids_disjoint = r.stage2_ids_disjoint && !sl_ids.count(id);
      train_one_stage(st, sl, ssl, cfg, opt, r.log, step, ctx);
      checkpoint("one_stage", step);
      break;
    }
    default:
      distill_stage1(st, sl, cfg, opt, r.log, step, ctx);
      checkpoint("stage1", step);
      r.heldout_distill_stage1 = heldout_distill(backbone, *in.teacher, r.student, *heldout, eval.seed);
      if (cfg.stage2_steps > 0) {
        const PreparedSet ssl = prepare(*in.ssl);
        std::unordered_set<std::string> sl_ids(sl.ids.begin(), sl.ids.end());
        for (const auto& id : ssl.ids) r.stage2_ids_disjoint = r.stage2_ids_disjoint && !sl_ids.count(id);
        distill_stage2(st, *in.ssl, ssl, cfg, opt, r.log, step, ctx);
        checkpoint("stage2", step);
        r.heldout_distill_stage2 = heldout_distill(backbone, *in.teacher, r.student, *heldout, eval.seed);
      }
      break;
  }
  r.total_steps = step;
  r.backbone_checksum_after = param_checksum(backbone);
  if (in.teacher) r.teacher_checksum_after = param_checksum(*in.teacher);
  r.student.set_trainable(false);

  r.report = evaluate(backbone, &r.student, *in.test, eval);
  r.report.checkpoint = last_checkpoint;
  r.report.config_hash = config_hash;
  return r;
}

}  // namespace refine
