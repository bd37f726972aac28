// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multi-expert collaborative training and inference.
//
// One step: every expert sees view_a; its cls/ref heads are supervised with
// balanced CE, cls logits and encoder features are mutually distilled across
// experts, and the projection head solves instance discrimination against keys
// from the expert's momentum twin on view_b plus the expert's queue. After the
// optimizer step the twins move towards the online weights and the keys are
// enqueued. Inference keeps only encoder + cls head.

#include "ecl/core.hpp"
#include "ecl/expertnet.hpp"
#include "ecl/losses.hpp"
#include "ecl/ltdata.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

namespace ecl {

enum class OptimizerKind { Sgd, Momentum };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "momentum"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "momentum") return OptimizerKind::Momentum;
  throw InvalidArgument("unknown optimizer '" + s + "'");
}

struct TrainConfig {
  int experts = 3;
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 0.05;
  double ema_momentum = 0.999;  ///< twin moving-average coefficient m
  int queue_size = 1024;
  double jitter_sigma = 0.1;
  ClassPrior prior = ClassPrior::uniform(2);
  KDConfig kd;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Momentum;
  double sgd_momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const {
    require(experts >= 1, "TrainConfig: need at least one expert");
    require(epochs >= 0, "TrainConfig: epochs must be >= 0");
    require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    require(std::isfinite(learning_rate) && learning_rate > 0.0, "TrainConfig: learning rate must be > 0");
    require(ema_momentum >= 0.0 && ema_momentum < 1.0, "TrainConfig: twin momentum must lie in [0, 1)");
    require(queue_size >= 1, "TrainConfig: queue_size must be >= 1");
    require(batch_size <= queue_size, "TrainConfig: batch_size must not exceed queue_size");
    require(jitter_sigma >= 0.0, "TrainConfig: jitter_sigma must be >= 0");
    require(sgd_momentum >= 0.0 && sgd_momentum < 1.0, "TrainConfig: sgd momentum must lie in [0, 1)");
    require(weight_decay >= 0.0, "TrainConfig: weight_decay must be >= 0");
    prior.validate();
    kd.validate();
  }
};

struct TrainState {
  ExpertArch arch;
  std::vector<Expert> experts;
  std::vector<MomentumTwin> twins;
  std::vector<QueueState> queues;
  std::vector<ExpertGrad> velocity;
  std::int64_t step = 0;
  std::vector<LossBreakdown> step_history;
  std::vector<LossBreakdown> epoch_history;

  int num_experts() const { return static_cast<int>(experts.size()); }
};

inline std::uint64_t expert_init_seed(std::uint64_t seed, int k) {
  return derive_seed(seed, streams::kExpertInit, static_cast<std::uint64_t>(k));
}

inline TrainState init_state(const ExpertArch& arch, const TrainConfig& cfg) {
  cfg.validate();
  arch.validate();
  require(arch.num_classes == cfg.prior.num_classes(), "init_state: prior and architecture disagree on C");
  TrainState s;
  s.arch = arch;
  for (int k = 0; k < cfg.experts; ++k) {
    s.experts.push_back(make_expert(arch, k, expert_init_seed(cfg.seed, k)));
    s.twins.push_back(make_twin(s.experts.back(), cfg.ema_momentum));
    s.queues.push_back(make_queue(cfg.queue_size, arch.proj_dim,
                                  derive_seed(cfg.seed, streams::kQueueInit, static_cast<std::uint64_t>(k))));
    s.velocity.push_back(zeros_like(s.experts.back()));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Objective

/// Everything the objective treats as a constant within one step.
struct DetachedTargets {
  std::vector<Matrix> teacher_logits;    // cls logits per expert
  std::vector<Matrix> teacher_features;  // encoder features per expert
  Matrix bkt;                            // K x N student weights
  std::vector<Matrix> keys;              // twin keys per expert; empty when the contrastive branch is off
};

struct Objective {
  LossBreakdown breakdown;
  std::vector<ExpertGrad> grads;  // empty unless requested
};

inline std::vector<ExpertForward> forward_all(const TrainState& s, const Matrix& x) {
  std::vector<ExpertForward> fwd;
  fwd.reserve(s.experts.size());
  for (const auto& e : s.experts) fwd.push_back(forward_expert_cached(e, x));
  return fwd;
}

inline bool kd_active(const TrainState& s, const TrainConfig& cfg) { return s.num_experts() >= 2 && cfg.kd.alpha != 0.0; }
inline bool con_active(const TrainConfig& cfg) { return cfg.kd.beta != 0.0; }

inline DetachedTargets make_targets(const TrainState& s, const std::vector<ExpertForward>& fwd,
                                    const TwoViewBatch& batch, const TrainConfig& cfg) {
  DetachedTargets t;
  const auto k_count = static_cast<Eigen::Index>(s.experts.size());
  if (kd_active(s, cfg)) {
    for (const auto& f : fwd) {
      t.teacher_logits.push_back(f.out.z_cls);
      t.teacher_features.push_back(f.out.v);
    }
    t.bkt.resize(k_count, batch.size());
    for (Eigen::Index k = 0; k < k_count; ++k)
      t.bkt.row(k) = bkt_weights(fwd[static_cast<std::size_t>(k)].out.z_ref, fwd[static_cast<std::size_t>(k)].out.z_cls,
                                 batch.labels, cfg.kd.prob_floor);
    if (cfg.kd.bkt_scope == BktScope::MeanOverExperts) {
      const Row mean = t.bkt.colwise().mean();
      t.bkt.rowwise() = mean;
    }
  }
  if (con_active(cfg))
    for (const auto& twin : s.twins) t.keys.push_back(twin_keys(twin, batch.view_b));
  return t;
}

/// Total objective as a function of the online parameters, targets held fixed.
inline Objective objective_from_forward(const TrainState& s, const std::vector<ExpertForward>& fwd,
                                        const TwoViewBatch& batch, const TrainConfig& cfg,
                                        const DetachedTargets& targets, bool want_grads) {
  const std::size_t k_count = s.experts.size();
  std::vector<ExpertOutputs> outs;
  outs.reserve(k_count);
  for (const auto& f : fwd) outs.push_back(f.out);

  const SupLoss sup = sup_loss(outs, batch.labels, cfg.prior);
  std::vector<OutputGrads> up(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    up[k].z_cls = sup.grad_cls[k];
    up[k].z_ref = sup.grad_ref[k];
  }

  double kd_logit = 0.0, kd_feature = 0.0, con = 0.0;
  if (kd_active(s, cfg)) {
    std::vector<Matrix> z_cls, feats;
    for (const auto& o : outs) {
      z_cls.push_back(o.z_cls);
      feats.push_back(o.v);
    }
    const auto logit = kd_logit_loss_per_student(targets.teacher_logits, z_cls, targets.bkt, cfg.kd.tau_kd);
    const auto feature =
        cfg.kd.weight_feature_kd
            ? kd_feature_loss_per_student(targets.teacher_features, feats, targets.bkt, cfg.kd.tau_kd)
            : kd_feature_loss(targets.teacher_features, feats, cfg.kd.tau_kd);
    kd_logit = logit.value;
    kd_feature = feature.value;
    for (std::size_t k = 0; k < k_count; ++k) {
      up[k].z_cls += cfg.kd.alpha * logit.grad[k];
      up[k].v = cfg.kd.alpha * feature.grad[k];
    }
  }
  if (con_active(cfg)) {
    require(targets.keys.size() == k_count, "objective: missing contrastive keys");
    for (std::size_t k = 0; k < k_count; ++k) {
      const auto nce = info_nce_batch(outs[k].e, targets.keys[k], s.queues[k], cfg.kd.tau_con);
      con += nce.value;
      up[k].e = cfg.kd.beta * nce.grad;
    }
  }

  Objective obj{total_loss(sup.value, kd_logit, kd_feature, con, cfg.kd), {}};
  if (want_grads) {
    for (std::size_t k = 0; k < k_count; ++k) {
      obj.grads.push_back(zeros_like(s.experts[k]));
      backward_expert(s.experts[k], fwd[k], up[k], obj.grads.back());
    }
  }
  return obj;
}

inline Objective evaluate_objective(const TrainState& s, const TwoViewBatch& batch, const TrainConfig& cfg,
                                    const DetachedTargets& targets, bool want_grads) {
  return objective_from_forward(s, forward_all(s, batch.view_a), batch, cfg, targets, want_grads);
}

// ---------------------------------------------------------------------------
// Optimizer

/// One SGD step (optionally with heavy-ball momentum) over all parameters of one expert.
inline void sgd_update(Expert& params, const ExpertGrad& grad, ExpertGrad& velocity, const TrainConfig& cfg) {
  auto p = param_list(params);
  auto g = param_list(grad);
  auto v = param_list(velocity);
  for (std::size_t i = 0; i < p.size(); ++i) {
    Matrix step = *g[i];
    if (cfg.weight_decay != 0.0) step += cfg.weight_decay * *p[i];
    if (cfg.optimizer == OptimizerKind::Momentum) {
      *v[i] = cfg.sgd_momentum * *v[i] + step;
      *p[i] -= cfg.learning_rate * *v[i];
    } else {
      *p[i] -= cfg.learning_rate * step;
    }
  }
}

namespace detail {

inline std::string describe(const LossBreakdown& b) {
  std::ostringstream os;
  os << "sup=" << b.sup << " kd_logit=" << b.kd_logit << " kd_feature=" << b.kd_feature << " con=" << b.con
     << " total=" << b.total;
  return os.str();
}

}  // namespace detail

/// One collaborative update. Throws NumericalError (state untouched) on a non-finite objective.
inline LossBreakdown train_step(TrainState& s, const TwoViewBatch& batch, const TrainConfig& cfg) {
  require(s.num_experts() == cfg.experts && s.twins.size() == s.experts.size() &&
              s.queues.size() == s.experts.size() && s.velocity.size() == s.experts.size(),
          "train_step: state does not match config");
  require(batch.size() > 0, "train_step: empty batch");
  require(batch.size() <= s.queues.front().capacity(), "train_step: batch larger than queue");

  std::vector<ExpertForward> fwd;
  DetachedTargets targets;
  try {
    fwd = forward_all(s, batch.view_a);
    for (const auto& f : fwd)
      if (!all_finite(f.out.v) || !all_finite(f.out.z_cls) || !all_finite(f.out.z_ref))
        throw NumericalError("non-finite activations at step " + std::to_string(s.step));
    targets = make_targets(s, fwd, batch, cfg);
  } catch (const DegenerateEmbedding& e) {
    // Diverged weights surface first as non-finite embeddings.
    throw NumericalError("non-finite activations at step " + std::to_string(s.step) + ": " + e.what());
  }
  auto obj = objective_from_forward(s, fwd, batch, cfg, targets, true);
  const auto& b = obj.breakdown;
  if (!std::isfinite(b.total))
    throw NumericalError("non-finite loss at step " + std::to_string(s.step) + ": " + detail::describe(b));

  for (std::size_t k = 0; k < s.experts.size(); ++k) sgd_update(s.experts[k], obj.grads[k], s.velocity[k], cfg);
  for (std::size_t k = 0; k < s.experts.size(); ++k) momentum_update(s.twins[k], s.experts[k], s.twins[k].momentum);
  for (std::size_t k = 0; k < targets.keys.size(); ++k) queue_push(s.queues[k], targets.keys[k]);

  ++s.step;
  s.step_history.push_back(b);
  return b;
}

/// Runs cfg.epochs passes over the split with seeded shuffling; appends per-epoch means.
inline void run_epochs(TrainState& s, const Split& train, const TrainConfig& cfg) {
  cfg.validate();
  require(train.size() > 0, "fit: empty training split");
  require(train.x.cols() == s.arch.input_dim, "fit: dataset dimension does not match the model");
  const int n = static_cast<int>(train.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(cfg.seed, streams::kShuffle, s.epoch_history.size()));
    std::shuffle(order.begin(), order.end(), rng);
    LossBreakdown sum;
    int steps = 0;
    for (int start = 0; start < n; start += cfg.batch_size, ++steps) {
      const int stop = std::min(n, start + cfg.batch_size);
      const std::span<const int> idx(order.data() + start, static_cast<std::size_t>(stop - start));
      const auto batch = two_view_batch(train, idx, cfg.jitter_sigma,
                                        derive_seed(cfg.seed, streams::kJitter, static_cast<std::uint64_t>(s.step)));
      const auto b = train_step(s, batch, cfg);
      sum.sup += b.sup;
      sum.kd_logit += b.kd_logit;
      sum.kd_feature += b.kd_feature;
      sum.con += b.con;
    }
    s.epoch_history.push_back(
        total_loss(sum.sup / steps, sum.kd_logit / steps, sum.kd_feature / steps, sum.con / steps, cfg.kd));
  }
}

inline TrainState fit(const Dataset& ds, const ExpertArch& arch, const TrainConfig& cfg) {
  require(ds.train.size() > 0, "fit: empty training split");
  require(arch.input_dim == ds.dim && arch.num_classes == ds.num_classes, "fit: architecture does not match dataset");
  TrainState s = init_state(arch, cfg);
  run_epochs(s, ds.train, cfg);
  return s;
}

// ---------------------------------------------------------------------------
// Inference

/// Posthoc-adjusted probabilities of one expert (encoder + cls head only).
inline Matrix predict_single(std::span<const Expert> experts, int expert_index, const Matrix& x,
                             const ClassPrior& prior, double posthoc_tau) {
  require(expert_index >= 0 && expert_index < static_cast<int>(experts.size()),
          "predict_single: expert index out of range");
  return posthoc_adjust_rows(cls_logits(experts[static_cast<std::size_t>(expert_index)], x), prior, posthoc_tau);
}

/// Element-wise mean of the experts' cls logits.
inline Matrix ensemble_logits(std::span<const Expert> experts, const Matrix& x) {
  require(!experts.empty(), "predict_ensemble: need at least one expert");
  Matrix sum = cls_logits(experts[0], x);
  for (std::size_t k = 1; k < experts.size(); ++k) sum += cls_logits(experts[k], x);
  return sum / static_cast<double>(experts.size());
}

inline Matrix predict_ensemble(std::span<const Expert> experts, const Matrix& x, const ClassPrior& prior,
                               double posthoc_tau) {
  return posthoc_adjust_rows(ensemble_logits(experts, x), prior, posthoc_tau);
}

inline Matrix predict_single(const TrainState& s, int expert_index, const Matrix& x, const ClassPrior& prior,
                             double posthoc_tau) {
  return predict_single(s.experts, expert_index, x, prior, posthoc_tau);
}

inline Matrix predict_ensemble(const TrainState& s, const Matrix& x, const ClassPrior& prior, double posthoc_tau) {
  return predict_ensemble(s.experts, x, prior, posthoc_tau);
}

}  // namespace ecl
