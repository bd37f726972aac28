// SPDX-License-Identifier: Apache-2.0
#pragma once

// Losses of collaborative long-tailed training. Every function is pure; the
// batch variants also return gradients w.r.t. their differentiable inputs.
// Detached inputs (distillation teachers, BKT weights, contrastive keys and
// queue rows) never receive a gradient: they are passed separately and the
// result carries no gradient slot for them.

#include "ecl/core.hpp"
#include "ecl/expertnet.hpp"
#include "ecl/ltdata.hpp"

#include <json.hpp>

#include <functional>

namespace ecl {

enum class BktScope { Student, MeanOverExperts };

inline std::string to_string(BktScope s) { return s == BktScope::Student ? "student" : "mean-over-experts"; }

inline BktScope parse_bkt_scope(const std::string& s) {
  if (s == "student") return BktScope::Student;
  if (s == "mean-over-experts") return BktScope::MeanOverExperts;
  throw InvalidArgument("unknown bkt scope '" + s + "'");
}

struct KDConfig {
  double tau_kd = 1.0;       ///< distillation temperature
  double alpha = 0.6;        ///< distillation trade-off
  double beta = 1.0;         ///< contrastive trade-off
  double tau_con = 1.0;      ///< info-NCE temperature
  double prob_floor = 1e-6;  ///< clamp for head probabilities before the BKT log-ratio
  BktScope bkt_scope = BktScope::Student;
  bool weight_feature_kd = false;  ///< also apply BKT weights to feature distillation

  void validate() const {
    require(std::isfinite(tau_kd) && tau_kd > 0.0, "KDConfig: tau_kd must be > 0");
    require(std::isfinite(tau_con) && tau_con > 0.0, "KDConfig: tau_con must be > 0");
    require(std::isfinite(alpha) && alpha >= 0.0, "KDConfig: alpha must be >= 0");
    require(std::isfinite(beta) && beta >= 0.0, "KDConfig: beta must be >= 0");
    require(prob_floor > 0.0 && prob_floor < 0.5, "KDConfig: prob_floor must lie in (0, 0.5)");
  }
};

struct LossBreakdown {
  double sup = 0.0;
  double kd_logit = 0.0;
  double kd_feature = 0.0;
  double con = 0.0;
  double total = 0.0;

  bool operator==(const LossBreakdown&) const = default;
};

inline void to_json(nlohmann::json& j, const LossBreakdown& b) {
  j = {{"sup", b.sup}, {"kd_logit", b.kd_logit}, {"kd_feature", b.kd_feature}, {"con", b.con}, {"total", b.total}};
}

/// total = sup + alpha * (kd_logit + kd_feature) + beta * con
inline LossBreakdown total_loss(double sup, double kd_logit, double kd_feature, double con, const KDConfig& cfg) {
  return {sup, kd_logit, kd_feature, con, sup + cfg.alpha * (kd_logit + kd_feature) + cfg.beta * con};
}

// ---------------------------------------------------------------------------
// Cross-entropy family

namespace detail {

inline void check_label(int y, Eigen::Index num_classes) {
  require(y >= 0 && y < num_classes, "label " + std::to_string(y) + " out of range [0, " +
                                         std::to_string(num_classes) + ")");
}

inline void check_labels(const Labels& y, const Matrix& z) {
  require(static_cast<Eigen::Index>(y.size()) == z.rows(), "label count does not match batch size");
  for (int label : y) check_label(label, z.cols());
}

}  // namespace detail

/// -log softmax(z)[y] = log(1 + sum_{j != y} exp(z_j - z_y)).
inline double ce_loss(RowRef z, int y) {
  detail::check_label(y, z.size());
  require(z.allFinite(), "ce_loss: logits must be finite");
  const int top = argmax(z);
  const double m = z(top);
  double rest = 0.0;
  for (Eigen::Index j = 0; j < z.size(); ++j)
    if (j != top) rest += std::exp(z(j) - m);
  return (m - z(y)) + std::log1p(rest);
}

/// Logits shifted by tau_bc * (log p_s - log p_t).
inline Row bc_adjusted(RowRef z, const ClassPrior& prior) {
  prior.validate();
  require(z.size() == prior.num_classes(), "bc: logit width does not match prior");
  return z + prior.tau_bc * prior.log_ratio();
}

inline double bc_loss(RowRef z, int y, const ClassPrior& prior) { return ce_loss(bc_adjusted(z, prior), y); }

/// softmax(z - tau * (log p_s - log p_t)): inference-time prior compensation.
inline Row posthoc_adjust(RowRef z, const ClassPrior& prior, double tau) {
  prior.validate();
  require(std::isfinite(tau), "posthoc_adjust: tau must be finite");
  require(z.size() == prior.num_classes(), "posthoc_adjust: logit width does not match prior");
  return softmax(z - tau * prior.log_ratio());
}

inline Matrix posthoc_adjust_rows(const Matrix& z, const ClassPrior& prior, double tau) {
  Matrix out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) out.row(i) = posthoc_adjust(z.row(i), prior, tau);
  return out;
}

struct BatchLoss {
  double value = 0.0;
  Matrix grad;  ///< d value / d input batch
};

/// Mean over rows of ce_loss(z_i + shift, y_i), with gradient w.r.t. z.
inline BatchLoss shifted_ce_batch(const Matrix& z, const Labels& y, const Row& shift) {
  detail::check_labels(y, z);
  require(z.rows() > 0, "loss over an empty batch");
  const double inv_n = 1.0 / static_cast<double>(z.rows());
  BatchLoss out{0.0, Matrix(z.rows(), z.cols())};
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Row zi = z.row(i) + shift;
    const int yi = y[static_cast<std::size_t>(i)];
    out.value += ce_loss(zi, yi);
    out.grad.row(i) = softmax(zi) * inv_n;
    out.grad(i, yi) -= inv_n;
  }
  out.value *= inv_n;
  return out;
}

inline BatchLoss ce_loss_batch(const Matrix& z, const Labels& y) {
  return shifted_ce_batch(z, y, Row::Zero(z.cols()));
}

inline BatchLoss bc_loss_batch(const Matrix& z, const Labels& y, const ClassPrior& prior) {
  prior.validate();
  require(z.cols() == prior.num_classes(), "bc_loss_batch: logit width does not match prior");
  return shifted_ce_batch(z, y, prior.tau_bc * prior.log_ratio());
}

// ---------------------------------------------------------------------------
// Balanced knowledge transfer

/// softmax(z / sigma) with sigma the population std of z's entries, uniform when
/// sigma < 1e-8, then clamped to [floor, 1 - floor] and renormalized.
inline Row head_probs(RowRef z, double floor = 1e-6) {
  require(z.size() >= 2, "head_probs: need at least two logits");
  require(z.allFinite(), "head_probs: logits must be finite");
  require(floor > 0.0 && floor < 0.5, "head_probs: floor must lie in (0, 0.5)");
  const double mean = z.mean();
  const double sigma = std::sqrt((z.array() - mean).square().mean());
  Row p = sigma < 1e-8 ? Row::Constant(z.size(), 1.0 / static_cast<double>(z.size())) : softmax(z / sigma);
  p = p.cwiseMax(floor).cwiseMin(1.0 - floor);
  return p / p.sum();
}

/// w = log p_cls[y] / log p_ref[y]; large when the cls head is less confident than the ref head.
inline double bkt_weight(RowRef p_ref, RowRef p_cls, int y, double floor = 1e-6) {
  require(p_ref.size() == p_cls.size(), "bkt_weight: probability vectors differ in length");
  detail::check_label(y, p_ref.size());
  const double r = p_ref(y);
  const double c = p_cls(y);
  require(r > 0.0 && r < 1.0 && c > 0.0 && c < 1.0, "bkt_weight: probabilities must lie strictly inside (0, 1)");
  // Renormalization after clamping may leave an entry a hair outside the band.
  const double lo = floor, hi = 1.0 - floor;
  return std::log(std::clamp(c, lo, hi)) / std::log(std::clamp(r, lo, hi));
}

/// Per-sample BKT weights for one expert's batch of ref/cls logits.
inline Row bkt_weights(const Matrix& z_ref, const Matrix& z_cls, const Labels& y, double floor) {
  detail::check_labels(y, z_cls);
  require(z_ref.rows() == z_cls.rows() && z_ref.cols() == z_cls.cols(), "bkt_weights: head shapes differ");
  Row w(z_cls.rows());
  for (Eigen::Index i = 0; i < z_cls.rows(); ++i)
    w(i) = bkt_weight(head_probs(z_ref.row(i), floor), head_probs(z_cls.row(i), floor),
                      y[static_cast<std::size_t>(i)], floor);
  return w;
}

// ---------------------------------------------------------------------------
// Mutual distillation

struct DistillLoss {
  double value = 0.0;
  std::vector<Matrix> grad;  ///< d value / d student[k]
};

namespace detail {

/// (1/(N K (K-1))) sum_k sum_{q!=k} sum_i weight(q,i) tau^2 KL(softmax(t_k,i/tau) || softmax(s_q,i/tau)).
inline DistillLoss pairwise_kl(std::span<const Matrix> teacher, std::span<const Matrix> student,
                               const std::function<double(std::size_t, Eigen::Index)>& weight, double tau,
                               const char* who) {
  const std::size_t k_count = student.size();
  require(k_count >= 2, std::string(who) + ": need at least two experts");
  require(teacher.size() == k_count, std::string(who) + ": teacher/student expert counts differ");
  require(std::isfinite(tau) && tau > 0.0, std::string(who) + ": tau must be > 0");
  const Eigen::Index n = student[0].rows(), width = student[0].cols();
  require(n > 0, std::string(who) + ": empty batch");
  for (std::size_t k = 0; k < k_count; ++k)
    require(teacher[k].rows() == n && teacher[k].cols() == width && student[k].rows() == n &&
                student[k].cols() == width,
            std::string(who) + ": mismatched shapes across experts");

  std::vector<Matrix> log_p_teacher(k_count), log_q_student(k_count);
  for (std::size_t k = 0; k < k_count; ++k) {
    log_p_teacher[k].resize(n, width);
    log_q_student[k].resize(n, width);
    for (Eigen::Index i = 0; i < n; ++i) {
      log_p_teacher[k].row(i) = log_softmax(teacher[k].row(i) / tau);
      log_q_student[k].row(i) = log_softmax(student[k].row(i) / tau);
    }
  }
  const double norm = 1.0 / (static_cast<double>(n) * k_count * (k_count - 1));
  DistillLoss out{0.0, std::vector<Matrix>(k_count, Matrix::Zero(n, width))};
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t q = 0; q < k_count; ++q) {
      if (q == k) continue;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double w = weight(q, i);
        const Row p = log_p_teacher[k].row(i).array().exp();
        const double kl = (p.array() * (log_p_teacher[k].row(i) - log_q_student[q].row(i)).array()).sum();
        out.value += w * tau * tau * kl;
        const Row qs = log_q_student[q].row(i).array().exp();
        out.grad[q].row(i) += (w * tau * norm) * (qs - p);
      }
    }
  }
  out.value *= norm;
  return out;
}

}  // namespace detail

/// Re-weighted logit distillation with one weight per sample.
inline DistillLoss kd_logit_loss(std::span<const Matrix> teacher, std::span<const Matrix> student,
                                 const Row& weights, double tau) {
  require(!student.empty() && weights.size() == student[0].rows(), "kd_logit_loss: one weight per sample required");
  require((weights.array() > 0.0).all(), "kd_logit_loss: weights must be positive");
  return detail::pairwise_kl(teacher, student, [&](std::size_t, Eigen::Index i) { return weights(i); }, tau,
                             "kd_logit_loss");
}

/// Re-weighted logit distillation; row q of weights is used for terms where expert q is the student.
inline DistillLoss kd_logit_loss_per_student(std::span<const Matrix> teacher, std::span<const Matrix> student,
                                             const Matrix& weights, double tau) {
  require(!student.empty() && weights.rows() == static_cast<Eigen::Index>(student.size()) &&
              weights.cols() == student[0].rows(),
          "kd_logit_loss: weights must be K x N");
  require((weights.array() > 0.0).all(), "kd_logit_loss: weights must be positive");
  return detail::pairwise_kl(
      teacher, student, [&](std::size_t q, Eigen::Index i) { return weights(static_cast<Eigen::Index>(q), i); }, tau,
      "kd_logit_loss");
}

/// Self-distillation convenience: every expert is teacher (detached) and student.
inline DistillLoss kd_logit_loss(std::span<const Matrix> logits, const Row& weights, double tau) {
  return kd_logit_loss(logits, logits, weights, tau);
}

/// Feature-level distillation: softmax over the d feature coordinates, unweighted.
inline DistillLoss kd_feature_loss(std::span<const Matrix> teacher, std::span<const Matrix> student, double tau) {
  return detail::pairwise_kl(teacher, student, [](std::size_t, Eigen::Index) { return 1.0; }, tau,
                             "kd_feature_loss");
}

inline DistillLoss kd_feature_loss(std::span<const Matrix> features, double tau) {
  return kd_feature_loss(features, features, tau);
}

/// Feature distillation carrying the same K x N student weights as the logit term.
inline DistillLoss kd_feature_loss_per_student(std::span<const Matrix> teacher, std::span<const Matrix> student,
                                               const Matrix& weights, double tau) {
  require(!student.empty() && weights.rows() == static_cast<Eigen::Index>(student.size()) &&
              weights.cols() == student[0].rows(),
          "kd_feature_loss: weights must be K x N");
  return detail::pairwise_kl(
      teacher, student, [&](std::size_t q, Eigen::Index i) { return weights(static_cast<Eigen::Index>(q), i); }, tau,
      "kd_feature_loss");
}

// ---------------------------------------------------------------------------
// Contrastive proxy task

struct NceResult {
  double value = 0.0;
  Row grad_query;
};

namespace detail {

inline void check_unit_rows(const Matrix& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    require(is_unit(m.row(i)), std::string("info_nce_loss: ") + what + " row " + std::to_string(i) +
                                   " is not unit-norm");
}

// Value and query-gradient for one query given its positive key; queue rows precomputed as sims.
inline NceResult info_nce_one(RowRef query, RowRef key, const Matrix& queue, double tau) {
  const Eigen::Index qn = queue.rows();
  Row logits(qn + 1);
  logits(0) = query.dot(key) / tau;
  logits.tail(qn) = (queue * query.transpose()).transpose() / tau;
  const double lse = log_sum_exp(logits);
  const Row p = (logits.array() - lse).exp();
  Row g = (p(0) - 1.0) * key + p.tail(qn) * queue;
  return {lse - logits(0), g / tau};
}

}  // namespace detail

/// -log[exp(q.k/tau) / (exp(q.k/tau) + sum_r exp(q.r/tau))]; gradient flows into the query only.
inline NceResult info_nce_loss(RowRef e_query, RowRef e_key, const QueueState& queue, double tau_con) {
  require(std::isfinite(tau_con) && tau_con > 0.0, "info_nce_loss: tau must be > 0");
  require(e_query.size() == e_key.size() && e_query.size() == queue.buffer.cols(),
          "info_nce_loss: embedding widths differ");
  require(is_unit(e_query) && is_unit(e_key), "info_nce_loss: query and key must be unit-norm");
  detail::check_unit_rows(queue.buffer, "queue");
  return detail::info_nce_one(e_query, e_key, queue.buffer, tau_con);
}

/// Batch mean of info_nce_loss; grad is w.r.t. the query rows.
inline BatchLoss info_nce_batch(const Matrix& queries, const Matrix& keys, const QueueState& queue, double tau_con) {
  require(std::isfinite(tau_con) && tau_con > 0.0, "info_nce_loss: tau must be > 0");
  require(queries.rows() > 0 && queries.rows() == keys.rows(), "info_nce_loss: query/key batch sizes differ");
  require(queries.cols() == keys.cols() && queries.cols() == queue.buffer.cols(),
          "info_nce_loss: embedding widths differ");
  detail::check_unit_rows(queries, "query");
  detail::check_unit_rows(keys, "key");
  detail::check_unit_rows(queue.buffer, "queue");
  const double inv_n = 1.0 / static_cast<double>(queries.rows());
  BatchLoss out{0.0, Matrix(queries.rows(), queries.cols())};
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    auto r = detail::info_nce_one(queries.row(i), keys.row(i), queue.buffer, tau_con);
    out.value += r.value;
    out.grad.row(i) = r.grad_query * inv_n;
  }
  out.value *= inv_n;
  return out;
}

// ---------------------------------------------------------------------------
// Supervision

struct SupLoss {
  double value = 0.0;
  std::vector<Matrix> grad_cls;
  std::vector<Matrix> grad_ref;
};

/// (1/K) sum_k [mean BC(z_ref^k) + mean BC(z_cls^k)].
inline SupLoss sup_loss(std::span<const ExpertOutputs> outputs, const Labels& labels, const ClassPrior& prior) {
  require(!outputs.empty(), "sup_loss: need at least one expert");
  const double inv_k = 1.0 / static_cast<double>(outputs.size());
  SupLoss out;
  for (const auto& o : outputs) {
    auto ref = bc_loss_batch(o.z_ref, labels, prior);
    auto cls = bc_loss_batch(o.z_cls, labels, prior);
    out.value += ref.value + cls.value;
    out.grad_ref.push_back(ref.grad * inv_k);
    out.grad_cls.push_back(cls.grad * inv_k);
  }
  out.value *= inv_k;
  return out;
}

}  // namespace ecl
