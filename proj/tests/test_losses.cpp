// SPDX-License-Identifier: Apache-2.0
#include "ecl/losses.hpp"

#include "oracle.hpp"

#include <gtest/gtest.h>

using namespace ecl;

namespace {

Row row(std::initializer_list<double> v) {
  Row r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

ClassPrior skewed_two() {
  return {row({0.9, 0.1}), row({0.5, 0.5}), 1.0};
}

ClassPrior random_prior(int c, std::mt19937_64& rng, double tau) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Row p(c);
  for (int i = 0; i < c; ++i) p(i) = u(rng);
  return {p / p.sum(), Row::Constant(c, 1.0 / c), tau};
}

constexpr double kExampleTol = 1e-6;

}  // namespace

// ---------------------------------------------------------------------------
// Worked examples

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(ce_loss(row({0.3, 0.3, 0.3, 0.3}), 2), std::log(4.0), 1e-15);
  EXPECT_NEAR(ce_loss(row({10, -10}), 0), 2.061153620314381e-09, 1e-18);
  EXPECT_NEAR(ce_loss(row({0, 0, 0}), 2), 1.0986122886681098, 1e-15);
}

TEST(CrossEntropy, StableForLargeLogits) {
  EXPECT_NEAR(ce_loss(row({1000, 0}), 1), 1000.0, 1e-9);
  EXPECT_TRUE(std::isfinite(ce_loss(row({-800, 800}), 0)));
}

TEST(CrossEntropy, RejectsBadInput) {
  EXPECT_THROW(ce_loss(row({0, 0}), 2), InvalidArgument);
  EXPECT_THROW(ce_loss(row({0, 0}), -1), InvalidArgument);
  EXPECT_THROW(ce_loss(row({0, std::nan("")}), 0), InvalidArgument);
}

TEST(BalancedCE, Examples) {
  EXPECT_NEAR(bc_loss(row({0, 0}), 1, skewed_two()), 2.3025850929940455, kExampleTol);
  EXPECT_NEAR(bc_loss(row({0, 0}), 1, skewed_two()), 2.3025850929940455, 1e-12);
}

TEST(BalancedCE, ReducesToCrossEntropy) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const Row z = oracle::gaussian(1, 5, rng);
    const int y = t % 5;
    auto same = random_prior(5, rng, 1.0);
    same.p_target = same.p_source;
    EXPECT_NEAR(bc_loss(z, y, same), ce_loss(z, y), 1e-12);
    auto off = random_prior(5, rng, 0.0);
    EXPECT_EQ(bc_loss(z, y, off), ce_loss(z, y));
  }
}

TEST(BalancedCE, MatchesNaiveOracle) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const auto prior = random_prior(4, rng, 0.7);
    const Row z = oracle::gaussian(1, 4, rng, 3.0);
    oracle::Vec shifted(4);
    for (int j = 0; j < 4; ++j)
      shifted[static_cast<std::size_t>(j)] =
          z(j) + 0.7 * (std::log(prior.p_source(j)) - std::log(prior.p_target(j)));
    EXPECT_NEAR(bc_loss(z, t % 4, prior), oracle::naive_ce(shifted, t % 4), 1e-12);
  }
}

TEST(BalancedCE, RejectsInvalidPrior) {
  ClassPrior bad{row({0.0, 1.0}), row({0.5, 0.5}), 1.0};
  EXPECT_THROW(bc_loss(row({0, 0}), 0, bad), InvalidArgument);
  ClassPrior mismatch = ClassPrior::uniform(3);
  EXPECT_THROW(bc_loss(row({0, 0}), 0, mismatch), InvalidArgument);
}

TEST(Posthoc, Examples) {
  const Row p = posthoc_adjust(row({0, 0}), skewed_two(), 1.0);
  EXPECT_NEAR(p(0), 0.1, kExampleTol);
  EXPECT_NEAR(p(1), 0.9, kExampleTol);
}

TEST(Posthoc, TrivialCases) {
  std::mt19937_64 rng(3);
  const Row z = oracle::gaussian(1, 4, rng);
  const auto prior = random_prior(4, rng, 1.0);
  EXPECT_LT((posthoc_adjust(z, prior, 0.0) - softmax(z)).norm(), 1e-15);
  auto same = prior;
  same.p_target = same.p_source;
  for (double tau : {0.5, 1.0, 3.0}) EXPECT_LT((posthoc_adjust(z, same, tau) - softmax(z)).norm(), 1e-12);
}

TEST(Posthoc, UndoesTrainingShift) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto prior = random_prior(6, rng, 1.3);
    const Row z = oracle::gaussian(1, 6, rng);
    EXPECT_LT((posthoc_adjust(bc_adjusted(z, prior), prior, 1.3) - softmax(z)).norm(), 1e-12);
  }
}

TEST(HeadProbs, Examples) {
  const Row u = head_probs(row({2.5, 2.5, 2.5}));
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(u(j), 1.0 / 3.0, 1e-15);
  const Row a = head_probs(row({1, -1}));
  EXPECT_NEAR(a(0), 0.8807970779778823, kExampleTol);
  EXPECT_NEAR(a(1), 0.1192029220221177, kExampleTol);
  const Row b = head_probs(row({2, -2}));
  EXPECT_LT((a - b).norm(), 1e-15);
}

TEST(HeadProbs, ScaleAndShiftInvariant) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const Row z = oracle::gaussian(1, 5, rng);
    const Row base = head_probs(z);
    EXPECT_LT((head_probs(z * 7.5) - base).norm(), 1e-12);
    EXPECT_LT((head_probs(z.array() + 3.0) - base).norm(), 1e-12);
  }
}

TEST(HeadProbs, ClampedAwayFromZeroAndOne) {
  const Row p = head_probs(row({0, 0, 0, 0, 0, 0, 0, 0, 0, 1000}), 1e-3);
  EXPECT_GE(p.minCoeff(), 1e-3 * 0.99);
  EXPECT_LT(p.maxCoeff(), 1.0);
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
}

TEST(Bkt, Examples) {
  EXPECT_NEAR(bkt_weight(row({0.5, 0.5}), row({0.5, 0.5}), 0), 1.0, 1e-15);
  EXPECT_NEAR(bkt_weight(row({0.5, 0.5}), row({0.1, 0.9}), 0), 3.321928094887362, kExampleTol);
  EXPECT_NEAR(bkt_weight(row({0.5, 0.5}), row({0.9, 0.1}), 0), 0.15200309344504997, kExampleTol);
}

TEST(Bkt, DecreasesWithClsConfidence) {
  const Row ref = row({0.4, 0.6});
  double prev = std::numeric_limits<double>::infinity();
  for (double c = 0.05; c < 0.96; c += 0.05) {
    const double w = bkt_weight(ref, row({c, 1.0 - c}), 0);
    EXPECT_LT(w, prev);
    EXPECT_GT(w, 0.0);
    prev = w;
  }
}

TEST(Bkt, RejectsDegenerateProbabilities) {
  EXPECT_THROW(bkt_weight(row({1.0, 0.0}), row({0.5, 0.5}), 0), InvalidArgument);
  EXPECT_THROW(bkt_weight(row({0.5, 0.5}), row({0.0, 1.0}), 0), InvalidArgument);
  EXPECT_THROW(bkt_weight(row({0.5, 0.5}), row({0.5, 0.5}), 2), InvalidArgument);
}

TEST(Bkt, FiniteForSaturatedLogits) {
  Matrix zr(1, 3), zc(1, 3);
  zr << 500, -500, 0;
  zc << -500, 500, 0;
  const Row w = bkt_weights(zr, zc, {0}, 1e-6);
  EXPECT_TRUE(std::isfinite(w(0)));
  EXPECT_GT(w(0), 0.0);
}

TEST(KdLogit, Examples) {
  std::vector<Matrix> same{Matrix::Constant(3, 4, 0.2), Matrix::Constant(3, 4, 0.2), Matrix::Constant(3, 4, 0.2)};
  EXPECT_NEAR(kd_logit_loss(same, Row::Ones(3), 1.0).value, 0.0, 1e-15);

  std::vector<Matrix> z{Matrix(1, 2), Matrix(1, 2)};
  z[0] << 1, 0;
  z[1] << 0, 1;
  EXPECT_NEAR(kd_logit_loss(z, Row::Ones(1), 1.0).value, 0.46211715726000974, kExampleTol);
}

TEST(KdFeature, Examples) {
  std::vector<Matrix> same{Matrix::Constant(2, 5, -0.3), Matrix::Constant(2, 5, -0.3)};
  EXPECT_NEAR(kd_feature_loss(same, 1.0).value, 0.0, 1e-15);

  std::vector<Matrix> v{Matrix(1, 2), Matrix(1, 2)};
  v[0] << 1, 0;
  v[1] << 0, 1;
  EXPECT_NEAR(kd_feature_loss(v, 1.0).value, 0.46211715726000974, kExampleTol);
}

TEST(Kd, MatchesNaiveOracle) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    const int k = 2 + t % 3, n = 1 + t % 4, c = 3 + t % 2;
    const double tau = 0.5 + 0.25 * (t % 5);
    std::vector<Matrix> teacher, student;
    std::vector<std::vector<oracle::Vec>> tz(static_cast<std::size_t>(k));
    for (int e = 0; e < k; ++e) teacher.push_back(oracle::gaussian(n, c, rng, 2.0));
    // The naive oracle uses a single matrix for teacher and student, so tie them.
    student = teacher;
    for (int e = 0; e < k; ++e)
      for (int i = 0; i < n; ++i) tz[static_cast<std::size_t>(e)].push_back(oracle::to_vec(teacher[e].row(i)));
    Matrix w(k, n);
    std::uniform_real_distribution<double> u(0.1, 3.0);
    for (int e = 0; e < k; ++e)
      for (int i = 0; i < n; ++i) w(e, i) = u(rng);
    std::vector<oracle::Vec> wv(static_cast<std::size_t>(k));
    for (int e = 0; e < k; ++e) wv[static_cast<std::size_t>(e)] = oracle::to_vec(w.row(e));
    EXPECT_NEAR(kd_logit_loss_per_student(teacher, student, w, tau).value, oracle::naive_pairwise_kd(tz, wv, tau),
                1e-12);
    std::vector<oracle::Vec> ones(static_cast<std::size_t>(k), oracle::Vec(static_cast<std::size_t>(n), 1.0));
    EXPECT_NEAR(kd_feature_loss(teacher, student, tau).value, oracle::naive_pairwise_kd(tz, ones, tau), 1e-12);
  }
}

TEST(Kd, LinearInWeights) {
  std::mt19937_64 rng(7);
  std::vector<Matrix> z{oracle::gaussian(4, 3, rng), oracle::gaussian(4, 3, rng), oracle::gaussian(4, 3, rng)};
  const Row w = (oracle::gaussian(1, 4, rng).array().abs() + 0.1).matrix();
  const double base = kd_logit_loss(z, w, 1.5).value;
  EXPECT_NEAR(kd_logit_loss(z, Row(w * 2.5), 1.5).value, 2.5 * base, 1e-12);
  const Row w2 = (oracle::gaussian(1, 4, rng).array().abs() + 0.1).matrix();
  EXPECT_NEAR(kd_logit_loss(z, Row(w + w2), 1.5).value, base + kd_logit_loss(z, w2, 1.5).value, 1e-12);
}

TEST(Kd, RejectsBadInput) {
  std::vector<Matrix> one{Matrix::Zero(2, 2)};
  EXPECT_THROW(kd_logit_loss(one, Row::Ones(2), 1.0), InvalidArgument);
  std::vector<Matrix> two{Matrix::Zero(2, 2), Matrix::Zero(2, 3)};
  EXPECT_THROW(kd_feature_loss(two, 1.0), InvalidArgument);
  std::vector<Matrix> ok{Matrix::Zero(2, 2), Matrix::Zero(2, 2)};
  EXPECT_THROW(kd_logit_loss(ok, Row::Ones(2), 0.0), InvalidArgument);
  EXPECT_THROW(kd_logit_loss(ok, Row::Ones(3), 1.0), InvalidArgument);
  EXPECT_THROW(kd_logit_loss(ok, Row::Zero(2), 1.0), InvalidArgument);
}

TEST(InfoNce, Examples) {
  // Query orthogonal to the key and to every queue row: Q + 1 equal logits.
  for (int q_size : {1, 3, 7}) {
    QueueState q;
    q.buffer = Matrix::Zero(q_size, q_size + 2);
    for (int r = 0; r < q_size; ++r) q.buffer(r, r + 2) = 1.0;
    Row query = Row::Zero(q_size + 2), key = Row::Zero(q_size + 2);
    query(0) = 1.0;
    key(1) = 1.0;
    EXPECT_NEAR(info_nce_loss(query, key, q, 1.0).value, std::log(q_size + 1.0), 1e-12);
  }
  QueueState q;
  q.buffer = Matrix::Zero(2, 3);
  q.buffer(0, 1) = 1.0;
  q.buffer(1, 2) = 1.0;
  const Row e = row({1, 0, 0});
  EXPECT_NEAR(info_nce_loss(e, e, q, 1.0).value, 0.5514447139320511, kExampleTol);
}

TEST(InfoNce, RejectsBadInput) {
  QueueState q;
  q.buffer = Matrix::Identity(2, 2);
  EXPECT_THROW(info_nce_loss(row({1, 1}), row({1, 0}), q, 1.0), InvalidArgument);
  EXPECT_THROW(info_nce_loss(row({1, 0}), row({1, 0}), q, 0.0), InvalidArgument);
  q.buffer(0, 0) = 2.0;
  EXPECT_THROW(info_nce_loss(row({1, 0}), row({1, 0}), q, 1.0), InvalidArgument);
}

TEST(Sup, Examples) {
  // K=1 with duplicate heads: twice the head's batch-mean balanced CE.
  std::mt19937_64 rng(8);
  const auto prior = random_prior(3, rng, 1.0);
  ExpertOutputs o;
  o.z_cls = oracle::gaussian(4, 3, rng);
  o.z_ref = o.z_cls;
  const Labels y{0, 2, 1, 1};
  std::vector<ExpertOutputs> one{o};
  EXPECT_NEAR(sup_loss(one, y, prior).value, 2.0 * bc_loss_batch(o.z_cls, y, prior).value, 1e-14);

  // Balanced prior, uniform logits: 2 log C for any K.
  for (int k = 1; k <= 4; ++k) {
    std::vector<ExpertOutputs> outs(static_cast<std::size_t>(k));
    for (auto& e : outs) e.z_cls = e.z_ref = Matrix::Zero(2, 5);
    EXPECT_NEAR(sup_loss(outs, {0, 4}, ClassPrior::uniform(5)).value, 2.0 * std::log(5.0), 1e-14);
  }

  // Expert 0 on the balanced-CE example (loss ln 10 per head), expert 1 with
  // logits whose prior-adjusted values are uniform (loss ln 2 per head).
  const auto prior2 = skewed_two();
  std::vector<ExpertOutputs> two(2);
  two[0].z_cls = two[0].z_ref = Matrix::Zero(1, 2);
  two[1].z_cls = two[1].z_ref = Matrix(-prior2.log_ratio());
  EXPECT_NEAR(sup_loss(two, {1}, prior2).value, 2.995732273553991, kExampleTol);
}

TEST(Total, Examples) {
  KDConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  EXPECT_EQ(total_loss(1.7, 0.4, 0.3, 5.0, cfg).total, 1.7);
  cfg.alpha = 0.6;
  cfg.beta = 1.0;
  EXPECT_NEAR(total_loss(1.0, 0.5, 0.5, 2.0, cfg).total, 3.6, 1e-15);
  EXPECT_EQ(total_loss(0, 0, 0, 0, cfg).total, 0.0);
}

// ---------------------------------------------------------------------------
// Gradients: central differences on 20+ random instances per loss.

constexpr int kInstances = 25;
constexpr double kGradTol = 1e-4;

TEST(Gradient, CrossEntropyBatch) {
  std::mt19937_64 rng(100);
  for (int t = 0; t < kInstances; ++t) {
    const int n = 1 + t % 5, c = 2 + t % 6;
    Matrix z = oracle::gaussian(n, c, rng, 2.0);
    const auto y = oracle::random_labels(static_cast<std::size_t>(n), c, rng);
    const auto analytic = ce_loss_batch(z, y).grad;
    const auto numeric = oracle::numeric_grad(z, [&] { return ce_loss_batch(z, y).value; });
    EXPECT_LT(oracle::rel_err(analytic, numeric), kGradTol) << "instance " << t;
  }
}

TEST(Gradient, BalancedCrossEntropyBatch) {
  std::mt19937_64 rng(101);
  for (int t = 0; t < kInstances; ++t) {
    const int n = 1 + t % 4, c = 2 + t % 5;
    const auto prior = random_prior(c, rng, 0.5 + 0.1 * t);
    Matrix z = oracle::gaussian(n, c, rng, 2.0);
    const auto y = oracle::random_labels(static_cast<std::size_t>(n), c, rng);
    const auto analytic = bc_loss_batch(z, y, prior).grad;
    const auto numeric = oracle::numeric_grad(z, [&] { return bc_loss_batch(z, y, prior).value; });
    EXPECT_LT(oracle::rel_err(analytic, numeric), kGradTol) << "instance " << t;
  }
}

namespace {

// Checks the student gradients of a distillation loss with teachers held fixed.
template <class F>
void check_distill_gradient(std::vector<Matrix>& student, const std::vector<Matrix>& teacher, F&& loss, int t) {
  const auto analytic = loss(teacher, student).grad;
  for (std::size_t k = 0; k < student.size(); ++k) {
    const auto numeric = oracle::numeric_grad(student[k], [&] { return loss(teacher, student).value; });
    EXPECT_LT(oracle::rel_err(analytic[k], numeric), kGradTol) << "instance " << t << " expert " << k;
  }
}

}  // namespace

TEST(Gradient, KdLogit) {
  std::mt19937_64 rng(102);
  for (int t = 0; t < kInstances; ++t) {
    const int k = 2 + t % 3, n = 1 + t % 3, c = 2 + t % 4;
    const double tau = 0.5 + 0.5 * (t % 4);
    std::vector<Matrix> teacher, student;
    for (int e = 0; e < k; ++e) {
      teacher.push_back(oracle::gaussian(n, c, rng, 1.5));
      student.push_back(oracle::gaussian(n, c, rng, 1.5));
    }
    const Matrix w = (oracle::gaussian(k, n, rng).array().abs() + 0.2).matrix();
    check_distill_gradient(
        student, teacher,
        [&](const std::vector<Matrix>& tt, const std::vector<Matrix>& ss) {
          return kd_logit_loss_per_student(tt, ss, w, tau);
        },
        t);
  }
}

TEST(Gradient, KdFeature) {
  std::mt19937_64 rng(103);
  for (int t = 0; t < kInstances; ++t) {
    const int k = 2 + t % 3, n = 1 + t % 3, d = 2 + t % 5;
    const double tau = 0.5 + 0.5 * (t % 4);
    std::vector<Matrix> teacher, student;
    for (int e = 0; e < k; ++e) {
      teacher.push_back(oracle::gaussian(n, d, rng));
      student.push_back(oracle::gaussian(n, d, rng));
    }
    check_distill_gradient(
        student, teacher,
        [&](const std::vector<Matrix>& tt, const std::vector<Matrix>& ss) { return kd_feature_loss(tt, ss, tau); },
        t);
  }
}

TEST(Gradient, InfoNceQuery) {
  std::mt19937_64 rng(104);
  for (int t = 0; t < kInstances; ++t) {
    const int n = 1 + t % 4, d = 2 + t % 5, qn = 1 + t % 6;
    const double tau = 0.2 + 0.2 * (t % 5);
    // Differentiate through the normalization so perturbed queries stay valid.
    Matrix raw = oracle::gaussian(n, d, rng);
    const Matrix keys = oracle::unit_rows(n, d, rng);
    QueueState q;
    q.buffer = oracle::unit_rows(qn, d, rng);
    auto value = [&] { return info_nce_batch(normalize_rows(raw), keys, q, tau).value; };
    const Matrix e = normalize_rows(raw);
    const auto analytic = normalize_backward(e, raw, info_nce_batch(e, keys, q, tau).grad);
    const auto numeric = oracle::numeric_grad(raw, value);
    EXPECT_LT(oracle::rel_err(analytic, numeric), kGradTol) << "instance " << t;
  }
}

TEST(Gradient, InfoNceDirectQuery) {
  // Unconstrained check of the query gradient of the single-sample formula.
  std::mt19937_64 rng(105);
  for (int t = 0; t < kInstances; ++t) {
    const int d = 2 + t % 4, qn = 1 + t % 5;
    const double tau = 0.3 + 0.3 * (t % 3);
    Matrix query = oracle::gaussian(1, d, rng);
    const Row key = oracle::unit_rows(1, d, rng);
    const Matrix queue = oracle::unit_rows(qn, d, rng);
    const auto analytic = detail::info_nce_one(query.row(0), key, queue, tau).grad_query;
    const auto numeric =
        oracle::numeric_grad(query, [&] { return detail::info_nce_one(query.row(0), key, queue, tau).value; });
    EXPECT_LT(oracle::rel_err(analytic, numeric), kGradTol) << "instance " << t;
  }
}

TEST(Gradient, Supervision) {
  std::mt19937_64 rng(106);
  for (int t = 0; t < kInstances; ++t) {
    const int k = 1 + t % 3, n = 1 + t % 4, c = 2 + t % 4;
    const auto prior = random_prior(c, rng, 1.0);
    std::vector<ExpertOutputs> outs(static_cast<std::size_t>(k));
    for (auto& o : outs) {
      o.z_cls = oracle::gaussian(n, c, rng);
      o.z_ref = oracle::gaussian(n, c, rng);
    }
    const auto y = oracle::random_labels(static_cast<std::size_t>(n), c, rng);
    const auto analytic = sup_loss(outs, y, prior);
    for (std::size_t e = 0; e < outs.size(); ++e) {
      const auto nc = oracle::numeric_grad(outs[e].z_cls, [&] { return sup_loss(outs, y, prior).value; });
      const auto nr = oracle::numeric_grad(outs[e].z_ref, [&] { return sup_loss(outs, y, prior).value; });
      EXPECT_LT(oracle::rel_err(analytic.grad_cls[e], nc), kGradTol);
      EXPECT_LT(oracle::rel_err(analytic.grad_ref[e], nr), kGradTol);
    }
  }
}

// ---------------------------------------------------------------------------
// Stop-gradient

TEST(StopGradient, SelfDistillationIgnoresTeacherPath) {
  // With teacher and student tied to the same logits, the returned gradient is
  // the student-only gradient; the gradient of the tied function differs.
  std::mt19937_64 rng(107);
  std::vector<Matrix> z{oracle::gaussian(2, 3, rng, 2.0), oracle::gaussian(2, 3, rng, 2.0)};
  const Row w = Row::Ones(2);
  const auto self = kd_logit_loss(z, w, 1.0);
  const std::vector<Matrix> frozen = z;
  const auto split = kd_logit_loss(frozen, z, w, 1.0);
  EXPECT_EQ(self.grad[0], split.grad[0]);
  EXPECT_EQ(self.grad[1], split.grad[1]);
  const auto tied = oracle::numeric_grad(z[0], [&] { return kd_logit_loss(z, w, 1.0).value; });
  EXPECT_GT(oracle::rel_err(self.grad[0], tied), 1e-2);
}

TEST(StopGradient, TeacherEntersOnlyThroughItsSoftmax) {
  // The student gradient does not depend on the detached teacher except through
  // its value; changing the teacher by a constant shift leaves it unchanged.
  std::mt19937_64 rng(108);
  std::vector<Matrix> teacher{oracle::gaussian(3, 4, rng), oracle::gaussian(3, 4, rng)};
  std::vector<Matrix> student{oracle::gaussian(3, 4, rng), oracle::gaussian(3, 4, rng)};
  std::vector<Matrix> shifted = teacher;
  for (auto& m : shifted) m.array() += 5.0;
  const Row w = Row::Constant(3, 0.7);
  const auto a = kd_logit_loss(teacher, student, w, 1.0);
  const auto b = kd_logit_loss(shifted, student, w, 1.0);
  EXPECT_NEAR(a.value, b.value, 1e-12);
  EXPECT_LT((a.grad[0] - b.grad[0]).norm(), 1e-12);
  // The contrastive result only exposes a query gradient.
  QueueState q;
  q.buffer = oracle::unit_rows(4, 3, rng);
  const auto r = info_nce_loss(oracle::unit_rows(1, 3, rng).row(0), oracle::unit_rows(1, 3, rng).row(0), q, 0.5);
  EXPECT_EQ(r.grad_query.size(), 3);
}
