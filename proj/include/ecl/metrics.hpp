// SPDX-License-Identifier: Apache-2.0
#pragma once

// Evaluation: top-1 and shot-group accuracy, confusion matrix, calibration
// error with reliability bins, inter-expert feature distance, and
// filter-normalized weight-perturbation scans.

#include "ecl/collab.hpp"
#include "ecl/core.hpp"
#include "ecl/losses.hpp"
#include "ecl/ltdata.hpp"

#include <json.hpp>

#include <optional>
#include <ostream>
#include <random>

namespace ecl {

struct MetricsReport {
  double top1 = 0.0;
  std::optional<double> acc_many;
  std::optional<double> acc_medium;
  std::optional<double> acc_few;
  double ece = 0.0;
  double ece_binned = 0.0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  std::vector<std::int64_t> pred_histogram;
};

namespace detail {

inline void check_probabilities(const Matrix& probs, const Labels& labels) {
  require(probs.rows() == static_cast<Eigen::Index>(labels.size()), "metrics: row count does not match labels");
  require(probs.cols() >= 1, "metrics: empty probability rows");
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    require(std::abs(probs.row(i).sum() - 1.0) <= 1e-6, "metrics: row " + std::to_string(i) + " does not sum to 1");
  for (int y : labels) require(y >= 0 && y < probs.cols(), "metrics: label out of range");
}

}  // namespace detail

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
inline double top1_accuracy(const Matrix& probs, const Labels& labels) {
  require(probs.rows() == static_cast<Eigen::Index>(labels.size()) && probs.rows() > 0,
          "top1_accuracy: shape mismatch");
  std::int64_t hits = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) hits += argmax(probs.row(i)) == labels[static_cast<std::size_t>(i)];
  return static_cast<double>(hits) / static_cast<double>(probs.rows());
}

/// Top-1, group accuracy, confusion and prediction histogram. ECE fields are left at 0.
inline MetricsReport evaluate(const Matrix& probs, const Labels& labels, const GroupAssignment& groups) {
  detail::check_probabilities(probs, labels);
  require(probs.rows() > 0, "evaluate: empty input");
  const auto c = static_cast<std::size_t>(probs.cols());
  MetricsReport r;
  r.confusion.assign(c, std::vector<std::int64_t>(c, 0));
  r.pred_histogram.assign(c, 0);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const auto pred = static_cast<std::size_t>(argmax(probs.row(i)));
    ++r.confusion[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])][pred];
    ++r.pred_histogram[pred];
  }
  std::int64_t trace = 0;
  for (std::size_t j = 0; j < c; ++j) trace += r.confusion[j][j];
  r.top1 = static_cast<double>(trace) / static_cast<double>(probs.rows());

  auto group_acc = [&](const std::vector<int>& classes) -> std::optional<double> {
    std::int64_t hit = 0, total = 0;
    for (int cls : classes) {
      require(cls >= 0 && static_cast<std::size_t>(cls) < c, "evaluate: group class out of range");
      const auto& row = r.confusion[static_cast<std::size_t>(cls)];
      hit += row[static_cast<std::size_t>(cls)];
      for (auto v : row) total += v;
    }
    if (total == 0) return std::nullopt;
    return static_cast<double>(hit) / static_cast<double>(total);
  };
  r.acc_many = group_acc(groups.many);
  r.acc_medium = group_acc(groups.medium);
  r.acc_few = group_acc(groups.few);
  return r;
}

// ---------------------------------------------------------------------------
// Calibration

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::int64_t count = 0;
  double mean_confidence = 0.0;  // 0 for empty bins
  double accuracy = 0.0;         // 0 for empty bins
};

struct ReliabilityBins {
  int num_bins = 15;
  std::vector<ReliabilityBin> bins;
};

struct EceResult {
  double ece = 0.0;         ///< (1/N) sum_i |1(correct_i) - conf_i|, the displayed per-sample form
  double ece_binned = 0.0;  ///< sum_m (|B_m|/N) |acc(B_m) - conf(B_m)|
  ReliabilityBins bins;
};

/// Bin of a confidence in (0,1]: intervals ((m-1)/M, m/M], with 0 mapped to the first bin.
inline int confidence_bin(double confidence, int num_bins) {
  const int idx = static_cast<int>(std::ceil(confidence * num_bins)) - 1;
  return std::clamp(idx, 0, num_bins - 1);
}

inline EceResult ece(const Matrix& probs, const Labels& labels, int num_bins = 15) {
  require(num_bins >= 1, "ece: need at least one bin");
  require(probs.rows() > 0, "ece: empty input");
  detail::check_probabilities(probs, labels);
  EceResult r;
  r.bins.num_bins = num_bins;
  r.bins.bins.resize(static_cast<std::size_t>(num_bins));
  std::vector<double> conf_sum(static_cast<std::size_t>(num_bins), 0.0), hit_sum(conf_sum);
  for (int m = 0; m < num_bins; ++m) {
    r.bins.bins[static_cast<std::size_t>(m)].lower = static_cast<double>(m) / num_bins;
    r.bins.bins[static_cast<std::size_t>(m)].upper = static_cast<double>(m + 1) / num_bins;
  }
  const auto n = static_cast<double>(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const int pred = argmax(probs.row(i));
    const double conf = probs(i, pred);
    const double correct = pred == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    const auto m = static_cast<std::size_t>(confidence_bin(conf, num_bins));
    ++r.bins.bins[m].count;
    conf_sum[m] += conf;
    hit_sum[m] += correct;
    r.ece += std::abs(correct - conf);
  }
  r.ece /= n;
  for (std::size_t m = 0; m < r.bins.bins.size(); ++m) {
    auto& b = r.bins.bins[m];
    if (b.count == 0) continue;
    b.mean_confidence = conf_sum[m] / static_cast<double>(b.count);
    b.accuracy = hit_sum[m] / static_cast<double>(b.count);
    r.ece_binned += (static_cast<double>(b.count) / n) * std::abs(b.accuracy - b.mean_confidence);
  }
  return r;
}

// ---------------------------------------------------------------------------

/// D_i = mean over samples of class i of ||v^m_t - v^n_t||_2; nullopt for classes without samples.
inline std::vector<std::optional<double>> class_feature_distance(const Matrix& features_m, const Matrix& features_n,
                                                                 const Labels& labels, int num_classes) {
  require(features_m.rows() == features_n.rows() && features_m.cols() == features_n.cols(),
          "class_feature_distance: feature shapes differ");
  require(features_m.rows() == static_cast<Eigen::Index>(labels.size()),
          "class_feature_distance: label count mismatch");
  require(num_classes >= 1, "class_feature_distance: need at least one class");
  std::vector<double> sum(static_cast<std::size_t>(num_classes), 0.0);
  std::vector<std::int64_t> count(static_cast<std::size_t>(num_classes), 0);
  for (Eigen::Index t = 0; t < features_m.rows(); ++t) {
    const int y = labels[static_cast<std::size_t>(t)];
    require(y >= 0 && y < num_classes, "class_feature_distance: label out of range");
    sum[static_cast<std::size_t>(y)] += (features_m.row(t) - features_n.row(t)).norm();
    ++count[static_cast<std::size_t>(y)];
  }
  std::vector<std::optional<double>> d(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < d.size(); ++i)
    if (count[i] > 0) d[i] = sum[i] / static_cast<double>(count[i]);
  return d;
}

/// Mean of the present entries of a distance vector.
inline double mean_present(const std::vector<std::optional<double>>& d) {
  double s = 0.0;
  int n = 0;
  for (const auto& v : d)
    if (v) {
      s += *v;
      ++n;
    }
  return n ? s / n : 0.0;
}

// ---------------------------------------------------------------------------
// Scoring shared by eval and landscape scans

/// Which inference model to score: one expert, or the logit-averaged ensemble.
struct ModelSelection {
  std::optional<int> expert;  // nullopt = ensemble

  static ModelSelection ensemble() { return {}; }
  static ModelSelection single(int k) { return {k}; }
};

inline Matrix selected_logits(std::span<const Expert> experts, ModelSelection sel, const Matrix& x) {
  if (sel.expert) {
    require(*sel.expert >= 0 && *sel.expert < static_cast<int>(experts.size()), "expert index out of range");
    return cls_logits(experts[static_cast<std::size_t>(*sel.expert)], x);
  }
  return ensemble_logits(experts, x);
}

struct SplitScore {
  Matrix probs;
  double mean_loss = 0.0;  ///< mean balanced CE of the selected logits
  double top1 = 0.0;
};

inline SplitScore score_split(std::span<const Expert> experts, ModelSelection sel, const Split& split,
                              const ClassPrior& prior, double posthoc_tau) {
  require(split.size() > 0, "score_split: empty split");
  const Matrix z = selected_logits(experts, sel, split.x);
  SplitScore s;
  s.probs = posthoc_adjust_rows(z, prior, posthoc_tau);
  s.mean_loss = bc_loss_batch(z, split.y, prior).value;
  s.top1 = top1_accuracy(s.probs, split.y);
  return s;
}

// ---------------------------------------------------------------------------
// Landscape

struct LandscapeScan {
  std::vector<double> noise_levels;
  std::vector<double> mean_loss;
  std::vector<double> mean_acc;
  int repeats = 1;
  std::uint64_t seed = 0;
};

namespace detail {

// W_group += level * ||W_group|| * g / ||g||, g ~ N(0, I), one group per filter row plus one for the bias.
inline void perturb_linear(Linear& l, double level, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto perturb_group = [&](auto&& group) {
    Row g(group.size());
    for (Eigen::Index j = 0; j < g.size(); ++j) g(j) = normal(rng);
    const double gn = g.norm();
    if (gn == 0.0) return;
    group += (level * group.norm() / gn) * g;
  };
  for (Eigen::Index r = 0; r < l.weight.rows(); ++r) perturb_group(l.weight.row(r));
  perturb_group(l.bias.row(0));
}

inline void perturb_inference_path(Expert& e, double level, std::mt19937_64& rng) {
  for (auto& l : e.encoder.layers) perturb_linear(l, level, rng);
  perturb_linear(e.cls_head, level, rng);
}

}  // namespace detail

/// Mean balanced loss / top-1 of the selected model under filter-normalized Gaussian
/// weight noise. Works on copies; the passed experts are never modified.
inline LandscapeScan landscape_scan(std::span<const Expert> experts, ModelSelection sel, const Split& split,
                                    const std::vector<double>& noise_levels, int repeats, std::uint64_t seed,
                                    const ClassPrior& prior, double posthoc_tau) {
  require(repeats >= 1, "landscape_scan: repeats must be >= 1");
  require(!noise_levels.empty(), "landscape_scan: no noise levels");
  for (std::size_t i = 0; i < noise_levels.size(); ++i) {
    require(std::isfinite(noise_levels[i]) && noise_levels[i] >= 0.0, "landscape_scan: negative noise level");
    require(i == 0 || noise_levels[i] >= noise_levels[i - 1], "landscape_scan: levels must be ascending");
  }
  LandscapeScan scan{noise_levels, {}, {}, repeats, seed};
  const SplitScore clean = score_split(experts, sel, split, prior, posthoc_tau);
  std::vector<Expert> work(experts.begin(), experts.end());
  for (std::size_t li = 0; li < noise_levels.size(); ++li) {
    const double level = noise_levels[li];
    if (level == 0.0) {
      scan.mean_loss.push_back(clean.mean_loss);
      scan.mean_acc.push_back(clean.top1);
      continue;
    }
    double loss = 0.0, acc = 0.0;
    for (int r = 0; r < repeats; ++r) {
      std::mt19937_64 rng(derive_seed(seed, streams::kLandscape, li * static_cast<std::uint64_t>(repeats) + r));
      for (std::size_t k = 0; k < work.size(); ++k) {
        if (sel.expert && static_cast<int>(k) != *sel.expert) continue;
        detail::perturb_inference_path(work[k], level, rng);
      }
      const SplitScore s = score_split(work, sel, split, prior, posthoc_tau);
      loss += s.mean_loss;
      acc += s.top1;
      std::copy(experts.begin(), experts.end(), work.begin());
    }
    scan.mean_loss.push_back(loss / repeats);
    scan.mean_acc.push_back(acc / repeats);
  }
  return scan;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const ReliabilityBins& rb) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : rb.bins)
    bins.push_back({{"lower", b.lower},
                    {"upper", b.upper},
                    {"count", b.count},
                    {"mean_confidence", b.mean_confidence},
                    {"accuracy", b.accuracy}});
  return {{"num_bins", rb.num_bins}, {"bins", bins}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"top1", r.top1},
          {"acc_many", opt(r.acc_many)},
          {"acc_medium", opt(r.acc_medium)},
          {"acc_few", opt(r.acc_few)},
          {"ece", r.ece},
          {"ece_binned", r.ece_binned},
          {"confusion", r.confusion},
          {"pred_histogram", r.pred_histogram}};
}

inline void write_reliability_csv(std::ostream& os, const ReliabilityBins& rb) {
  os << "bin,lower,upper,count,mean_confidence,accuracy\n";
  for (std::size_t m = 0; m < rb.bins.size(); ++m) {
    const auto& b = rb.bins[m];
    os << m << ',' << format_double(b.lower) << ',' << format_double(b.upper) << ',' << b.count << ','
       << format_double(b.mean_confidence) << ',' << format_double(b.accuracy) << '\n';
  }
}

/// Raw counts; with log_scale each entry is written as log(1 + count).
inline void write_confusion_csv(std::ostream& os, const std::vector<std::vector<std::int64_t>>& confusion,
                                bool log_scale = false) {
  for (const auto& row : confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) os << ',';
      if (log_scale)
        os << format_double(std::log1p(static_cast<double>(row[j])));
      else
        os << row[j];
    }
    os << '\n';
  }
}

inline void write_histogram_csv(std::ostream& os, const std::vector<std::int64_t>& hist) {
  os << "class,count\n";
  for (std::size_t i = 0; i < hist.size(); ++i) os << i << ',' << hist[i] << '\n';
}

inline void write_landscape_csv(std::ostream& os, const LandscapeScan& scan) {
  os << "level,mean_loss,mean_acc\n";
  for (std::size_t i = 0; i < scan.noise_levels.size(); ++i)
    os << format_double(scan.noise_levels[i]) << ',' << format_double(scan.mean_loss[i]) << ','
       << format_double(scan.mean_acc[i]) << '\n';
}

}  // namespace ecl
