// SPDX-License-Identifier: Apache-2.0
#pragma once

// Long-tailed class profiles, label priors, shot groups and the synthetic
// Gaussian-blob datasets used for desk-scale runs.

#include "ecl/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

namespace ecl {

struct LongTailSpec {
  int num_classes = 10;
  int n_max = 500;
  double gamma = 100.0;  ///< most / least frequent class count
  std::uint64_t seed = 0;

  void validate() const {
    require(num_classes >= 2, "LongTailSpec: num_classes must be >= 2");
    require(n_max >= 1, "LongTailSpec: n_max must be >= 1");
    require(std::isfinite(gamma) && gamma >= 1.0, "LongTailSpec: gamma must be >= 1");
  }
};

/// Exponential profile n_i = max(1, round(n_max * gamma^(-i/(C-1)))), round half up.
inline std::vector<int> make_class_counts(const LongTailSpec& spec) {
  spec.validate();
  std::vector<int> counts(static_cast<std::size_t>(spec.num_classes));
  const double last = static_cast<double>(spec.num_classes - 1);
  for (int i = 0; i < spec.num_classes; ++i) {
    const double n = spec.n_max * std::pow(spec.gamma, -static_cast<double>(i) / last);
    counts[static_cast<std::size_t>(i)] = std::max(1, static_cast<int>(std::floor(n + 0.5)));
  }
  return counts;
}

/// Empirical label distribution p[i] = counts[i] / sum(counts).
inline Row compute_prior(std::span<const int> counts) {
  require(counts.size() >= 2, "compute_prior: need at least two classes");
  double total = 0.0;
  for (int c : counts) {
    require(c >= 1, "compute_prior: counts must be positive");
    total += c;
  }
  Row p(static_cast<Eigen::Index>(counts.size()));
  for (std::size_t i = 0; i < counts.size(); ++i) p(static_cast<Eigen::Index>(i)) = counts[i] / total;
  return p;
}

/// Train/test label priors and the bias scale used by balanced cross-entropy.
struct ClassPrior {
  Row p_source;
  Row p_target;
  double tau_bc = 1.0;

  static ClassPrior uniform(int num_classes, double tau_bc = 1.0) {
    require(num_classes >= 2, "ClassPrior: need at least two classes");
    Row u = Row::Constant(num_classes, 1.0 / num_classes);
    return {u, u, tau_bc};
  }

  /// Source prior from training counts, uniform target.
  static ClassPrior from_counts(std::span<const int> counts, double tau_bc = 1.0) {
    ClassPrior p{compute_prior(counts), Row::Constant(static_cast<Eigen::Index>(counts.size()), 1.0 / counts.size()),
                 tau_bc};
    p.validate();
    return p;
  }

  int num_classes() const { return static_cast<int>(p_source.size()); }

  void validate() const {
    require(p_source.size() >= 2 && p_source.size() == p_target.size(), "ClassPrior: shape mismatch");
    require((p_source.array() > 0.0).all() && (p_target.array() > 0.0).all(),
            "ClassPrior: prior entries must be strictly positive");
    require(std::abs(p_source.sum() - 1.0) <= 1e-9 && std::abs(p_target.sum() - 1.0) <= 1e-9,
            "ClassPrior: priors must sum to 1");
    require(std::isfinite(tau_bc) && tau_bc >= 0.0, "ClassPrior: tau_bc must be >= 0");
  }

  /// log p_s(j) - log p_t(j), unscaled.
  Row log_ratio() const { return p_source.array().log() - p_target.array().log(); }
};

struct GroupAssignment {
  std::vector<int> many;    // > 100 training samples
  std::vector<int> medium;  // 20..100 inclusive
  std::vector<int> few;     // < 20
};

inline GroupAssignment group_classes(std::span<const int> counts) {
  GroupAssignment g;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    require(counts[i] >= 0, "group_classes: negative count");
    const int c = counts[i];
    auto& bucket = c > 100 ? g.many : (c >= 20 ? g.medium : g.few);
    bucket.push_back(static_cast<int>(i));
  }
  return g;
}

struct Split {
  Matrix x;
  Labels y;

  Eigen::Index size() const { return x.rows(); }
};

struct Dataset {
  int num_classes = 0;
  int dim = 0;
  Split train;
  Split test;

  /// Per-class row counts of the training split.
  std::vector<int> train_counts() const {
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    for (int y : train.y) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }

  bool operator==(const Dataset& o) const {
    return num_classes == o.num_classes && dim == o.dim && train.x == o.train.x && train.y == o.train.y &&
           test.x == o.test.x && test.y == o.test.y;
  }
};

namespace detail {

/// Class centres on a sphere, pairwise distance >= separation, grown until they fit.
inline Matrix place_class_means(int num_classes, int dim, double separation, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, streams::kDataMeans));
  std::normal_distribution<double> normal(0.0, 1.0);
  double radius = separation / std::sqrt(2.0);
  Matrix means(num_classes, dim);
  for (int c = 0; c < num_classes; ++c) {
    int failures = 0;
    while (true) {
      Row dir(dim);
      for (int j = 0; j < dim; ++j) dir(j) = normal(rng);
      const double n = dir.norm();
      if (n == 0.0) continue;
      Row candidate = dir * (radius / n);
      bool ok = true;
      for (int p = 0; p < c && ok; ++p) ok = (candidate - means.row(p)).norm() >= separation;
      if (ok) {
        means.row(c) = candidate;
        break;
      }
      if (++failures == 200) {
        // Scale the already placed centres with the sphere to keep distances valid.
        radius *= 1.05;
        means.topRows(c) *= 1.05;
        failures = 0;
      }
    }
  }
  return means;
}

}  // namespace detail

/// Isotropic unit-variance Gaussian blob per class. Train split follows the
/// long-tailed profile, test split holds test_per_class rows per class.
inline Dataset build_synthetic_lt_dataset(const LongTailSpec& spec, int feature_dim, double class_separation,
                                          int test_per_class = 100) {
  spec.validate();
  require(feature_dim >= 2, "build_synthetic_lt_dataset: feature_dim must be >= 2");
  require(std::isfinite(class_separation) && class_separation > 0.0,
          "build_synthetic_lt_dataset: class_separation must be positive");
  require(test_per_class >= 0, "build_synthetic_lt_dataset: test_per_class must be >= 0");

  const auto counts = make_class_counts(spec);
  const Matrix means = detail::place_class_means(spec.num_classes, feature_dim, class_separation, spec.seed);

  std::mt19937_64 rng(derive_seed(spec.seed, streams::kDataSamples));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Split& split, auto per_class) {
    const int total = [&] {
      int t = 0;
      for (int c = 0; c < spec.num_classes; ++c) t += per_class(c);
      return t;
    }();
    split.x.resize(total, feature_dim);
    split.y.assign(static_cast<std::size_t>(total), 0);
    int row = 0;
    for (int c = 0; c < spec.num_classes; ++c) {
      for (int k = 0; k < per_class(c); ++k, ++row) {
        for (int j = 0; j < feature_dim; ++j) split.x(row, j) = means(c, j) + normal(rng);
        split.y[static_cast<std::size_t>(row)] = c;
      }
    }
  };

  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.dim = feature_dim;
  fill(ds.train, [&](int c) { return counts[static_cast<std::size_t>(c)]; });
  fill(ds.test, [&](int) { return test_per_class; });
  return ds;
}

struct TwoViewBatch {
  Matrix view_a;
  Matrix view_b;
  Labels labels;
  std::vector<int> indices;

  Eigen::Index size() const { return view_a.rows(); }
};

/// Two independently jittered copies (additive Gaussian, scale jitter_sigma) of the selected rows.
inline TwoViewBatch two_view_batch(const Split& split, std::span<const int> indices, double jitter_sigma,
                                   std::uint64_t seed) {
  require(std::isfinite(jitter_sigma) && jitter_sigma >= 0.0, "two_view_batch: jitter_sigma must be >= 0");
  TwoViewBatch b;
  const auto n = static_cast<Eigen::Index>(indices.size());
  b.view_a.resize(n, split.x.cols());
  b.labels.reserve(indices.size());
  b.indices.assign(indices.begin(), indices.end());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int idx = indices[static_cast<std::size_t>(i)];
    require(idx >= 0 && idx < split.size(), "two_view_batch: index out of range");
    b.view_a.row(i) = split.x.row(idx);
    b.labels.push_back(split.y[static_cast<std::size_t>(idx)]);
  }
  b.view_b = b.view_a;
  if (jitter_sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, jitter_sigma);
    for (Matrix* view : {&b.view_a, &b.view_b})
      for (Eigen::Index i = 0; i < view->rows(); ++i)
        for (Eigen::Index j = 0; j < view->cols(); ++j) (*view)(i, j) += noise(rng);
  }
  return b;
}

// ---------------------------------------------------------------------------
// File formats

inline void write_dataset_csv(std::ostream& os, const Dataset& ds) {
  os << "ecl-dataset v1, C=" << ds.num_classes << ", d=" << ds.dim << '\n';
  auto rows = [&](const char* name, const Split& s) {
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      os << name << ',' << s.y[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < s.x.cols(); ++j) os << ',' << format_double(s.x(i, j));
      os << '\n';
    }
  };
  rows("train", ds.train);
  rows("test", ds.test);
}

inline void save_dataset_csv(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_dataset_csv(os, ds);
  if (!os) throw DataError("write failed: " + path);
}

inline Dataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("dataset: empty input");
  Dataset ds;
  if (std::sscanf(line.c_str(), "ecl-dataset v1, C=%d, d=%d", &ds.num_classes, &ds.dim) != 2 ||
      ds.num_classes < 2 || ds.dim < 1)
    throw DataError("dataset: bad header '" + line + "'");

  std::vector<double> train_vals, test_vals;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string split, cell;
    std::getline(ss, split, ',');
    Split* target = split == "train" ? &ds.train : split == "test" ? &ds.test : nullptr;
    if (!target) throw DataError("dataset: unknown split on line " + std::to_string(line_no));
    auto& vals = target == &ds.train ? train_vals : test_vals;
    if (!std::getline(ss, cell, ',')) throw DataError("dataset: missing class on line " + std::to_string(line_no));
    int y = 0;
    try {
      y = std::stoi(cell);
      int cols = 0;
      while (std::getline(ss, cell, ',')) {
        vals.push_back(std::stod(cell));
        ++cols;
      }
      if (cols != ds.dim) throw DataError("dataset: wrong feature count on line " + std::to_string(line_no));
    } catch (const std::logic_error&) {
      throw DataError("dataset: unparsable number on line " + std::to_string(line_no));
    }
    if (y < 0 || y >= ds.num_classes) throw DataError("dataset: class out of range on line " + std::to_string(line_no));
    target->y.push_back(y);
  }
  auto finish = [&](Split& s, const std::vector<double>& vals) {
    s.x = Eigen::Map<const Matrix>(vals.data(), static_cast<Eigen::Index>(s.y.size()), ds.dim);
  };
  finish(ds.train, train_vals);
  finish(ds.test, test_vals);
  return ds;
}

inline Dataset load_dataset_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset: " + path);
  return read_dataset_csv(is);
}

/// {"counts": [...], "gamma": g}
inline nlohmann::json counts_json(std::span<const int> counts, double gamma) {
  return {{"counts", std::vector<int>(counts.begin(), counts.end())}, {"gamma", gamma}};
}

}  // namespace ecl
