// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecl {

/// Batch-major dense matrix: one sample (or one output unit) per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Row = Eigen::RowVectorXd;
using RowRef = Eigen::Ref<const Row>;

using Labels = std::vector<int>;

/// Rejected arguments: shapes, ranges, invalid specs.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Zero-norm vector handed to an operation that needs a direction.
class DegenerateEmbedding : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

/// NaN/Inf produced by training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing file content.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) {
  return mix_seed(mix_seed(mix_seed(base) ^ stream) ^ index);
}

// Stream tags for derive_seed.
namespace streams {
inline constexpr std::uint64_t kDataMeans = 1;
inline constexpr std::uint64_t kDataSamples = 2;
inline constexpr std::uint64_t kExpertInit = 3;
inline constexpr std::uint64_t kQueueInit = 4;
inline constexpr std::uint64_t kShuffle = 5;
inline constexpr std::uint64_t kJitter = 6;
inline constexpr std::uint64_t kLandscape = 7;
}  // namespace streams

inline double log_sum_exp(RowRef z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

inline Row log_softmax(RowRef z) {
  return z.array() - log_sum_exp(z);
}

inline Row softmax(RowRef z) {
  Row e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

/// Row-wise softmax of a batch.
inline Matrix softmax_rows(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) out.row(i) = softmax(z.row(i));
  return out;
}

/// First index of the maximum entry.
inline int argmax(RowRef v) {
  int best = 0;
  for (Eigen::Index j = 1; j < v.size(); ++j)
    if (v(j) > v(best)) best = static_cast<int>(j);
  return best;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Round-trip-exact decimal rendering, used by every text writer.
inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace ecl
