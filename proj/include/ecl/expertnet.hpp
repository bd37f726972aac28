// SPDX-License-Identifier: Apache-2.0
#pragma once

// Expert architecture: encoder -> feature v, two linear heads (cls, ref) and a
// projection head producing unit-norm contrastive embeddings. Reference
// implementation is a small dense MLP with hand-written backprop.

#include "ecl/core.hpp"

#include <concepts>
#include <random>
#include <string>
#include <type_traits>
#include <utility>

namespace ecl {

enum class Activation { Tanh, Relu };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw InvalidArgument("unknown activation '" + s + "'");
}

struct Linear {
  Matrix weight;  ///< out x in; row r is the incoming filter of output unit r
  Matrix bias;    ///< 1 x out

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }

  Matrix forward(const Matrix& x) const {
    require(x.cols() == in_dim(), "Linear: input width " + std::to_string(x.cols()) + " != " +
                                      std::to_string(in_dim()));
    Matrix y = x * weight.transpose();
    y.rowwise() += bias.row(0);
    return y;
  }
};

struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::Tanh;
  bool activate_output = true;

  Eigen::Index in_dim() const { return layers.front().in_dim(); }
  Eigen::Index out_dim() const { return layers.back().out_dim(); }
};

struct MlpCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
};

namespace detail {

inline Matrix activate(const Matrix& x, Activation a) {
  if (a == Activation::Tanh) return x.array().tanh().matrix();
  return x.cwiseMax(0.0);
}

// d act / d pre, expressed through the pre-activation.
inline Matrix activation_grad(const Matrix& pre, Activation a) {
  if (a == Activation::Tanh) return (1.0 - pre.array().tanh().square()).matrix();
  return (pre.array() > 0.0).cast<double>().matrix();
}

inline Linear zeros_like(const Linear& l) {
  return {Matrix::Zero(l.weight.rows(), l.weight.cols()), Matrix::Zero(1, l.bias.cols())};
}

inline Mlp zeros_like(const Mlp& m) {
  Mlp z{{}, m.activation, m.activate_output};
  for (const auto& l : m.layers) z.layers.push_back(zeros_like(l));
  return z;
}

inline Linear init_linear(int in, int out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Linear l{Matrix(out, in), Matrix(1, out)};
  for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = u(rng);
  return l;
}

inline Mlp init_mlp(const std::vector<int>& widths, Activation act, bool activate_output, std::mt19937_64& rng) {
  Mlp m{{}, act, activate_output};
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) m.layers.push_back(init_linear(widths[i], widths[i + 1], rng));
  return m;
}

}  // namespace detail

inline Matrix mlp_forward(const Mlp& mlp, const Matrix& x, MlpCache* cache = nullptr) {
  Matrix h = x;
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    Matrix pre = mlp.layers[i].forward(h);
    const bool last = i + 1 == mlp.layers.size();
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->pre.push_back(pre);
    }
    h = (!last || mlp.activate_output) ? detail::activate(pre, mlp.activation) : std::move(pre);
  }
  return h;
}

/// Accumulates parameter gradients into grad, returns d loss / d input.
inline Matrix mlp_backward(const Mlp& mlp, const MlpCache& cache, const Matrix& d_out, Mlp& grad) {
  Matrix d = d_out;
  for (std::size_t k = mlp.layers.size(); k-- > 0;) {
    const bool last = k + 1 == mlp.layers.size();
    if (!last || mlp.activate_output) d = d.cwiseProduct(detail::activation_grad(cache.pre[k], mlp.activation));
    grad.layers[k].weight.noalias() += d.transpose() * cache.inputs[k];
    grad.layers[k].bias += d.colwise().sum();
    d = d * mlp.layers[k].weight;
  }
  return d;
}

// ---------------------------------------------------------------------------

/// Shapes of the reference MLP expert.
struct ExpertArch {
  int input_dim = 16;
  std::vector<int> hidden{64};  ///< encoder hidden widths before the feature layer
  int feature_dim = 64;         ///< d
  int num_classes = 10;         ///< C
  int proj_dim = 32;            ///< d'
  Activation activation = Activation::Tanh;

  void validate() const {
    require(input_dim >= 1 && feature_dim >= 1 && proj_dim >= 1, "ExpertArch: dimensions must be positive");
    require(num_classes >= 2, "ExpertArch: need at least two classes");
    for (int h : hidden) require(h >= 1, "ExpertArch: hidden widths must be positive");
  }
};

struct Expert {
  int id = 0;
  Mlp encoder;     // x -> v
  Linear cls_head; // v -> z_cls
  Linear ref_head; // v -> z_ref
  Mlp con_head;    // v -> raw embedding (normalized outside)
};

/// Gradient / optimizer-state buffers share the expert layout.
using ExpertGrad = Expert;

inline Expert zeros_like(const Expert& e) {
  return {e.id, detail::zeros_like(e.encoder), detail::zeros_like(e.cls_head), detail::zeros_like(e.ref_head),
          detail::zeros_like(e.con_head)};
}

inline Expert make_expert(const ExpertArch& arch, int id, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  Expert e;
  e.id = id;
  std::vector<int> widths{arch.input_dim};
  widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
  widths.push_back(arch.feature_dim);
  e.encoder = detail::init_mlp(widths, arch.activation, true, rng);
  e.cls_head = detail::init_linear(arch.feature_dim, arch.num_classes, rng);
  e.ref_head = detail::init_linear(arch.feature_dim, arch.num_classes, rng);
  e.con_head = detail::init_mlp({arch.feature_dim, arch.feature_dim, arch.proj_dim}, arch.activation, false, rng);
  return e;
}

namespace detail {

template <class M, class F>
void visit_mlp(const std::string& prefix, M& mlp, F& f) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    f(prefix + "." + std::to_string(i) + ".weight", mlp.layers[i].weight);
    f(prefix + "." + std::to_string(i) + ".bias", mlp.layers[i].bias);
  }
}

template <class L, class F>
void visit_linear(const std::string& prefix, L& l, F& f) {
  f(prefix + ".weight", l.weight);
  f(prefix + ".bias", l.bias);
}

}  // namespace detail

/// Visits every parameter tensor of an expert in a fixed order with its name.
template <class E, class F>
  requires std::same_as<std::remove_const_t<E>, Expert>
void for_each_param(E& e, F&& f) {
  detail::visit_mlp("encoder", e.encoder, f);
  detail::visit_linear("cls", e.cls_head, f);
  detail::visit_linear("ref", e.ref_head, f);
  detail::visit_mlp("con", e.con_head, f);
}

inline std::vector<Matrix*> param_list(Expert& e) {
  std::vector<Matrix*> out;
  for_each_param(e, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

inline std::vector<const Matrix*> param_list(const Expert& e) {
  std::vector<const Matrix*> out;
  for_each_param(e, [&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

// ---------------------------------------------------------------------------

inline constexpr double kUnitNormTol = 1e-6;

/// e / ||e||_2; zero vectors raise DegenerateEmbedding.
inline Row normalize_embed(RowRef e) {
  const double n = e.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw DegenerateEmbedding("normalize_embed: zero or non-finite embedding");
  return e / n;
}

inline Matrix normalize_rows(const Matrix& raw) {
  Matrix out(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) out.row(i) = normalize_embed(raw.row(i));
  return out;
}

inline bool is_unit(RowRef e, double tol = kUnitNormTol) { return std::abs(e.norm() - 1.0) <= tol; }

struct ExpertOutputs {
  Matrix v;      // N x d
  Matrix z_cls;  // N x C
  Matrix z_ref;  // N x C
  Matrix e;      // N x d', unit rows
};

struct ExpertForward {
  ExpertOutputs out;
  MlpCache encoder_cache;
  MlpCache con_cache;
  Matrix e_raw;
};

inline ExpertForward forward_expert_cached(const Expert& expert, const Matrix& x) {
  require(x.cols() == expert.encoder.in_dim(), "forward_expert: input dimension " + std::to_string(x.cols()) +
                                                   " does not match encoder " +
                                                   std::to_string(expert.encoder.in_dim()));
  ExpertForward f;
  f.out.v = mlp_forward(expert.encoder, x, &f.encoder_cache);
  f.out.z_cls = expert.cls_head.forward(f.out.v);
  f.out.z_ref = expert.ref_head.forward(f.out.v);
  f.e_raw = mlp_forward(expert.con_head, f.out.v, &f.con_cache);
  f.out.e = normalize_rows(f.e_raw);
  return f;
}

inline ExpertOutputs forward_expert(const Expert& expert, const Matrix& x) {
  return forward_expert_cached(expert, x).out;
}

/// Inference path: encoder + cls head only.
inline Matrix cls_logits(const Expert& expert, const Matrix& x) {
  require(x.cols() == expert.encoder.in_dim(), "cls_logits: input dimension mismatch");
  return expert.cls_head.forward(mlp_forward(expert.encoder, x));
}

/// Upstream gradients on each forward output; empty matrices mean "no gradient".
struct OutputGrads {
  Matrix v;
  Matrix z_cls;
  Matrix z_ref;
  Matrix e;
};

/// Backward through normalization e = u/||u||.
inline Matrix normalize_backward(const Matrix& e, const Matrix& raw, const Matrix& d_e) {
  Matrix d_raw(e.rows(), e.cols());
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    const double dot = e.row(i).dot(d_e.row(i));
    d_raw.row(i) = (d_e.row(i) - dot * e.row(i)) / raw.row(i).norm();
  }
  return d_raw;
}

/// Accumulates parameter gradients of expert for the given upstream gradients.
inline void backward_expert(const Expert& expert, const ExpertForward& fwd, const OutputGrads& up, ExpertGrad& grad) {
  const auto& v = fwd.out.v;
  Matrix d_v = up.v.size() ? up.v : Matrix::Zero(v.rows(), v.cols());
  auto head = [&](const Linear& l, const Matrix& dz, Linear& g) {
    if (!dz.size()) return;
    g.weight.noalias() += dz.transpose() * v;
    g.bias += dz.colwise().sum();
    d_v.noalias() += dz * l.weight;
  };
  head(expert.cls_head, up.z_cls, grad.cls_head);
  head(expert.ref_head, up.z_ref, grad.ref_head);
  if (up.e.size()) {
    const Matrix d_raw = normalize_backward(fwd.out.e, fwd.e_raw, up.e);
    d_v += mlp_backward(expert.con_head, fwd.con_cache, d_raw, grad.con_head);
  }
  mlp_backward(expert.encoder, fwd.encoder_cache, d_v, grad.encoder);
}

// ---------------------------------------------------------------------------

/// Gradient-free moving-average copy of encoder + projection head.
struct MomentumTwin {
  Mlp encoder;
  Mlp con_head;
  double momentum = 0.999;
};

inline MomentumTwin make_twin(const Expert& e, double momentum) {
  require(momentum >= 0.0 && momentum < 1.0, "MomentumTwin: momentum must lie in [0, 1)");
  return {e.encoder, e.con_head, momentum};
}

namespace detail {

inline void ema_mlp(Mlp& shadow, const Mlp& online, double m) {
  require(shadow.layers.size() == online.layers.size(), "momentum_update: layer count mismatch");
  for (std::size_t i = 0; i < shadow.layers.size(); ++i) {
    auto& s = shadow.layers[i];
    const auto& o = online.layers[i];
    require(s.weight.rows() == o.weight.rows() && s.weight.cols() == o.weight.cols() &&
                s.bias.cols() == o.bias.cols(),
            "momentum_update: shape mismatch");
    s.weight = m * s.weight + (1.0 - m) * o.weight;
    s.bias = m * s.bias + (1.0 - m) * o.bias;
  }
}

}  // namespace detail

/// shadow <- m * shadow + (1 - m) * online, elementwise.
inline void momentum_update(MomentumTwin& twin, const Expert& online, double m) {
  require(m >= 0.0 && m < 1.0, "momentum_update: m must lie in [0, 1)");
  detail::ema_mlp(twin.encoder, online.encoder, m);
  detail::ema_mlp(twin.con_head, online.con_head, m);
}

/// Unit-norm key embeddings of the twin.
inline Matrix twin_keys(const MomentumTwin& twin, const Matrix& x) {
  require(x.cols() == twin.encoder.in_dim(), "twin_keys: input dimension mismatch");
  return normalize_rows(mlp_forward(twin.con_head, mlp_forward(twin.encoder, x)));
}

// ---------------------------------------------------------------------------

/// FIFO ring buffer of historical unit embeddings.
struct QueueState {
  Matrix buffer;  // capacity x d'
  int cursor = 0;
  std::int64_t pushed = 0;  // rows written since construction

  int capacity() const { return static_cast<int>(buffer.rows()); }
};

/// Queue pre-filled with seeded random unit vectors.
inline QueueState make_queue(int capacity, int dim, std::uint64_t seed) {
  require(capacity >= 1 && dim >= 1, "make_queue: capacity and dim must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  QueueState q;
  q.buffer.resize(capacity, dim);
  for (int r = 0; r < capacity; ++r) {
    Row g(dim);
    do {
      for (int j = 0; j < dim; ++j) g(j) = normal(rng);
    } while (g.norm() == 0.0);
    q.buffer.row(r) = g / g.norm();
  }
  return q;
}

inline void queue_push(QueueState& q, const Matrix& embeddings) {
  require(embeddings.cols() == q.buffer.cols(), "queue_push: embedding width mismatch");
  require(embeddings.rows() <= q.capacity(), "queue_push: batch larger than queue capacity");
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i)
    require(is_unit(embeddings.row(i)), "queue_push: embedding row " + std::to_string(i) + " is not unit-norm");
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    q.buffer.row(q.cursor) = embeddings.row(i);
    q.cursor = (q.cursor + 1) % q.capacity();
  }
  q.pushed += embeddings.rows();
}

}  // namespace ecl
