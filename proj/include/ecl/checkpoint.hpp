// SPDX-License-Identifier: Apache-2.0
#pragma once

// "ecl-ckpt v1" archive: a single binary file holding a JSON manifest and a
// list of named row-major float64 tensors.
//
//   bytes   content
//   8       magic "ECLCKPT1"
//   8       manifest length L (u64 little-endian)
//   L       manifest JSON (UTF-8)
//   8       tensor count T (u64)
//   T x     { u32 name length, name, u64 rows, u64 cols, rows*cols f64 }
//
// Tensor names: expert<k>/{encoder.<i>,cls,ref,con.<i>}.{weight,bias},
// twin<k>/{encoder.<i>,con.<i>}.{weight,bias}, queue<k>/buffer, queue<k>/state
// (1x2: cursor, rows pushed). Inference needs only expert<k>/encoder.* and
// expert<k>/cls.*.

#include "ecl/collab.hpp"
#include "ecl/core.hpp"
#include "ecl/expertnet.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace ecl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'E', 'C', 'L', 'C', 'K', 'P', 'T', '1'};
inline constexpr const char* kCheckpointFormat = "ecl-ckpt v1";

struct Checkpoint {
  nlohmann::json manifest;
  std::map<std::string, Matrix> tensors;  // ordered by name, so files are canonical

  bool operator==(const Checkpoint& o) const { return manifest == o.manifest && tensors == o.tensors; }
};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("checkpoint: truncated file");
  return v;
}

inline void add_mlp(Checkpoint& c, const std::string& prefix, const Mlp& m) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    c.tensors[prefix + "." + std::to_string(i) + ".weight"] = m.layers[i].weight;
    c.tensors[prefix + "." + std::to_string(i) + ".bias"] = m.layers[i].bias;
  }
}

inline const Matrix& tensor(const Checkpoint& c, const std::string& name) {
  auto it = c.tensors.find(name);
  if (it == c.tensors.end()) throw DataError("checkpoint: missing tensor '" + name + "'");
  return it->second;
}

inline Linear read_linear(const Checkpoint& c, const std::string& prefix) {
  Linear l{tensor(c, prefix + ".weight"), tensor(c, prefix + ".bias")};
  if (l.bias.rows() != 1 || l.bias.cols() != l.weight.rows())
    throw DataError("checkpoint: bias shape mismatch for '" + prefix + "'");
  return l;
}

inline Mlp read_mlp(const Checkpoint& c, const std::string& prefix, Activation act, bool activate_output) {
  Mlp m{{}, act, activate_output};
  for (std::size_t i = 0; c.tensors.count(prefix + "." + std::to_string(i) + ".weight"); ++i) {
    m.layers.push_back(read_linear(c, prefix + "." + std::to_string(i)));
    if (i > 0 && m.layers[i].in_dim() != m.layers[i - 1].out_dim())
      throw DataError("checkpoint: layer widths do not chain in '" + prefix + "'");
  }
  if (m.layers.empty()) throw DataError("checkpoint: no layers under '" + prefix + "'");
  return m;
}

inline std::string expert_prefix(int k) { return "expert" + std::to_string(k) + "/"; }

}  // namespace detail

inline Checkpoint make_checkpoint(const TrainState& s) {
  Checkpoint c;
  c.manifest = {{"format", kCheckpointFormat},
                {"K", s.num_experts()},
                {"d", s.arch.feature_dim},
                {"C", s.arch.num_classes},
                {"d_prime", s.arch.proj_dim},
                {"input_dim", s.arch.input_dim},
                {"hidden", s.arch.hidden},
                {"activation", to_string(s.arch.activation)},
                {"step", s.step}};
  for (int k = 0; k < s.num_experts(); ++k) {
    const auto ks = std::to_string(k);
    const auto& e = s.experts[static_cast<std::size_t>(k)];
    for_each_param(e, [&](const std::string& name, const Matrix& m) { c.tensors["expert" + ks + "/" + name] = m; });
    const auto& t = s.twins[static_cast<std::size_t>(k)];
    detail::add_mlp(c, "twin" + ks + "/encoder", t.encoder);
    detail::add_mlp(c, "twin" + ks + "/con", t.con_head);
    c.tensors["twin" + ks + "/momentum"] = Matrix::Constant(1, 1, t.momentum);
    const auto& q = s.queues[static_cast<std::size_t>(k)];
    c.tensors["queue" + ks + "/buffer"] = q.buffer;
    Matrix qs(1, 2);
    qs << q.cursor, static_cast<double>(q.pushed);
    c.tensors["queue" + ks + "/state"] = qs;
  }
  return c;
}

inline bool is_inference_tensor(const std::string& name) {
  if (name.rfind("expert", 0) != 0) return false;
  const auto slash = name.find('/');
  if (slash == std::string::npos) return false;
  const auto rest = name.substr(slash + 1);
  return rest.rfind("encoder.", 0) == 0 || rest.rfind("cls.", 0) == 0;
}

/// Drops the ref head, projection head, twins and queues.
inline Checkpoint strip_training_tensors(const Checkpoint& c) {
  Checkpoint out{c.manifest, {}};
  for (const auto& [name, m] : c.tensors)
    if (is_inference_tensor(name)) out.tensors.emplace(name, m);
  return out;
}

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::string manifest = c.manifest.dump();
  detail::put<std::uint64_t>(os, manifest.size());
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  detail::put<std::uint64_t>(os, c.tensors.size());
  for (const auto& [name, m] : c.tensors) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
    detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw DataError("checkpoint: bad magic");
  Checkpoint c;
  const auto mlen = detail::get<std::uint64_t>(is);
  if (mlen > (1u << 24)) throw DataError("checkpoint: implausible manifest size");
  std::string manifest(mlen, '\0');
  if (!is.read(manifest.data(), static_cast<std::streamsize>(mlen))) throw DataError("checkpoint: truncated manifest");
  try {
    c.manifest = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (c.manifest.value("format", "") != kCheckpointFormat) throw DataError("checkpoint: unsupported format");
  const auto count = detail::get<std::uint64_t>(is);
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto nlen = detail::get<std::uint32_t>(is);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw DataError("checkpoint: truncated tensor name");
    const auto rows = detail::get<std::uint64_t>(is);
    const auto cols = detail::get<std::uint64_t>(is);
    if (rows > (1u << 24) || cols > (1u << 24)) throw DataError("checkpoint: implausible tensor shape");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    if (!is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double))))
      throw DataError("checkpoint: truncated tensor '" + name + "'");
    c.tensors.emplace(std::move(name), std::move(m));
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_checkpoint(os, c);
  if (!os) throw DataError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  return read_checkpoint(is);
}

inline ExpertArch arch_from_manifest(const nlohmann::json& m) {
  try {
    ExpertArch a;
    a.input_dim = m.at("input_dim").get<int>();
    a.hidden = m.at("hidden").get<std::vector<int>>();
    a.feature_dim = m.at("d").get<int>();
    a.num_classes = m.at("C").get<int>();
    a.proj_dim = m.at("d_prime").get<int>();
    a.activation = parse_activation(m.at("activation").get<std::string>());
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad manifest: ") + e.what());
  }
}

/// Experts with only the inference path populated (ref/con heads left empty).
inline std::vector<Expert> inference_experts(const Checkpoint& c) {
  const auto arch = arch_from_manifest(c.manifest);
  const int k_count = c.manifest.at("K").get<int>();
  std::vector<Expert> experts;
  for (int k = 0; k < k_count; ++k) {
    const auto p = detail::expert_prefix(k);
    Expert e;
    e.id = k;
    e.encoder = detail::read_mlp(c, p + "encoder", arch.activation, true);
    e.cls_head = detail::read_linear(c, p + "cls");
    if (e.encoder.in_dim() != arch.input_dim || e.encoder.out_dim() != arch.feature_dim ||
        e.cls_head.in_dim() != arch.feature_dim || e.cls_head.out_dim() != arch.num_classes)
      throw DataError("checkpoint: expert " + std::to_string(k) + " shapes disagree with manifest");
    experts.push_back(std::move(e));
  }
  return experts;
}

/// Full training state (optimizer velocity reset to zero, loss history not stored).
inline TrainState state_from_checkpoint(const Checkpoint& c) {
  TrainState s;
  s.arch = arch_from_manifest(c.manifest);
  s.step = c.manifest.value("step", std::int64_t{0});
  s.experts = inference_experts(c);
  for (auto& e : s.experts) {
    const auto p = detail::expert_prefix(e.id);
    const auto ks = std::to_string(e.id);
    e.ref_head = detail::read_linear(c, p + "ref");
    e.con_head = detail::read_mlp(c, p + "con", s.arch.activation, false);
    MomentumTwin t{detail::read_mlp(c, "twin" + ks + "/encoder", s.arch.activation, true),
                   detail::read_mlp(c, "twin" + ks + "/con", s.arch.activation, false),
                   detail::tensor(c, "twin" + ks + "/momentum")(0, 0)};
    s.twins.push_back(std::move(t));
    QueueState q;
    q.buffer = detail::tensor(c, "queue" + ks + "/buffer");
    const Matrix& qs = detail::tensor(c, "queue" + ks + "/state");
    q.cursor = static_cast<int>(qs(0, 0));
    q.pushed = static_cast<std::int64_t>(qs(0, 1));
    s.queues.push_back(std::move(q));
    s.velocity.push_back(zeros_like(e));
  }
  return s;
}

}  // namespace ecl
