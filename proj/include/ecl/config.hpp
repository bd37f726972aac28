// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat `key = value` experiment configuration with dotted section prefixes.
// Unknown keys are rejected; every key has a default. `#` starts a comment.

#include "ecl/collab.hpp"
#include "ecl/core.hpp"
#include "ecl/expertnet.hpp"
#include "ecl/losses.hpp"
#include "ecl/ltdata.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace ecl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  std::string run_name = "ecl";
  std::string out_dir = "runs";
  std::uint64_t seed = 0;

  // dataset
  LongTailSpec dataset{10, 500, 100.0, 0};
  int input_dim = 16;
  double separation = 3.0;
  int test_per_class = 100;
  std::string dataset_path;  // empty: <run dir>/dataset.csv

  // model
  std::vector<int> hidden{64};
  int feature_dim = 64;
  int proj_dim = 32;
  int queue_size = 1024;
  double twin_momentum = 0.999;
  Activation activation = Activation::Tanh;

  // train
  int experts = 3;
  int epochs = 50;
  int batch_size = 64;
  double learning_rate = 0.05;
  OptimizerKind optimizer = OptimizerKind::Momentum;
  double sgd_momentum = 0.9;
  double weight_decay = 5e-4;
  double jitter_sigma = 0.1;
  double tau_bc = 1.0;
  std::string target_prior = "uniform";  // or comma-separated weights
  KDConfig kd;

  // eval
  double posthoc_tau = 0.0;
  int ece_bins = 15;
  std::vector<double> landscape_levels{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  int landscape_repeats = 5;
  std::string eval_model = "ensemble";  // or an expert index

  ExpertArch arch(int num_classes, int input) const {
    ExpertArch a;
    a.input_dim = input;
    a.hidden = hidden;
    a.feature_dim = feature_dim;
    a.num_classes = num_classes;
    a.proj_dim = proj_dim;
    a.activation = activation;
    return a;
  }

  Row target_weights(int num_classes) const;
  ClassPrior prior(std::span<const int> train_counts) const;
  TrainConfig train_config(std::span<const int> train_counts) const;
};

// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Shortest decimal that reads back to the same double.
inline std::string format_short(double x) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    out = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || !std::isfinite(out)) throw ConfigError(key + ": expected a number, got '" + v + "'");
  } else {
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_floating_point_v<T>)
      s += format_short(v[i]);
    else
      s += std::to_string(v[i]);
  }
  return s;
}

struct ConfigKey {
  std::string name;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class T>
ConfigKey number_key(std::string name, T ExperimentConfig::*field) {
  return {name,
          [field](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_short(c.*field);
            else
              return std::to_string(c.*field);
          },
          [field, name](ExperimentConfig& c, const std::string& v) { c.*field = parse_number<T>(name, v); }};
}

template <class F, class G>
ConfigKey custom_key(std::string name, F get, G set) {
  return {std::move(name), get, set};
}

inline const std::vector<ConfigKey>& config_keys() {
  using C = ExperimentConfig;
  static const std::vector<ConfigKey> keys = {
      custom_key("run.name", [](const C& c) { return c.run_name; }, [](C& c, const std::string& v) { c.run_name = v; }),
      custom_key("run.out_dir", [](const C& c) { return c.out_dir; },
                 [](C& c, const std::string& v) { c.out_dir = v; }),
      number_key("seed", &C::seed),

      custom_key("dataset.num_classes", [](const C& c) { return std::to_string(c.dataset.num_classes); },
                 [](C& c, const std::string& v) { c.dataset.num_classes = parse_number<int>("dataset.num_classes", v); }),
      custom_key("dataset.n_max", [](const C& c) { return std::to_string(c.dataset.n_max); },
                 [](C& c, const std::string& v) { c.dataset.n_max = parse_number<int>("dataset.n_max", v); }),
      custom_key("dataset.gamma", [](const C& c) { return format_short(c.dataset.gamma); },
                 [](C& c, const std::string& v) { c.dataset.gamma = parse_number<double>("dataset.gamma", v); }),
      custom_key("dataset.seed", [](const C& c) { return std::to_string(c.dataset.seed); },
                 [](C& c, const std::string& v) { c.dataset.seed = parse_number<std::uint64_t>("dataset.seed", v); }),
      number_key("dataset.feature_dim", &C::input_dim),
      number_key("dataset.separation", &C::separation),
      number_key("dataset.test_per_class", &C::test_per_class),
      custom_key("dataset.path", [](const C& c) { return c.dataset_path; },
                 [](C& c, const std::string& v) { c.dataset_path = v; }),

      custom_key("model.hidden", [](const C& c) { return join(c.hidden); },
                 [](C& c, const std::string& v) { c.hidden = parse_list<int>("model.hidden", v); }),
      number_key("model.feature_dim", &C::feature_dim),
      number_key("model.proj_dim", &C::proj_dim),
      number_key("model.queue_size", &C::queue_size),
      number_key("model.momentum", &C::twin_momentum),
      custom_key("model.activation", [](const C& c) { return to_string(c.activation); },
                 [](C& c, const std::string& v) {
                   try {
                     c.activation = parse_activation(v);
                   } catch (const InvalidArgument& e) {
                     throw ConfigError(std::string("model.activation: ") + e.what());
                   }
                 }),

      number_key("train.experts", &C::experts),
      number_key("train.epochs", &C::epochs),
      number_key("train.batch_size", &C::batch_size),
      number_key("train.lr", &C::learning_rate),
      custom_key("train.optimizer", [](const C& c) { return to_string(c.optimizer); },
                 [](C& c, const std::string& v) {
                   try {
                     c.optimizer = parse_optimizer(v);
                   } catch (const InvalidArgument& e) {
                     throw ConfigError(std::string("train.optimizer: ") + e.what());
                   }
                 }),
      number_key("train.sgd_momentum", &C::sgd_momentum),
      number_key("train.weight_decay", &C::weight_decay),
      number_key("train.jitter_sigma", &C::jitter_sigma),
      number_key("train.tau_bc", &C::tau_bc),
      custom_key("train.target_prior", [](const C& c) { return c.target_prior; },
                 [](C& c, const std::string& v) {
                   if (v != "uniform") parse_list<double>("train.target_prior", v);
                   c.target_prior = v;
                 }),
      custom_key("train.alpha", [](const C& c) { return format_short(c.kd.alpha); },
                 [](C& c, const std::string& v) { c.kd.alpha = parse_number<double>("train.alpha", v); }),
      custom_key("train.beta", [](const C& c) { return format_short(c.kd.beta); },
                 [](C& c, const std::string& v) { c.kd.beta = parse_number<double>("train.beta", v); }),
      custom_key("train.tau_kd", [](const C& c) { return format_short(c.kd.tau_kd); },
                 [](C& c, const std::string& v) { c.kd.tau_kd = parse_number<double>("train.tau_kd", v); }),
      custom_key("train.tau_con", [](const C& c) { return format_short(c.kd.tau_con); },
                 [](C& c, const std::string& v) { c.kd.tau_con = parse_number<double>("train.tau_con", v); }),
      custom_key("train.prob_floor", [](const C& c) { return format_short(c.kd.prob_floor); },
                 [](C& c, const std::string& v) { c.kd.prob_floor = parse_number<double>("train.prob_floor", v); }),
      custom_key("train.bkt_scope", [](const C& c) { return to_string(c.kd.bkt_scope); },
                 [](C& c, const std::string& v) {
                   try {
                     c.kd.bkt_scope = parse_bkt_scope(v);
                   } catch (const InvalidArgument& e) {
                     throw ConfigError(std::string("train.bkt_scope: ") + e.what());
                   }
                 }),
      custom_key("train.weight_feature_kd", [](const C& c) { return std::string(c.kd.weight_feature_kd ? "true" : "false"); },
                 [](C& c, const std::string& v) { c.kd.weight_feature_kd = parse_bool("train.weight_feature_kd", v); }),

      number_key("eval.posthoc_tau", &C::posthoc_tau),
      number_key("eval.ece_bins", &C::ece_bins),
      custom_key("eval.landscape_levels", [](const C& c) { return join(c.landscape_levels); },
                 [](C& c, const std::string& v) {
                   c.landscape_levels = parse_list<double>("eval.landscape_levels", v);
                 }),
      number_key("eval.landscape_repeats", &C::landscape_repeats),
      custom_key("eval.model", [](const C& c) { return c.eval_model; },
                 [](C& c, const std::string& v) {
                   if (v != "ensemble") parse_number<int>("eval.model", v);
                   c.eval_model = v;
                 }),
  };
  return keys;
}

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

inline ExperimentConfig parse_config(std::istream& is) {
  ExperimentConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config: " + path);
  return parse_config(is);
}

/// Every key with its resolved value, one per line, in a fixed order.
inline std::string resolved_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline Row ExperimentConfig::target_weights(int num_classes) const {
  if (target_prior == "uniform") return Row::Constant(num_classes, 1.0 / num_classes);
  const auto w = detail::parse_list<double>("train.target_prior", target_prior);
  if (static_cast<int>(w.size()) != num_classes)
    throw ConfigError("train.target_prior: expected " + std::to_string(num_classes) + " weights");
  Row p(num_classes);
  double total = 0.0;
  for (int i = 0; i < num_classes; ++i) {
    if (!(w[static_cast<std::size_t>(i)] > 0.0)) throw ConfigError("train.target_prior: weights must be positive");
    p(i) = w[static_cast<std::size_t>(i)];
    total += p(i);
  }
  return p / total;
}

inline ClassPrior ExperimentConfig::prior(std::span<const int> train_counts) const {
  ClassPrior p{compute_prior(train_counts), target_weights(static_cast<int>(train_counts.size())), tau_bc};
  p.validate();
  return p;
}

inline TrainConfig ExperimentConfig::train_config(std::span<const int> train_counts) const {
  TrainConfig t;
  t.experts = experts;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.learning_rate = learning_rate;
  t.ema_momentum = twin_momentum;
  t.queue_size = queue_size;
  t.jitter_sigma = jitter_sigma;
  t.prior = prior(train_counts);
  t.kd = kd;
  t.seed = seed;
  t.optimizer = optimizer;
  t.sgd_momentum = sgd_momentum;
  t.weight_decay = weight_decay;
  return t;
}

}  // namespace ecl
