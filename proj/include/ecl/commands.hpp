// SPDX-License-Identifier: Apache-2.0
#pragma once

// Batch commands behind the `ecl` executable. Each writes into the run
// directory <out_dir>/<run_name>:
//
//   config.resolved  dataset.csv  counts.json  history.csv  ckpt.bin
//   metrics.json  reliability.csv  confusion.csv  confusion_log.csv
//   pred_histogram.csv  features_expert<k>.csv  landscape.csv

#include "ecl/checkpoint.hpp"
#include "ecl/collab.hpp"
#include "ecl/config.hpp"
#include "ecl/ltdata.hpp"
#include "ecl/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace ecl::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericalAbort = 4 };

inline fs::path run_dir(const ExperimentConfig& cfg) { return fs::path(cfg.out_dir) / cfg.run_name; }

inline fs::path dataset_file(const ExperimentConfig& cfg) {
  return cfg.dataset_path.empty() ? run_dir(cfg) / "dataset.csv" : fs::path(cfg.dataset_path);
}

namespace detail {

inline fs::path prepare_run_dir(const ExperimentConfig& cfg) {
  const auto dir = run_dir(cfg);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

template <class F>
void write_file(const fs::path& path, F&& body) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  body(os);
  if (!os) throw DataError("write failed: " + path.string());
}

inline void echo_config(const fs::path& dir, const ExperimentConfig& cfg) {
  write_file(dir / "config.resolved", [&](std::ostream& os) { os << resolved_config(cfg); });
}

inline std::string list(const std::vector<int>& v) {
  std::string s = "{";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + "}";
}

inline ModelSelection parse_selection(const std::string& s) {
  if (s == "ensemble") return ModelSelection::ensemble();
  return ModelSelection::single(std::stoi(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline void cmd_make_dataset(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  Dataset ds;
  try {
    ds = build_synthetic_lt_dataset(cfg.dataset, cfg.input_dim, cfg.separation, cfg.test_per_class);
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  const auto dir = detail::prepare_run_dir(cfg);
  const auto counts = make_class_counts(cfg.dataset);
  save_dataset_csv(dataset_file(cfg).string(), ds);
  detail::write_file(dir / "counts.json",
                     [&](std::ostream& os) { os << counts_json(counts, cfg.dataset.gamma).dump() << '\n'; });
  detail::echo_config(dir, cfg);
  const auto g = group_classes(counts);
  log << "wrote " << dataset_file(cfg).string() << " (" << ds.train.size() << " train / " << ds.test.size()
      << " test rows)\n"
      << "many=" << detail::list(g.many) << " medium=" << detail::list(g.medium) << " few=" << detail::list(g.few)
      << '\n';
}

inline Dataset load_run_dataset(const ExperimentConfig& cfg) {
  const auto path = dataset_file(cfg);
  if (!fs::exists(path)) throw DataError("dataset not found: " + path.string());
  return load_dataset_csv(path.string());
}

inline void write_history_csv(std::ostream& os, const std::vector<LossBreakdown>& history) {
  os << "epoch,sup,kd_logit,kd_feature,con,total\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    const auto& b = history[e];
    os << e + 1 << ',' << format_double(b.sup) << ',' << format_double(b.kd_logit) << ','
       << format_double(b.kd_feature) << ',' << format_double(b.con) << ',' << format_double(b.total) << '\n';
  }
}

inline TrainState cmd_train(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  const Dataset ds = load_run_dataset(cfg);
  const auto counts = ds.train_counts();
  for (int c : counts)
    if (c < 1) throw DataError("training split has an empty class; cannot form a prior");
  TrainConfig tc;
  ExpertArch arch;
  try {
    tc = cfg.train_config(counts);
    arch = cfg.arch(ds.num_classes, ds.dim);
    tc.validate();
    arch.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  TrainState state = fit(ds, arch, tc);
  const auto dir = detail::prepare_run_dir(cfg);
  save_checkpoint((dir / "ckpt.bin").string(), make_checkpoint(state));
  detail::write_file(dir / "history.csv", [&](std::ostream& os) { write_history_csv(os, state.epoch_history); });
  detail::echo_config(dir, cfg);
  log << "trained " << state.num_experts() << " expert(s) for " << cfg.epochs << " epoch(s), " << state.step
      << " steps";
  if (!state.epoch_history.empty()) log << ", final total loss " << state.epoch_history.back().total;
  log << '\n';
  return state;
}

struct EvalOptions {
  std::optional<ModelSelection> selection;  // default from eval.model
  std::optional<double> posthoc_tau;        // default from eval.posthoc_tau
  std::optional<std::string> checkpoint;    // default <run dir>/ckpt.bin
  std::optional<std::string> dataset;       // default dataset_file(cfg)
};

namespace detail {

struct EvalInputs {
  std::vector<Expert> experts;
  Dataset ds;
  ClassPrior prior;
  ModelSelection sel;
  double posthoc_tau;
};

inline EvalInputs load_eval_inputs(const ExperimentConfig& cfg, const EvalOptions& opt) {
  EvalInputs in;
  const auto ckpt = opt.checkpoint.value_or((run_dir(cfg) / "ckpt.bin").string());
  in.experts = inference_experts(load_checkpoint(ckpt));
  const auto ds_path = opt.dataset.value_or(dataset_file(cfg).string());
  if (!fs::exists(ds_path)) throw DataError("dataset not found: " + ds_path);
  in.ds = load_dataset_csv(ds_path);
  const auto& e0 = in.experts.front();
  if (e0.encoder.in_dim() != in.ds.dim || e0.cls_head.out_dim() != in.ds.num_classes)
    throw DataError("checkpoint and dataset are incompatible (C or d differ)");
  if (in.ds.test.size() == 0) throw DataError("dataset has an empty test split");
  try {
    in.prior = cfg.prior(in.ds.train_counts());
    in.sel = opt.selection.value_or(parse_selection(cfg.eval_model));
  } catch (const InvalidArgument& e) {
    throw DataError(e.what());
  }
  in.posthoc_tau = opt.posthoc_tau.value_or(cfg.posthoc_tau);
  if (in.sel.expert && (*in.sel.expert < 0 || *in.sel.expert >= static_cast<int>(in.experts.size())))
    throw ConfigError("expert index " + std::to_string(*in.sel.expert) + " out of range for K=" +
                      std::to_string(in.experts.size()));
  return in;
}

}  // namespace detail

inline nlohmann::json cmd_eval(const ExperimentConfig& cfg, const EvalOptions& opt = {},
                               std::ostream& log = std::cout) {
  const auto in = detail::load_eval_inputs(cfg, opt);
  const auto& test = in.ds.test;
  const auto score = score_split(in.experts, in.sel, test, in.prior, in.posthoc_tau);
  const auto groups = group_classes(in.ds.train_counts());
  MetricsReport report = evaluate(score.probs, test.y, groups);
  const auto calib = ece(score.probs, test.y, cfg.ece_bins);
  report.ece = calib.ece;
  report.ece_binned = calib.ece_binned;

  std::vector<Matrix> features;
  for (const auto& e : in.experts) features.push_back(mlp_forward(e.encoder, test.x));
  nlohmann::json distances = nlohmann::json::object();
  nlohmann::json distance_means = nlohmann::json::object();
  for (std::size_t m = 0; m < features.size(); ++m)
    for (std::size_t n = m + 1; n < features.size(); ++n) {
      const auto d = class_feature_distance(features[m], features[n], test.y, in.ds.num_classes);
      nlohmann::json row = nlohmann::json::array();
      for (const auto& v : d) row.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
      const auto key = std::to_string(m) + "-" + std::to_string(n);
      distances[key] = row;
      distance_means[key] = mean_present(d);
    }

  nlohmann::json j = to_json(report);
  j["mean_loss"] = score.mean_loss;
  j["ece_bins"] = cfg.ece_bins;
  j["feature_distance"] = distances;
  j["feature_distance_mean"] = distance_means;

  const auto dir = detail::prepare_run_dir(cfg);
  detail::write_file(dir / "metrics.json", [&](std::ostream& os) { os << j.dump(2) << '\n'; });
  detail::write_file(dir / "reliability.csv", [&](std::ostream& os) { write_reliability_csv(os, calib.bins); });
  detail::write_file(dir / "confusion.csv", [&](std::ostream& os) { write_confusion_csv(os, report.confusion); });
  detail::write_file(dir / "confusion_log.csv",
                     [&](std::ostream& os) { write_confusion_csv(os, report.confusion, true); });
  detail::write_file(dir / "pred_histogram.csv",
                     [&](std::ostream& os) { write_histogram_csv(os, report.pred_histogram); });
  for (std::size_t k = 0; k < features.size(); ++k)
    detail::write_file(dir / ("features_expert" + std::to_string(k) + ".csv"), [&](std::ostream& os) {
      os << "class";
      for (Eigen::Index c = 0; c < features[k].cols(); ++c) os << ",f" << c;
      os << '\n';
      for (Eigen::Index t = 0; t < features[k].rows(); ++t) {
        os << test.y[static_cast<std::size_t>(t)];
        for (Eigen::Index c = 0; c < features[k].cols(); ++c) os << ',' << format_double(features[k](t, c));
        os << '\n';
      }
    });
  log << (in.sel.expert ? "expert " + std::to_string(*in.sel.expert) : std::string("ensemble")) << ": top1=" << report.top1 << " ece=" << report.ece
      << " mean_loss=" << score.mean_loss << '\n';
  return j;
}

struct LandscapeOptions {
  EvalOptions eval;
  std::optional<std::vector<double>> levels;  // default eval.landscape_levels
  std::optional<int> repeats;                 // default eval.landscape_repeats
};

inline LandscapeScan cmd_landscape(const ExperimentConfig& cfg, const LandscapeOptions& opt = {},
                                   std::ostream& log = std::cout) {
  const auto in = detail::load_eval_inputs(cfg, opt.eval);
  LandscapeScan scan;
  try {
    scan = landscape_scan(in.experts, in.sel, in.ds.test, opt.levels.value_or(cfg.landscape_levels),
                          opt.repeats.value_or(cfg.landscape_repeats), cfg.seed, in.prior, in.posthoc_tau);
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  const auto dir = detail::prepare_run_dir(cfg);
  detail::write_file(dir / "landscape.csv", [&](std::ostream& os) { write_landscape_csv(os, scan); });
  log << "landscape: " << scan.noise_levels.size() << " level(s) x " << scan.repeats << " draw(s)\n";
  return scan;
}

/// Writes a copy of a checkpoint holding only the inference tensors.
inline void cmd_strip_checkpoint(const std::string& in, const std::string& out) {
  save_checkpoint(out, strip_training_tensors(load_checkpoint(in)));
}

}  // namespace ecl::cli
