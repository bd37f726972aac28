// SPDX-License-Identifier: Apache-2.0
//
// ecl: make-dataset | train | eval | landscape | strip-checkpoint
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.

#include "ecl/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

ecl::ExperimentConfig resolve_config(const std::string& path, const std::string& out, const std::optional<long long>& seed,
                                     const std::vector<std::string>& overrides) {
  auto cfg = path.empty() ? ecl::ExperimentConfig{} : ecl::load_config(path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ecl::ConfigError("--set expects key=value, got '" + kv + "'");
    ecl::set_config_value(cfg, ecl::detail::trim(kv.substr(0, eq)), ecl::detail::trim(kv.substr(eq + 1)));
  }
  if (!out.empty()) cfg.out_dir = out;
  if (seed) cfg.seed = static_cast<std::uint64_t>(*seed);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Collaborative multi-expert training for long-tailed recognition"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<long long> seed;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "Experiment config (key = value)");
  app.add_option("--out", out_dir, "Output root; runs go to <out>/<run.name>");
  app.add_option("--seed", seed, "Training / evaluation seed");
  app.add_option("--set", overrides, "Config override key=value (repeatable)");

  auto* make = app.add_subcommand("make-dataset", "Generate the synthetic long-tailed dataset");
  auto* train = app.add_subcommand("train", "Train the experts and write ckpt.bin + history.csv");

  auto add_eval_flags = [](CLI::App* cmd, std::optional<int>& expert, bool& ensemble, std::optional<double>& tau,
                           std::string& ckpt, std::string& data) {
    auto* e = cmd->add_option("--expert", expert, "Evaluate a single expert");
    auto* en = cmd->add_flag("--ensemble", ensemble, "Evaluate the logit-averaged ensemble");
    e->excludes(en);
    cmd->add_option("--posthoc-tau", tau, "Post-hoc prior adjustment strength");
    cmd->add_option("--checkpoint", ckpt, "Checkpoint path (default <run>/ckpt.bin)");
    cmd->add_option("--dataset", data, "Dataset path (default from config)");
  };

  std::optional<int> eval_expert, land_expert;
  bool eval_ensemble = false, land_ensemble = false;
  std::optional<double> eval_tau, land_tau;
  std::string eval_ckpt, eval_data, land_ckpt, land_data;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_eval_flags(eval, eval_expert, eval_ensemble, eval_tau, eval_ckpt, eval_data);

  auto* land = app.add_subcommand("landscape", "Loss/accuracy under filter-normalized weight noise");
  add_eval_flags(land, land_expert, land_ensemble, land_tau, land_ckpt, land_data);
  std::vector<double> levels;
  std::optional<int> repeats;
  land->add_option("--levels", levels, "Noise levels, ascending")->delimiter(',');
  land->add_option("--repeats", repeats, "Perturbation draws per level");

  auto* strip = app.add_subcommand("strip-checkpoint", "Copy a checkpoint keeping only inference tensors");
  std::string strip_in, strip_out;
  strip->add_option("input", strip_in)->required();
  strip->add_option("output", strip_out)->required();

  CLI11_PARSE(app, argc, argv);

  auto eval_options = [](const std::optional<int>& expert, bool ensemble, const std::optional<double>& tau,
                         const std::string& ckpt, const std::string& data) {
    ecl::cli::EvalOptions o;
    if (expert) o.selection = ecl::ModelSelection::single(*expert);
    if (ensemble) o.selection = ecl::ModelSelection::ensemble();
    o.posthoc_tau = tau;
    if (!ckpt.empty()) o.checkpoint = ckpt;
    if (!data.empty()) o.dataset = data;
    return o;
  };

  try {
    const auto cfg = resolve_config(config_path, out_dir, seed, overrides);
    if (*make) {
      ecl::cli::cmd_make_dataset(cfg);
    } else if (*train) {
      ecl::cli::cmd_train(cfg);
    } else if (*eval) {
      ecl::cli::cmd_eval(cfg, eval_options(eval_expert, eval_ensemble, eval_tau, eval_ckpt, eval_data));
    } else if (*land) {
      ecl::cli::LandscapeOptions o;
      o.eval = eval_options(land_expert, land_ensemble, land_tau, land_ckpt, land_data);
      if (!levels.empty()) o.levels = levels;
      o.repeats = repeats;
      ecl::cli::cmd_landscape(cfg, o);
    } else if (*strip) {
      ecl::cli::cmd_strip_checkpoint(strip_in, strip_out);
    }
  } catch (const ecl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return ecl::cli::kConfigError;
  } catch (const ecl::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return ecl::cli::kNumericalAbort;
  } catch (const ecl::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return ecl::cli::kDataError;
  } catch (const ecl::InvalidArgument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return ecl::cli::kConfigError;
  }
  return ecl::cli::kOk;
}
