#pragma once

// Command-line front end: simulate, train, eval, plot.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "suitein/dataio.hpp"
#include "suitein/errors.hpp"
#include "suitein/evaluator.hpp"
#include "suitein/network.hpp"
#include "suitein/simkit.hpp"
#include "suitein/trainer.hpp"

namespace suitein::cli {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kRunManifestFile = "run_manifest.json";

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigExit = 2, kIoExit = 3, kNonFiniteExit = 4 };

// ---------------------------------------------------------------------------
// Shared plumbing

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FilesystemError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

/// --seed wins, then SUITEIN_SEED, then the config's own seed.
inline std::optional<std::uint64_t> resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return flag;
  if (const char* env = std::getenv("SUITEIN_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(std::string("SUITEIN_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  return std::nullopt;
}

struct RunManifest {
  std::string command;
  std::vector<std::string> config_paths;
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;
  std::string started_at = utc_now();

  void write(const fs::path& path) const {
    const nlohmann::json j = {{"command", command},   {"config_paths", config_paths},
                              {"seed", seed},         {"outputs", outputs},
                              {"tool_version", kToolVersion}, {"started_at", started_at},
                              {"finished_at", utc_now()}};
    data::write_text_file(path, j.dump(2) + "\n");
  }
};

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FilesystemError("cannot create '" + dir.string() + "': " + ec.message());
}

inline fs::path sibling(const fs::path& file, const std::string& suffix) {
  return file.parent_path() / (file.stem().string() + suffix);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    const auto t = data::detail::trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training configuration file: TrainConfig keys plus "model" and "window".

struct TrainSetup {
  train::TrainConfig train;
  net::ModelConfig model;
  data::WindowOptions window;
};

inline TrainSetup train_setup_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainSetup s;
  s.train = train::train_config_from_json(j);
  if (j.contains("model")) s.model = net::model_config_from_json(j["model"]);
  try {
    if (j.contains("window")) {
      s.window.length = j["window"].value("length", s.window.length);
      s.window.stride = j["window"].value("stride", s.window.stride);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid window config: ") + e.what());
  }
  if (s.window.length == 0 || s.window.stride == 0) throw ConfigError("window length and stride must be positive");
  s.model.window_length = s.window.length;
  return s;
}

inline nlohmann::json to_json(const TrainSetup& s) {
  auto j = train::to_json(s.train);
  j["model"] = net::to_json(s.model);
  j["window"] = {{"length", s.window.length}, {"stride", s.window.stride}};
  return j;
}

inline data::WindowBatch load_windows(const fs::path& dataset, const std::string& split,
                                      const data::WindowOptions& opts) {
  data::WindowBatch all;
  for (const auto& bundle : data::load_split(dataset, split)) all.append(data::make_windows(bundle, opts));
  return all;
}

struct TrainRequest {
  fs::path data_dir;
  TrainSetup setup;
  std::vector<std::string> device_subset;  // empty means every dataset device
};

/// Loads the train/val windows and trains from a fresh initialisation.
inline train::TrainResult run_training(const TrainRequest& req, const train::EpochCallback& on_epoch = {}) {
  const auto& s = req.setup;
  auto train_w = load_windows(req.data_dir, "train", s.window);
  if (train_w.empty()) throw DegenerateInputError("train split of '" + req.data_dir.string() + "' has no windows");
  const auto val_w = load_windows(req.data_dir, "val", s.window);
  auto devices = train_w.device_ids;
  if (!req.device_subset.empty()) {
    for (const auto& id : req.device_subset) {
      if (std::find(devices.begin(), devices.end(), id) == devices.end()) {
        throw ConfigError("--device-subset names '" + id + "', which the dataset does not have");
      }
    }
    devices = req.device_subset;
  }
  const auto model = train::model_for(s.model, devices, s.window.length, s.train.ablation);
  return train::train(train_w, val_w.empty() ? nullptr : &val_w, net::init_params(model, s.train.seed), model,
                      s.train, on_epoch);
}

// ---------------------------------------------------------------------------
// SVG plot

inline std::string format_fixed(double v, int digits) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

/// Largest 1-2-5 step not exceeding `limit`.
inline double nice_length(double limit) {
  if (!(limit > 0)) return 1.0;
  const double base = std::pow(10.0, std::floor(std::log10(limit)));
  for (double m : {5.0, 2.0, 1.0})
    if (m * base <= limit) return m * base;
  return base;
}

inline std::string render_svg(const eval::Trajectory& pred, const eval::Trajectory& gt, double ate_m,
                              std::optional<double> rte_m, double interval_s) {
  constexpr double W = 640, H = 560, pad = 40, caption_h = 40;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto* t : {&pred, &gt}) {
    for (const auto& p : t->positions) {
      x0 = std::min(x0, p[0]);
      x1 = std::max(x1, p[0]);
      y0 = std::min(y0, p[1]);
      y1 = std::max(y1, p[1]);
    }
  }
  const double span = std::max({x1 - x0, y1 - y0, 1e-6});
  const double scale = std::min(W - 2 * pad, H - 2 * pad - caption_h) / span;
  auto sx = [&](double x) { return pad + (x - x0) * scale; };
  auto sy = [&](double y) { return H - pad - caption_h - (y - y0) * scale; };  // y up
  auto points = [&](const eval::Trajectory& t) {
    std::string s;
    for (const auto& p : t.positions) s += format_fixed(sx(p[0]), 2) + ',' + format_fixed(sy(p[1]), 2) + ' ';
    if (!s.empty()) s.pop_back();
    return s;
  };
  const double bar_m = nice_length(span / 4);
  const double bar_y = H - caption_h - 12;
  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n"
      << "  <rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
      << "  <polyline id=\"ground-truth\" fill=\"none\" stroke=\"#222222\" stroke-width=\"2\" points=\"" << points(gt)
      << "\"/>\n"
      << "  <polyline id=\"predicted\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" points=\"" << points(pred)
      << "\"/>\n"
      << "  <circle id=\"start\" cx=\"" << format_fixed(sx(gt.positions.front()[0]), 2) << "\" cy=\""
      << format_fixed(sy(gt.positions.front()[1]), 2) << "\" r=\"5\" fill=\"#2ca02c\"/>\n"
      << "  <line id=\"scale-bar\" x1=\"" << pad << "\" y1=\"" << bar_y << "\" x2=\""
      << format_fixed(pad + bar_m * scale, 2) << "\" y2=\"" << bar_y << "\" stroke=\"black\" stroke-width=\"3\"/>\n"
      << "  <text x=\"" << pad << "\" y=\"" << bar_y - 6 << "\" font-family=\"sans-serif\" font-size=\"12\">"
      << data::format_number(bar_m) << " m</text>\n"
      << "  <text id=\"caption\" x=\"" << W / 2 << "\" y=\"" << H - 14
      << "\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">ATE " << format_fixed(ate_m, 3)
      << " m, RTE " << (rte_m ? format_fixed(*rte_m, 3) + " m" : std::string("n/a")) << " ("
      << data::format_number(interval_s) << " s)</text>\n"
      << "</svg>\n";
  return svg.str();
}

// ---------------------------------------------------------------------------
// Commands

struct Options {
  // simulate
  fs::path sim_config, sim_out;
  // train
  fs::path data_dir, train_config, model_out;
  bool no_contrastive = false, no_aggregation = false;
  std::string device_subset, baseline_device;
  // eval
  fs::path model_path, eval_out;
  std::string split = "test";
  double rte_interval = 10.0;
  bool oracle = false;
  std::size_t jobs = 1, stride = 0;
  // plot
  fs::path pred_csv, gt_csv, svg_out;
  // shared
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

inline void cmd_simulate(const Options& o) {
  auto dc = o.sim_config.empty() ? sim::DatasetConfig{} : sim::dataset_config_from_json(read_json_file(o.sim_config));
  if (const auto seed = resolve_seed(o.seed)) dc.seed = *seed;
  RunManifest rm{"simulate", {}, dc.seed, {}};
  if (!o.sim_config.empty()) rm.config_paths.push_back(o.sim_config.string());
  const auto emitted = sim::emit_dataset(dc, o.sim_out);
  for (const auto& m : emitted.manifests) rm.outputs.push_back(m.string());
  rm.outputs.push_back(emitted.split_file.string());
  data::write_text_file(o.sim_out / "dataset_config.json", sim::to_json(dc).dump(2) + "\n");
  rm.outputs.push_back((o.sim_out / "dataset_config.json").string());
  rm.write(o.sim_out / kRunManifestFile);
  if (!o.quiet) std::cout << "wrote " << emitted.manifests.size() << " sequences to " << o.sim_out.string() << "\n";
}

inline void cmd_train(const Options& o) {
  TrainRequest req;
  req.data_dir = o.data_dir;
  req.setup = o.train_config.empty() ? TrainSetup{} : train_setup_from_json(read_json_file(o.train_config));
  auto& tc = req.setup.train;
  if (const auto seed = resolve_seed(o.seed)) tc.seed = *seed;
  if (o.no_contrastive) tc.ablation.use_contrastive = false;
  if (o.no_aggregation) tc.ablation.use_aggregation = false;
  if (!o.baseline_device.empty()) tc.ablation.baseline_device = o.baseline_device;
  req.device_subset = split_list(o.device_subset);
  if (!o.device_subset.empty() && req.device_subset.empty()) throw ConfigError("--device-subset is empty");

  const auto result = run_training(req, [&](const train::EpochLog& e) {
    if (!o.quiet) {
      std::cout << "epoch " << e.epoch << " total " << e.total << " vel " << e.vel << " val_mse " << e.val_mse
                << " (" << format_fixed(e.seconds, 1) << " s)\n";
    }
  });
  ensure_dir(o.model_out.parent_path().empty() ? fs::path(".") : o.model_out.parent_path());
  train::save_checkpoint(o.model_out, result.params, result.model);
  const auto log_path = sibling(o.model_out, ".train_log.csv");
  data::write_text_file(log_path, result.log.to_csv());
  const auto used_path = sibling(o.model_out, ".train_config.json");
  data::write_text_file(used_path, to_json(req.setup).dump(2) + "\n");
  RunManifest rm{"train", {}, tc.seed, {o.model_out.string(), log_path.string(), used_path.string()}};
  if (!o.train_config.empty()) rm.config_paths.push_back(o.train_config.string());
  rm.config_paths.push_back((o.data_dir / data::kSplitFile).string());
  rm.write(sibling(o.model_out, ".run_manifest.json"));
  if (!o.quiet) {
    std::cout << "wrote " << o.model_out.string() << " (best epoch " << result.log.best_epoch << ")\n";
  }
}

inline void cmd_eval(const Options& o) {
  if (!(o.rte_interval > 0)) throw ConfigError("--rte-interval must be positive");
  if (o.split != "train" && o.split != "val" && o.split != "test") {
    throw ConfigError("--split must be train, val or test (got '" + o.split + "')");
  }
  const auto ck = train::load_checkpoint(o.model_path);
  const auto bundles = data::load_split(o.data_dir, o.split);
  if (bundles.empty()) throw ConfigError("split '" + o.split + "' of '" + o.data_dir.string() + "' is empty");
  for (const auto& b : bundles) {
    for (const auto& id : ck.config.device_ids) {
      const auto ids = b.device_ids();
      if (std::find(ids.begin(), ids.end(), id) == ids.end()) {
        throw ConfigError("model expects device '" + id + "' but sequence '" + b.sequence_id + "' lacks it");
      }
    }
  }
  eval::EvalOptions opts;
  opts.stride = o.stride;
  opts.rte_interval_s = o.rte_interval;
  opts.oracle_velocities = o.oracle;
  const auto reports = eval::evaluate_all(ck.params, ck.config, bundles, opts, o.jobs);

  const fs::path out = (o.eval_out.empty() ? o.model_path.parent_path() / "eval" : o.eval_out) / o.split;
  ensure_dir(out);
  RunManifest rm{"eval", {o.model_path.string(), (o.data_dir / data::kSplitFile).string()}, 0, {}};
  for (const auto& r : reports) {
    auto j = eval::to_json(r);
    j["split"] = o.split;
    data::write_text_file(out / (r.sequence_id + ".json"), j.dump(2) + "\n");
    eval::write_trajectory_csv(out / (r.sequence_id + "_traj.csv"), r.predicted);
    rm.outputs.push_back((out / (r.sequence_id + ".json")).string());
    rm.outputs.push_back((out / (r.sequence_id + "_traj.csv")).string());
  }
  data::write_text_file(out / "aggregate.csv", eval::aggregate_csv(reports));
  rm.outputs.push_back((out / "aggregate.csv").string());
  rm.write(out / kRunManifestFile);
  if (!o.quiet) {
    for (const auto& r : reports) {
      std::cout << r.sequence_id << " ATE " << format_fixed(r.ate_m, 3) << " m RTE " << format_fixed(r.rte_m, 3)
                << " m\n";
    }
    std::cout << "mean ATE " << format_fixed(eval::mean_ate(reports), 3) << " m over " << reports.size()
              << " sequences; reports in " << out.string() << "\n";
  }
}

inline void cmd_plot(const Options& o) {
  const auto pred = eval::read_trajectory_csv(o.pred_csv);
  const auto gt = eval::read_trajectory_csv(o.gt_csv);
  if (pred.size() == 0 || gt.size() == 0) throw EvaluationError("plot needs non-empty trajectories");
  const double a = eval::ate(pred, gt);
  std::optional<double> r;
  try {
    r = eval::rte(pred, gt, o.rte_interval);
  } catch (const EvaluationError&) {
  }
  data::write_text_file(o.svg_out, render_svg(pred, gt, a, r, o.rte_interval));
  RunManifest rm{"plot", {o.pred_csv.string(), o.gt_csv.string()}, 0, {o.svg_out.string()}};
  rm.write(sibling(o.svg_out, ".run_manifest.json"));
  if (!o.quiet) std::cout << "wrote " << o.svg_out.string() << "\n";
}

// ---------------------------------------------------------------------------
// Entry point

inline int report(const std::string& what, int code) {
  std::cerr << "suitein: " << what << "\n";
  return code;
}

/// Parses arguments and runs one command; returns the process exit code.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Multi-device inertial odometry: simulate, train, eval, plot"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed_value = 0;
  auto add_seed = [&](CLI::App* sub) { return sub->add_option("--seed", seed_value, "Random seed (else SUITEIN_SEED)"); };
  app.add_flag("-q,--quiet", o.quiet, "Only print errors");

  auto* sim_cmd = app.add_subcommand("simulate", "Generate a synthetic dataset");
  sim_cmd->add_option("--config", o.sim_config, "Dataset config JSON (defaults if omitted)");
  sim_cmd->add_option("--out", o.sim_out, "Output dataset directory")->required();
  auto* sim_seed = add_seed(sim_cmd);

  auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset's train split");
  train_cmd->add_option("--data", o.data_dir, "Dataset directory")->required();
  train_cmd->add_option("--config", o.train_config, "Training config JSON (defaults if omitted)");
  train_cmd->add_option("--out", o.model_out, "Checkpoint path")->required();
  train_cmd->add_flag("--no-contrastive", o.no_contrastive, "Drop the contrastive and orthogonality terms");
  train_cmd->add_flag("--no-aggregation", o.no_aggregation, "Single-device baseline");
  train_cmd->add_option("--baseline-device", o.baseline_device, "Device for --no-aggregation");
  train_cmd->add_option("--device-subset", o.device_subset, "Comma-separated device ids to use");
  auto* train_seed = add_seed(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on one split");
  eval_cmd->add_option("--data", o.data_dir, "Dataset directory")->required();
  eval_cmd->add_option("--model", o.model_path, "Checkpoint path")->required();
  eval_cmd->add_option("--split", o.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--rte-interval", o.rte_interval, "RTE interval in seconds")->capture_default_str();
  eval_cmd->add_option("--out", o.eval_out, "Report directory (default: <model dir>/eval)");
  eval_cmd->add_option("--stride", o.stride, "Window stride in samples (default: window length)");
  eval_cmd->add_option("--jobs", o.jobs, "Sequences evaluated in parallel")->capture_default_str()->check(CLI::PositiveNumber);
  eval_cmd->add_flag("--oracle-velocities", o.oracle, "Integrate ground-truth window velocities");

  auto* plot_cmd = app.add_subcommand("plot", "Overlay a predicted and a reference trajectory as SVG");
  plot_cmd->add_option("--pred", o.pred_csv, "Predicted trajectory CSV (t,px,py)")->required();
  plot_cmd->add_option("--gt", o.gt_csv, "Reference trajectory CSV (t,px,py)")->required();
  plot_cmd->add_option("--out", o.svg_out, "Output SVG")->required();
  plot_cmd->add_option("--rte-interval", o.rte_interval, "RTE interval in seconds")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigExit;
  }
  if (sim_seed->count() || train_seed->count()) o.seed = seed_value;

  try {
    if (*sim_cmd) cmd_simulate(o);
    if (*train_cmd) cmd_train(o);
    if (*eval_cmd) cmd_eval(o);
    if (*plot_cmd) cmd_plot(o);
  } catch (const NonFiniteLossError& e) {
    return report(e.what(), kNonFiniteExit);
  } catch (const ConfigError& e) {
    return report(e.what(), kConfigExit);
  } catch (const DimensionError& e) {
    return report(e.what(), kConfigExit);
  } catch (const CheckpointError& e) {
    return report(e.what(), kConfigExit);
  } catch (const FilesystemError& e) {
    return report(e.what(), kIoExit);
  } catch (const IngestionError& e) {
    return report(e.what(), kIoExit);
  } catch (const std::exception& e) {
    return report(e.what(), kFailure);
  }
  return kOk;
}

}  // namespace suitein::cli
