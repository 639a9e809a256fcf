#pragma once

// Mini-batch training with Adam on the combined objective, plus JSON
// checkpoints.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "suitein/dataio.hpp"
#include "suitein/errors.hpp"
#include "suitein/losses.hpp"
#include "suitein/network.hpp"

namespace suitein::train {

namespace fs = std::filesystem;
using ad::Tensor;
using net::ModelConfig;
using Params = net::ParamStore<float>;

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct Ablation {
  bool use_aggregation = true;
  bool use_contrastive = true;
  std::string baseline_device;  // single-device runs; empty means the first device
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  AdamOptions adam;
  std::uint64_t seed = 0;
  loss::LossWeights loss_weights;
  bool shuffle = true;
  Ablation ablation;
  std::size_t lr_decay_every = 0;  // epochs; 0 disables
  double lr_decay_factor = 0.5;
  bool keep_best_val = true;  // return the epoch with the lowest validation MSE when a val set is given

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
    if (!(learning_rate >= 0)) throw ConfigError("learning_rate must be non-negative");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0)) {
      throw ConfigError("adam betas must lie in [0, 1) and eps must be positive");
    }
    if (!(lr_decay_factor > 0)) throw ConfigError("lr_decay_factor must be positive");
    loss_weights.validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"optimizer", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"seed", c.seed},
          {"loss_weights", loss::to_json(c.loss_weights)},
          {"shuffle", c.shuffle},
          {"ablation",
           {{"use_aggregation", c.ablation.use_aggregation},
            {"use_contrastive", c.ablation.use_contrastive},
            {"baseline_device", c.ablation.baseline_device}}},
          {"lr_decay", {{"every_epochs", c.lr_decay_every}, {"factor", c.lr_decay_factor}}},
          {"keep_best_val", c.keep_best_val}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      c.adam.beta1 = o.value("beta1", c.adam.beta1);
      c.adam.beta2 = o.value("beta2", c.adam.beta2);
      c.adam.eps = o.value("eps", c.adam.eps);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("loss_weights")) c.loss_weights = loss::loss_weights_from_json(j["loss_weights"]);
    c.shuffle = j.value("shuffle", c.shuffle);
    if (j.contains("ablation")) {
      const auto& a = j["ablation"];
      c.ablation.use_aggregation = a.value("use_aggregation", c.ablation.use_aggregation);
      c.ablation.use_contrastive = a.value("use_contrastive", c.ablation.use_contrastive);
      c.ablation.baseline_device = a.value("baseline_device", c.ablation.baseline_device);
    }
    if (j.contains("lr_decay")) {
      c.lr_decay_every = j["lr_decay"].value("every_epochs", c.lr_decay_every);
      c.lr_decay_factor = j["lr_decay"].value("factor", c.lr_decay_factor);
    }
    c.keep_best_val = j.value("keep_best_val", c.keep_best_val);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Model / data plumbing

/// Model config for a dataset with the given device order. A single-device
/// ablation keeps only the baseline device.
inline ModelConfig model_for(ModelConfig base, const std::vector<std::string>& dataset_devices,
                             std::size_t window_length, const Ablation& ablation) {
  if (dataset_devices.empty()) throw ConfigError("dataset has no devices");
  base.window_length = window_length;
  if (ablation.use_aggregation) {
    base.device_ids = dataset_devices;
  } else {
    const std::string id = ablation.baseline_device.empty() ? dataset_devices.front() : ablation.baseline_device;
    if (std::find(dataset_devices.begin(), dataset_devices.end(), id) == dataset_devices.end()) {
      throw ConfigError("baseline device '" + id + "' is not in the dataset");
    }
    base.device_ids = {id};
  }
  base.devices = base.device_ids.size();
  base.private_branch = ablation.use_contrastive;
  base.validate();
  return base;
}

/// Reorders or subsets windows to the model's device list.
inline data::WindowBatch windows_for_model(const data::WindowBatch& batch, const ModelConfig& config) {
  if (batch.length != config.window_length) {
    throw DimensionError("windows have length " + std::to_string(batch.length) + " but the model expects " +
                         std::to_string(config.window_length));
  }
  if (config.device_ids.empty() || config.device_ids == batch.device_ids) {
    if (batch.devices != config.devices) {
      throw DimensionError("windows carry " + std::to_string(batch.devices) + " devices but the model expects " +
                           std::to_string(config.devices));
    }
    return batch;
  }
  std::vector<std::size_t> idx;
  for (const auto& id : config.device_ids) {
    auto it = std::find(batch.device_ids.begin(), batch.device_ids.end(), id);
    if (it == batch.device_ids.end()) throw DimensionError("windows lack device '" + id + "' required by the model");
    idx.push_back(static_cast<std::size_t>(it - batch.device_ids.begin()));
  }
  return batch.select_devices(idx);
}

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
 public:
  Adam(const Params& params, double lr, AdamOptions opts = {}) : lr_(lr), opts_(opts) {
    for (const auto& [name, t] : params.entries()) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }
  std::size_t steps() const { return t_; }

  /// One update from the gradients currently stored on the parameters.
  void step(Params& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    auto& entries = params.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
      auto& p = entries[k].second;
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto data = p.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double gi = g[i];
        m_[k][i] = opts_.beta1 * m_[k][i] + (1 - opts_.beta1) * gi;
        v_[k][i] = opts_.beta2 * v_[k][i] + (1 - opts_.beta2) * gi * gi;
        const double mhat = m_[k][i] / c1, vhat = v_[k][i] / c2;
        data[i] = static_cast<float>(data[i] - lr_ * mhat / (std::sqrt(vhat) + opts_.eps));
      }
    }
  }

 private:
  double lr_;
  AdamOptions opts_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  std::size_t epoch = 0;
  double total = 0, vel = 0, con = 0, orth = 0;
  double val_mse = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  double wall_seconds = 0;
  std::size_t best_epoch = 0;  // epoch whose parameters were returned; 0 means the last

  std::string to_csv() const {
    std::ostringstream out;
    out << "epoch,total,vel,con,orth,val_mse,seconds\n";
    out.precision(9);
    for (const auto& e : epochs) {
      out << e.epoch << ',' << e.total << ',' << e.vel << ',' << e.con << ',' << e.orth << ',';
      if (std::isnan(e.val_mse)) {
        out << "nan";
      } else {
        out << e.val_mse;
      }
      out << ',' << e.seconds << '\n';
    }
    return out.str();
  }
};

struct TrainResult {
  Params params;
  ModelConfig model;
  TrainLog log;
};

/// Mean per-window velocity MSE of the aggregate head.
inline double velocity_mse(const data::WindowBatch& windows, const Params& params, const ModelConfig& config,
                           std::size_t batch_size = 128) {
  const auto w = windows_for_model(windows, config);
  if (w.empty()) throw DegenerateInputError("velocity_mse: no windows");
  double sum = 0;
  for (std::size_t start = 0; start < w.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, w.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto pred = net::predict(w.window_tensor(idx), params, config);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto tgt = w.target(idx[i]);
      const double dx = pred.data()[2 * i] - tgt[0], dy = pred.data()[2 * i + 1] - tgt[1];
      sum += 0.5 * (dx * dx + dy * dy);
    }
  }
  return sum / static_cast<double>(w.size());
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Splits `order` into consecutive batches, shuffling it first when asked.
inline std::vector<std::vector<std::size_t>> plan_batches(std::vector<std::size_t>& order, std::size_t batch_size,
                                                          bool shuffle, std::mt19937_64& rng) {
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(start);
    batches.emplace_back(first, first + static_cast<std::ptrdiff_t>(std::min(batch_size, order.size() - start)));
  }
  return batches;
}

/// Trains a copy of `initial`. `model` must already describe the devices to
/// use (see model_for); windows are subset to match it.
inline TrainResult train(const data::WindowBatch& train_windows, const data::WindowBatch* val_windows,
                         const Params& initial, const ModelConfig& model, const TrainConfig& config,
                         const EpochCallback& on_epoch = {}) {
  config.validate();
  model.validate();
  if (config.ablation.use_contrastive && !model.private_branch) {
    throw ConfigError("contrastive training needs a model with private extractors");
  }
  net::check_layout(initial, model);
  const auto windows = windows_for_model(train_windows, model);
  if (windows.empty()) throw DegenerateInputError("training set has no windows");
  std::optional<data::WindowBatch> val;
  if (val_windows && !val_windows->empty()) val = windows_for_model(*val_windows, model);

  TrainResult result{initial.clone(), model, {}};
  Params& params = result.params;
  Adam adam(params, config.learning_rate, config.adam);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);

  const net::ForwardOptions fwd{config.ablation.use_contrastive, true};
  const loss::LossTerms terms{config.ablation.use_contrastive};
  const auto run_start = std::chrono::steady_clock::now();
  std::optional<Params> best;
  double best_mse = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    if (config.lr_decay_every > 0) {
      const double decays = static_cast<double>((epoch - 1) / config.lr_decay_every);
      adam.set_learning_rate(config.learning_rate * std::pow(config.lr_decay_factor, decays));
    }
    const auto batches = plan_batches(order, config.batch_size, config.shuffle, rng);

    EpochLog log;
    log.epoch = epoch;
    std::size_t seen = 0;
    for (std::size_t batch_no = 0; batch_no < batches.size(); ++batch_no) {
      const auto& idx = batches[batch_no];
      const auto out = net::forward(windows.window_tensor(idx), params, model, fwd);
      const auto obj = loss::compute_objective(out, windows.target_tensor(idx), config.loss_weights, terms);
      if (!std::isfinite(obj.report.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", batch " << batch_no << " (windows";
        for (std::size_t i = 0; i < std::min<std::size_t>(idx.size(), 8); ++i) {
          msg << ' ' << windows.sequence_ids[idx[i]] << '@' << windows.start_times[idx[i]];
        }
        msg << (idx.size() > 8 ? " ...)" : ")") << ": vel=" << obj.report.l_vel << " con=" << obj.report.l_con
            << " orth=" << obj.report.l_orth;
        throw NonFiniteLossError(msg.str());
      }
      params.zero_grad();
      obj.total.backward();
      adam.step(params);

      const double n = static_cast<double>(idx.size());
      log.total += obj.report.total * n;
      log.vel += obj.report.l_vel * n;
      log.con += obj.report.l_con * n;
      log.orth += obj.report.l_orth * n;
      seen += idx.size();
    }
    params.zero_grad();
    log.total /= static_cast<double>(seen);
    log.vel /= static_cast<double>(seen);
    log.con /= static_cast<double>(seen);
    log.orth /= static_cast<double>(seen);
    if (val) log.val_mse = velocity_mse(*val, params, model);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    result.log.epochs.push_back(log);
    if (config.keep_best_val && val && log.val_mse < best_mse) {
      best_mse = log.val_mse;
      best = params.clone();
      result.log.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(log);
  }
  if (best) params = std::move(*best);
  result.log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  Params params;
};

inline void save_checkpoint(const fs::path& path, const Params& params, const ModelConfig& config) {
  nlohmann::json jp = nlohmann::json::object();
  for (const auto& [name, t] : params.entries()) {
    jp[name] = {{"shape", t.shape()}, {"data", t.values()}};
  }
  nlohmann::json j{{"format_version", kCheckpointVersion}, {"config", net::to_json(config)}, {"params", jp}};
  // Write beside the target and rename so readers never see a partial file.
  const fs::path tmp = path.string() + ".tmp";
  data::write_text_file(tmp, j.dump() + "\n");
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw FilesystemError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FilesystemError("cannot open checkpoint '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint '" + path.string() + "' is not valid JSON (truncated?): " + e.what());
  }
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint '" + path.string() + "' has format_version " + std::to_string(version) +
                            ", expected " + std::to_string(kCheckpointVersion));
    }
    Checkpoint ck;
    try {
      ck.config = net::model_config_from_json(j.at("config"));
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    }
    const auto& jp = j.at("params");
    for (const auto& [name, shape] : net::parameter_layout(ck.config)) {
      if (!jp.contains(name)) throw CheckpointError("checkpoint lacks parameter '" + name + "'");
      const auto got_shape = jp[name].at("shape").get<ad::Shape>();
      if (got_shape != shape) {
        throw CheckpointError("checkpoint parameter '" + name + "' has shape " + ad::to_string(got_shape) +
                              ", config implies " + ad::to_string(shape));
      }
      auto values = jp[name].at("data").get<std::vector<float>>();
      if (values.size() != ad::numel_of(shape)) {
        throw CheckpointError("checkpoint parameter '" + name + "' holds " + std::to_string(values.size()) +
                              " values for shape " + ad::to_string(shape));
      }
      ck.params.add(name, Tensor(shape, std::move(values), true));
    }
    if (jp.size() != ck.params.size()) throw CheckpointError("checkpoint has unexpected extra parameters");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint '" + path.string() + "': " + e.what());
  }
}

/// Loads and checks the checkpoint against the model a caller expects.
inline Checkpoint load_checkpoint(const fs::path& path, const ModelConfig& expected) {
  auto ck = load_checkpoint(path);
  for (const auto& [name, shape] : net::parameter_layout(expected)) {
    if (!ck.params.contains(name)) {
      throw CheckpointError("checkpoint has no tensor '" + name + "' required by the requested model");
    }
    if (ck.params[name].shape() != shape) {
      throw CheckpointError("tensor '" + name + "' has shape " + ad::to_string(ck.params[name].shape()) +
                            " in the checkpoint but " + ad::to_string(shape) + " is required");
    }
  }
  if (ck.params.size() != net::parameter_layout(expected).size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(ck.params.size()) + " tensors, model needs " +
                          std::to_string(net::parameter_layout(expected).size()));
  }
  return ck;
}

}  // namespace suitein::train
