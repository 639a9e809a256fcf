#pragma once

// The Suite-IN network: a shallow cross-device MLP whose output is split per
// device, a shared-motion and a private-motion extractor per device, mean
// aggregation of the shared features, and one velocity regressor reused by
// every head.
//
// All forward functions accept batched inputs (leading batch axis) or a
// single example without one; outputs follow the input.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "suitein/errors.hpp"
#include "suitein/tensor.hpp"

namespace suitein::net {

using ad::BasicTensor;
using ad::Shape;

struct ModelConfig {
  std::size_t devices = 3;  // J
  std::vector<std::string> device_ids;
  std::size_t window_length = 50;  // L
  std::size_t shallow_width = 16;  // C, channels per device after the MLP
  std::size_t mlp_hidden = 64;
  std::vector<std::size_t> conv_channels = {32, 64};
  std::size_t kernel_size = 3;
  std::size_t feature_dim = 64;  // d
  std::size_t regressor_hidden = 32;
  double tau = 0.1;
  bool private_branch = true;  // private extractors exist only for contrastive training

  void validate() const {
    if (devices < 1) throw ConfigError("model needs at least one device");
    if (!device_ids.empty() && device_ids.size() != devices) {
      throw ConfigError("model lists " + std::to_string(device_ids.size()) + " device ids for " +
                        std::to_string(devices) + " devices");
    }
    if (shallow_width == 0 || mlp_hidden == 0 || feature_dim == 0 || regressor_hidden == 0) {
      throw ConfigError("model widths must be positive");
    }
    if (conv_channels.size() != 2 || conv_channels[0] == 0 || conv_channels[1] == 0) {
      throw ConfigError("conv_channels must hold two positive widths");
    }
    if (kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd");
    if (window_length < 4) {
      throw ConfigError("window length " + std::to_string(window_length) + " is too short for two poolings (need >= 4)");
    }
    if (!(tau > 0)) throw ConfigError("tau must be positive");
  }

  /// Temporal extent after both poolings.
  std::size_t pooled_length() const { return window_length / 2 / 2; }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"devices", c.devices},
          {"device_ids", c.device_ids},
          {"window_length", c.window_length},
          {"shallow_width", c.shallow_width},
          {"mlp_hidden", c.mlp_hidden},
          {"conv_channels", c.conv_channels},
          {"kernel_size", c.kernel_size},
          {"feature_dim", c.feature_dim},
          {"regressor_hidden", c.regressor_hidden},
          {"tau", c.tau},
          {"private_branch", c.private_branch}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.devices = j.value("devices", c.devices);
    c.device_ids = j.value("device_ids", c.device_ids);
    if (!c.device_ids.empty() && !j.contains("devices")) c.devices = c.device_ids.size();
    c.window_length = j.value("window_length", c.window_length);
    c.shallow_width = j.value("shallow_width", c.shallow_width);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.conv_channels = j.value("conv_channels", c.conv_channels);
    c.kernel_size = j.value("kernel_size", c.kernel_size);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.regressor_hidden = j.value("regressor_hidden", c.regressor_hidden);
    c.tau = j.value("tau", c.tau);
    c.private_branch = j.value("private_branch", c.private_branch);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

/// Named parameters in insertion order.
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, BasicTensor<T>>;

  void add(const std::string& name, BasicTensor<T> tensor) {
    if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(tensor));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const BasicTensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
    return entries_[it->second].second;
  }
  BasicTensor<T>& get(const std::string& name) {
    return const_cast<BasicTensor<T>&>(static_cast<const ParamStore&>(*this).get(name));
  }
  const BasicTensor<T>& operator[](const std::string& name) const { return get(name); }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, t] : entries_) out.push_back(n);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : entries_) t.set_requires_grad(on);
  }

  /// Detached copy converted to another scalar type, with gradients on.
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : entries_) {
      auto c = t.template cast<U>();
      c.set_requires_grad(true);
      out.add(name, c);
    }
    return out;
  }

  /// Deep copy with independent storage.
  ParamStore clone() const { return cast<T>(); }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

inline std::string device_prefix(const std::string& branch, std::size_t j) {
  return branch + ".j" + std::to_string(j) + ".";
}

/// Expected shape of every parameter, in canonical order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
  const std::size_t J = c.devices, C = c.shallow_width, K = c.kernel_size;
  const std::size_t c1 = c.conv_channels[0], c2 = c.conv_channels[1];
  std::vector<std::pair<std::string, Shape>> layout = {
      {"mlp.w1", {6 * J, c.mlp_hidden}},
      {"mlp.b1", {c.mlp_hidden}},
      {"mlp.w2", {c.mlp_hidden, C * J}},
      {"mlp.b2", {C * J}},
  };
  for (const char* branch : {"shared", "private"}) {
    if (!c.private_branch && std::string(branch) == "private") continue;
    for (std::size_t j = 1; j <= J; ++j) {
      const auto p = device_prefix(branch, j);
      layout.push_back({p + "conv1.w", {c1, 1, 1, K}});
      layout.push_back({p + "conv1.b", {c1}});
      layout.push_back({p + "conv2.w", {c2, c1, 1, K}});
      layout.push_back({p + "conv2.b", {c2}});
      layout.push_back({p + "dense.w", {c2 * C, c.feature_dim}});
      layout.push_back({p + "dense.b", {c.feature_dim}});
    }
  }
  layout.push_back({"regressor.w1", {c.feature_dim, c.regressor_hidden}});
  layout.push_back({"regressor.b1", {c.regressor_hidden}});
  layout.push_back({"regressor.w2", {c.regressor_hidden, 2}});
  layout.push_back({"regressor.b2", {2}});
  return layout;
}

/// Fan-in scaled uniform weights (He bound sqrt(6 / fan_in)), zero biases.
template <typename T = float>
ParamStore<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParamStore<T> store;
  for (const auto& [name, shape] : parameter_layout(config)) {
    std::vector<T> values(ad::numel_of(shape), T(0));
    if (shape.size() > 1) {
      // Dense weights are [in x out]; conv kernels are [out x in x 1 x K].
      const std::size_t fan_in = shape.size() == 2 ? shape[0] : shape[1] * shape[3];
      std::uniform_real_distribution<double> dist(-1.0, 1.0);
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : values) v = static_cast<T>(bound * dist(rng));
    }
    store.add(name, BasicTensor<T>(shape, std::move(values), true));
  }
  return store;
}

/// Throws CheckpointError when the store does not match the layout.
template <typename T>
void check_layout(const ParamStore<T>& params, const ModelConfig& config) {
  const auto layout = parameter_layout(config);
  if (layout.size() != params.size()) {
    throw CheckpointError("expected " + std::to_string(layout.size()) + " parameters, found " +
                          std::to_string(params.size()));
  }
  for (const auto& [name, shape] : layout) {
    if (!params.contains(name)) throw CheckpointError("missing parameter '" + name + "'");
    if (params[name].shape() != shape) {
      throw CheckpointError("parameter '" + name + "' has shape " + ad::to_string(params[name].shape()) +
                            ", expected " + ad::to_string(shape));
    }
  }
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

template <typename T>
BasicTensor<T> add_batch_axis(const BasicTensor<T>& x) {
  Shape s{1};
  s.insert(s.end(), x.shape().begin(), x.shape().end());
  return ad::reshape(x, s);
}

template <typename T>
BasicTensor<T> drop_batch_axis(const BasicTensor<T>& x) {
  return ad::reshape(x, Shape(x.shape().begin() + 1, x.shape().end()));
}

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x2d, const ParamStore<T>& p, const std::string& w, const std::string& b) {
  return ad::add_bias(ad::matmul(x2d, p[w]), p[b]);
}

// [B x C x L] -> [B x d]
template <typename T>
BasicTensor<T> extractor(const BasicTensor<T>& z, const std::string& prefix, const ParamStore<T>& p,
                         const ModelConfig& c) {
  const std::size_t B = z.extent(0), C = z.extent(1), L = z.extent(2);
  if (L < 4) {
    throw ConfigError("window length " + std::to_string(L) + " is too short for two poolings (need >= 4)");
  }
  auto x = ad::reshape(z, {B, 1, C, L});
  x = ad::relu(ad::maxpool_temporal(ad::conv2d(x, p[prefix + "conv1.w"], p[prefix + "conv1.b"]), 2));
  x = ad::relu(ad::maxpool_temporal(ad::conv2d(x, p[prefix + "conv2.w"], p[prefix + "conv2.b"]), 2));
  const std::size_t c2 = x.extent(1), W = x.extent(3);
  x = ad::reshape(ad::permute(x, {0, 3, 1, 2}), {B * W, c2 * C});
  x = dense(x, p, prefix + "dense.w", prefix + "dense.b");
  return ad::reduce(ad::reshape(x, {B, W, c.feature_dim}), ad::Reduction::kMean, 1);
}

}  // namespace detail

/// Window [B x J x 6 x L] (or [J x 6 x L]) -> J blocks of [B x C x L].
template <typename T>
std::vector<BasicTensor<T>> forward_shallow(const BasicTensor<T>& window, const ParamStore<T>& p,
                                            const ModelConfig& c) {
  const bool batched = window.rank() == 4;
  const std::size_t J = c.devices, L = c.window_length, C = c.shallow_width;
  const Shape expect = batched ? Shape{window.extent(0), J, 6, L} : Shape{J, 6, L};
  if (!(window.rank() == 3 || batched) || window.shape() != expect) {
    throw DimensionError("forward_shallow: window " + ad::to_string(window.shape()) + " does not match " +
                         ad::to_string(expect));
  }
  const auto x4 = batched ? window : detail::add_batch_axis(window);
  const std::size_t B = x4.extent(0);
  auto x = ad::reshape(ad::permute(ad::reshape(x4, {B, 6 * J, L}), {0, 2, 1}), {B * L, 6 * J});
  x = ad::relu(detail::dense(x, p, "mlp.w1", "mlp.b1"));
  x = detail::dense(x, p, "mlp.w2", "mlp.b2");
  x = ad::reshape(x, {B, L, J, C});
  std::vector<BasicTensor<T>> blocks;
  for (std::size_t j = 0; j < J; ++j) {
    auto z = ad::permute(ad::reshape(ad::slice(x, 2, j, 1), {B, L, C}), {0, 2, 1});
    blocks.push_back(batched ? z : detail::drop_batch_axis(z));
  }
  return blocks;
}

namespace detail {

template <typename T>
BasicTensor<T> run_extractor(const std::string& branch, const BasicTensor<T>& z, std::size_t j,
                             const ParamStore<T>& p, const ModelConfig& c) {
  if (j < 1 || j > c.devices) {
    throw ContractError(branch + " extractor index " + std::to_string(j) + " outside 1.." + std::to_string(c.devices));
  }
  const bool batched = z.rank() == 3;
  if (!(z.rank() == 2 || batched) || z.shape()[batched ? 1 : 0] != c.shallow_width) {
    throw DimensionError(branch + " extractor: input " + ad::to_string(z.shape()) + " is not [C x L] with C=" +
                         std::to_string(c.shallow_width));
  }
  auto h = extractor(batched ? z : add_batch_axis(z), device_prefix(branch, j), p, c);
  return batched ? h : drop_batch_axis(h);
}

}  // namespace detail

/// H^j from device block j (1-based).
template <typename T>
BasicTensor<T> forward_shared(const BasicTensor<T>& z, std::size_t j, const ParamStore<T>& p, const ModelConfig& c) {
  return detail::run_extractor("shared", z, j, p, c);
}

/// Private feature of device j (1-based).
template <typename T>
BasicTensor<T> forward_private(const BasicTensor<T>& z, std::size_t j, const ParamStore<T>& p, const ModelConfig& c) {
  return detail::run_extractor("private", z, j, p, c);
}

/// Elementwise mean of equally shaped features.
template <typename T>
BasicTensor<T> aggregate(const std::vector<BasicTensor<T>>& shared) {
  if (shared.empty()) throw DegenerateInputError("aggregate: no device features");
  if (shared.size() == 1) return shared.front();
  return ad::reduce(ad::stack(shared), ad::Reduction::kMean, 0);
}

/// Shared regressor: [B x d] (or [d]) -> [B x 2] (or [2]).
template <typename T>
BasicTensor<T> regress_velocity(const BasicTensor<T>& h, const ParamStore<T>& p) {
  const std::size_t d = p["regressor.w1"].extent(0);
  const bool batched = h.rank() == 2;
  if (!(h.rank() == 1 || batched) || h.shape().back() != d) {
    throw DimensionError("regress_velocity: feature " + ad::to_string(h.shape()) + " does not have dimension " +
                         std::to_string(d));
  }
  auto x = batched ? h : ad::reshape(h, {1, d});
  x = ad::relu(detail::dense(x, p, "regressor.w1", "regressor.b1"));
  x = detail::dense(x, p, "regressor.w2", "regressor.b2");
  return batched ? x : ad::reshape(x, {2});
}

template <typename T>
struct FeatureBundle {
  std::vector<BasicTensor<T>> shared;   // H^1..H^J
  std::vector<BasicTensor<T>> private_;  // private features, same order
  BasicTensor<T> aggregated;             // H^0
};

template <typename T>
struct ModelOutput {
  FeatureBundle<T> features;
  std::vector<BasicTensor<T>> velocities;  // [0] from H^0, [j] from H^j
};

struct ForwardOptions {
  bool with_private = true;
  bool with_device_heads = true;
};

template <typename T>
ModelOutput<T> forward(const BasicTensor<T>& window, const ParamStore<T>& p, const ModelConfig& c,
                       const ForwardOptions& opts = {}) {
  const auto z = forward_shallow(window, p, c);
  ModelOutput<T> out;
  for (std::size_t j = 1; j <= c.devices; ++j) {
    out.features.shared.push_back(forward_shared(z[j - 1], j, p, c));
    if (opts.with_private && c.private_branch) out.features.private_.push_back(forward_private(z[j - 1], j, p, c));
  }
  out.features.aggregated = aggregate(out.features.shared);
  out.velocities.push_back(regress_velocity(out.features.aggregated, p));
  if (opts.with_device_heads) {
    for (const auto& h : out.features.shared) out.velocities.push_back(regress_velocity(h, p));
  }
  return out;
}

/// Aggregate-head velocity only, without graph recording. [B x 2].
template <typename T>
BasicTensor<T> predict(const BasicTensor<T>& window, const ParamStore<T>& p, const ModelConfig& c) {
  ad::NoGradGuard guard;
  return forward(window, p, c, {false, false}).velocities[0];
}

}  // namespace suitein::net
