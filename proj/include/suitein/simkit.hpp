#pragma once

// Synthetic multi-device walking sequences with known ground truth.
//
// The body follows a smooth speed profile and a mean-reverting heading-rate
// process. Every device observes the same global motion (body acceleration
// plus a speed-proportional gait oscillation) in a slowly drifting
// near-world frame, plus device-local articulation: arm swing on the watch,
// head bob and head turns on the earbuds, handling bursts on the phone.
// Accelerations are gravity-free user acceleration. All quantities are built
// on a dense internal grid and sampled at each device's native rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "suitein/dataio.hpp"
#include "suitein/errors.hpp"

namespace suitein::sim {

namespace fs = std::filesystem;
using data::Vec2;

enum class Articulation { kNone, kArmSwing, kHeadBob, kHandVibration };

inline Articulation parse_articulation(const std::string& name) {
  if (name == "none") return Articulation::kNone;
  if (name == "arm_swing") return Articulation::kArmSwing;
  if (name == "head_bob") return Articulation::kHeadBob;
  if (name == "hand_vibration" || name == "hand_ibration") return Articulation::kHandVibration;
  throw ConfigError("unknown articulation kind '" + name + "'");
}

inline std::string to_string(Articulation a) {
  switch (a) {
    case Articulation::kArmSwing: return "arm_swing";
    case Articulation::kHeadBob: return "head_bob";
    case Articulation::kHandVibration: return "hand_vibration";
    case Articulation::kNone: break;
  }
  return "none";
}

struct DeviceSpec {
  std::string id;
  double rate_hz = 100.0;
  Articulation articulation = Articulation::kNone;
  double amplitude = 0.0;     // m/s^2
  double frequency_hz = 0.0;  // 0 locks the articulation to the gait
  double frame_drift_rad = 0.05;
};

enum class EventKind { kRemoveDevice, kStandStill, kShakeAll };

struct Event {
  EventKind kind = EventKind::kStandStill;
  std::string device_id;  // remove_device only
  double t_start = 0.0;
  double t_end = 0.0;
};

inline std::vector<DeviceSpec> default_devices() {
  return {{"phone", 100.0, Articulation::kHandVibration, 2.0, 4.0, 0.05},
          {"watch", 100.0, Articulation::kArmSwing, 3.0, 0.0, 0.05},
          {"earbuds", 25.0, Articulation::kHeadBob, 0.8, 0.0, 0.05}};
}

struct SimConfig {
  std::string sequence_id = "sim";
  double duration_s = 90.0;
  double speed_mean = 1.2;   // m/s
  double speed_std = 0.2;
  double heading_reversion = 0.3;  // 1/s
  double heading_noise = 0.25;     // rad/s per sqrt(s)
  double initial_heading_rad = 0.0;
  double gait_gain = 1.0;  // scales the gait oscillation
  std::vector<DeviceSpec> devices = default_devices();
  double accel_noise_std = 0.1;
  double gyro_noise_std = 0.02;
  double gt_rate_hz = 30.0;
  double common_rate_hz = 25.0;
  std::vector<Event> events;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(duration_s > 0)) throw ConfigError("duration_s must be positive");
    if (!(gt_rate_hz > 0) || !(common_rate_hz > 0)) throw ConfigError("rates must be positive");
    if (speed_mean < 0 || speed_std < 0) throw ConfigError("walk speed mean/std must be non-negative");
    if (heading_reversion < 0 || heading_noise < 0) throw ConfigError("heading process parameters must be >= 0");
    if (accel_noise_std < 0 || gyro_noise_std < 0) throw ConfigError("noise std must be >= 0");
    if (devices.empty()) throw ConfigError("at least one device is required");
    std::set<std::string> ids;
    for (const auto& d : devices) {
      if (!(d.rate_hz > 0)) throw ConfigError("device '" + d.id + "' needs a positive rate");
      if (d.rate_hz < common_rate_hz) {
        throw ConfigError("device '" + d.id + "' samples below the common rate");
      }
      if (!ids.insert(d.id).second) throw ConfigError("duplicate device id '" + d.id + "'");
    }
    for (const auto& e : events) {
      if (!(e.t_start >= 0 && e.t_end <= duration_s && e.t_start < e.t_end)) {
        throw ConfigError("event interval [" + std::to_string(e.t_start) + ", " + std::to_string(e.t_end) +
                          "] not inside [0, duration_s]");
      }
      if (e.kind == EventKind::kRemoveDevice && !ids.count(e.device_id)) {
        throw ConfigError("event references unknown device '" + e.device_id + "'");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// JSON

inline std::string to_string(EventKind k) {
  switch (k) {
    case EventKind::kRemoveDevice: return "remove_device";
    case EventKind::kShakeAll: return "shake_all";
    case EventKind::kStandStill: break;
  }
  return "stand_still";
}

inline EventKind parse_event_kind(const std::string& name) {
  if (name == "remove_device") return EventKind::kRemoveDevice;
  if (name == "stand_still") return EventKind::kStandStill;
  if (name == "shake_all") return EventKind::kShakeAll;
  throw ConfigError("unknown event kind '" + name + "'");
}

inline nlohmann::json to_json(const SimConfig& c) {
  nlohmann::json devices = nlohmann::json::array();
  for (const auto& d : c.devices) {
    devices.push_back({{"id", d.id},
                       {"rate_hz", d.rate_hz},
                       {"articulation", to_string(d.articulation)},
                       {"amplitude", d.amplitude},
                       {"frequency_hz", d.frequency_hz},
                       {"frame_drift_rad", d.frame_drift_rad}});
  }
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : c.events) {
    nlohmann::json je{{"kind", to_string(e.kind)}, {"t_start", e.t_start}, {"t_end", e.t_end}};
    if (e.kind == EventKind::kRemoveDevice) je["device_id"] = e.device_id;
    events.push_back(je);
  }
  return {{"sequence_id", c.sequence_id},
          {"duration_s", c.duration_s},
          {"walk_speed_mps", {{"mean", c.speed_mean}, {"std", c.speed_std}}},
          {"heading_process", {{"reversion_rate", c.heading_reversion}, {"noise_scale", c.heading_noise}}},
          {"initial_heading_rad", c.initial_heading_rad},
          {"gait_gain", c.gait_gain},
          {"devices", devices},
          {"noise_std", {{"accel", c.accel_noise_std}, {"gyro", c.gyro_noise_std}}},
          {"gt_rate_hz", c.gt_rate_hz},
          {"common_rate_hz", c.common_rate_hz},
          {"events", events},
          {"seed", c.seed}};
}

/// Missing fields keep their defaults.
inline SimConfig sim_config_from_json(const nlohmann::json& j) {
  SimConfig c;
  try {
    c.sequence_id = j.value("sequence_id", c.sequence_id);
    c.duration_s = j.value("duration_s", c.duration_s);
    if (j.contains("walk_speed_mps")) {
      c.speed_mean = j["walk_speed_mps"].value("mean", c.speed_mean);
      c.speed_std = j["walk_speed_mps"].value("std", c.speed_std);
    }
    if (j.contains("heading_process")) {
      c.heading_reversion = j["heading_process"].value("reversion_rate", c.heading_reversion);
      c.heading_noise = j["heading_process"].value("noise_scale", c.heading_noise);
    }
    c.initial_heading_rad = j.value("initial_heading_rad", c.initial_heading_rad);
    c.gait_gain = j.value("gait_gain", c.gait_gain);
    if (j.contains("devices")) {
      c.devices.clear();
      for (const auto& d : j["devices"]) {
        DeviceSpec spec;
        spec.id = d.at("id").get<std::string>();
        spec.rate_hz = d.value("rate_hz", spec.rate_hz);
        spec.articulation = parse_articulation(d.value("articulation", std::string("none")));
        spec.amplitude = d.value("amplitude", 0.0);
        spec.frequency_hz = d.value("frequency_hz", 0.0);
        spec.frame_drift_rad = d.value("frame_drift_rad", spec.frame_drift_rad);
        c.devices.push_back(spec);
      }
    }
    if (j.contains("noise_std")) {
      c.accel_noise_std = j["noise_std"].value("accel", c.accel_noise_std);
      c.gyro_noise_std = j["noise_std"].value("gyro", c.gyro_noise_std);
    }
    c.gt_rate_hz = j.value("gt_rate_hz", c.gt_rate_hz);
    c.common_rate_hz = j.value("common_rate_hz", c.common_rate_hz);
    if (j.contains("events")) {
      for (const auto& e : j["events"]) {
        Event ev;
        ev.kind = parse_event_kind(e.at("kind").get<std::string>());
        ev.device_id = e.value("device_id", std::string());
        ev.t_start = e.at("t_start").get<double>();
        ev.t_end = e.at("t_end").get<double>();
        c.events.push_back(ev);
      }
    }
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid simulation config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Simulation

/// Densely sampled ground truth used as an oracle.
struct DenseTruth {
  double rate_hz = 0.0;
  std::vector<double> timestamps;
  std::vector<Vec2> velocities;
  std::vector<Vec2> positions;

  Vec2 position_at(double t) const {
    const double x = std::clamp(t * rate_hz, 0.0, static_cast<double>(positions.size() - 1));
    const auto lo = static_cast<std::size_t>(std::floor(x));
    const std::size_t hi = std::min(lo + 1, positions.size() - 1);
    const double w = x - static_cast<double>(lo);
    return {positions[lo][0] + w * (positions[hi][0] - positions[lo][0]),
            positions[lo][1] + w * (positions[hi][1] - positions[lo][1])};
  }

  Vec2 mean_velocity(double t0, double t1) const {
    const Vec2 a = position_at(t0), b = position_at(t1);
    return {(b[0] - a[0]) / (t1 - t0), (b[1] - a[1]) / (t1 - t0)};
  }
};

struct SimOutput {
  data::SequenceBundle bundle;
  DenseTruth truth;
};

inline constexpr double kDenseRateHz = 600.0;

namespace detail {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Tone {
  double freq, phase, amp;
};

inline std::vector<Tone> random_tones(std::mt19937_64& rng, int count, double f_lo, double f_hi, double total_std) {
  std::uniform_real_distribution<double> freq(f_lo, f_hi), phase(0.0, kTwoPi);
  std::vector<Tone> tones;
  const double amp = count > 0 ? total_std * std::sqrt(2.0 / count) : 0.0;
  for (int i = 0; i < count; ++i) tones.push_back({freq(rng), phase(rng), amp});
  return tones;
}

inline double eval_tones(const std::vector<Tone>& tones, double t) {
  double v = 0;
  for (const auto& tone : tones) v += tone.amp * std::sin(kTwoPi * tone.freq * t + tone.phase);
  return v;
}

// 1 inside [a, b], 0 outside, with raised-cosine ramps of `ramp` seconds
// outside the interval.
inline double soft_box(double t, double a, double b, double ramp) {
  if (t >= a && t <= b) return 1.0;
  const double d = t < a ? a - t : t - b;
  if (d >= ramp) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * d / ramp));
}

inline double hann_burst(double t, double start, double length) {
  if (t < start || t > start + length) return 0.0;
  return std::pow(std::sin(std::numbers::pi * (t - start) / length), 2);
}

// Ornstein-Uhlenbeck path with stationary std `sigma` and rate `theta`.
inline std::vector<double> ou_path(std::mt19937_64& rng, std::size_t n, double dt, double theta, double sigma) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(n, 0.0);
  if (sigma <= 0) return x;
  const double scale = sigma * std::sqrt(2.0 * theta * dt);
  x[0] = sigma * normal(rng);
  for (std::size_t k = 1; k < n; ++k) x[k] = x[k - 1] - theta * x[k - 1] * dt + scale * normal(rng);
  return x;
}

inline double interp(const std::vector<double>& v, double idx) {
  const double x = std::clamp(idx, 0.0, static_cast<double>(v.size() - 1));
  const auto lo = static_cast<std::size_t>(std::floor(x));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (x - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

/// Generates one sequence. Bit-identical for identical configs.
inline SimOutput simulate(const SimConfig& config) {
  using namespace detail;
  config.validate();
  std::mt19937_64 rng(config.seed);
  // Events draw from their own stream so adding one leaves the rest intact.
  std::mt19937_64 event_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double dt = 1.0 / kDenseRateHz;
  const auto n = static_cast<std::size_t>(std::llround(config.duration_s * kDenseRateHz)) + 1;
  std::vector<double> t(n);
  for (std::size_t k = 0; k < n; ++k) t[k] = static_cast<double>(k) * dt;

  // Body motion.
  const auto speed_tones = random_tones(rng, 3, 0.01, 0.06, config.speed_std);
  std::vector<double> speed(n), gate(n, 1.0);
  for (std::size_t k = 0; k < n; ++k) speed[k] = std::max(0.2, config.speed_mean + eval_tones(speed_tones, t[k]));
  if (config.speed_mean == 0 && config.speed_std == 0) std::fill(speed.begin(), speed.end(), 0.0);
  for (const auto& e : config.events) {
    if (e.kind != EventKind::kStandStill) continue;
    for (std::size_t k = 0; k < n; ++k) gate[k] *= 1.0 - soft_box(t[k], e.t_start, e.t_end, 1.0);
  }

  const double turn_sigma =
      config.heading_reversion > 0 ? config.heading_noise / std::sqrt(2.0 * config.heading_reversion) : 0.0;
  std::vector<double> turn_rate = ou_path(rng, n, dt, config.heading_reversion, turn_sigma);
  std::vector<double> heading(n, config.initial_heading_rad);
  for (std::size_t k = 1; k < n; ++k) heading[k] = heading[k - 1] + 0.5 * (turn_rate[k - 1] + turn_rate[k]) * dt;

  DenseTruth truth;
  truth.rate_hz = kDenseRateHz;
  truth.timestamps = t;
  truth.velocities.resize(n);
  truth.positions.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double v = gate[k] * speed[k];
    truth.velocities[k] = {v * std::cos(heading[k]), v * std::sin(heading[k])};
  }
  truth.positions[0] = {0.0, 0.0};
  for (std::size_t k = 1; k < n; ++k) {
    for (int c = 0; c < 2; ++c) {
      truth.positions[k][c] =
          truth.positions[k - 1][c] + 0.5 * (truth.velocities[k - 1][c] + truth.velocities[k][c]) * dt;
    }
  }

  std::vector<double> body_ax(n), body_ay(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t lo = k ? k - 1 : k, hi = std::min(k + 1, n - 1);
    body_ax[k] = (truth.velocities[hi][0] - truth.velocities[lo][0]) / (t[hi] - t[lo]);
    body_ay[k] = (truth.velocities[hi][1] - truth.velocities[lo][1]) / (t[hi] - t[lo]);
  }

  // Gait: step frequency grows with speed; intensity follows actual speed.
  std::vector<double> phase(n, unit(rng) * kTwoPi), intensity(n);
  for (std::size_t k = 0; k < n; ++k) {
    intensity[k] = config.gait_gain * gate[k] * speed[k];
    if (k) phase[k] = phase[k - 1] + kTwoPi * (1.4 + 0.5 * speed[k]) * dt;
  }

  SimOutput out;
  out.bundle.sequence_id = config.sequence_id;
  out.bundle.common_rate_hz = config.common_rate_hz;

  for (const auto& dev : config.devices) {
    // Six dense channels in the world frame before the device yaw offset.
    std::vector<std::vector<double>> ch(6, std::vector<double>(n, 0.0));
    for (std::size_t k = 0; k < n; ++k) {
      const double ch_cos = std::cos(heading[k]), ch_sin = std::sin(heading[k]);
      const double q = intensity[k], ph = phase[k];
      const double fwd = 1.5 * q * (std::cos(ph + 0.6) + 0.3 * std::sin(2 * ph));
      const double lat = 0.3 * q * std::sin(0.5 * ph);
      ch[0][k] = body_ax[k] + fwd * ch_cos - lat * ch_sin;
      ch[1][k] = body_ay[k] + fwd * ch_sin + lat * ch_cos;
      ch[2][k] = 2.0 * q * std::cos(ph);
      const double pitch = 0.15 * q * std::sin(ph);
      ch[3][k] = -pitch * ch_sin;
      ch[4][k] = pitch * ch_cos;
      ch[5][k] = turn_rate[k] + 0.05 * q * std::sin(0.5 * ph);
    }

    // Device-local articulation.
    const double offset = unit(rng) * kTwoPi;
    switch (dev.articulation) {
      case Articulation::kArmSwing: {
        const auto modulation = random_tones(rng, 3, 0.01, 0.05, 0.45);
        for (std::size_t k = 0; k < n; ++k) {
          const double m = std::clamp(1.0 + eval_tones(modulation, t[k]), 0.1, 2.0);
          const double a = dev.amplitude * gate[k] * m * (0.6 + 0.4 * speed[k] / 1.2);
          const double swing_phase =
              dev.frequency_hz > 0 ? kTwoPi * dev.frequency_hz * t[k] + offset : 0.5 * phase[k] + offset;
          const double c = std::cos(heading[k]), s = std::sin(heading[k]);
          const double along = a * std::sin(swing_phase);
          ch[0][k] += along * c;
          ch[1][k] += along * s;
          ch[2][k] += 0.3 * a * std::cos(2 * swing_phase);
          const double rate = 0.8 * a * std::cos(swing_phase);
          ch[3][k] += -rate * s;
          ch[4][k] += rate * c;
        }
        break;
      }
      case Articulation::kHeadBob: {
        // Bob at step frequency plus occasional look-around head turns.
        std::vector<std::pair<double, double>> turns;  // start, signed peak rate
        for (double ts = 2.0 + 8.0 * unit(rng); ts + 3.0 < config.duration_s; ts += 4.0 + 8.0 * unit(rng))
          turns.push_back({ts, (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.8 + 0.8 * unit(rng))});
        for (std::size_t k = 0; k < n; ++k) {
          const double bob_phase =
              dev.frequency_hz > 0 ? kTwoPi * dev.frequency_hz * t[k] + offset : phase[k] + offset;
          const double a = dev.amplitude * gate[k];
          const double c = std::cos(heading[k]), s = std::sin(heading[k]);
          ch[2][k] += a * std::sin(bob_phase);
          const double side = 0.5 * a * std::sin(0.5 * bob_phase + 1.1);
          ch[0][k] += -side * s;
          ch[1][k] += side * c;
          double yaw = 0;
          for (const auto& [ts, peak] : turns) yaw += peak * (hann_burst(t[k], ts, 1.0) - hann_burst(t[k], ts + 1.6, 1.0));
          ch[5][k] += yaw;
        }
        break;
      }
      case Articulation::kHandVibration: {
        const double centre = dev.frequency_hz > 0 ? dev.frequency_hz : 4.0;
        std::vector<double> starts;
        for (double ts = 1.0 + 6.0 * unit(rng); ts + 2.0 < config.duration_s; ts += 3.0 + 9.0 * unit(rng))
          starts.push_back(ts);
        std::vector<std::vector<Tone>> axis_tones;
        for (int c = 0; c < 6; ++c) axis_tones.push_back(random_tones(rng, 3, 0.6 * centre, 1.4 * centre, 1.0));
        for (std::size_t k = 0; k < n; ++k) {
          double env = 0;
          for (double ts : starts) env += hann_burst(t[k], ts, 1.5);
          env = (0.15 + env) * gate[k];
          for (int c = 0; c < 3; ++c) ch[c][k] += dev.amplitude * env * eval_tones(axis_tones[c], t[k]);
          for (int c = 3; c < 6; ++c) ch[c][k] += 0.6 * env * eval_tones(axis_tones[c], t[k]);
        }
        break;
      }
      case Articulation::kNone: break;
    }

    // Slowly drifting yaw offset between the device frame and the world.
    std::vector<double> yaw = ou_path(rng, n, dt, 0.05, dev.frame_drift_rad);
    for (std::size_t k = 0; k < n; ++k) {
      const double c = std::cos(yaw[k]), s = std::sin(yaw[k]);
      for (int base : {0, 3}) {
        const double x = ch[base][k], y = ch[base + 1][k];
        ch[base][k] = c * x + s * y;
        ch[base + 1][k] = -s * x + c * y;
      }
      if (k) ch[5][k] += (yaw[k] - yaw[k - 1]) / dt;
    }

    for (const auto& e : config.events) {
      if (e.kind == EventKind::kShakeAll) {
        std::vector<std::vector<Tone>> shake;
        for (int c = 0; c < 6; ++c) shake.push_back(random_tones(event_rng, 4, 2.0, 7.0, c < 3 ? 6.0 : 3.0));
        for (std::size_t k = 0; k < n; ++k) {
          const double env = soft_box(t[k], e.t_start, e.t_end, 0.5);
          if (env == 0) continue;
          for (int c = 0; c < 6; ++c) ch[c][k] += env * eval_tones(shake[c], t[k]);
        }
      } else if (e.kind == EventKind::kRemoveDevice && e.device_id == dev.id) {
        for (std::size_t k = 0; k < n; ++k)
          if (t[k] >= e.t_start && t[k] <= e.t_end)
            for (auto& c : ch) c[k] = 0.0;
      }
    }

    data::SampleStream stream{dev.id, dev.rate_hz, {}, {}};
    const double start = unit(rng) / dev.rate_hz;
    for (std::size_t k = 0;; ++k) {
      const double ts = start + static_cast<double>(k) / dev.rate_hz;
      if (ts > config.duration_s) break;
      data::Imu6 sample{};
      for (int c = 0; c < 6; ++c) {
        const double noise = c < 3 ? config.accel_noise_std : config.gyro_noise_std;
        sample[c] = interp(ch[c], ts * kDenseRateHz) + noise * normal(rng);
      }
      stream.timestamps.push_back(ts);
      stream.samples.push_back(sample);
    }
    out.bundle.streams.push_back(std::move(stream));
  }

  auto& gt = out.bundle.ground_truth;
  for (std::size_t k = 0;; ++k) {
    const double ts = static_cast<double>(k) / config.gt_rate_hz;
    if (ts > config.duration_s + 1e-12) break;
    gt.timestamps.push_back(ts);
    gt.positions.push_back(truth.position_at(ts));
  }
  out.truth = std::move(truth);
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

struct SplitCounts {
  std::size_t train = 8, val = 2, test = 2;
  std::size_t total() const { return train + val + test; }
};

/// Recipe for a family of sequences: a base config varied per sequence
/// (seed, start heading, mean speed, event placement) with scenarios cycled
/// from `scenarios` ("normal", "stand_still", "shake_all",
/// "remove_device:<id>").
struct DatasetConfig {
  std::uint64_t seed = 2024;
  std::size_t num_sequences = 12;
  SplitCounts split;
  double speed_jitter = 0.25;
  SimConfig base;
  std::vector<std::string> scenarios = {"normal", "remove_device:watch", "stand_still",
                                        "shake_all", "normal",              "remove_device:earbuds"};

  void validate() const {
    if (num_sequences == 0) throw ConfigError("num_sequences must be positive");
    if (split.total() != num_sequences) {
      throw ConfigError("split " + std::to_string(split.train) + "/" + std::to_string(split.val) + "/" +
                        std::to_string(split.test) + " does not cover " + std::to_string(num_sequences) +
                        " sequences");
    }
    if (scenarios.empty()) throw ConfigError("scenario list must not be empty");
    base.validate();
  }
};

inline nlohmann::json to_json(const DatasetConfig& c) {
  return {{"seed", c.seed},
          {"num_sequences", c.num_sequences},
          {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
          {"speed_jitter", c.speed_jitter},
          {"scenarios", c.scenarios},
          {"base", to_json(c.base)}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.num_sequences = j.value("num_sequences", c.num_sequences);
    if (j.contains("split")) {
      c.split.train = j["split"].value("train", c.split.train);
      c.split.val = j["split"].value("val", c.split.val);
      c.split.test = j["split"].value("test", c.split.test);
    }
    c.speed_jitter = j.value("speed_jitter", c.speed_jitter);
    if (j.contains("scenarios")) c.scenarios = j["scenarios"].get<std::vector<std::string>>();
    if (j.contains("base")) c.base = sim_config_from_json(j["base"]);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid dataset config: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::string sequence_name(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "seq%03zu", index);
  return buf;
}

/// Applies a scenario name to a config, placing its event in the middle
/// part of the sequence.
inline void apply_scenario(SimConfig& c, const std::string& scenario, std::mt19937_64& rng) {
  if (scenario == "normal") return;
  std::uniform_real_distribution<double> start_frac(0.25, 0.45);
  const double t0 = start_frac(rng) * c.duration_s;
  const double t1 = std::min(c.duration_s, t0 + 0.3 * c.duration_s);
  if (scenario == "stand_still") {
    c.events.push_back({EventKind::kStandStill, "", t0, t0 + 0.15 * c.duration_s});
  } else if (scenario == "shake_all") {
    c.events.push_back({EventKind::kShakeAll, "", t0, t0 + 0.15 * c.duration_s});
  } else if (scenario.rfind("remove_device:", 0) == 0) {
    c.events.push_back({EventKind::kRemoveDevice, scenario.substr(14), t0, t1});
  } else {
    throw ConfigError("unknown scenario '" + scenario + "'");
  }
}

struct DatasetPlan {
  std::vector<SimConfig> configs;
  data::Split split;
};

inline DatasetPlan plan_dataset(const DatasetConfig& dc) {
  dc.validate();
  std::mt19937_64 rng(dc.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  DatasetPlan plan;
  for (std::size_t i = 0; i < dc.num_sequences; ++i) {
    SimConfig c = dc.base;
    c.sequence_id = sequence_name(i);
    c.seed = rng();
    c.initial_heading_rad = unit(rng) * 2.0 * std::numbers::pi;
    c.speed_mean = std::max(0.3, dc.base.speed_mean + dc.speed_jitter * (2.0 * unit(rng) - 1.0));
    apply_scenario(c, dc.scenarios[i % dc.scenarios.size()], rng);
    c.validate();
    plan.configs.push_back(std::move(c));
  }
  std::vector<std::size_t> order(dc.num_sequences);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& id = plan.configs[order[r]].sequence_id;
    if (r < dc.split.train) {
      plan.split.train.push_back(id);
    } else if (r < dc.split.train + dc.split.val) {
      plan.split.val.push_back(id);
    } else {
      plan.split.test.push_back(id);
    }
  }
  for (auto* ids : {&plan.split.train, &plan.split.val, &plan.split.test}) std::sort(ids->begin(), ids->end());
  return plan;
}

/// Writes one sequence directory (<out>/<id>/manifest.json plus CSVs).
inline fs::path write_sequence(const SimConfig& config, const data::SequenceBundle& bundle, const fs::path& out_dir) {
  const fs::path dir = out_dir / bundle.sequence_id;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FilesystemError("cannot create '" + dir.string() + "': " + ec.message());
  data::Manifest m;
  m.sequence_id = bundle.sequence_id;
  m.common_rate_hz = bundle.common_rate_hz;
  for (const auto& s : bundle.streams) {
    data::write_stream_csv(dir / (s.device_id + ".csv"), s);
    m.devices.push_back({s.device_id, s.device_id + ".csv", s.rate_hz});
  }
  data::write_positions_csv(dir / "gt.csv", bundle.ground_truth.timestamps, bundle.ground_truth.positions);
  m.ground_truth_file = "gt.csv";
  m.ground_truth_rate_hz = config.gt_rate_hz;
  data::write_text_file(dir / data::kManifestFile, data::to_json(m).dump(2) + "\n");
  data::write_text_file(dir / "sim_config.json", to_json(config).dump(2) + "\n");
  return dir / data::kManifestFile;
}

struct EmittedDataset {
  std::vector<fs::path> manifests;
  fs::path split_file;
};

/// Simulates every config and writes the dataset plus split file.
inline EmittedDataset emit_dataset(const std::vector<SimConfig>& configs, const fs::path& out_dir,
                                   const data::Split& split) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw FilesystemError("cannot create '" + out_dir.string() + "': " + ec.message());
  std::set<std::string> ids, listed;
  for (const auto& c : configs) {
    if (!ids.insert(c.sequence_id).second) throw ConfigError("duplicate sequence id '" + c.sequence_id + "'");
  }
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (const auto& id : *part) {
      if (!ids.count(id)) throw ConfigError("split lists unknown sequence '" + id + "'");
      if (!listed.insert(id).second) throw ConfigError("sequence '" + id + "' appears in two splits");
    }
  }
  EmittedDataset out;
  for (const auto& c : configs) out.manifests.push_back(write_sequence(c, simulate(c).bundle, out_dir));
  out.split_file = out_dir / data::kSplitFile;
  data::write_split(out.split_file, split);
  return out;
}

inline EmittedDataset emit_dataset(const DatasetConfig& dc, const fs::path& out_dir) {
  const auto plan = plan_dataset(dc);
  return emit_dataset(plan.configs, out_dir, plan.split);
}

}  // namespace suitein::sim
