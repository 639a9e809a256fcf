#pragma once

// Trajectory reconstruction from window velocities and ATE / RTE scoring.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "suitein/dataio.hpp"
#include "suitein/errors.hpp"
#include "suitein/network.hpp"
#include "suitein/trainer.hpp"

namespace suitein::eval {

namespace fs = std::filesystem;
using data::Vec2;

struct Trajectory {
  std::vector<double> timestamps;
  std::vector<Vec2> positions;

  std::size_t size() const { return timestamps.size(); }

  void validate() const {
    if (timestamps.size() != positions.size()) throw ContractError("trajectory has mismatched columns");
    for (std::size_t i = 0; i < size(); ++i) {
      if (!std::isfinite(timestamps[i]) || !std::isfinite(positions[i][0]) || !std::isfinite(positions[i][1])) {
        throw ContractError("trajectory has a non-finite entry at index " + std::to_string(i));
      }
      if (i && !(timestamps[i] > timestamps[i - 1])) {
        throw ContractError("trajectory timestamps not strictly increasing at index " + std::to_string(i));
      }
    }
  }

  /// Linear interpolation; t must lie within the span (1e-9 s slack).
  Vec2 at(double t) const {
    if (timestamps.empty() || t < timestamps.front() - 1e-9 || t > timestamps.back() + 1e-9) {
      throw EvaluationError("trajectory queried at t=" + std::to_string(t) + " outside its span");
    }
    if (size() == 1) return positions.front();
    auto it = std::upper_bound(timestamps.begin(), timestamps.end(), t);
    const std::size_t hi = std::clamp<std::size_t>(static_cast<std::size_t>(it - timestamps.begin()), 1, size() - 1);
    const std::size_t lo = hi - 1;
    const double w = std::clamp((t - timestamps[lo]) / (timestamps[hi] - timestamps[lo]), 0.0, 1.0);
    return {positions[lo][0] + w * (positions[hi][0] - positions[lo][0]),
            positions[lo][1] + w * (positions[hi][1] - positions[lo][1])};
  }

  bool covers(double t) const {
    return !timestamps.empty() && t >= timestamps.front() - 1e-9 && t <= timestamps.back() + 1e-9;
  }
};

inline Trajectory from_ground_truth(const data::GroundTruth& gt) { return {gt.timestamps, gt.positions}; }

/// Holds each window's velocity constant over [start, end) and accumulates
/// positions at every window boundary. Where windows overlap, the velocity
/// is the mean of all windows covering the segment.
inline Trajectory integrate(const std::vector<Vec2>& velocities, const std::vector<double>& starts,
                            const std::vector<double>& ends, Vec2 y0) {
  const std::size_t n = velocities.size();
  if (n == 0) throw DegenerateInputError("integrate: no windows");
  if (starts.size() != n || ends.size() != n) throw DimensionError("integrate: window times do not match velocities");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(ends[i] > starts[i])) throw ContractError("integrate: window " + std::to_string(i) + " has non-positive span");
    if (i && (starts[i] < starts[i - 1] || ends[i] < ends[i - 1])) {
      throw ContractError("integrate: windows are not time-ordered at index " + std::to_string(i));
    }
  }
  std::vector<double> bounds(starts);
  bounds.insert(bounds.end(), ends.begin(), ends.end());
  std::sort(bounds.begin(), bounds.end());
  // Merge boundaries closer than a nanosecond.
  std::vector<double> knots;
  for (double b : bounds)
    if (knots.empty() || b - knots.back() > 1e-9) knots.push_back(b);

  Trajectory out;
  out.timestamps.push_back(knots.front());
  out.positions.push_back(y0);
  std::size_t first = 0;  // earliest window that may still cover the segment
  for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
    const double a = knots[k], b = knots[k + 1], mid = 0.5 * (a + b);
    while (first < n && ends[first] <= mid) ++first;
    double vx = 0, vy = 0;
    std::size_t count = 0;
    for (std::size_t i = first; i < n && starts[i] <= mid; ++i) {
      if (ends[i] > mid) {
        vx += velocities[i][0];
        vy += velocities[i][1];
        ++count;
      }
    }
    if (count == 0) {
      throw ContractError("integrate: no window covers [" + std::to_string(a) + ", " + std::to_string(b) + "]");
    }
    const Vec2 p = out.positions.back();
    const double dt = b - a;
    out.timestamps.push_back(b);
    out.positions.push_back({p[0] + dt * vx / static_cast<double>(count), p[1] + dt * vy / static_cast<double>(count)});
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> overlap_indices(const Trajectory& pred, const Trajectory& gt) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (gt.covers(pred.timestamps[i])) idx.push_back(i);
  if (idx.empty()) throw EvaluationError("predicted and reference trajectories do not overlap in time");
  return idx;
}

}  // namespace detail

/// RMSE of position error at the predicted timestamps (reference
/// interpolated there). No alignment is applied.
inline double ate(const Trajectory& pred, const Trajectory& gt) {
  double sum = 0;
  const auto idx = detail::overlap_indices(pred, gt);
  for (std::size_t i : idx) {
    const Vec2 g = gt.at(pred.timestamps[i]);
    const double dx = pred.positions[i][0] - g[0], dy = pred.positions[i][1] - g[1];
    sum += dx * dx + dy * dy;
  }
  return std::sqrt(sum / static_cast<double>(idx.size()));
}

/// Splits the common span into consecutive full intervals starting at the
/// first predicted timestamp. In each, the predicted displacement is compared
/// with the reference displacement (both re-anchored at the interval start);
/// returns the RMSE of those endpoint errors.
inline double rte(const Trajectory& pred, const Trajectory& gt, double interval_s) {
  if (!(interval_s > 0)) throw ConfigError("RTE interval must be positive");
  const auto idx = detail::overlap_indices(pred, gt);
  const double begin = pred.timestamps[idx.front()];
  const double end = std::min(pred.timestamps.back(), gt.timestamps.back());
  const auto full = static_cast<std::size_t>(std::floor((end - begin) / interval_s + 1e-9));
  if (full == 0) {
    throw EvaluationError("trajectory spans " + std::to_string(end - begin) + " s, shorter than the RTE interval of " +
                          std::to_string(interval_s) + " s; use a smaller --rte-interval");
  }
  double sum = 0;
  for (std::size_t k = 0; k < full; ++k) {
    const double t0 = begin + static_cast<double>(k) * interval_s;
    const double t1 = std::min(t0 + interval_s, end);
    const Vec2 p0 = pred.at(t0), p1 = pred.at(t1), g0 = gt.at(t0), g1 = gt.at(t1);
    const double ex = (p1[0] - p0[0]) - (g1[0] - g0[0]);
    const double ey = (p1[1] - p0[1]) - (g1[1] - g0[1]);
    sum += ex * ex + ey * ey;
  }
  return std::sqrt(sum / static_cast<double>(full));
}

// ---------------------------------------------------------------------------
// Sequence evaluation

struct EvalOptions {
  std::size_t stride = 0;  // samples between windows; 0 means one window length (tiling)
  double rte_interval_s = 10.0;
  bool oracle_velocities = false;  // integrate ground-truth targets instead of predictions
  std::size_t batch_size = 128;
};

struct SequenceReport {
  std::string sequence_id;
  double ate_m = 0;
  double rte_m = 0;
  double interval_s = 0;
  std::size_t windows = 0;
  bool oracle = false;
  Trajectory predicted;
};

inline nlohmann::json to_json(const SequenceReport& r) {
  return {{"sequence_id", r.sequence_id}, {"ate_m", r.ate_m},   {"rte_m", r.rte_m},
          {"interval_s", r.interval_s},   {"windows", r.windows}, {"oracle", r.oracle}};
}

/// Windows the bundle, predicts aggregate-head velocities, integrates them
/// from the ground-truth position at the first window start and scores the
/// result.
inline SequenceReport evaluate_sequence(const train::Params& params, const net::ModelConfig& model,
                                        const data::SequenceBundle& bundle, const EvalOptions& opts = {}) {
  const std::size_t L = model.window_length;
  const std::size_t stride = opts.stride ? opts.stride : L;
  const auto all = data::make_windows(bundle, {L, stride});
  if (all.empty()) throw EvaluationError("sequence '" + bundle.sequence_id + "' yields no complete windows");
  const auto w = train::windows_for_model(all, model);

  std::vector<Vec2> velocities(w.size());
  if (opts.oracle_velocities) {
    for (std::size_t i = 0; i < w.size(); ++i) velocities[i] = w.target(i);
  } else {
    for (std::size_t start = 0; start < w.size(); start += opts.batch_size) {
      std::vector<std::size_t> idx(std::min(opts.batch_size, w.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      const auto pred = net::predict(w.window_tensor(idx), params, model);
      for (std::size_t i = 0; i < idx.size(); ++i) velocities[idx[i]] = {pred.data()[2 * i], pred.data()[2 * i + 1]};
    }
  }

  SequenceReport r;
  r.sequence_id = bundle.sequence_id;
  r.interval_s = opts.rte_interval_s;
  r.windows = w.size();
  r.oracle = opts.oracle_velocities;
  const auto gt = from_ground_truth(bundle.ground_truth);
  r.predicted = integrate(velocities, w.start_times, w.end_times, gt.at(w.start_times.front()));
  r.ate_m = ate(r.predicted, gt);
  r.rte_m = rte(r.predicted, gt, opts.rte_interval_s);
  return r;
}

/// Evaluates sequences on up to `jobs` threads; results keep input order.
inline std::vector<SequenceReport> evaluate_all(const train::Params& params, const net::ModelConfig& model,
                                                const std::vector<data::SequenceBundle>& bundles,
                                                const EvalOptions& opts = {}, std::size_t jobs = 1) {
  std::vector<SequenceReport> out(bundles.size());
  std::vector<std::exception_ptr> errors(bundles.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < bundles.size(); i = next++) {
      try {
        out[i] = evaluate_sequence(params, model, bundles[i], opts);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(1, bundles.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline std::string aggregate_csv(const std::vector<SequenceReport>& reports) {
  std::string text = "sequence_id,ate_m,rte_m\n";
  for (const auto& r : reports)
    text += r.sequence_id + ',' + data::format_number(r.ate_m) + ',' + data::format_number(r.rte_m) + '\n';
  return text;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw DegenerateInputError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean_ate(const std::vector<SequenceReport>& reports) {
  if (reports.empty()) throw DegenerateInputError("no reports");
  double s = 0;
  for (const auto& r : reports) s += r.ate_m;
  return s / static_cast<double>(reports.size());
}

inline void write_trajectory_csv(const fs::path& path, const Trajectory& t) {
  data::write_positions_csv(path, t.timestamps, t.positions);
}

inline Trajectory read_trajectory_csv(const fs::path& path) {
  const auto gt = data::read_positions_csv(path);
  return {gt.timestamps, gt.positions};
}

}  // namespace suitein::eval
