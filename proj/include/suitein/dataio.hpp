#pragma once

// Ingestion of per-device IMU streams and ground truth, resampling to a
// common rate, and sliding-window slicing with mean-velocity targets.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "suitein/errors.hpp"
#include "suitein/tensor.hpp"

namespace suitein::data {

namespace fs = std::filesystem;

using Imu6 = std::array<double, 6>;  // ax, ay, az, gx, gy, gz
using Vec2 = std::array<double, 2>;

inline constexpr std::string_view kDeviceCsvHeader = "t,ax,ay,az,gx,gy,gz";
inline constexpr std::string_view kPositionCsvHeader = "t,px,py";
inline constexpr std::size_t kImuChannels = 6;

struct SampleStream {
  std::string device_id;
  double rate_hz = 0.0;
  std::vector<double> timestamps;
  std::vector<Imu6> samples;

  std::size_t size() const { return timestamps.size(); }
};

struct GroundTruth {
  std::vector<double> timestamps;
  std::vector<Vec2> positions;

  double start() const { return timestamps.front(); }
  double end() const { return timestamps.back(); }
  bool covers(double t, double tol = 1e-9) const {
    return !timestamps.empty() && t >= start() - tol && t <= end() + tol;
  }

  /// Linear interpolation; t must lie inside the span (1e-9 s slack).
  Vec2 position_at(double t) const {
    if (!covers(t)) {
      throw ContractError("ground truth queried at t=" + std::to_string(t) + " outside [" +
                          std::to_string(start()) + ", " + std::to_string(end()) + "]");
    }
    if (timestamps.size() == 1) return positions.front();
    auto it = std::upper_bound(timestamps.begin(), timestamps.end(), t);
    std::size_t hi = std::clamp<std::size_t>(it - timestamps.begin(), 1, timestamps.size() - 1);
    const std::size_t lo = hi - 1;
    const double w = std::clamp((t - timestamps[lo]) / (timestamps[hi] - timestamps[lo]), 0.0, 1.0);
    return {positions[lo][0] + w * (positions[hi][0] - positions[lo][0]),
            positions[lo][1] + w * (positions[hi][1] - positions[lo][1])};
  }
};

struct SequenceBundle {
  std::string sequence_id;
  std::vector<SampleStream> streams;
  GroundTruth ground_truth;
  double common_rate_hz = 25.0;

  std::size_t device_count() const { return streams.size(); }

  std::vector<std::string> device_ids() const {
    std::vector<std::string> ids;
    for (const auto& s : streams) ids.push_back(s.device_id);
    return ids;
  }

  /// Streams reordered/filtered to `ids`, in the order given.
  SequenceBundle subset(const std::vector<std::string>& ids) const {
    SequenceBundle out{sequence_id, {}, ground_truth, common_rate_hz};
    for (const auto& id : ids) {
      auto it = std::find_if(streams.begin(), streams.end(), [&](const auto& s) { return s.device_id == id; });
      if (it == streams.end()) throw ConfigError("sequence '" + sequence_id + "' has no device '" + id + "'");
      out.streams.push_back(*it);
    }
    return out;
  }
};

struct WindowOptions {
  std::size_t length = 50;
  std::size_t stride = 25;
};

/// Windows stacked as B x J x 6 x L (row-major, float) with B x 2 targets.
struct WindowBatch {
  std::size_t devices = 0;
  std::size_t length = 0;
  std::vector<std::string> device_ids;  // window device order
  std::vector<float> windows;
  std::vector<double> targets;  // m/s, kept in double; tensors get float copies
  std::vector<double> start_times;
  std::vector<double> end_times;
  std::vector<std::string> sequence_ids;  // per window
  std::size_t dropped = 0;                // windows that fell outside ground truth

  std::size_t size() const { return start_times.size(); }
  bool empty() const { return start_times.empty(); }
  std::size_t window_stride() const { return devices * kImuChannels * length; }

  ad::Tensor window_tensor(const std::vector<std::size_t>& indices) const {
    if (indices.empty()) throw DegenerateInputError("window_tensor: empty index list");
    std::vector<float> out;
    out.reserve(indices.size() * window_stride());
    for (std::size_t i : indices) {
      auto first = windows.begin() + static_cast<std::ptrdiff_t>(i * window_stride());
      out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(window_stride()));
    }
    return ad::Tensor({indices.size(), devices, kImuChannels, length}, std::move(out));
  }

  ad::Tensor target_tensor(const std::vector<std::size_t>& indices) const {
    if (indices.empty()) throw DegenerateInputError("target_tensor: empty index list");
    std::vector<float> out;
    for (std::size_t i : indices) {
      out.push_back(static_cast<float>(targets[2 * i]));
      out.push_back(static_cast<float>(targets[2 * i + 1]));
    }
    return ad::Tensor({indices.size(), 2}, std::move(out));
  }

  Vec2 target(std::size_t i) const { return {targets[2 * i], targets[2 * i + 1]}; }

  /// Keeps only the listed device positions, in that order.
  WindowBatch select_devices(const std::vector<std::size_t>& device_indices) const {
    WindowBatch out = *this;
    out.devices = device_indices.size();
    out.device_ids.clear();
    for (std::size_t j : device_indices)
      if (j < device_ids.size()) out.device_ids.push_back(device_ids[j]);
    out.windows.clear();
    const std::size_t block = kImuChannels * length;
    for (std::size_t n = 0; n < size(); ++n) {
      for (std::size_t j : device_indices) {
        if (j >= devices) throw DimensionError("select_devices: device index " + std::to_string(j) + " out of range");
        auto first = windows.begin() + static_cast<std::ptrdiff_t>(n * window_stride() + j * block);
        out.windows.insert(out.windows.end(), first, first + static_cast<std::ptrdiff_t>(block));
      }
    }
    return out;
  }

  void append(const WindowBatch& other) {
    if (empty() && devices == 0) {
      devices = other.devices;
      length = other.length;
      device_ids = other.device_ids;
    }
    if (other.device_ids != device_ids) {
      throw DimensionError("cannot append windows with a different device order");
    }
    if (other.devices != devices || other.length != length) {
      throw DimensionError("cannot append windows of J=" + std::to_string(other.devices) +
                           ", L=" + std::to_string(other.length) + " to J=" + std::to_string(devices) +
                           ", L=" + std::to_string(length));
    }
    windows.insert(windows.end(), other.windows.begin(), other.windows.end());
    targets.insert(targets.end(), other.targets.begin(), other.targets.end());
    start_times.insert(start_times.end(), other.start_times.begin(), other.start_times.end());
    end_times.insert(end_times.end(), other.end_times.begin(), other.end_times.end());
    sequence_ids.insert(sequence_ids.end(), other.sequence_ids.begin(), other.sequence_ids.end());
    dropped += other.dropped;
  }
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline bool parse_double(std::string_view field, double& out) {
  field = trim(field);
  if (field.empty()) return false;
  if (field.front() == '+') field.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
  return ec == std::errc() && ptr == field.data() + field.size() && std::isfinite(out);
}

}  // namespace detail

struct CsvRow {
  std::size_t line = 0;
  std::vector<double> values;
};

/// Numeric CSV with a required exact header. Blank lines are skipped.
inline std::vector<CsvRow> read_numeric_csv(const fs::path& path, std::string_view header) {
  std::ifstream in(path);
  if (!in) throw IngestionError(path.string(), 0, "cannot open file");
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw IngestionError(path.string(), 1, "missing header");
  ++line_no;
  std::string compact;
  for (char c : detail::trim(line))
    if (c != ' ') compact.push_back(c);
  if (compact != header) {
    throw IngestionError(path.string(), 1, "expected header '" + std::string(header) + "', got '" + line + "'");
  }
  const std::size_t columns = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    CsvRow row{line_no, {}};
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      double v = 0;
      if (!detail::parse_double(rest.substr(0, comma), v)) {
        throw IngestionError(path.string(), line_no, "malformed numeric field in '" + line + "'");
      }
      row.values.push_back(v);
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (row.values.size() != columns) {
      throw IngestionError(path.string(), line_no,
                           "expected " + std::to_string(columns) + " fields, got " + std::to_string(row.values.size()));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Shortest decimal text that round-trips the double exactly.
inline std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FilesystemError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out.flush()) throw FilesystemError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Validation

inline void validate_timestamps(const std::vector<double>& ts, const std::vector<std::size_t>& lines,
                                const std::string& source) {
  for (std::size_t i = 1; i < ts.size(); ++i) {
    if (!(ts[i] > ts[i - 1])) {
      throw IngestionError(source, lines.empty() ? 0 : lines[i],
                           "timestamp " + format_number(ts[i]) + " does not increase (previous " +
                               format_number(ts[i - 1]) + ")");
    }
  }
}

/// Strict monotonicity and |dt - 1/rate| < 0.2/rate.
inline void validate_stream(const SampleStream& s, const std::vector<std::size_t>& lines = {},
                            const std::string& source = "") {
  const std::string where = source.empty() ? "stream '" + s.device_id + "'" : source;
  if (!(s.rate_hz > 0)) throw IngestionError(where, 0, "rate_hz must be positive");
  if (s.samples.size() != s.timestamps.size()) throw IngestionError(where, 0, "sample/timestamp count mismatch");
  validate_timestamps(s.timestamps, lines, where);
  const double nominal = 1.0 / s.rate_hz;
  for (std::size_t i = 1; i < s.timestamps.size(); ++i) {
    const double dt = s.timestamps[i] - s.timestamps[i - 1];
    if (std::abs(dt - nominal) >= 0.2 * nominal) {
      throw IngestionError(where, lines.empty() ? 0 : lines[i],
                           "sample gap " + format_number(dt) + " s inconsistent with " + format_number(s.rate_hz) +
                               " Hz");
    }
  }
}

// ---------------------------------------------------------------------------
// File formats

inline SampleStream read_stream_csv(const fs::path& path, const std::string& device_id, double rate_hz) {
  auto rows = read_numeric_csv(path, kDeviceCsvHeader);
  SampleStream s{device_id, rate_hz, {}, {}};
  std::vector<std::size_t> lines;
  for (const auto& row : rows) {
    s.timestamps.push_back(row.values[0]);
    s.samples.push_back({row.values[1], row.values[2], row.values[3], row.values[4], row.values[5], row.values[6]});
    lines.push_back(row.line);
  }
  validate_stream(s, lines, path.string());
  return s;
}

inline GroundTruth read_positions_csv(const fs::path& path) {
  auto rows = read_numeric_csv(path, kPositionCsvHeader);
  GroundTruth gt;
  std::vector<std::size_t> lines;
  for (const auto& row : rows) {
    gt.timestamps.push_back(row.values[0]);
    gt.positions.push_back({row.values[1], row.values[2]});
    lines.push_back(row.line);
  }
  validate_timestamps(gt.timestamps, lines, path.string());
  return gt;
}

inline void write_stream_csv(const fs::path& path, const SampleStream& s) {
  std::string text(kDeviceCsvHeader);
  text += '\n';
  for (std::size_t i = 0; i < s.size(); ++i) {
    text += format_number(s.timestamps[i]);
    for (double v : s.samples[i]) {
      text += ',';
      text += format_number(v);
    }
    text += '\n';
  }
  write_text_file(path, text);
}

inline void write_positions_csv(const fs::path& path, const std::vector<double>& timestamps,
                                const std::vector<Vec2>& positions) {
  std::string text(kPositionCsvHeader);
  text += '\n';
  for (std::size_t i = 0; i < timestamps.size(); ++i) {
    text += format_number(timestamps[i]) + ',' + format_number(positions[i][0]) + ',' +
            format_number(positions[i][1]) + '\n';
  }
  write_text_file(path, text);
}

struct ManifestDevice {
  std::string id;
  std::string file;
  double rate_hz = 0;
};

struct Manifest {
  std::string sequence_id;
  double common_rate_hz = 25.0;
  std::vector<ManifestDevice> devices;
  std::string ground_truth_file;
  double ground_truth_rate_hz = 30.0;
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json devices = nlohmann::json::array();
  for (const auto& d : m.devices) devices.push_back({{"id", d.id}, {"file", d.file}, {"rate_hz", d.rate_hz}});
  return {{"sequence_id", m.sequence_id},
          {"common_rate_hz", m.common_rate_hz},
          {"devices", devices},
          {"ground_truth", {{"file", m.ground_truth_file}, {"rate_hz", m.ground_truth_rate_hz}}}};
}

inline Manifest parse_manifest(const nlohmann::json& j, const std::string& source) {
  try {
    Manifest m;
    m.sequence_id = j.at("sequence_id").get<std::string>();
    m.common_rate_hz = j.value("common_rate_hz", 25.0);
    for (const auto& d : j.at("devices")) {
      m.devices.push_back({d.at("id").get<std::string>(), d.at("file").get<std::string>(), d.at("rate_hz").get<double>()});
    }
    m.ground_truth_file = j.at("ground_truth").at("file").get<std::string>();
    m.ground_truth_rate_hz = j.at("ground_truth").value("rate_hz", 30.0);
    if (j.contains("device_count") && j.at("device_count").get<std::size_t>() != m.devices.size()) {
      throw IngestionError(source, 0,
                           "device_count " + j.at("device_count").dump() + " disagrees with " +
                               std::to_string(m.devices.size()) + " listed devices");
    }
    if (m.devices.empty()) throw IngestionError(source, 0, "manifest lists no devices");
    if (!(m.common_rate_hz > 0)) throw IngestionError(source, 0, "common_rate_hz must be positive");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(source, 0, std::string("bad manifest: ") + e.what());
  }
}

inline Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError(path.string(), 0, "cannot open manifest");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw IngestionError(path.string(), 0, std::string("malformed JSON: ") + e.what());
  }
  return parse_manifest(j, path.string());
}

/// Reads a manifest and the CSVs it references (paths relative to it).
inline SequenceBundle load_sequence(const fs::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  SequenceBundle bundle;
  bundle.sequence_id = m.sequence_id;
  bundle.common_rate_hz = m.common_rate_hz;
  for (const auto& d : m.devices) bundle.streams.push_back(read_stream_csv(base / d.file, d.id, d.rate_hz));
  bundle.ground_truth = read_positions_csv(base / m.ground_truth_file);
  if (bundle.ground_truth.timestamps.size() < 2) {
    throw IngestionError((base / m.ground_truth_file).string(), 0, "ground truth needs at least two rows");
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Resampling

/// Linear interpolation of `stream` at origin + k/rate, k = 0..count-1.
inline SampleStream resample_on_grid(const SampleStream& stream, double origin, std::size_t count, double rate_hz) {
  if (stream.size() < 2) throw DegenerateInputError("resample: stream '" + stream.device_id + "' has < 2 samples");
  if (count == 0) throw DegenerateInputError("resample: target grid for '" + stream.device_id + "' is empty");
  constexpr double kSlack = 1e-9;
  SampleStream out{stream.device_id, rate_hz, {}, {}};
  out.timestamps.reserve(count);
  out.samples.reserve(count);
  const auto& ts = stream.timestamps;
  std::size_t seg = 0;
  for (std::size_t k = 0; k < count; ++k) {
    const double t = origin + static_cast<double>(k) / rate_hz;
    if (t < ts.front() - kSlack || t > ts.back() + kSlack) {
      throw ContractError("resample: grid time " + format_number(t) + " outside stream '" + stream.device_id + "'");
    }
    while (seg + 2 < ts.size() && ts[seg + 1] <= t) ++seg;
    const double w = std::clamp((t - ts[seg]) / (ts[seg + 1] - ts[seg]), 0.0, 1.0);
    Imu6 v{};
    for (std::size_t c = 0; c < kImuChannels; ++c)
      v[c] = stream.samples[seg][c] + w * (stream.samples[seg + 1][c] - stream.samples[seg][c]);
    out.timestamps.push_back(t);
    out.samples.push_back(v);
  }
  return out;
}

inline std::size_t grid_count(double span_s, double rate_hz) {
  if (span_s < 0) return 0;
  return static_cast<std::size_t>(std::floor(span_s * rate_hz + 1e-6)) + 1;
}

/// Resamples onto a uniform grid starting at the first sample and covering
/// the stream's span. Downsampling or equal rate only.
inline SampleStream resample(const SampleStream& stream, double target_hz) {
  if (!(target_hz > 0)) throw ConfigError("resample: target rate must be positive");
  if (target_hz > stream.rate_hz * (1 + 1e-9)) {
    throw ContractError("resample: target " + format_number(target_hz) + " Hz exceeds native " +
                        format_number(stream.rate_hz) + " Hz of '" + stream.device_id + "'");
  }
  if (stream.size() < 2) throw DegenerateInputError("resample: stream '" + stream.device_id + "' has < 2 samples");
  const double span = stream.timestamps.back() - stream.timestamps.front();
  return resample_on_grid(stream, stream.timestamps.front(), grid_count(span, target_hz), target_hz);
}

/// All streams on one shared grid at the common rate, spanning the interval
/// where every stream has data.
inline SequenceBundle align_streams(const SequenceBundle& bundle) {
  if (bundle.streams.empty()) throw DegenerateInputError("sequence '" + bundle.sequence_id + "' has no streams");
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (const auto& s : bundle.streams) {
    if (s.size() < 2) throw DegenerateInputError("stream '" + s.device_id + "' has < 2 samples");
    if (bundle.common_rate_hz > s.rate_hz * (1 + 1e-9)) {
      throw ContractError("common rate " + format_number(bundle.common_rate_hz) + " Hz exceeds native rate of '" +
                          s.device_id + "'");
    }
    t0 = std::max(t0, s.timestamps.front());
    t1 = std::min(t1, s.timestamps.back());
  }
  const std::size_t count = grid_count(t1 - t0, bundle.common_rate_hz);
  if (t1 < t0 || count == 0) {
    throw DegenerateInputError("streams of '" + bundle.sequence_id + "' do not overlap in time");
  }
  SequenceBundle out{bundle.sequence_id, {}, bundle.ground_truth, bundle.common_rate_hz};
  for (const auto& s : bundle.streams) out.streams.push_back(resample_on_grid(s, t0, count, bundle.common_rate_hz));
  return out;
}

// ---------------------------------------------------------------------------
// Windowing

/// Slices aligned streams into windows of `length` samples every `stride`
/// samples. Window n spans [t_n, t_n + length/rate); its target is the
/// ground-truth displacement over that span divided by its duration.
inline WindowBatch make_windows(const SequenceBundle& bundle, const WindowOptions& opts = {}) {
  if (opts.length == 0 || opts.stride == 0) throw ConfigError("window length and stride must be positive");
  const SequenceBundle aligned = align_streams(bundle);
  const double rate = aligned.common_rate_hz;
  const std::size_t count = aligned.streams.front().size();
  const std::size_t devices = aligned.device_count();
  const auto& gt = aligned.ground_truth;

  WindowBatch batch;
  batch.devices = devices;
  batch.device_ids = aligned.device_ids();
  batch.length = opts.length;
  for (std::size_t k0 = 0; k0 + opts.length <= count; k0 += opts.stride) {
    const double t_start = aligned.streams.front().timestamps[k0];
    const double t_end = t_start + static_cast<double>(opts.length) / rate;
    if (!gt.covers(t_start) || !gt.covers(t_end)) {
      ++batch.dropped;
      continue;
    }
    const Vec2 p0 = gt.position_at(t_start);
    const Vec2 p1 = gt.position_at(t_end);
    const double dt = t_end - t_start;
    batch.targets.push_back((p1[0] - p0[0]) / dt);
    batch.targets.push_back((p1[1] - p0[1]) / dt);
    batch.start_times.push_back(t_start);
    batch.end_times.push_back(t_end);
    batch.sequence_ids.push_back(aligned.sequence_id);
    for (std::size_t j = 0; j < devices; ++j)
      for (std::size_t c = 0; c < kImuChannels; ++c)
        for (std::size_t l = 0; l < opts.length; ++l)
          batch.windows.push_back(static_cast<float>(aligned.streams[j].samples[k0 + l][c]));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Dataset split

/// Sequence ids per split; stored as {"train": [...], "val": [...], "test": [...]}.
struct Split {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  const std::vector<std::string>& named(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
  }
};

inline constexpr const char* kSplitFile = "split.json";
inline constexpr const char* kManifestFile = "manifest.json";

inline void write_split(const fs::path& path, const Split& split) {
  nlohmann::json j{{"train", split.train}, {"val", split.val}, {"test", split.test}};
  write_text_file(path, j.dump(2) + "\n");
}

inline Split read_split(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError(path.string(), 0, "cannot open split file");
  try {
    nlohmann::json j;
    in >> j;
    return Split{j.at("train").get<std::vector<std::string>>(), j.at("val").get<std::vector<std::string>>(),
                 j.at("test").get<std::vector<std::string>>()};
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(path.string(), 0, std::string("bad split file: ") + e.what());
  }
}

/// Manifest location for a sequence inside a dataset directory.
inline fs::path manifest_path(const fs::path& dataset_dir, const std::string& sequence_id) {
  return dataset_dir / sequence_id / kManifestFile;
}

/// Loads every sequence of one split, in split-file order.
inline std::vector<SequenceBundle> load_split(const fs::path& dataset_dir, const std::string& split_name) {
  const Split split = read_split(dataset_dir / kSplitFile);
  std::vector<SequenceBundle> out;
  for (const auto& id : split.named(split_name)) out.push_back(load_sequence(manifest_path(dataset_dir, id)));
  return out;
}

}  // namespace suitein::data
