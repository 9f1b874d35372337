#ifndef STUQ_DATA_HPP
#define STUQ_DATA_HPP

#include <array>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stuq/common.hpp"
#include "stuq/model.hpp"

namespace stuq {

/// Node-major time series: values[t * nodes + v] is node v at step t.
struct SeriesMatrix {
  std::size_t nodes = 0;
  std::size_t steps = 0;
  int interval_minutes = 5;
  std::vector<real> values;

  real at(std::size_t t, std::size_t v) const { return values[t * nodes + v]; }

  bool operator==(const SeriesMatrix&) const = default;
};

enum class SeriesFormat { csv, raw };

namespace detail {

inline double parse_cell(std::string_view cell, std::size_t row, std::size_t col) {
  double out = 0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto [p, ec] = std::from_chars(b, e, out);
  if (ec != std::errc() || p != e)
    throw DataError("non-numeric cell at row " + std::to_string(row) + ", column " +
                    std::to_string(col) + ": '" + std::string(cell) + "'");
  if (!std::isfinite(out))
    throw DataError("non-finite value at row " + std::to_string(row) + ", column " +
                    std::to_string(col));
  return out;
}

inline std::filesystem::path manifest_path(const std::filesystem::path& raw) {
  std::filesystem::path p = raw;
  p += ".manifest.json";
  return p;
}

}  // namespace detail

/// CSV layout: first row is a header of node ids, each following row is one
/// time step. Raw layout: little-endian 32-bit floats, row-major time x nodes,
/// described by a JSON manifest {nodes, steps, interval_minutes} stored next
/// to the file. Missing or malformed entries are ingestion errors, never
/// silently imputed.
inline SeriesMatrix load_series(const std::filesystem::path& path, SeriesFormat format) {
  if (!std::filesystem::exists(path))
    throw DataError("series file not found: " + path.string());
  SeriesMatrix m;
  if (format == SeriesFormat::csv) {
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty csv: " + path.string());
    std::size_t nodes = std::count(line.begin(), line.end(), ',') + 1;
    m.nodes = nodes;
    std::size_t row = 1;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      std::size_t col = 0, pos = 0;
      while (true) {
        std::size_t comma = line.find(',', pos);
        std::string_view cell(line.data() + pos,
                              (comma == std::string::npos ? line.size() : comma) - pos);
        m.values.push_back(static_cast<real>(detail::parse_cell(cell, row, col)));
        ++col;
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
      if (col != nodes)
        throw DataError("row " + std::to_string(row) + " has " + std::to_string(col) +
                        " cells, header declares " + std::to_string(nodes));
      ++row;
    }
    m.steps = row - 1;
  } else {
    std::ifstream mf(detail::manifest_path(path));
    if (!mf) throw DataError("missing manifest for raw series: " +
                             detail::manifest_path(path).string());
    nlohmann::json j = nlohmann::json::parse(mf);
    m.nodes = j.at("nodes").get<std::size_t>();
    m.steps = j.at("steps").get<std::size_t>();
    m.interval_minutes = j.value("interval_minutes", 5);
    const std::uintmax_t expect = std::uintmax_t(m.nodes) * m.steps * sizeof(float);
    const std::uintmax_t actual = std::filesystem::file_size(path);
    if (actual != expect)
      throw DataError("raw series size mismatch: manifest declares " + std::to_string(m.nodes) +
                      " nodes x " + std::to_string(m.steps) + " steps (" +
                      std::to_string(expect) + " bytes), file has " + std::to_string(actual));
    std::ifstream in(path, std::ios::binary);
    std::vector<float> buf(m.nodes * m.steps);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw DataError("short read on raw series: " + path.string());
    m.values.resize(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
      if (!std::isfinite(buf[i]))
        throw DataError("non-finite value at row " + std::to_string(i / m.nodes) + ", column " +
                        std::to_string(i % m.nodes));
      m.values[i] = static_cast<real>(buf[i]);
    }
  }
  if (m.steps == 0 || m.nodes == 0) throw DataError("series is empty: " + path.string());
  return m;
}

inline void write_series_raw(const SeriesMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  std::vector<float> buf(m.values.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(m.values[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  nlohmann::ordered_json j;
  j["nodes"] = m.nodes;
  j["steps"] = m.steps;
  j["interval_minutes"] = m.interval_minutes;
  std::ofstream mf(detail::manifest_path(path));
  mf << j.dump(2) << '\n';
}

inline void write_series_csv(const SeriesMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t v = 0; v < m.nodes; ++v) out << (v ? "," : "") << "node_" << v;
  out << '\n';
  char buf[64];
  for (std::size_t t = 0; t < m.steps; ++t) {
    for (std::size_t v = 0; v < m.nodes; ++v) {
      std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(m.at(t, v)));
      out << (v ? "," : "") << buf;
    }
    out << '\n';
  }
}

/// One supervised sample: x spans steps [origin - history + 1, origin],
/// y spans [origin + 1, origin + horizon]; both node-major.
struct WindowedSample {
  std::vector<real> x;  // [nodes x history]
  std::vector<real> y;  // [nodes x horizon]
  std::size_t origin = 0;
};

inline std::vector<WindowedSample> make_windows(const SeriesMatrix& m, std::size_t history,
                                                std::size_t horizon) {
  if (history < 1 || horizon < 1) throw UsageError("make_windows: history/horizon must be >= 1");
  if (m.steps < history + horizon)
    throw DataError("series too short: " + std::to_string(m.steps) + " steps < " +
                    std::to_string(history + horizon));
  const std::size_t count = m.steps - history - horizon + 1;
  std::vector<WindowedSample> out(count);
  for (std::size_t s = 0; s < count; ++s) {
    WindowedSample& w = out[s];
    w.origin = history - 1 + s;
    w.x.resize(m.nodes * history);
    w.y.resize(m.nodes * horizon);
    for (std::size_t v = 0; v < m.nodes; ++v) {
      for (std::size_t k = 0; k < history; ++k) w.x[v * history + k] = m.at(s + k, v);
      for (std::size_t k = 0; k < horizon; ++k) w.y[v * horizon + k] = m.at(w.origin + 1 + k, v);
    }
  }
  return out;
}

/// Chronological train/val/test split over windows with z-score statistics
/// fitted on the training inputs only. Windows are stored raw; inputs are
/// normalized on the fly with `stats` when fed to the model, targets always
/// stay in raw units.
struct SplitBundle {
  std::vector<WindowedSample> samples;
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  NormStats stats;

  std::span<const WindowedSample> train() const {
    return {samples.data(), train_end};
  }
  std::span<const WindowedSample> val() const {
    return {samples.data() + train_end, val_end - train_end};
  }
  std::span<const WindowedSample> test() const {
    return {samples.data() + val_end, samples.size() - val_end};
  }
};

inline SplitBundle split_and_normalize(std::vector<WindowedSample> samples,
                                       std::array<std::size_t, 3> ratios = {6, 2, 2}) {
  if (samples.size() < 10) throw DataError("too few samples to split: " +
                                           std::to_string(samples.size()));
  const std::size_t total = ratios[0] + ratios[1] + ratios[2];
  if (total == 0 || ratios[0] == 0) throw ConfigError("split ratios must be positive");
  SplitBundle b;
  b.samples = std::move(samples);
  const std::size_t n = b.samples.size();
  b.train_end = n * ratios[0] / total;
  b.val_end = b.train_end + n * ratios[1] / total;

  double sum = 0, count = 0;
  for (std::size_t i = 0; i < b.train_end; ++i)
    for (real v : b.samples[i].x) {
      sum += v;
      count += 1;
    }
  const double mean = sum / count;
  double sq = 0;
  for (std::size_t i = 0; i < b.train_end; ++i)
    for (real v : b.samples[i].x) sq += (v - mean) * (v - mean);
  double stddev = std::sqrt(sq / count);
  if (stddev < 1e-12) stddev = 1;  // constant series still trains
  b.stats.mean = static_cast<real>(mean);
  b.stats.stddev = static_cast<real>(stddev);
  return b;
}

// ---------------------------------------------------------------------------
// synthetic generator

struct SynthConfig {
  std::size_t nodes = 8;
  std::size_t steps = 4000;
  std::uint64_t seed = 7;
  real noise_base = 2;   // a: noise floor
  real noise_scale = 4;  // b: heteroscedastic swing
};

struct SyntheticTruth {
  std::uint64_t seed = 0;
  real noise_base = 0;
  real noise_scale = 0;
  std::vector<real> adjacency;   // row-normalized [nodes x nodes]
  std::vector<real> amplitude;   // per-node seasonal amplitude
  std::vector<real> sigma_true;  // [steps x nodes]
};

/// Ring-with-chords diffusion driven by a daily sinusoid, observed under
/// heteroscedastic Gaussian noise sigma(t,v) = a + b |season(t,v)|. The noise
/// field is recorded so tests can compare against the ground truth.
inline std::pair<SeriesMatrix, SyntheticTruth> synth_generate(const SynthConfig& cfg) {
  if (cfg.nodes < 2) throw ConfigError("synth: need at least 2 nodes");
  if (cfg.steps < 2) throw ConfigError("synth: need at least 2 steps");
  if (!(cfg.noise_base > 0)) throw ConfigError("synth: noise_base must be > 0");
  if (cfg.noise_scale < 0) throw ConfigError("synth: noise_scale must be >= 0");

  const std::size_t n = cfg.nodes;
  SyntheticTruth truth;
  truth.seed = cfg.seed;
  truth.noise_base = cfg.noise_base;
  truth.noise_scale = cfg.noise_scale;
  truth.adjacency.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    truth.adjacency[i * n + i] = 1;
    truth.adjacency[i * n + (i + 1) % n] = 1;
    truth.adjacency[i * n + (i + n - 1) % n] = 1;
    truth.adjacency[i * n + (i + n / 2) % n] = 1;
    real row = 0;
    for (std::size_t j = 0; j < n; ++j) row += truth.adjacency[i * n + j];
    for (std::size_t j = 0; j < n; ++j) truth.adjacency[i * n + j] /= row;
  }

  RngStream amp_rng(derive_seed(cfg.seed, {tag("synth_amp")}));
  truth.amplitude.resize(n);
  for (auto& a : truth.amplitude) a = static_cast<real>(amp_rng.uniform(0.5, 1.5));

  SeriesMatrix m;
  m.nodes = n;
  m.steps = cfg.steps;
  m.values.resize(n * cfg.steps);
  truth.sigma_true.resize(n * cfg.steps);

  RngStream noise(derive_seed(cfg.seed, {tag("synth_noise")}));
  std::vector<real> state(n, 0), next(n, 0);
  const double two_pi = 6.28318530717958647692;
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const double season_t = std::sin(two_pi * static_cast<double>(t) / 288.0);
    for (std::size_t v = 0; v < n; ++v) {
      const real season = static_cast<real>(season_t) * truth.amplitude[v];
      const real sigma = cfg.noise_base + cfg.noise_scale * std::fabs(season);
      truth.sigma_true[t * n + v] = sigma;
      m.values[t * n + v] = state[v] + sigma * static_cast<real>(noise.normal());
    }
    for (std::size_t v = 0; v < n; ++v) {
      real mix = 0;
      for (std::size_t j = 0; j < n; ++j) mix += truth.adjacency[v * n + j] * state[j];
      next[v] = real(0.6) * mix + static_cast<real>(season_t) * truth.amplitude[v];
    }
    state.swap(next);
  }
  return {std::move(m), std::move(truth)};
}

inline void write_truth_json(const SyntheticTruth& t, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["seed"] = t.seed;
  j["a"] = t.noise_base;
  j["b"] = t.noise_scale;
  const std::size_t n = t.amplitude.size();
  nlohmann::ordered_json adj = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < n; ++i) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < n; ++k) row.push_back(t.adjacency[i * n + k]);
    adj.push_back(std::move(row));
  }
  j["adjacency"] = std::move(adj);
  j["node_amplitude"] = t.amplitude;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace stuq

#endif  // STUQ_DATA_HPP
