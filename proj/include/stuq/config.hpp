#ifndef STUQ_CONFIG_HPP
#define STUQ_CONFIG_HPP

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "stuq/common.hpp"
#include "stuq/model.hpp"

namespace stuq {

/// Every pipeline hyperparameter, one flat text file. Sections group the
/// stages; unknown sections or keys are rejected so typos cannot silently
/// fall back to defaults.
struct RunConfig {
  // [run]
  std::uint64_t seed = 7;

  // [data]
  std::string series = "series.raw";
  std::string format = "raw";  // raw | csv
  std::size_t history = 12;
  std::size_t horizon = 12;
  real mape_epsilon = 1.0;

  // [synth]
  std::size_t synth_nodes = 8;
  std::size_t synth_steps = 4000;
  real synth_noise_base = 2.0;
  real synth_noise_scale = 4.0;

  // [model]
  std::size_t hidden = 32;
  std::size_t embed_dim = 8;
  std::size_t layers = 1;
  std::optional<real> encoder_dropout;  // nullopt = auto by node count
  real decoder_dropout = 0.2;
  std::string head_mode = "gaussian";

  // [train]
  std::size_t epochs = 100;
  real lr = 0.003;
  real weight_decay = 1e-6;
  std::size_t batch = 64;
  real lambda = 0.1;
  real clip_norm = 5.0;
  std::string select = "best_val";  // best_val | final
  bool per_layer_decay = false;

  // [awa]
  real awa_lr_max = 0.003;
  real awa_lr_min = 0.00003;
  std::size_t awa_epochs = 20;

  // [calibration]
  real calibration_step = 0.02;
  std::size_t calibration_iters = 500;
  std::size_t calibration_n_mc = 10;

  // [inference]
  std::size_t n_mc = 10;
  real alpha = 0.05;
  int variance_power = 2;

  void validate() const {
    if (format != "raw" && format != "csv")
      throw ConfigError("data.format must be 'raw' or 'csv'");
    if (history < 1 || horizon < 1) throw ConfigError("data.history/horizon must be >= 1");
    if (synth_nodes < 2) throw ConfigError("synth.nodes must be >= 2");
    if (!(synth_noise_base > 0)) throw ConfigError("synth.noise_base must be > 0");
    if (synth_noise_scale < 0) throw ConfigError("synth.noise_scale must be >= 0");
    if (hidden < 1 || embed_dim < 1 || layers < 1)
      throw ConfigError("model dimensions must be >= 1");
    if (encoder_dropout && (*encoder_dropout < 0 || *encoder_dropout >= 1))
      throw ConfigError("model.encoder_dropout must be in [0,1) or 'auto'");
    if (decoder_dropout < 0 || decoder_dropout >= 1)
      throw ConfigError("model.decoder_dropout must be in [0,1)");
    parse_head_mode(head_mode);
    if (epochs < 1 || batch < 1) throw ConfigError("train.epochs/batch must be >= 1");
    if (!(lr > 0)) throw ConfigError("train.lr must be > 0");
    if (!(lambda > 0 && lambda <= 1)) throw ConfigError("train.lambda must be in (0,1]");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (clip_norm < 0) throw ConfigError("train.clip_norm must be >= 0");
    if (select != "best_val" && select != "final")
      throw ConfigError("train.select must be 'best_val' or 'final'");
    if (!(awa_lr_max >= awa_lr_min && awa_lr_min > 0))
      throw ConfigError("awa learning rates must satisfy lr_max >= lr_min > 0");
    if (awa_epochs < 2) throw ConfigError("awa.epochs must be >= 2");
    if (!(calibration_step > 0) || calibration_iters < 1)
      throw ConfigError("calibration.step must be > 0 and iters >= 1");
    if (calibration_n_mc < 1 || n_mc < 1) throw ConfigError("n_mc must be >= 1");
    if (!(alpha > 0 && alpha < 1)) throw ConfigError("inference.alpha must be in (0,1)");
    if (variance_power != 1 && variance_power != 2)
      throw ConfigError("inference.variance_power must be 1 or 2");
  }

  /// Auto rule: small graphs get the lighter rate.
  real resolve_encoder_dropout(std::size_t nodes) const {
    if (encoder_dropout) return *encoder_dropout;
    return nodes > 200 ? real(0.1) : real(0.05);
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline double cfg_num(std::string_view v, const std::string& key) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("invalid number for " + key + ": '" + std::string(v) + "'");
  return out;
}

inline std::size_t cfg_count(std::string_view v, const std::string& key) {
  const double d = cfg_num(v, key);
  if (d < 0 || d != std::floor(d))
    throw ConfigError(key + " must be a non-negative integer, got '" + std::string(v) + "'");
  return static_cast<std::size_t>(d);
}

inline bool cfg_bool(std::string_view v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + " must be true or false, got '" + std::string(v) + "'");
}

inline std::string fmt_real(real v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
  return buf;
}

}  // namespace detail

inline RunConfig parse_config(std::string_view text) {
  RunConfig c;
  std::string section;
  std::size_t line_no = 0;
  std::string_view rest = text;
  while (!rest.empty()) {
    ++line_no;
    const std::size_t nl = rest.find('\n');
    std::string_view line = rest.substr(0, nl);
    rest = nl == std::string_view::npos ? std::string_view{} : rest.substr(nl + 1);
    const std::size_t comment = line.find_first_of("#;");
    if (comment != std::string_view::npos) line = line.substr(0, comment);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      if (section != "run" && section != "data" && section != "synth" && section != "model" &&
          section != "train" && section != "awa" && section != "calibration" &&
          section != "inference")
        throw ConfigError("line " + std::to_string(line_no) + ": unknown section [" + section +
                          "]");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = std::string(detail::trim(line.substr(0, eq)));
    const std::string_view val = detail::trim(line.substr(eq + 1));
    const std::string qual = section + "." + key;

    auto unknown = [&]() -> ConfigError {
      return ConfigError("line " + std::to_string(line_no) + ": unknown key '" + qual + "'");
    };
    if (section == "run") {
      if (key == "seed")
        c.seed = static_cast<std::uint64_t>(detail::cfg_count(val, qual));
      else
        throw unknown();
    } else if (section == "data") {
      if (key == "series") c.series = std::string(val);
      else if (key == "format") c.format = std::string(val);
      else if (key == "history") c.history = detail::cfg_count(val, qual);
      else if (key == "horizon") c.horizon = detail::cfg_count(val, qual);
      else if (key == "mape_epsilon") c.mape_epsilon = detail::cfg_num(val, qual);
      else throw unknown();
    } else if (section == "synth") {
      if (key == "nodes") c.synth_nodes = detail::cfg_count(val, qual);
      else if (key == "steps") c.synth_steps = detail::cfg_count(val, qual);
      else if (key == "noise_base") c.synth_noise_base = detail::cfg_num(val, qual);
      else if (key == "noise_scale") c.synth_noise_scale = detail::cfg_num(val, qual);
      else throw unknown();
    } else if (section == "model") {
      if (key == "hidden") c.hidden = detail::cfg_count(val, qual);
      else if (key == "embed_dim") c.embed_dim = detail::cfg_count(val, qual);
      else if (key == "layers") c.layers = detail::cfg_count(val, qual);
      else if (key == "encoder_dropout") {
        if (val == "auto")
          c.encoder_dropout.reset();
        else
          c.encoder_dropout = detail::cfg_num(val, qual);
      } else if (key == "decoder_dropout") c.decoder_dropout = detail::cfg_num(val, qual);
      else if (key == "head_mode") c.head_mode = std::string(val);
      else throw unknown();
    } else if (section == "train") {
      if (key == "epochs") c.epochs = detail::cfg_count(val, qual);
      else if (key == "lr") c.lr = detail::cfg_num(val, qual);
      else if (key == "weight_decay") c.weight_decay = detail::cfg_num(val, qual);
      else if (key == "batch") c.batch = detail::cfg_count(val, qual);
      else if (key == "lambda") c.lambda = detail::cfg_num(val, qual);
      else if (key == "clip_norm") c.clip_norm = detail::cfg_num(val, qual);
      else if (key == "select") c.select = std::string(val);
      else if (key == "per_layer_decay") c.per_layer_decay = detail::cfg_bool(val, qual);
      else throw unknown();
    } else if (section == "awa") {
      if (key == "lr_max") c.awa_lr_max = detail::cfg_num(val, qual);
      else if (key == "lr_min") c.awa_lr_min = detail::cfg_num(val, qual);
      else if (key == "epochs") c.awa_epochs = detail::cfg_count(val, qual);
      else throw unknown();
    } else if (section == "calibration") {
      if (key == "step") c.calibration_step = detail::cfg_num(val, qual);
      else if (key == "iters") c.calibration_iters = detail::cfg_count(val, qual);
      else if (key == "n_mc") c.calibration_n_mc = detail::cfg_count(val, qual);
      else throw unknown();
    } else if (section == "inference") {
      if (key == "n_mc") c.n_mc = detail::cfg_count(val, qual);
      else if (key == "alpha") c.alpha = detail::cfg_num(val, qual);
      else if (key == "variance_power")
        c.variance_power = static_cast<int>(detail::cfg_count(val, qual));
      else throw unknown();
    } else {
      throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                        "' outside any section");
    }
  }
  c.validate();
  return c;
}

inline std::string serialize_config(const RunConfig& c) {
  std::ostringstream o;
  o << "[run]\n";
  o << "seed = " << c.seed << "\n\n";
  o << "[data]\n";
  o << "series = " << c.series << "\n";
  o << "format = " << c.format << "\n";
  o << "history = " << c.history << "\n";
  o << "horizon = " << c.horizon << "\n";
  o << "mape_epsilon = " << detail::fmt_real(c.mape_epsilon) << "\n\n";
  o << "[synth]\n";
  o << "nodes = " << c.synth_nodes << "\n";
  o << "steps = " << c.synth_steps << "\n";
  o << "noise_base = " << detail::fmt_real(c.synth_noise_base) << "\n";
  o << "noise_scale = " << detail::fmt_real(c.synth_noise_scale) << "\n\n";
  o << "[model]\n";
  o << "hidden = " << c.hidden << "\n";
  o << "embed_dim = " << c.embed_dim << "\n";
  o << "layers = " << c.layers << "\n";
  o << "encoder_dropout = "
    << (c.encoder_dropout ? detail::fmt_real(*c.encoder_dropout) : std::string("auto")) << "\n";
  o << "decoder_dropout = " << detail::fmt_real(c.decoder_dropout) << "\n";
  o << "head_mode = " << c.head_mode << "\n\n";
  o << "[train]\n";
  o << "epochs = " << c.epochs << "\n";
  o << "lr = " << detail::fmt_real(c.lr) << "\n";
  o << "weight_decay = " << detail::fmt_real(c.weight_decay) << "\n";
  o << "batch = " << c.batch << "\n";
  o << "lambda = " << detail::fmt_real(c.lambda) << "\n";
  o << "clip_norm = " << detail::fmt_real(c.clip_norm) << "\n";
  o << "select = " << c.select << "\n";
  o << "per_layer_decay = " << (c.per_layer_decay ? "true" : "false") << "\n\n";
  o << "[awa]\n";
  o << "lr_max = " << detail::fmt_real(c.awa_lr_max) << "\n";
  o << "lr_min = " << detail::fmt_real(c.awa_lr_min) << "\n";
  o << "epochs = " << c.awa_epochs << "\n\n";
  o << "[calibration]\n";
  o << "step = " << detail::fmt_real(c.calibration_step) << "\n";
  o << "iters = " << c.calibration_iters << "\n";
  o << "n_mc = " << c.calibration_n_mc << "\n\n";
  o << "[inference]\n";
  o << "n_mc = " << c.n_mc << "\n";
  o << "alpha = " << detail::fmt_real(c.alpha) << "\n";
  o << "variance_power = " << c.variance_power << "\n";
  return o.str();
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(serialize_config(c))));
  return buf;
}

}  // namespace stuq

#endif  // STUQ_CONFIG_HPP
