#ifndef STUQ_PIPELINE_HPP
#define STUQ_PIPELINE_HPP

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stuq/calibrate.hpp"
#include "stuq/config.hpp"
#include "stuq/data.hpp"
#include "stuq/evaluate.hpp"
#include "stuq/losses.hpp"
#include "stuq/model.hpp"
#include "stuq/train.hpp"

namespace stuq {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

inline std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "missing";
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

inline void write_json(const fs::path& p, const ordered_json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

/// Artifact layout of one run directory.
struct StagePaths {
  fs::path out;
  fs::path series;

  StagePaths(const fs::path& out_dir, const RunConfig& cfg,
             const fs::path& series_root = {}) : out(out_dir) {
    fs::path s = cfg.series;
    if (s.is_relative()) s = (series_root.empty() ? out_dir : series_root) / s;
    series = s;
  }

  fs::path truth() const { return series.parent_path() / "truth.json"; }
  fs::path pretrain_ckpt() const { return out / "pretrain.ckpt"; }
  fs::path awa_ckpt() const { return out / "awa.ckpt"; }
  fs::path calibration() const { return out / "calibration.json"; }
  fs::path evaluation() const { return out / "evaluation.json"; }
  fs::path predictions() const { return out / "predictions.csv"; }
  fs::path report(const std::string& stage) const { return out / ("report_" + stage + ".json"); }
};

namespace detail {

struct StageTimer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

inline void write_stage_report(const StagePaths& paths, const RunConfig& cfg,
                               const std::string& stage, double elapsed_ms,
                               std::initializer_list<fs::path> artifacts) {
  ordered_json j;
  j["stage"] = stage;
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  j["elapsed_ms"] = elapsed_ms;
  ordered_json arts = ordered_json::object();
  for (const fs::path& a : artifacts) arts[a.filename().string()] = file_hash(a);
  j["artifacts"] = std::move(arts);
  j["config"] = serialize_config(cfg);
  write_json(paths.report(stage), j);
}

}  // namespace detail

inline SeriesFormat parse_series_format(const std::string& s) {
  return s == "csv" ? SeriesFormat::csv : SeriesFormat::raw;
}

inline SplitBundle load_dataset(const RunConfig& cfg, const StagePaths& paths) {
  SeriesMatrix m = load_series(paths.series, parse_series_format(cfg.format));
  return split_and_normalize(make_windows(m, cfg.history, cfg.horizon));
}

inline ModelConfig model_config_for(const RunConfig& cfg, std::size_t nodes, HeadMode mode) {
  ModelConfig m;
  m.nodes = nodes;
  m.in_channels = 1;
  m.hidden = cfg.hidden;
  m.embed_dim = cfg.embed_dim;
  m.history = cfg.history;
  m.horizon = cfg.horizon;
  m.layers = cfg.layers;
  m.encoder_dropout = cfg.resolve_encoder_dropout(nodes);
  m.decoder_dropout = cfg.decoder_dropout;
  m.head_mode = mode;
  m.validate();
  return m;
}

inline TrainSettings train_settings_for(const RunConfig& cfg) {
  TrainSettings t;
  t.epochs = cfg.epochs;
  t.lr = cfg.lr;
  t.weight_decay = cfg.weight_decay;
  t.batch = cfg.batch;
  t.lambda = cfg.lambda;
  t.clip_norm = cfg.clip_norm;
  t.select_best_val = cfg.select == "best_val";
  t.per_layer_decay = cfg.per_layer_decay;
  return t;
}

// ---------------------------------------------------------------------------
// stages

inline void run_synth(const RunConfig& cfg, const StagePaths& paths) {
  detail::StageTimer timer;
  fs::create_directories(paths.series.parent_path());
  SynthConfig sc;
  sc.nodes = cfg.synth_nodes;
  sc.steps = cfg.synth_steps;
  sc.seed = cfg.seed;
  sc.noise_base = cfg.synth_noise_base;
  sc.noise_scale = cfg.synth_noise_scale;
  auto [series, truth] = synth_generate(sc);
  write_series_raw(series, paths.series);
  write_truth_json(truth, paths.truth());
  fs::create_directories(paths.out);
  detail::write_stage_report(paths, cfg, "synth", timer.ms(), {paths.series, paths.truth()});
}

inline PretrainResult run_train(const RunConfig& cfg, const StagePaths& paths) {
  detail::StageTimer timer;
  fs::create_directories(paths.out);
  SplitBundle data = load_dataset(cfg, paths);
  ModelConfig mc = model_config_for(cfg, data.samples[0].x.size() / cfg.history,
                                    parse_head_mode(cfg.head_mode));
  ModelParams model = ModelParams::init(mc, cfg.seed);
  TrainSettings ts = train_settings_for(cfg);

  PretrainResult r;
  try {
    r = pretrain(std::move(model), data, ts, cfg.seed);
  } catch (TrainingDivergence& d) {
    Checkpoint c;
    c.params = d.last_good_model;
    c.stats = data.stats;
    c.seed = cfg.seed;
    c.stage = "pretrain-diverged";
    save_checkpoint(paths.pretrain_ckpt(), c);
    throw;
  }

  Checkpoint c;
  c.params = r.model;
  c.stats = data.stats;
  c.seed = cfg.seed;
  c.stage = "pretrain";
  c.has_optimizer = true;
  c.opt = r.opt;
  save_checkpoint(paths.pretrain_ckpt(), c);

  ordered_json j;
  j["stage"] = "train";
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  j["epochs"] = r.history.train_loss.size();
  j["best_epoch"] = r.history.best_epoch;
  j["train_loss"] = r.history.train_loss;
  j["val_loss"] = r.history.val_loss;
  write_json(paths.out / "train_history.json", j);
  detail::write_stage_report(paths, cfg, "train", timer.ms(),
                             {paths.pretrain_ckpt(), paths.out / "train_history.json"});
  return r;
}

inline AwaResult run_awa(const RunConfig& cfg, const StagePaths& paths) {
  detail::StageTimer timer;
  Checkpoint pre = load_checkpoint(paths.pretrain_ckpt());
  SplitBundle data = load_dataset(cfg, paths);
  AwaSettings as;
  as.lr_max = cfg.awa_lr_max;
  as.lr_min = cfg.awa_lr_min;
  as.epochs = cfg.awa_epochs;
  AwaResult r = awa_retrain(std::move(pre.params), data, as, train_settings_for(cfg), cfg.seed);

  Checkpoint c;
  c.params = r.model;
  c.stats = data.stats;
  c.seed = cfg.seed;
  c.stage = "awa";
  save_checkpoint(paths.awa_ckpt(), c);

  ordered_json j;
  j["stage"] = "retrain-awa";
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  j["epochs"] = cfg.awa_epochs;
  j["n_models_averaged"] = r.n_models;
  j["iterations_per_epoch"] = r.n_iteration;
  write_json(paths.out / "awa_summary.json", j);
  detail::write_stage_report(paths, cfg, "retrain-awa", timer.ms(),
                             {paths.awa_ckpt(), paths.out / "awa_summary.json"});
  return r;
}

/// Validation-set predictions pooled elementwise, used by the calibration
/// stages. Returns (y, mu, aleatoric sigma^2, total sigma^2 at T = 1).
struct ValPredictions {
  std::vector<real> y, mu, aleatoric, total;
};

inline ValPredictions collect_val_predictions(const ModelParams& model, const SplitBundle& data,
                                              std::size_t n_mc, std::uint64_t seed) {
  auto val = data.val();
  if (val.empty()) throw DataError("calibration: empty validation split");
  const std::size_t per = model.cfg.nodes * model.cfg.horizon;
  ValPredictions out;
  out.y.resize(val.size() * per);
  out.mu.resize(val.size() * per);
  out.aleatoric.resize(val.size() * per);
  out.total.resize(val.size() * per);
  parallel_for(val.size(), [&](std::size_t i) {
    const Temperature unit{1, 2};
    ForecastDistribution d =
        n_mc > 1 ? mc_predict(model, val[i].x, data.stats, static_cast<int>(n_mc), unit,
                              derive_seed(seed, {tag("calib_mc"), i}))
                 : single_pass_predict(model, val[i].x, data.stats, unit);
    for (std::size_t k = 0; k < per; ++k) {
      out.y[i * per + k] = val[i].y[k];
      out.mu[i * per + k] = d.mu_hat[k];
      out.aleatoric[i * per + k] = d.aleatoric_hat[k];
      out.total[i * per + k] = d.sigma2_hat[k];
    }
  });
  return out;
}

inline CalibrationResult run_calibrate(const RunConfig& cfg, const StagePaths& paths) {
  detail::StageTimer timer;
  Checkpoint ck = load_checkpoint(paths.awa_ckpt());
  SplitBundle data = load_dataset(cfg, paths);
  ValPredictions vp =
      collect_val_predictions(ck.params, data, cfg.calibration_n_mc, cfg.seed);

  CalibrationSettings cs;
  cs.step = cfg.calibration_step;
  cs.max_iters = static_cast<int>(cfg.calibration_iters);
  CalibrationResult r =
      calibrate_temperature(vp.y, vp.mu, vp.aleatoric, cs, cfg.variance_power);

  // epistemic part is unaffected by T
  std::vector<real> post_total(vp.total.size());
  for (std::size_t i = 0; i < post_total.size(); ++i) {
    const real epi = vp.total[i] - vp.aleatoric[i];
    post_total[i] = apply_temperature(vp.aleatoric[i], r.temp) + epi;
  }
  const real pre = mnll(vp.y, vp.mu, vp.total);
  const real post = mnll(vp.y, vp.mu, post_total);

  ordered_json j;
  j["T"] = r.temp.t;
  j["variance_power"] = r.temp.variance_power;
  j["c"] = r.c;
  j["n_cal"] = r.n;
  j["pre_mnll"] = pre;
  j["post_mnll"] = post;
  j["iters"] = r.iters;
  j["n_mc"] = cfg.calibration_n_mc;
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  write_json(paths.calibration(), j);
  detail::write_stage_report(paths, cfg, "calibrate", timer.ms(), {paths.calibration()});
  return r;
}

// ---------------------------------------------------------------------------
// test-set inference

enum class InferenceKind {
  gaussian_mc,      // MC dropout, aleatoric + epistemic
  gaussian_single,  // one deterministic pass, aleatoric only
  epistemic_mc,     // MC dropout over a point head, epistemic only
  quantile_single,  // direct quantile heads
  point_single      // point forecast, no uncertainty
};

struct TestPredictions {
  std::size_t nodes = 0, horizon = 0, n_windows = 0;
  std::vector<real> y, mu;
  std::vector<real> sigma2;        // empty when the mode defines none
  std::vector<real> lower, upper;  // empty when the mode defines none
  real z = 0;
};

inline TestPredictions predict_over(std::span<const WindowedSample> windows,
                                    const ModelParams& model, const NormStats& stats,
                                    InferenceKind kind, std::size_t n_mc,
                                    const Temperature& temp, real alpha, std::uint64_t seed,
                                    std::optional<real> conformal_q = std::nullopt) {
  if (windows.empty()) throw DataError("predict_over: no windows");
  const std::size_t per = model.cfg.nodes * model.cfg.horizon;
  TestPredictions p;
  p.nodes = model.cfg.nodes;
  p.horizon = model.cfg.horizon;
  p.n_windows = windows.size();
  p.y.resize(windows.size() * per);
  p.mu.resize(windows.size() * per);
  const bool has_sigma = kind == InferenceKind::gaussian_mc ||
                         kind == InferenceKind::gaussian_single ||
                         kind == InferenceKind::epistemic_mc;
  if (has_sigma) p.sigma2.resize(windows.size() * per);
  const bool direct_bounds = kind == InferenceKind::quantile_single;
  if (direct_bounds) {
    p.lower.resize(windows.size() * per);
    p.upper.resize(windows.size() * per);
  }

  parallel_for(windows.size(), [&](std::size_t i) {
    const WindowedSample& w = windows[i];
    const std::uint64_t key = derive_seed(seed, {tag("test_mc"), i});
    std::copy(w.y.begin(), w.y.end(), p.y.begin() + i * per);
    switch (kind) {
      case InferenceKind::gaussian_mc: {
        ForecastDistribution d =
            mc_predict(model, w.x, stats, static_cast<int>(n_mc), temp, key);
        std::copy(d.mu_hat.begin(), d.mu_hat.end(), p.mu.begin() + i * per);
        std::copy(d.sigma2_hat.begin(), d.sigma2_hat.end(), p.sigma2.begin() + i * per);
        break;
      }
      case InferenceKind::gaussian_single: {
        ForecastDistribution d = single_pass_predict(model, w.x, stats, temp);
        std::copy(d.mu_hat.begin(), d.mu_hat.end(), p.mu.begin() + i * per);
        std::copy(d.sigma2_hat.begin(), d.sigma2_hat.end(), p.sigma2.begin() + i * per);
        break;
      }
      case InferenceKind::epistemic_mc: {
        std::vector<std::vector<real>> mus(n_mc);
        for (std::size_t j = 0; j < n_mc; ++j) {
          RngStream rng(derive_seed(key, {tag("mc"), j}));
          Tape tape;
          ModelLeaves leaves = stage_params(tape, model, false);
          PassConfig pass{true, &rng};
          std::vector<Tensor> heads = forward_sample(tape, leaves, w.x, stats, pass);
          mus[j].assign(heads[0].value().begin(), heads[0].value().end());
        }
        for (std::size_t k = 0; k < per; ++k) {
          real mean = 0;
          for (std::size_t j = 0; j < n_mc; ++j) mean += mus[j][k];
          mean /= static_cast<real>(n_mc);
          real var = 0;
          if (n_mc > 1) {
            for (std::size_t j = 0; j < n_mc; ++j)
              var += (mus[j][k] - mean) * (mus[j][k] - mean);
            var /= static_cast<real>(n_mc - 1);
          }
          p.mu[i * per + k] = mean;
          p.sigma2[i * per + k] = std::max<real>(var, 1e-12);  // keep mnll defined
        }
        break;
      }
      case InferenceKind::quantile_single:
      case InferenceKind::point_single: {
        Tape tape;
        ModelLeaves leaves = stage_params(tape, model, false);
        PassConfig pass{false, nullptr};
        std::vector<Tensor> heads = forward_sample(tape, leaves, w.x, stats, pass);
        if (kind == InferenceKind::point_single) {
          std::copy(heads[0].value().begin(), heads[0].value().end(), p.mu.begin() + i * per);
        } else {
          for (std::size_t k = 0; k < per; ++k) {
            const real lo = heads[0].value()[k], mid = heads[1].value()[k],
                       hi = heads[2].value()[k];
            p.mu[i * per + k] = mid;
            p.lower[i * per + k] = std::min(lo, hi);  // guard quantile crossing
            p.upper[i * per + k] = std::max(lo, hi);
          }
        }
        break;
      }
    }
  });

  if (has_sigma) {
    if (conformal_q) {
      p.lower.resize(p.mu.size());
      p.upper.resize(p.mu.size());
      for (std::size_t i = 0; i < p.mu.size(); ++i) {
        const real half = *conformal_q * static_cast<real>(std::sqrt(p.sigma2[i]));
        p.lower[i] = p.mu[i] - half;
        p.upper[i] = p.mu[i] + half;
      }
    } else {
      IntervalBounds b = intervals(p.mu, p.sigma2, alpha);
      p.z = b.z;
      p.lower = std::move(b.lower);
      p.upper = std::move(b.upper);
    }
  }
  return p;
}

inline real persistence_mae(std::span<const WindowedSample> windows, std::size_t nodes,
                            std::size_t history, std::size_t horizon) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& w : windows)
    for (std::size_t v = 0; v < nodes; ++v) {
      const real last = w.x[v * history + history - 1];
      for (std::size_t k = 0; k < horizon; ++k) {
        s += std::fabs(w.y[v * horizon + k] - last);
        ++n;
      }
    }
  return static_cast<real>(s / static_cast<double>(n));
}

namespace detail {

inline ordered_json horizon_metric(const TestPredictions& p, real mape_eps) {
  // slice the flat (window, node, horizon) arrays per horizon step
  const std::size_t per = p.nodes * p.horizon;
  ordered_json rm = ordered_json::array(), ma = ordered_json::array(),
               mp = ordered_json::array(), nl = ordered_json::array(),
               pc = ordered_json::array(), pw = ordered_json::array();
  for (std::size_t k = 0; k < p.horizon; ++k) {
    std::vector<real> y, mu, s2, lo, hi;
    for (std::size_t w = 0; w < p.n_windows; ++w)
      for (std::size_t v = 0; v < p.nodes; ++v) {
        const std::size_t i = w * per + v * p.horizon + k;
        y.push_back(p.y[i]);
        mu.push_back(p.mu[i]);
        if (!p.sigma2.empty()) s2.push_back(p.sigma2[i]);
        if (!p.lower.empty()) {
          lo.push_back(p.lower[i]);
          hi.push_back(p.upper[i]);
        }
      }
    rm.push_back(rmse(y, mu));
    ma.push_back(mae(y, mu));
    try {
      mp.push_back(mape(y, mu, mape_eps));
    } catch (const DomainError&) {
      mp.push_back(nullptr);
    }
    nl.push_back(s2.empty() ? ordered_json(nullptr) : ordered_json(mnll(y, mu, s2)));
    if (lo.empty()) {
      pc.push_back(nullptr);
      pw.push_back(nullptr);
    } else {
      IntervalBounds b;
      b.lower = lo;
      b.upper = hi;
      pc.push_back(picp(y, b));
      pw.push_back(mpiw(b));
    }
  }
  ordered_json j;
  j["rmse"] = std::move(rm);
  j["mae"] = std::move(ma);
  j["mape_pct"] = std::move(mp);
  j["mnll"] = std::move(nl);
  j["picp"] = std::move(pc);
  j["mpiw"] = std::move(pw);
  return j;
}

}  // namespace detail

/// Metric block of an evaluation run. Interval and likelihood fields are null
/// for modes that do not define them.
inline ordered_json metric_block(const TestPredictions& p, real alpha, real mape_eps,
                                 std::size_t n_mc, int variance_power) {
  ordered_json j;
  j["rmse"] = rmse(p.y, p.mu);
  j["mae"] = mae(p.y, p.mu);
  try {
    j["mape_pct"] = mape(p.y, p.mu, mape_eps);
  } catch (const DomainError&) {
    j["mape_pct"] = nullptr;
  }
  j["mnll"] = p.sigma2.empty() ? ordered_json(nullptr) : ordered_json(mnll(p.y, p.mu, p.sigma2));
  if (p.lower.empty()) {
    j["picp"] = nullptr;
    j["mpiw"] = nullptr;
  } else {
    IntervalBounds b;
    b.lower = p.lower;
    b.upper = p.upper;
    j["picp"] = picp(p.y, b);
    j["mpiw"] = mpiw(b);
  }
  j["alpha"] = alpha;
  j["n_mc"] = n_mc;
  j["variance_power"] = variance_power;
  j["per_horizon"] = detail::horizon_metric(p, mape_eps);
  return j;
}

struct EvaluateOutcome {
  ordered_json report;
  TestPredictions predictions;
};

/// Shared evaluation path: assemble test-set predictions for the requested
/// inference kind, compute the metric block and the persistence reference,
/// and keep every field deterministic so identical runs serialize to
/// identical bytes.
inline EvaluateOutcome evaluate_checkpoint(const RunConfig& cfg, const ModelParams& model,
                                           const NormStats& stats, const SplitBundle& data,
                                           InferenceKind kind, const Temperature& temp,
                                           const std::string& mode_name,
                                           std::optional<real> conformal_q = std::nullopt) {
  const std::size_t n_mc_used =
      (kind == InferenceKind::gaussian_mc || kind == InferenceKind::epistemic_mc) ? cfg.n_mc
                                                                                  : 1;
  TestPredictions p = predict_over(data.test(), model, stats, kind, n_mc_used, temp, cfg.alpha,
                                   cfg.seed, conformal_q);
  ordered_json j;
  j["mode"] = mode_name;
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  j["n_test_windows"] = p.n_windows;
  j["metrics"] = metric_block(p, cfg.alpha, cfg.mape_epsilon, n_mc_used, temp.variance_power);
  const real pmae = persistence_mae(data.test(), p.nodes, cfg.history, p.horizon);
  j["persistence_mae"] = pmae;
  const real m = j["metrics"]["mae"].get<real>();
  j["improvement_over_persistence"] = 1.0 - m / pmae;
  j["temperature"] = conformal_q ? ordered_json(nullptr) : ordered_json(temp.t);
  j["conformal_q"] = conformal_q ? ordered_json(*conformal_q) : ordered_json(nullptr);
  EvaluateOutcome out;
  out.report = std::move(j);
  out.predictions = std::move(p);
  return out;
}

inline ordered_json run_evaluate(const RunConfig& cfg, const StagePaths& paths) {
  detail::StageTimer timer;
  fs::path ckpt = paths.awa_ckpt();
  if (!fs::exists(ckpt)) ckpt = paths.pretrain_ckpt();
  if (!fs::exists(ckpt))
    throw DataError("missing checkpoint: expected " + paths.awa_ckpt().string() + " or " +
                    paths.pretrain_ckpt().string() + " (run train / retrain-awa first)");
  Checkpoint ck = load_checkpoint(ckpt);
  SplitBundle data = load_dataset(cfg, paths);

  Temperature temp{1, cfg.variance_power};
  if (fs::exists(paths.calibration())) {
    std::ifstream in(paths.calibration());
    nlohmann::json cj = nlohmann::json::parse(in);
    temp.t = cj.at("T").get<real>();
    temp.variance_power = cj.at("variance_power").get<int>();
  }

  InferenceKind kind = InferenceKind::gaussian_mc;
  if (ck.params.cfg.head_mode == HeadMode::quantile) kind = InferenceKind::quantile_single;
  if (ck.params.cfg.head_mode == HeadMode::point) kind = InferenceKind::point_single;

  EvaluateOutcome out =
      evaluate_checkpoint(cfg, ck.params, ck.stats, data, kind, temp, "pipeline");
  out.report["checkpoint"] = ckpt.filename().string();
  write_json(paths.evaluation(), out.report);
  detail::write_stage_report(paths, cfg, "evaluate", timer.ms(), {paths.evaluation()});
  return out.report;
}

inline void write_predictions_csv(const fs::path& path, const TestPredictions& p,
                                  std::size_t window_index = 0) {
  if (window_index >= p.n_windows) throw UsageError("predictions: window index out of range");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "node,horizon,mu,sigma2,y_L,y_U\n";
  const std::size_t per = p.nodes * p.horizon;
  char buf[64];
  auto num = [&](real v) {
    std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
    return std::string(buf);
  };
  for (std::size_t v = 0; v < p.nodes; ++v)
    for (std::size_t k = 0; k < p.horizon; ++k) {
      const std::size_t i = window_index * per + v * p.horizon + k;
      out << v << ',' << k << ',' << num(p.mu[i]) << ',';
      out << (p.sigma2.empty() ? "" : num(p.sigma2[i])) << ',';
      out << (p.lower.empty() ? "" : num(p.lower[i])) << ',';
      out << (p.upper.empty() ? "" : num(p.upper[i])) << '\n';
    }
}

inline void run_predict(const RunConfig& cfg, const StagePaths& paths) {
  detail::StageTimer timer;
  fs::path ckpt = fs::exists(paths.awa_ckpt()) ? paths.awa_ckpt() : paths.pretrain_ckpt();
  if (!fs::exists(ckpt)) throw DataError("missing checkpoint: " + ckpt.string());
  Checkpoint ck = load_checkpoint(ckpt);
  SplitBundle data = load_dataset(cfg, paths);
  Temperature temp{1, cfg.variance_power};
  if (fs::exists(paths.calibration())) {
    std::ifstream in(paths.calibration());
    nlohmann::json cj = nlohmann::json::parse(in);
    temp.t = cj.at("T").get<real>();
    temp.variance_power = cj.at("variance_power").get<int>();
  }
  InferenceKind kind = InferenceKind::gaussian_mc;
  if (ck.params.cfg.head_mode == HeadMode::quantile) kind = InferenceKind::quantile_single;
  if (ck.params.cfg.head_mode == HeadMode::point) kind = InferenceKind::point_single;
  TestPredictions p = predict_over(data.test(), ck.params, ck.stats, kind, cfg.n_mc, temp,
                                   cfg.alpha, cfg.seed);
  write_predictions_csv(paths.predictions(), p, 0);
  detail::write_stage_report(paths, cfg, "predict", timer.ms(), {paths.predictions()});
}

// ---------------------------------------------------------------------------
// uncertainty-quantification baselines

inline bool valid_baseline_mode(const std::string& m) {
  return m == "point" || m == "quantile" || m == "mve" || m == "mcdo" || m == "combined" ||
         m == "ts" || m == "conformal";
}

inline HeadMode baseline_head(const std::string& mode) {
  if (mode == "point" || mode == "mcdo") return HeadMode::point;
  if (mode == "quantile") return HeadMode::quantile;
  return HeadMode::gaussian;
}

/// Runs the pipeline restrictions matching the requested baselines. Modes
/// sharing a head (mve / combined / ts / conformal on the Gaussian head,
/// point / mcdo on the point head) train one checkpoint and differ only in
/// inference and post-hoc calibration, so their point forecasts agree by
/// construction. Each mode writes the standard evaluation schema
/// (interval/likelihood fields null where the mode defines none) into
/// <out>/baseline_<mode>/.
inline std::map<std::string, ordered_json> run_baseline_suite(
    const RunConfig& cfg, const StagePaths& root, const std::vector<std::string>& modes) {
  for (const std::string& m : modes)
    if (!valid_baseline_mode(m)) throw ConfigError("unknown baseline mode '" + m + "'");

  SeriesMatrix series = load_series(root.series, parse_series_format(cfg.format));
  SplitBundle data = split_and_normalize(make_windows(series, cfg.history, cfg.horizon));

  std::map<HeadMode, PretrainResult> trained;
  for (const std::string& m : modes) {
    const HeadMode head = baseline_head(m);
    if (trained.count(head)) continue;
    ModelConfig mc = model_config_for(cfg, series.nodes, head);
    ModelParams model = ModelParams::init(mc, cfg.seed);
    trained.emplace(head, pretrain(std::move(model), data, train_settings_for(cfg), cfg.seed));
  }

  std::map<std::string, ordered_json> reports;
  for (const std::string& mode : modes) {
    detail::StageTimer timer;
    const fs::path sub = root.out / ("baseline_" + mode);
    fs::create_directories(sub);
    const PretrainResult& tr = trained.at(baseline_head(mode));

    Checkpoint c;
    c.params = tr.model;
    c.stats = data.stats;
    c.seed = cfg.seed;
    c.stage = "pretrain";
    save_checkpoint(sub / "model.ckpt", c);

    Temperature temp{1, cfg.variance_power};
    std::optional<real> conformal_q;
    InferenceKind kind = InferenceKind::gaussian_single;
    if (mode == "point") kind = InferenceKind::point_single;
    if (mode == "quantile") kind = InferenceKind::quantile_single;
    if (mode == "mcdo") kind = InferenceKind::epistemic_mc;
    if (mode == "combined") kind = InferenceKind::gaussian_mc;

    if (mode == "ts") {
      ValPredictions vp = collect_val_predictions(tr.model, data, 1, cfg.seed);
      CalibrationSettings cs;
      cs.step = cfg.calibration_step;
      cs.max_iters = static_cast<int>(cfg.calibration_iters);
      temp = calibrate_temperature(vp.y, vp.mu, vp.aleatoric, cs, cfg.variance_power).temp;
    } else if (mode == "conformal") {
      ValPredictions vp = collect_val_predictions(tr.model, data, 1, cfg.seed);
      std::vector<real> sigma(vp.aleatoric.size());
      for (std::size_t i = 0; i < sigma.size(); ++i)
        sigma[i] = static_cast<real>(std::sqrt(vp.aleatoric[i]));
      conformal_q = conformal_calibrate(vp.y, vp.mu, sigma, cfg.alpha).q_hat;
    }

    EvaluateOutcome out =
        evaluate_checkpoint(cfg, tr.model, data.stats, data, kind, temp, mode, conformal_q);
    write_json(sub / "evaluation.json", out.report);
    StagePaths sub_paths(sub, cfg, root.series.parent_path());
    detail::write_stage_report(sub_paths, cfg, "baseline-" + mode, timer.ms(),
                               {sub / "evaluation.json", sub / "model.ckpt"});
    reports.emplace(mode, std::move(out.report));
  }
  return reports;
}

inline ordered_json run_baseline(const RunConfig& cfg, const StagePaths& root,
                                 const std::string& mode) {
  return run_baseline_suite(cfg, root, {mode}).at(mode);
}

}  // namespace stuq

#endif  // STUQ_PIPELINE_HPP
