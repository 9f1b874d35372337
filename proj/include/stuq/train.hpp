#ifndef STUQ_TRAIN_HPP
#define STUQ_TRAIN_HPP

#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stuq/common.hpp"
#include "stuq/data.hpp"
#include "stuq/losses.hpp"
#include "stuq/model.hpp"
#include "stuq/optim.hpp"
#include "stuq/tensor.hpp"

namespace stuq {

struct TrainSettings {
  std::size_t epochs = 100;
  real lr = 0.003;
  real weight_decay = 1e-6;
  std::size_t batch = 64;
  real lambda = 0.1;
  real clip_norm = 5.0;
  bool select_best_val = true;
  bool per_layer_decay = false;

  void validate() const {
    if (epochs < 1 || batch < 1) throw ConfigError("train: epochs and batch must be >= 1");
    if (!(lr > 0)) throw ConfigError("train: lr must be > 0");
    if (!(lambda > 0 && lambda <= 1)) throw ConfigError("train: lambda must be in (0,1]");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  }
};

struct AwaSettings {
  real lr_max = 0.003;
  real lr_min = 0.00003;
  std::size_t epochs = 20;
};

/// Divergence carries the last finite state so callers can checkpoint it.
class TrainingDivergence : public TrainingError {
 public:
  TrainingDivergence(const std::string& msg, ModelParams last_good, std::size_t epoch)
      : TrainingError(msg), last_good_model(std::move(last_good)), last_good_epoch(epoch) {}
  ModelParams last_good_model;
  std::size_t last_good_epoch;
};

namespace detail {

inline LossConfig loss_config_for(const ModelParams& model, const TrainSettings& s) {
  LossConfig lc;
  lc.lambda = s.lambda;
  lc.weight_decay = s.weight_decay;
  lc.per_layer_decay = s.per_layer_decay;
  lc.head_mode = model.cfg.head_mode;
  return lc;
}

inline std::vector<real> per_param_decay(const ModelParams& model, const TrainSettings& s) {
  std::vector<real> d;
  if (!s.per_layer_decay) return d;
  d.reserve(model.flat_size());
  for (const auto& a : model.arrays) {
    const real coef =
        a.dropout_site > 0 ? s.weight_decay / (2 * a.dropout_site) : s.weight_decay;
    d.insert(d.end(), a.value.size(), coef);
  }
  return d;
}

}  // namespace detail

struct BatchEval {
  real loss = 0;
  std::vector<real> grad;
};

/// Loss and flat gradient of one minibatch: the mean over samples of the
/// per-sample data term (itself a mean over nodes and horizon steps). Samples
/// run on private tapes, possibly in parallel; per-sample results land in
/// indexed slots and reduce in index order, so the result does not depend on
/// the worker count.
inline BatchEval eval_batch(const ModelParams& model, const SplitBundle& data,
                            std::span<const std::size_t> idx, const LossConfig& loss_cfg,
                            bool stochastic, std::uint64_t pass_key) {
  const std::size_t b = idx.size();
  std::vector<real> losses(b, 0);
  std::vector<std::vector<real>> grads(b);
  parallel_for(b, [&](std::size_t i) {
    const WindowedSample& w = data.samples[idx[i]];
    RngStream rng(derive_seed(pass_key, {i, idx[i]}));
    Tape tape;
    ModelLeaves leaves = stage_params(tape, model, true);
    PassConfig pass{stochastic, &rng};
    std::vector<Tensor> heads = forward_sample(tape, leaves, w.x, data.stats, pass);
    Tensor y = tape.constant({model.cfg.nodes, model.cfg.horizon}, w.y);
    Tensor loss = head_loss(loss_cfg, y, heads);
    backward(loss);
    losses[i] = loss.scalar();
    grads[i] = collect_flat_grad(leaves);
  });
  BatchEval out;
  out.grad.assign(model.flat_size(), 0);
  const real inv = real(1) / static_cast<real>(b);
  for (std::size_t i = 0; i < b; ++i) {
    out.loss += losses[i] * inv;
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += grads[i][k] * inv;
  }
  return out;
}

/// Mean data-term loss over a window span with dropout off (deterministic).
inline real eval_loss(const ModelParams& model, const SplitBundle& data,
                      std::span<const WindowedSample> windows, const LossConfig& loss_cfg) {
  if (windows.empty()) throw DataError("eval_loss: empty window span");
  std::vector<real> losses(windows.size(), 0);
  parallel_for(windows.size(), [&](std::size_t i) {
    Tape tape;
    ModelLeaves leaves = stage_params(tape, model, false);
    PassConfig pass{false, nullptr};
    std::vector<Tensor> heads = forward_sample(tape, leaves, windows[i].x, data.stats, pass);
    Tensor y = tape.constant({model.cfg.nodes, model.cfg.horizon}, windows[i].y);
    losses[i] = head_loss(loss_cfg, y, heads).scalar();
  });
  real s = 0;
  for (real l : losses) s += l;
  return s / static_cast<real>(losses.size());
}

struct TrainHistory {
  std::vector<real> train_loss;
  std::vector<real> val_loss;
  std::size_t best_epoch = 0;
};

struct PretrainResult {
  ModelParams model;
  OptimizerState opt;
  TrainHistory history;
};

/// Minibatch Adam over the combined objective with dropout active. Windows
/// are shuffled each epoch with a seeded stream; the last partial batch is
/// kept. Divergence aborts with the last end-of-epoch state attached.
inline PretrainResult pretrain(ModelParams model, const SplitBundle& data,
                               const TrainSettings& s, std::uint64_t seed) {
  s.validate();
  if (data.train().empty()) throw DataError("pretrain: empty training split");
  const LossConfig loss_cfg = detail::loss_config_for(model, s);

  AdamConfig ac;
  ac.weight_decay = s.weight_decay;
  OptimizerState opt(model.flat_size(), ac);
  opt.decay_scale = detail::per_param_decay(model, s);

  TrainHistory hist;
  ModelParams last_good = model;
  ModelParams best = model;
  real best_val = std::numeric_limits<real>::infinity();

  std::vector<std::size_t> order(data.train().size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    RngStream shuffle_rng(derive_seed(seed, {tag("pretrain_shuffle"), epoch}));
    shuffle_rng.shuffle(order);
    real epoch_loss = 0;
    std::size_t seen = 0;
    try {
      for (std::size_t off = 0; off < order.size(); off += s.batch) {
        const std::size_t take = std::min(s.batch, order.size() - off);
        std::span<const std::size_t> idx(order.data() + off, take);
        const std::uint64_t pass_key =
            derive_seed(seed, {tag("pretrain_pass"), epoch, off / s.batch});
        BatchEval ev = eval_batch(model, data, idx, loss_cfg, true, pass_key);
        clip_global_norm(ev.grad, s.clip_norm);
        std::vector<real> w = model.flatten();
        adam_step(w, ev.grad, opt, s.lr);
        model.unflatten(w);
        epoch_loss += ev.loss * static_cast<real>(take);
        seen += take;
      }
      hist.train_loss.push_back(epoch_loss / static_cast<real>(seen));
      hist.val_loss.push_back(eval_loss(model, data, data.val(), loss_cfg));
    } catch (const NumericError& e) {
      throw TrainingDivergence(std::string("pretraining diverged at epoch ") +
                                   std::to_string(epoch) + ": " + e.what(),
                               last_good, epoch == 0 ? 0 : epoch - 1);
    } catch (const TrainingError& e) {
      throw TrainingDivergence(std::string("pretraining diverged at epoch ") +
                                   std::to_string(epoch) + ": " + e.what(),
                               last_good, epoch == 0 ? 0 : epoch - 1);
    }
    last_good = model;
    if (hist.val_loss.back() < best_val) {
      best_val = hist.val_loss.back();
      best = model;
      hist.best_epoch = epoch;
    }
  }
  PretrainResult r;
  r.model = s.select_best_val ? std::move(best) : std::move(model);
  if (!s.select_best_val) hist.best_epoch = s.epochs - 1;
  r.opt = std::move(opt);
  r.history = std::move(hist);
  return r;
}

/// Hook kept for models with stateful normalization layers; this forecaster
/// has none, so refreshing statistics is a no-op.
inline void refresh_batch_statistics(ModelParams&, const SplitBundle&) {}

struct AwaResult {
  ModelParams model;
  std::size_t n_models = 0;
  std::vector<std::vector<real>> snapshots;
  std::size_t n_iteration = 0;
};

/// Two-epoch cycles: even epochs anneal the rate from lr_max to lr_min per
/// iteration, odd epochs fine-tune at constant lr_min and contribute one
/// parameter snapshot to the running average. The averaged weights are
/// installed on return, so a run of 2k epochs averages exactly k snapshots.
inline AwaResult awa_retrain(ModelParams model, const SplitBundle& data, const AwaSettings& a,
                             const TrainSettings& base, std::uint64_t seed) {
  if (a.epochs < 2) throw ConfigError("awa: need at least 2 epochs, got " +
                                      std::to_string(a.epochs));
  base.validate();
  if (data.train().empty()) throw DataError("awa: empty training split");
  const LossConfig loss_cfg = detail::loss_config_for(model, base);

  const std::size_t n_train = data.train().size();
  const std::size_t n_iteration = (n_train + base.batch - 1) / base.batch;
  LrSchedule sched{a.lr_max, a.lr_min, n_iteration};
  sched.validate();

  AdamConfig ac;
  ac.weight_decay = base.weight_decay;
  OptimizerState opt(model.flat_size(), ac);
  opt.decay_scale = detail::per_param_decay(model, base);

  AwaState awa;
  AwaResult out;
  out.n_iteration = n_iteration;
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < a.epochs; ++epoch) {
    RngStream shuffle_rng(derive_seed(seed, {tag("awa_shuffle"), epoch}));
    shuffle_rng.shuffle(order);
    const bool anneal = (epoch % 2 == 0);
    for (std::size_t it = 0; it < n_iteration; ++it) {
      const std::size_t off = it * base.batch;
      const std::size_t take = std::min(base.batch, n_train - off);
      std::span<const std::size_t> idx(order.data() + off, take);
      const real lr = anneal ? cosine_lr(it, sched) : a.lr_min;
      const std::uint64_t pass_key = derive_seed(seed, {tag("awa_pass"), epoch, it});
      BatchEval ev = eval_batch(model, data, idx, loss_cfg, true, pass_key);
      clip_global_norm(ev.grad, base.clip_norm);
      std::vector<real> w = model.flatten();
      adam_step(w, ev.grad, opt, lr);
      model.unflatten(w);
    }
    if (epoch % 2 == 1) {
      std::vector<real> w = model.flatten();
      awa.update(w);
      out.snapshots.push_back(std::move(w));
      refresh_batch_statistics(model, data);
    }
  }
  model.unflatten(awa.w_avg);
  out.model = std::move(model);
  out.n_models = awa.n_models;
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints: versioned binary (parameters, optimizer state) with a JSON
// sidecar manifest describing shapes, model config, seed and normalization.
// Round trips are bit-exact.

struct Checkpoint {
  ModelParams params;
  NormStats stats;
  std::uint64_t seed = 0;
  std::string stage;  // "pretrain" or "awa"
  bool has_optimizer = false;
  OptimizerState opt;
};

namespace detail {
inline constexpr char kCkptMagic[8] = {'S', 'T', 'U', 'Q', 'C', 'K', 'P', '1'};

template <class T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
void get(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}
inline void put_vec(std::ofstream& out, const std::vector<real>& v) {
  const std::uint64_t n = v.size();
  put(out, n);
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(real)));
}
inline void get_vec(std::ifstream& in, std::vector<real>& v) {
  std::uint64_t n = 0;
  get(in, n);
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(real)));
}
}  // namespace detail

inline std::filesystem::path checkpoint_sidecar(const std::filesystem::path& p) {
  std::filesystem::path s = p;
  s += ".json";
  return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(detail::kCkptMagic, sizeof detail::kCkptMagic);
  const std::uint32_t version = 1, real_size = sizeof(real);
  detail::put(out, version);
  detail::put(out, real_size);
  detail::put_vec(out, c.params.flatten());
  const std::uint8_t has_opt = c.has_optimizer ? 1 : 0;
  detail::put(out, has_opt);
  if (c.has_optimizer) {
    detail::put(out, c.opt.step);
    detail::put_vec(out, c.opt.m);
    detail::put_vec(out, c.opt.v);
  }
  detail::put(out, c.seed);

  const ModelConfig& m = c.params.cfg;
  nlohmann::ordered_json j;
  j["format"] = "stuq-checkpoint";
  j["version"] = version;
  j["stage"] = c.stage;
  j["seed"] = c.seed;
  j["param_count"] = c.params.flat_size();
  j["normalization"] = {{"mean", c.stats.mean}, {"stddev", c.stats.stddev}};
  j["model"] = {{"nodes", m.nodes},
                {"in_channels", m.in_channels},
                {"hidden", m.hidden},
                {"embed_dim", m.embed_dim},
                {"history", m.history},
                {"horizon", m.horizon},
                {"layers", m.layers},
                {"encoder_dropout", m.encoder_dropout},
                {"decoder_dropout", m.decoder_dropout},
                {"head_mode", head_mode_name(m.head_mode)}};
  nlohmann::ordered_json arrays = nlohmann::ordered_json::array();
  for (const auto& a : c.params.arrays)
    arrays.push_back({{"name", a.name}, {"shape", a.shape}, {"dropout_site", a.dropout_site}});
  j["arrays"] = std::move(arrays);
  if (c.has_optimizer)
    j["optimizer"] = {{"step", c.opt.step},
                      {"beta1", c.opt.cfg.beta1},
                      {"beta2", c.opt.cfg.beta2},
                      {"eps", c.opt.cfg.eps},
                      {"weight_decay", c.opt.cfg.weight_decay}};
  std::ofstream side(checkpoint_sidecar(path));
  side << j.dump(2) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw DataError("missing checkpoint " + path.string());
  std::ifstream side_in(checkpoint_sidecar(path));
  if (!side_in) throw DataError("missing checkpoint manifest " +
                                checkpoint_sidecar(path).string());
  nlohmann::json j = nlohmann::json::parse(side_in);

  Checkpoint c;
  c.stage = j.at("stage").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.stats.mean = j.at("normalization").at("mean").get<real>();
  c.stats.stddev = j.at("normalization").at("stddev").get<real>();
  const auto& jm = j.at("model");
  ModelConfig m;
  m.nodes = jm.at("nodes").get<std::size_t>();
  m.in_channels = jm.at("in_channels").get<std::size_t>();
  m.hidden = jm.at("hidden").get<std::size_t>();
  m.embed_dim = jm.at("embed_dim").get<std::size_t>();
  m.history = jm.at("history").get<std::size_t>();
  m.horizon = jm.at("horizon").get<std::size_t>();
  m.layers = jm.at("layers").get<std::size_t>();
  m.encoder_dropout = jm.at("encoder_dropout").get<real>();
  m.decoder_dropout = jm.at("decoder_dropout").get<real>();
  m.head_mode = parse_head_mode(jm.at("head_mode").get<std::string>());
  c.params.cfg = m;
  for (const auto& ja : j.at("arrays")) {
    ParamArray a;
    a.name = ja.at("name").get<std::string>();
    a.shape = ja.at("shape").get<std::vector<std::size_t>>();
    a.dropout_site = ja.at("dropout_site").get<real>();
    a.value.resize(shape_numel(a.shape));
    c.params.arrays.push_back(std::move(a));
  }

  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw DataError("bad checkpoint magic in " + path.string());
  std::uint32_t version = 0, real_size = 0;
  detail::get(in, version);
  detail::get(in, real_size);
  if (version != 1) throw DataError("unsupported checkpoint version");
  if (real_size != sizeof(real))
    throw DataError("checkpoint precision mismatch: file stores " +
                    std::to_string(real_size) + "-byte reals");
  std::vector<real> w;
  detail::get_vec(in, w);
  c.params.unflatten(w);
  std::uint8_t has_opt = 0;
  detail::get(in, has_opt);
  c.has_optimizer = has_opt != 0;
  if (c.has_optimizer) {
    detail::get(in, c.opt.step);
    detail::get_vec(in, c.opt.m);
    detail::get_vec(in, c.opt.v);
    const auto& jo = j.at("optimizer");
    c.opt.cfg.beta1 = jo.at("beta1").get<real>();
    c.opt.cfg.beta2 = jo.at("beta2").get<real>();
    c.opt.cfg.eps = jo.at("eps").get<real>();
    c.opt.cfg.weight_decay = jo.at("weight_decay").get<real>();
  }
  std::uint64_t seed_bin = 0;
  detail::get(in, seed_bin);
  if (!in) throw DataError("truncated checkpoint " + path.string());
  return c;
}

}  // namespace stuq

#endif  // STUQ_TRAIN_HPP
