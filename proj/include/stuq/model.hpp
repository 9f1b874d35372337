#ifndef STUQ_MODEL_HPP
#define STUQ_MODEL_HPP

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stuq/common.hpp"
#include "stuq/tensor.hpp"

namespace stuq {

inline constexpr real kLogVarMin = -10;
inline constexpr real kLogVarMax = 10;

enum class HeadMode { gaussian, quantile, point };

inline const char* head_mode_name(HeadMode m) {
  switch (m) {
    case HeadMode::gaussian: return "gaussian";
    case HeadMode::quantile: return "quantile";
    case HeadMode::point: return "point";
  }
  return "?";
}

inline HeadMode parse_head_mode(std::string_view s) {
  if (s == "gaussian") return HeadMode::gaussian;
  if (s == "quantile") return HeadMode::quantile;
  if (s == "point") return HeadMode::point;
  throw ConfigError("unknown head_mode '" + std::string(s) + "'");
}

/// Recurrent forecaster dimensions and dropout sites.
struct ModelConfig {
  std::size_t nodes = 8;
  std::size_t in_channels = 1;
  std::size_t hidden = 32;
  std::size_t embed_dim = 8;
  std::size_t history = 12;
  std::size_t horizon = 12;
  std::size_t layers = 1;
  real encoder_dropout = 0.05;
  real decoder_dropout = 0.2;
  HeadMode head_mode = HeadMode::gaussian;

  void validate() const {
    if (nodes < 2) throw ConfigError("model: need at least 2 nodes");
    if (embed_dim < 1 || embed_dim >= nodes)
      throw ConfigError("model: embed_dim must satisfy 1 <= d < nodes");
    if (hidden < 1 || horizon < 1 || history < 1 || layers < 1 || in_channels < 1)
      throw ConfigError("model: dimensions must be positive");
    if (encoder_dropout < 0 || encoder_dropout >= 1 || decoder_dropout < 0 ||
        decoder_dropout >= 1)
      throw ConfigError("model: dropout rates must be in [0,1)");
  }

  std::size_t gate_in(std::size_t layer) const {
    return (layer == 0 ? in_channels : hidden) + hidden;
  }
  std::size_t head_count() const {
    switch (head_mode) {
      case HeadMode::gaussian: return 2;
      case HeadMode::quantile: return 3;
      case HeadMode::point: return 1;
    }
    return 0;
  }
};

struct ParamArray {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<real> value;
  real dropout_site = 0;  // dropout rate at the site this array feeds
};

/// All learnable arrays, addressable as one flat vector for averaging,
/// checkpointing and optimizer state.
struct ModelParams {
  ModelConfig cfg;
  std::vector<ParamArray> arrays;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    RngStream rng(derive_seed(seed, {tag("model_init")}));
    return init(cfg, rng);
  }

  static ModelParams init(const ModelConfig& cfg, RngStream& rng) {
    cfg.validate();
    ModelParams p;
    p.cfg = cfg;
    auto add = [&](std::string name, std::vector<std::size_t> shape, real bound,
                   real dropout_site) {
      ParamArray a;
      a.name = std::move(name);
      a.shape = std::move(shape);
      a.dropout_site = dropout_site;
      a.value.resize(shape_numel(a.shape));
      for (auto& v : a.value) v = static_cast<real>(rng.uniform(-bound, bound));
      p.arrays.push_back(std::move(a));
    };
    // node embeddings: standard normal scaled down
    {
      ParamArray e;
      e.name = "embed";
      e.shape = {cfg.nodes, cfg.embed_dim};
      e.value.resize(cfg.nodes * cfg.embed_dim);
      for (auto& v : e.value) v = static_cast<real>(0.1 * rng.normal());
      p.arrays.push_back(std::move(e));
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::size_t cin = cfg.gate_in(l);
      const real bound = real(1) / std::sqrt(static_cast<real>(cin));
      for (const char* gate : {"z", "r", "c"}) {
        const std::string base = "enc" + std::to_string(l) + "." + gate;
        add(base + ".w", {cfg.embed_dim, cin * cfg.hidden}, bound, cfg.encoder_dropout);
        add(base + ".b", {cfg.embed_dim, cfg.hidden}, bound, cfg.encoder_dropout);
      }
    }
    const real hb = real(1) / std::sqrt(static_cast<real>(cfg.hidden));
    auto add_head = [&](const char* name) {
      add(std::string("head.") + name + ".w", {cfg.hidden, cfg.horizon}, hb,
          cfg.decoder_dropout);
      add(std::string("head.") + name + ".b", {cfg.horizon}, hb, cfg.decoder_dropout);
    };
    switch (cfg.head_mode) {
      case HeadMode::gaussian:
        add_head("mu");
        add_head("logvar");
        break;
      case HeadMode::point:
        add_head("mu");
        break;
      case HeadMode::quantile:
        add_head("q_lo");
        add_head("q_mid");
        add_head("q_hi");
        break;
    }
    return p;
  }

  std::size_t flat_size() const {
    std::size_t n = 0;
    for (const auto& a : arrays) n += a.value.size();
    return n;
  }

  std::vector<real> flatten() const {
    std::vector<real> out;
    out.reserve(flat_size());
    for (const auto& a : arrays) out.insert(out.end(), a.value.begin(), a.value.end());
    return out;
  }

  void unflatten(std::span<const real> flat) {
    if (flat.size() != flat_size())
      throw DimensionError("unflatten: expected " + std::to_string(flat_size()) +
                           " values, got " + std::to_string(flat.size()));
    std::size_t off = 0;
    for (auto& a : arrays) {
      std::copy_n(flat.begin() + off, a.value.size(), a.value.begin());
      off += a.value.size();
    }
  }

  const ParamArray& at(std::string_view name) const {
    for (const auto& a : arrays)
      if (a.name == name) return a;
    throw UsageError("no parameter array named '" + std::string(name) + "'");
  }
  ParamArray& at(std::string_view name) {
    return const_cast<ParamArray&>(static_cast<const ModelParams*>(this)->at(name));
  }
};

/// z-score statistics of the training inputs. Targets stay in raw units so
/// predicted variances live in data scale.
struct NormStats {
  real mean = 0;
  real stddev = 1;
  real normalize(real x) const { return (x - mean) / stddev; }
};

// ---------------------------------------------------------------------------
// forward pass

/// Parameter arrays staged onto a tape, in ModelParams::arrays order.
struct ModelLeaves {
  const ModelParams* params = nullptr;
  std::vector<Tensor> all;

  Tensor embed() const { return all[0]; }
  // gate arrays for layer l: 6 tensors starting at 1 + 6l (z.w z.b r.w r.b c.w c.b)
  Tensor gate_w(std::size_t layer, std::size_t gate) const {
    return all[1 + 6 * layer + 2 * gate];
  }
  Tensor gate_b(std::size_t layer, std::size_t gate) const {
    return all[1 + 6 * layer + 2 * gate + 1];
  }
  Tensor head_w(std::size_t h) const { return all[1 + 6 * params->cfg.layers + 2 * h]; }
  Tensor head_b(std::size_t h) const { return all[1 + 6 * params->cfg.layers + 2 * h + 1]; }
};

inline ModelLeaves stage_params(Tape& tape, const ModelParams& p, bool track_grad) {
  ModelLeaves m;
  m.params = &p;
  m.all.reserve(p.arrays.size());
  for (const auto& a : p.arrays) m.all.push_back(tape.leaf(a.shape, a.value, track_grad));
  return m;
}

/// Flat gradient in ModelParams::arrays order; call after backward().
inline std::vector<real> collect_flat_grad(const ModelLeaves& m) {
  std::vector<real> g;
  g.reserve(m.params->flat_size());
  for (const auto& t : m.all) {
    if (t.grad().empty())
      g.insert(g.end(), t.numel(), real(0));
    else
      g.insert(g.end(), t.grad().begin(), t.grad().end());
  }
  return g;
}

/// Row-stochastic adjacency learned from node embeddings:
/// softmax over rows of relu(E E^T).
inline Tensor adaptive_adjacency(const Tensor& embed) {
  return softmax_rows(relu(matmul_nt(embed, embed)));
}

/// A gate's node-adaptive weights: w = E.Wpool packs a per-node [c_in x c_out]
/// matrix; b = E.bpool is a per-node bias row.
struct PooledGate {
  Tensor w;
  Tensor b;
  std::size_t c_out = 0;
};

inline PooledGate pool_gate(const Tensor& embed, const Tensor& w_pool, const Tensor& b_pool) {
  PooledGate g;
  g.w = matmul(embed, w_pool);
  g.b = matmul(embed, b_pool);
  g.c_out = b_pool.cols();
  return g;
}

/// Graph convolution with node-adaptive weights:
/// act(mask ((I + A) Z w + b)). The mask (when given) hits the whole
/// pre-activation.
inline Tensor napl_core(const Tensor& z_in, const Tensor& a_hat, const PooledGate& gate,
                        const DropoutMask* mask, Unary act) {
  Tensor mixed = add(z_in, matmul(a_hat, z_in));
  Tensor pre = add(pernode_matmul(mixed, gate.w, gate.c_out), gate.b);
  if (mask) pre = apply_dropout(pre, *mask);
  return unary(act, pre);
}

inline Tensor napl_gcn(const Tensor& z_in, const Tensor& a_hat, const Tensor& embed,
                       const Tensor& w_pool, const Tensor& b_pool, const DropoutMask* mask,
                       Unary act) {
  return napl_core(z_in, a_hat, pool_gate(embed, w_pool, b_pool), mask, act);
}

struct GruGates {
  PooledGate z, r, c;
};

/// One recurrent step: update and reset gates via sigmoid graph convolutions
/// on [x_t, h_prev], candidate via tanh on [x_t, r*h_prev], then
/// h = z*h_prev + (1-z)*candidate.
inline Tensor agcrn_cell(const Tensor& x_t, const Tensor& h_prev, const Tensor& a_hat,
                         const GruGates& gates, const DropoutMask* mask_z,
                         const DropoutMask* mask_r, const DropoutMask* mask_c) {
  Tensor joint = concat_cols(x_t, h_prev);
  Tensor z = napl_core(joint, a_hat, gates.z, mask_z, Unary::sigmoid);
  Tensor r = napl_core(joint, a_hat, gates.r, mask_r, Unary::sigmoid);
  Tensor cand_in = concat_cols(x_t, mul(r, h_prev));
  Tensor cand = napl_core(cand_in, a_hat, gates.c, mask_c, Unary::tanh);
  return add(mul(z, h_prev), mul(affine(z, -1, 1), cand));
}

/// Stochastic-pass controls. When enabled, each gate draws one mask per time
/// step (covering that gate's whole pre-activation) and the decoder draws one
/// mask per pass; masks are resampled on every forward pass, in training and
/// inference alike.
struct PassConfig {
  bool stochastic = false;
  RngStream* rng = nullptr;
};

namespace detail {
inline const DropoutMask* maybe_mask(std::vector<DropoutMask>& store,
                                     std::vector<std::size_t> shape, real rate,
                                     const PassConfig& pass) {
  if (!pass.stochastic || rate <= 0) return nullptr;
  if (!pass.rng) throw UsageError("stochastic pass requires an rng stream");
  store.push_back(dropout_rate_mask(std::move(shape), rate, *pass.rng));
  return &store.back();
}
}  // namespace detail

/// Runs the encoder over a [nodes x history] input window (already
/// normalized) and returns the top layer's final hidden state. The adjacency
/// and the pooled per-node gate weights depend only on the embedding, so both
/// are built once per pass and shared across time steps.
inline Tensor encode(Tape& tape, const ModelLeaves& leaves, std::span<const real> x_norm,
                     const PassConfig& pass) {
  const ModelConfig& cfg = leaves.params->cfg;
  if (x_norm.size() != cfg.nodes * cfg.history)
    throw DimensionError("encode: window must be nodes x history");
  if (cfg.history < 1) throw DimensionError("encode: empty sequence");

  Tensor a_hat = adaptive_adjacency(leaves.embed());
  std::vector<GruGates> gates(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    gates[l].z = pool_gate(leaves.embed(), leaves.gate_w(l, 0), leaves.gate_b(l, 0));
    gates[l].r = pool_gate(leaves.embed(), leaves.gate_w(l, 1), leaves.gate_b(l, 1));
    gates[l].c = pool_gate(leaves.embed(), leaves.gate_w(l, 2), leaves.gate_b(l, 2));
  }

  std::vector<Tensor> h(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) h[l] = tape.full({cfg.nodes, cfg.hidden}, 0);

  std::vector<DropoutMask> masks;
  masks.reserve(cfg.layers * cfg.history * 3);
  std::vector<real> col(cfg.nodes);
  for (std::size_t t = 0; t < cfg.history; ++t) {
    for (std::size_t v = 0; v < cfg.nodes; ++v) col[v] = x_norm[v * cfg.history + t];
    Tensor input = tape.constant({cfg.nodes, 1}, col);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const DropoutMask* mz =
          detail::maybe_mask(masks, {cfg.nodes, cfg.hidden}, cfg.encoder_dropout, pass);
      const DropoutMask* mr =
          detail::maybe_mask(masks, {cfg.nodes, cfg.hidden}, cfg.encoder_dropout, pass);
      const DropoutMask* mc =
          detail::maybe_mask(masks, {cfg.nodes, cfg.hidden}, cfg.encoder_dropout, pass);
      h[l] = agcrn_cell(input, h[l], a_hat, gates[l], mz, mr, mc);
      input = h[l];
    }
  }
  return h[cfg.layers - 1];
}

/// Decoder head outputs in declaration order. Gaussian mode yields
/// {mu, logvar} with logvar clamped to [-10, 10]; quantile mode yields
/// {lower, median, upper}; point mode yields {mu}.
inline std::vector<Tensor> decode(const ModelLeaves& leaves, const Tensor& h,
                                  const PassConfig& pass) {
  const ModelConfig& cfg = leaves.params->cfg;
  std::vector<DropoutMask> masks;
  Tensor hd = h;
  if (const DropoutMask* m = detail::maybe_mask(masks, {cfg.nodes, cfg.hidden},
                                                cfg.decoder_dropout, pass))
    hd = apply_dropout(h, *m);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < cfg.head_count(); ++k) {
    Tensor y = add_rowvec(matmul(hd, leaves.head_w(k)), leaves.head_b(k));
    if (cfg.head_mode == HeadMode::gaussian && k == 1) y = clamp(y, kLogVarMin, kLogVarMax);
    out.push_back(y);
  }
  return out;
}

/// Whole-model forward pass on one raw window: normalize, encode, decode.
inline std::vector<Tensor> forward_sample(Tape& tape, const ModelLeaves& leaves,
                                          std::span<const real> x_raw, const NormStats& stats,
                                          const PassConfig& pass) {
  std::vector<real> x_norm(x_raw.size());
  for (std::size_t i = 0; i < x_raw.size(); ++i) x_norm[i] = stats.normalize(x_raw[i]);
  Tensor h = encode(tape, leaves, x_norm, pass);
  return decode(leaves, h, pass);
}

}  // namespace stuq

#endif  // STUQ_MODEL_HPP
