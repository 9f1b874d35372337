#ifndef STUQ_OPTIM_HPP
#define STUQ_OPTIM_HPP

#include <cmath>
#include <span>
#include <vector>

#include "stuq/common.hpp"

namespace stuq {

struct AdamConfig {
  real beta1 = 0.9;
  real beta2 = 0.999;
  real eps = 1e-8;
  real weight_decay = 0;  // decoupled: w -= lr * decay * w
};

struct OptimizerState {
  AdamConfig cfg;
  std::vector<real> m, v;
  std::vector<real> decay_scale;  // optional per-parameter decay; empty = uniform
  std::uint64_t step = 0;

  OptimizerState() = default;
  OptimizerState(std::size_t n, AdamConfig c) : cfg(c), m(n, 0), v(n, 0) {}
};

/// Bias-corrected Adam update with decoupled weight decay. The decay realizes
/// the objective's L2 penalty without entering the moment accumulators.
inline void adam_step(std::span<real> w, std::span<const real> g, OptimizerState& st, real lr) {
  if (w.size() != g.size() || w.size() != st.m.size())
    throw DimensionError("adam_step: size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!std::isfinite(static_cast<double>(g[i])))
      throw TrainingError("adam_step: non-finite gradient at flat index " + std::to_string(i) +
                          " (step " + std::to_string(st.step + 1) + ")");
  st.step += 1;
  const real b1 = st.cfg.beta1, b2 = st.cfg.beta2;
  const real bc1 = real(1) - std::pow(b1, static_cast<real>(st.step));
  const real bc2 = real(1) - std::pow(b2, static_cast<real>(st.step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    st.m[i] = b1 * st.m[i] + (real(1) - b1) * g[i];
    st.v[i] = b2 * st.v[i] + (real(1) - b2) * g[i] * g[i];
    const real mhat = st.m[i] / bc1;
    const real vhat = st.v[i] / bc2;
    const real decay = st.decay_scale.empty() ? st.cfg.weight_decay : st.decay_scale[i];
    w[i] -= lr * (mhat / (std::sqrt(vhat) + st.cfg.eps) + decay * w[i]);
  }
}

/// Scales the gradient down to max_norm when its global L2 norm exceeds it;
/// returns the pre-clip norm.
inline real clip_global_norm(std::span<real> g, real max_norm) {
  real sq = 0;
  for (real v : g) sq += v * v;
  const real norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const real s = max_norm / norm;
    for (real& v : g) v *= s;
  }
  return norm;
}

struct LrSchedule {
  real lr_max = 0.003;
  real lr_min = 0.00003;
  std::size_t n_iteration = 1;

  void validate() const {
    if (!(lr_max >= lr_min && lr_min > 0))
      throw ConfigError("lr schedule: need lr_max >= lr_min > 0");
    if (n_iteration < 1) throw ConfigError("lr schedule: n_iteration must be >= 1");
  }
};

/// Cosine decay from lr_max at n_i = 0 to lr_min at n_i = n_iteration.
/// Endpoints are returned exactly.
inline real cosine_lr(std::size_t n_i, const LrSchedule& s) {
  s.validate();
  if (n_i > s.n_iteration)
    throw UsageError("cosine_lr: iteration index " + std::to_string(n_i) + " out of range");
  if (n_i == 0) return s.lr_max;
  if (n_i == s.n_iteration) return s.lr_min;
  const real frac = static_cast<real>(n_i) / static_cast<real>(s.n_iteration);
  return s.lr_min +
         real(0.5) * (s.lr_max - s.lr_min) * (real(1) + std::cos(real(3.14159265358979323846) * frac));
}

/// Running arithmetic mean of parameter snapshots.
struct AwaState {
  std::vector<real> w_avg;
  std::size_t n_models = 0;

  void update(std::span<const real> w) {
    if (n_models == 0) {
      w_avg.assign(w.begin(), w.end());
    } else {
      if (w.size() != w_avg.size())
        throw DimensionError("awa update: expected " + std::to_string(w_avg.size()) +
                             " parameters, got " + std::to_string(w.size()));
      const real n = static_cast<real>(n_models);
      for (std::size_t i = 0; i < w.size(); ++i)
        w_avg[i] = (w_avg[i] * n + w[i]) / (n + 1);
    }
    ++n_models;
  }
};

}  // namespace stuq

#endif  // STUQ_OPTIM_HPP
