#ifndef STUQ_LOSSES_HPP
#define STUQ_LOSSES_HPP

#include <array>
#include <span>

#include "stuq/common.hpp"
#include "stuq/model.hpp"
#include "stuq/tensor.hpp"

namespace stuq {

/// Quantile levels trained by the quantile head mode (lower, median, upper).
inline constexpr std::array<real, 3> kQuantileLevels = {0.025, 0.5, 0.975};

struct LossConfig {
  real lambda = 0.1;       // weight of the Gaussian term; (1-lambda) weights the L1 term
  real weight_decay = 1e-6;
  bool per_layer_decay = false;  // scale decay by 1/(2 p_i) at each dropout site
  HeadMode head_mode = HeadMode::gaussian;

  void validate() const {
    if (!(lambda > 0 && lambda <= 1))
      throw ConfigError("loss: lambda must be in (0,1], got " + std::to_string(lambda));
    if (weight_decay < 0) throw ConfigError("loss: weight_decay must be >= 0");
  }
};

/// Heteroscedastic Gaussian data term, mean over all elements of
/// logvar + (y - mu)^2 * exp(-logvar). The log-variance head output is
/// consumed directly; constants of the full likelihood are dropped.
inline Tensor hetero_nll_term(const Tensor& y, const Tensor& mu, const Tensor& logvar) {
  detail::require_same_shape(y, mu, "hetero_nll_term");
  detail::require_same_shape(y, logvar, "hetero_nll_term");
  Tensor r2 = square(sub(y, mu));
  Tensor inv_var = stuq::exp(affine(logvar, -1, 0));
  return mean(add(logvar, mul(r2, inv_var)));
}

/// lambda * hetero_nll_term + (1 - lambda) * mean |y - mu|.
inline Tensor combined_aleatoric_loss(const Tensor& y, const Tensor& mu, const Tensor& logvar,
                                      real lambda) {
  if (!(lambda > 0 && lambda <= 1))
    throw DomainError("combined_aleatoric_loss: lambda must be in (0,1]");
  Tensor nll = hetero_nll_term(y, mu, logvar);
  Tensor l1 = mean(stuq::abs(sub(y, mu)));
  return add(affine(nll, lambda, 0), affine(l1, real(1) - lambda, 0));
}

/// Pinball loss at level q: mean of max(q d, (q-1) d) with d = y - yhat,
/// written as (q-1) d + relu(d).
inline Tensor pinball_loss(const Tensor& y, const Tensor& yhat, real q) {
  if (!(q > 0 && q < 1)) throw DomainError("pinball_loss: q must be in (0,1)");
  detail::require_same_shape(y, yhat, "pinball_loss");
  Tensor d = sub(y, yhat);
  return mean(add(affine(d, q - 1, 0), relu(d)));
}

/// The training objective's data term; its L2 part is realized as decoupled
/// weight decay inside the optimizer step, so this returns the differentiable
/// term plus the decay coefficient the optimizer should apply.
struct TotalLoss {
  Tensor data_term;
  real decay_coefficient = 0;
};

inline TotalLoss total_loss(const Tensor& y, const Tensor& mu, const Tensor& logvar,
                            const LossConfig& cfg) {
  cfg.validate();
  return {combined_aleatoric_loss(y, mu, logvar, cfg.lambda), cfg.weight_decay};
}

/// Value of the penalty the decay realizes: c/2 * ||w||^2.
inline real l2_penalty_value(std::span<const real> w, real coefficient) {
  real s = 0;
  for (real v : w) s += v * v;
  return coefficient * s / 2;
}

/// Per-mode data term over decoder head outputs.
inline Tensor head_loss(const LossConfig& cfg, const Tensor& y, const std::vector<Tensor>& heads) {
  cfg.validate();
  switch (cfg.head_mode) {
    case HeadMode::gaussian:
      return combined_aleatoric_loss(y, heads.at(0), heads.at(1), cfg.lambda);
    case HeadMode::point:
      return mean(stuq::abs(sub(y, heads.at(0))));
    case HeadMode::quantile: {
      Tensor acc = pinball_loss(y, heads.at(0), kQuantileLevels[0]);
      acc = add(acc, pinball_loss(y, heads.at(1), kQuantileLevels[1]));
      acc = add(acc, pinball_loss(y, heads.at(2), kQuantileLevels[2]));
      return affine(acc, real(1) / 3, 0);
    }
  }
  throw UsageError("head_loss: unknown head mode");
}

}  // namespace stuq

#endif  // STUQ_LOSSES_HPP
