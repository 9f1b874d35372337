#ifndef STUQ_EVALUATE_HPP
#define STUQ_EVALUATE_HPP

#include <cmath>
#include <span>
#include <vector>

#include "stuq/calibrate.hpp"
#include "stuq/common.hpp"
#include "stuq/model.hpp"
#include "stuq/tensor.hpp"

namespace stuq {

// ---------------------------------------------------------------------------
// normal quantiles

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }

/// Inverse standard normal CDF: rational initial guess refined by one Newton
/// step on the erfc-based CDF; absolute error well below 1e-8 on (0,1).
inline double inverse_normal_cdf(double p) {
  if (!(p > 0 && p < 1)) throw DomainError("inverse_normal_cdf: p must be in (0,1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log(1 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
  if (pdf > 0) x -= (normal_cdf(x) - p) / pdf;
  return x;
}

// ---------------------------------------------------------------------------
// point metrics

inline void require_equal_sizes(std::size_t a, std::size_t b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": size mismatch");
}

inline real rmse(std::span<const real> y, std::span<const real> yhat) {
  require_equal_sizes(y.size(), yhat.size(), "rmse");
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = y[i] - yhat[i];
    s += e * e;
  }
  return static_cast<real>(std::sqrt(s / static_cast<double>(y.size())));
}

inline real mae(std::span<const real> y, std::span<const real> yhat) {
  require_equal_sizes(y.size(), yhat.size(), "mae");
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::fabs(y[i] - yhat[i]);
  return static_cast<real>(s / static_cast<double>(y.size()));
}

/// Percentage error over entries with |y| >= eps; masking everything is an
/// undefined-metric error.
inline real mape(std::span<const real> y, std::span<const real> yhat, real eps = 1) {
  require_equal_sizes(y.size(), yhat.size(), "mape");
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (std::fabs(y[i]) < eps) continue;
    s += std::fabs((yhat[i] - y[i]) / y[i]);
    ++n;
  }
  if (n == 0) throw DomainError("mape: every target is below the mask threshold");
  return static_cast<real>(100.0 * s / static_cast<double>(n));
}

/// Mean Gaussian negative log-likelihood with full constants:
/// mean of 0.5 log(2 pi sigma^2) + (y-mu)^2 / (2 sigma^2).
inline real mnll(std::span<const real> y, std::span<const real> mu,
                 std::span<const real> sigma2) {
  require_equal_sizes(y.size(), mu.size(), "mnll");
  require_equal_sizes(y.size(), sigma2.size(), "mnll");
  constexpr double two_pi = 6.28318530717958647692;
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(sigma2[i] > 0))
      throw DomainError("mnll: non-positive variance at index " + std::to_string(i));
    const double r = y[i] - mu[i];
    s += 0.5 * std::log(two_pi * static_cast<double>(sigma2[i])) +
         r * r / (2.0 * static_cast<double>(sigma2[i]));
  }
  return static_cast<real>(s / static_cast<double>(y.size()));
}

// ---------------------------------------------------------------------------
// intervals

struct IntervalBounds {
  std::vector<real> lower, upper;
  real alpha = 0.05;
  real z = 1.959963984540054;
};

inline IntervalBounds intervals(std::span<const real> mu, std::span<const real> sigma2,
                                real alpha) {
  require_equal_sizes(mu.size(), sigma2.size(), "intervals");
  if (!(alpha > 0 && alpha < 1)) throw DomainError("intervals: alpha must be in (0,1)");
  IntervalBounds b;
  b.alpha = alpha;
  b.z = static_cast<real>(inverse_normal_cdf(1.0 - static_cast<double>(alpha) / 2.0));
  b.lower.resize(mu.size());
  b.upper.resize(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (sigma2[i] < 0) throw DomainError("intervals: negative variance");
    const real half = b.z * static_cast<real>(std::sqrt(static_cast<double>(sigma2[i])));
    b.lower[i] = mu[i] - half;
    b.upper[i] = mu[i] + half;
  }
  return b;
}

/// Coverage fraction with closed bounds: lower <= y <= upper.
inline real picp(std::span<const real> y, const IntervalBounds& b) {
  require_equal_sizes(y.size(), b.lower.size(), "picp");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (b.lower[i] <= y[i] && y[i] <= b.upper[i]) ++hit;
  return static_cast<real>(hit) / static_cast<real>(y.size());
}

inline real mpiw(const IntervalBounds& b) {
  double s = 0;
  for (std::size_t i = 0; i < b.lower.size(); ++i) s += b.upper[i] - b.lower[i];
  return static_cast<real>(s / static_cast<double>(b.lower.size()));
}

// ---------------------------------------------------------------------------
// Monte Carlo predictive inference

/// Per-node, per-horizon Gaussian predictive distribution. sigma2_hat is the
/// total predictive variance; aleatoric_hat is its temperature-scaled data
/// component (the difference is the epistemic part).
struct ForecastDistribution {
  std::size_t nodes = 0;
  std::size_t horizon = 0;
  std::vector<real> mu_hat;
  std::vector<real> sigma2_hat;
  std::vector<real> aleatoric_hat;
  Temperature temp;
  int n_mc = 1;
};

/// Pools sampled (mu, sigma^2) pairs: mu_hat is the sample mean of the means;
/// sigma2_hat adds the temperature-scaled mean of the sampled variances and
/// the unbiased (n-1) sample variance of the means, which is defined as zero
/// for a single sample.
inline ForecastDistribution pool_mc_samples(const std::vector<std::vector<real>>& mus,
                                            const std::vector<std::vector<real>>& vars,
                                            const Temperature& temp) {
  if (mus.empty() || mus.size() != vars.size())
    throw UsageError("pool_mc_samples: need matching, non-empty sample sets");
  const std::size_t n_mc = mus.size();
  const std::size_t out_n = mus[0].size();
  ForecastDistribution d;
  d.temp = temp;
  d.n_mc = static_cast<int>(n_mc);
  d.mu_hat.assign(out_n, 0);
  d.aleatoric_hat.assign(out_n, 0);
  const real inv = real(1) / static_cast<real>(n_mc);
  for (std::size_t j = 0; j < n_mc; ++j) {
    if (mus[j].size() != out_n || vars[j].size() != out_n)
      throw DimensionError("pool_mc_samples: ragged sample set");
    for (std::size_t i = 0; i < out_n; ++i) {
      d.mu_hat[i] += mus[j][i] * inv;
      d.aleatoric_hat[i] += vars[j][i] * inv;
    }
  }
  for (std::size_t i = 0; i < out_n; ++i)
    d.aleatoric_hat[i] = apply_temperature(d.aleatoric_hat[i], temp);
  d.sigma2_hat = d.aleatoric_hat;
  if (n_mc > 1) {
    const real invm1 = real(1) / static_cast<real>(n_mc - 1);
    for (std::size_t i = 0; i < out_n; ++i) {
      real sq = 0;
      for (std::size_t j = 0; j < n_mc; ++j) {
        const real dmu = mus[j][i] - d.mu_hat[i];
        sq += dmu * dmu;
      }
      d.sigma2_hat[i] += sq * invm1;
    }
  }
  return d;
}

/// Draws n_mc stochastic passes (dropout active) and pools them. Passes use
/// independent derived streams and reduce in sample order, so results do not
/// depend on the worker count.
inline ForecastDistribution mc_predict(const ModelParams& model, std::span<const real> x_raw,
                                       const NormStats& stats, int n_mc,
                                       const Temperature& temp, std::uint64_t pass_key) {
  if (n_mc < 1) throw UsageError("mc_predict: n_mc must be >= 1");
  if (model.cfg.head_mode != HeadMode::gaussian)
    throw UsageError("mc_predict: model has no variance head");
  const std::size_t out_n = model.cfg.nodes * model.cfg.horizon;
  std::vector<std::vector<real>> mus(n_mc), vars(n_mc);
  parallel_for(static_cast<std::size_t>(n_mc), [&](std::size_t j) {
    RngStream rng(derive_seed(pass_key, {tag("mc"), j}));
    Tape tape;
    ModelLeaves leaves = stage_params(tape, model, false);
    PassConfig pass{true, &rng};
    std::vector<Tensor> heads = forward_sample(tape, leaves, x_raw, stats, pass);
    mus[j].assign(heads[0].value().begin(), heads[0].value().end());
    vars[j].resize(out_n);
    for (std::size_t i = 0; i < out_n; ++i)
      vars[j][i] = std::exp(heads[1].value()[i]);
  });
  ForecastDistribution d = pool_mc_samples(mus, vars, temp);
  d.nodes = model.cfg.nodes;
  d.horizon = model.cfg.horizon;
  return d;
}

/// One deterministic pass (dropout off) with aleatoric variance only.
inline ForecastDistribution single_pass_predict(const ModelParams& model,
                                                std::span<const real> x_raw,
                                                const NormStats& stats,
                                                const Temperature& temp) {
  if (model.cfg.head_mode != HeadMode::gaussian)
    throw UsageError("single_pass_predict: model has no variance head");
  Tape tape;
  ModelLeaves leaves = stage_params(tape, model, false);
  PassConfig pass{false, nullptr};
  std::vector<Tensor> heads = forward_sample(tape, leaves, x_raw, stats, pass);
  ForecastDistribution d;
  d.nodes = model.cfg.nodes;
  d.horizon = model.cfg.horizon;
  d.temp = temp;
  d.n_mc = 1;
  d.mu_hat.assign(heads[0].value().begin(), heads[0].value().end());
  d.sigma2_hat.resize(d.mu_hat.size());
  for (std::size_t i = 0; i < d.sigma2_hat.size(); ++i)
    d.sigma2_hat[i] = apply_temperature(std::exp(heads[1].value()[i]), temp);
  d.aleatoric_hat = d.sigma2_hat;
  return d;
}

}  // namespace stuq

#endif  // STUQ_EVALUATE_HPP
