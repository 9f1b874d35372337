#ifndef STUQ_CALIBRATE_HPP
#define STUQ_CALIBRATE_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "stuq/common.hpp"

namespace stuq {

/// Scalar temperature applied to predicted variances. variance_power selects
/// how T enters: calibrated variance = sigma^2 / T^power. Power 2 matches the
/// calibration objective (sigma scaled by 1/T); power 1 divides the variance
/// itself once.
struct Temperature {
  real t = 1;
  int variance_power = 2;
};

struct CalibrationSettings {
  real step = 0.02;  // initial quasi-Newton step on log T
  int max_iters = 500;
};

struct CalibrationResult {
  Temperature temp;
  real c = 0;  // mean squared standardized residual the optimizer saw
  std::size_t n = 0;
  real objective = 0;
  int iters = 0;
};

class CalibrationError : public std::runtime_error {
 public:
  CalibrationError(const std::string& msg, Temperature best)
      : std::runtime_error(msg), best_iterate(best) {}
  Temperature best_iterate;
};

/// Minimizes (1/N) sum [-log T^2 + T^2 (y-mu)^2 / sigma^2] over T > 0 with a
/// secant (quasi-Newton) iteration on log T, which keeps T positive without
/// constraints. The minimizer satisfies T^2 = 1/c with
/// c = mean((y-mu)^2/sigma^2); tests verify the iterate against that closed
/// form rather than substituting it.
inline CalibrationResult calibrate_temperature(std::span<const real> y,
                                               std::span<const real> mu,
                                               std::span<const real> sigma2,
                                               const CalibrationSettings& cfg = {},
                                               int variance_power = 2) {
  if (y.size() != mu.size() || y.size() != sigma2.size())
    throw DimensionError("calibrate_temperature: input sizes differ");
  if (y.size() < 2) throw UsageError("calibrate_temperature: need at least 2 points");
  if (variance_power != 1 && variance_power != 2)
    throw ConfigError("variance_power must be 1 or 2");
  if (!(cfg.step > 0) || cfg.max_iters < 1)
    throw ConfigError("calibration settings: step > 0 and max_iters >= 1 required");

  double c = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(sigma2[i] > 0))
      throw DomainError("calibrate_temperature: non-positive variance at index " +
                        std::to_string(i));
    const double r = static_cast<double>(y[i]) - static_cast<double>(mu[i]);
    c += r * r / static_cast<double>(sigma2[i]);
  }
  c /= static_cast<double>(y.size());
  if (c <= 0)
    throw CalibrationError(
        "degenerate calibration: residuals are exactly zero, objective unbounded in T",
        Temperature{1, variance_power});

  // objective in theta = log T: g(theta) = -2 theta + c e^{2 theta}
  const auto grad = [c](double th) { return -2.0 + 2.0 * c * std::exp(2.0 * th); };
  double theta = 0.0, g = grad(theta);
  double prev_theta = theta, prev_g = g;
  double best_theta = theta, best_abs_g = std::fabs(g);
  int it = 0;
  bool converged = std::fabs(g) <= 1e-12;
  for (; it < cfg.max_iters && !converged; ++it) {
    double step;
    if (it == 0 || std::fabs(g - prev_g) < 1e-300) {
      step = -cfg.step * g;  // plain gradient step to seed the secant
    } else {
      step = -g * (theta - prev_theta) / (g - prev_g);
      if (!std::isfinite(step)) step = -cfg.step * g;
    }
    // cap against wild extrapolation; theta stays where exp(2 theta) is finite
    step = std::clamp(step, -1.0, 1.0);
    prev_theta = theta;
    prev_g = g;
    theta = std::clamp(theta + step, -30.0, 30.0);
    g = grad(theta);
    if (std::fabs(g) < best_abs_g) {
      best_abs_g = std::fabs(g);
      best_theta = theta;
    }
    converged = std::fabs(g) <= 1e-12 || std::fabs(theta - prev_theta) <= 1e-15;
  }
  if (!converged && best_abs_g > 1e-6)
    throw CalibrationError("temperature optimization did not converge after " +
                               std::to_string(cfg.max_iters) + " iterations",
                           Temperature{static_cast<real>(std::exp(best_theta)), variance_power});

  CalibrationResult r;
  r.temp.t = static_cast<real>(std::exp(best_abs_g < std::fabs(g) ? best_theta : theta));
  r.temp.variance_power = variance_power;
  r.c = static_cast<real>(c);
  r.n = y.size();
  const double t2 = static_cast<double>(r.temp.t) * r.temp.t;
  r.objective = static_cast<real>(-std::log(t2) + t2 * c);
  r.iters = it;
  return r;
}

inline real apply_temperature(real sigma2, const Temperature& temp) {
  if (!(temp.t > 0)) throw DomainError("apply_temperature: T must be positive");
  const real div = temp.variance_power == 2 ? temp.t * temp.t : temp.t;
  return sigma2 / div;
}

inline std::vector<real> apply_temperature(std::span<const real> sigma2,
                                           const Temperature& temp) {
  std::vector<real> out(sigma2.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_temperature(sigma2[i], temp);
  return out;
}

/// Split-conformal quantile of scaled absolute residuals |y - mu| / sigma.
/// Downstream intervals are mu +- q_hat * sigma.
struct ConformalQuantile {
  real q_hat = 0;
  real alpha = 0.05;
  std::size_t n_cal = 0;
};

inline ConformalQuantile conformal_calibrate(std::span<const real> y, std::span<const real> mu,
                                             std::span<const real> sigma, real alpha) {
  if (y.size() != mu.size() || y.size() != sigma.size())
    throw DimensionError("conformal_calibrate: input sizes differ");
  if (!(alpha > 0 && alpha < 1)) throw DomainError("conformal_calibrate: alpha in (0,1)");
  const std::size_t n = y.size();
  const std::size_t needed = static_cast<std::size_t>(std::ceil(1.0 / alpha));
  if (n < needed)
    throw DataError("conformal_calibrate: need at least " + std::to_string(needed) +
                    " calibration points for alpha=" + std::to_string(alpha) + ", got " +
                    std::to_string(n));
  std::vector<real> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(sigma[i] > 0))
      throw DomainError("conformal_calibrate: non-positive sigma at index " +
                        std::to_string(i));
    scores[i] = std::fabs(y[i] - mu[i]) / sigma[i];
  }
  std::sort(scores.begin(), scores.end());
  // rank ceil((n+1)(1-alpha)) computed as (n+1) - floor((n+1) alpha) to keep
  // the integer arithmetic exact for representable alphas
  const double na = static_cast<double>(n + 1) * static_cast<double>(alpha);
  std::size_t rank = (n + 1) - static_cast<std::size_t>(std::floor(na));
  rank = std::min(rank, n);
  rank = std::max<std::size_t>(rank, 1);
  ConformalQuantile q;
  q.q_hat = scores[rank - 1];
  q.alpha = alpha;
  q.n_cal = n;
  return q;
}

}  // namespace stuq

#endif  // STUQ_CALIBRATE_HPP
