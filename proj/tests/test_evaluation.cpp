#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "stuq/evaluate.hpp"

using namespace stuq;
using Catch::Approx;

namespace {

// bisection inverse of the erfc-based CDF, independent of the rational
// approximation under test
double inverse_cdf_bisect(double p) {
  double lo = -20, hi = 20;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (normal_cdf(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// naive double-loop references for every metric
struct Naive {
  static double rmse(const std::vector<real>& y, const std::vector<real>& yh) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yh[i]) * (y[i] - yh[i]);
    return std::sqrt(s / y.size());
  }
  static double mae(const std::vector<real>& y, const std::vector<real>& yh) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += std::fabs(y[i] - yh[i]);
    return s / y.size();
  }
  static double mape(const std::vector<real>& y, const std::vector<real>& yh, double eps) {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (std::fabs(y[i]) < eps) continue;
      s += std::fabs((yh[i] - y[i]) / y[i]);
      ++n;
    }
    return 100.0 * s / n;
  }
  static double mnll(const std::vector<real>& y, const std::vector<real>& mu,
                     const std::vector<real>& s2) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
      s += 0.5 * std::log(2 * 3.14159265358979323846 * s2[i]) +
           (y[i] - mu[i]) * (y[i] - mu[i]) / (2 * s2[i]);
    return s / y.size();
  }
  static double picp(const std::vector<real>& y, const std::vector<real>& lo,
                     const std::vector<real>& hi) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (lo[i] <= y[i] && y[i] <= hi[i]) ++k;
    return static_cast<double>(k) / y.size();
  }
  static double mpiw(const std::vector<real>& lo, const std::vector<real>& hi) {
    double s = 0;
    for (std::size_t i = 0; i < lo.size(); ++i) s += hi[i] - lo[i];
    return s / lo.size();
  }
};

}  // namespace

TEST_CASE("inverse normal cdf") {
  SECTION("classic two-sided critical value") {
    const double z = inverse_normal_cdf(0.975);
    REQUIRE(z == Approx(1.959963984540054).margin(1e-9));
    REQUIRE(z == Approx(1.96).margin(5e-4));  // the conventional rounded value
  }
  SECTION("matches a bisection oracle to 1e-8 across the range") {
    for (double p : {1e-6, 0.001, 0.02425, 0.16, 0.5, 0.84, 0.975, 0.999, 1 - 1e-6}) {
      REQUIRE(inverse_normal_cdf(p) == Approx(inverse_cdf_bisect(p)).margin(1e-8));
    }
  }
  SECTION("alpha = 32% quantile") {
    REQUIRE(inverse_normal_cdf(1 - 0.32 / 2) == Approx(0.994458).margin(1e-5));
  }
  SECTION("domain") {
    REQUIRE_THROWS_AS(inverse_normal_cdf(0.0), DomainError);
    REQUIRE_THROWS_AS(inverse_normal_cdf(1.0), DomainError);
  }
}

TEST_CASE("point metrics") {
  SECTION("zero error") {
    std::vector<real> y = {1, 2, 3};
    REQUIRE(rmse(y, y) == 0.0);
    REQUIRE(mae(y, y) == 0.0);
    REQUIRE(mape(y, y) == 0.0);
  }
  SECTION("hand values") {
    std::vector<real> y = {0, 3}, yh = {4, 3};
    REQUIRE(rmse(y, yh) == Approx(std::sqrt(8.0)));
    REQUIRE(mae(y, yh) == Approx(2.0));
    std::vector<real> y2 = {10}, yh2 = {11};
    REQUIRE(mape(y2, yh2) == Approx(10.0));
  }
  SECTION("mape masks small targets and can become undefined") {
    std::vector<real> y = {0.5, 20}, yh = {9, 22};
    REQUIRE(mape(y, yh, 1.0) == Approx(10.0));  // only the second entry counts
    std::vector<real> tiny = {0.1, -0.2}, t2 = {1, 1};
    REQUIRE_THROWS_AS(mape(tiny, t2, 1.0), DomainError);
  }
}

TEST_CASE("gaussian negative log-likelihood") {
  SECTION("zero residual, unit variance") {
    std::vector<real> y = {3}, s2 = {1};
    REQUIRE(mnll(y, y, s2) == Approx(0.5 * std::log(2 * 3.14159265358979323846)).margin(1e-12));
  }
  SECTION("unit residual adds one half") {
    std::vector<real> y = {1}, mu = {0}, s2 = {1};
    REQUIRE(mnll(y, mu, s2) ==
            Approx(0.5 * std::log(2 * 3.14159265358979323846) + 0.5).margin(1e-12));
  }
  SECTION("grows without bound as variance inflates past the residual") {
    std::vector<real> y = {2}, mu = {0};
    real prev = mnll(y, mu, std::vector<real>{4});
    for (real s2 : {real(40), real(400), real(4000)}) {
      const real cur = mnll(y, mu, std::vector<real>{s2});
      REQUIRE(cur > prev);
      prev = cur;
    }
  }
  SECTION("non-positive variance") {
    std::vector<real> y = {1}, s2 = {0};
    REQUIRE_THROWS_AS(mnll(y, y, s2), DomainError);
  }
}

TEST_CASE("interval construction") {
  SECTION("95 percent band") {
    IntervalBounds b = intervals(std::vector<real>{0}, std::vector<real>{1}, 0.05);
    REQUIRE(b.lower[0] == Approx(-1.96).margin(5e-4));
    REQUIRE(b.upper[0] == Approx(1.96).margin(5e-4));
  }
  SECTION("degenerate variance collapses the band") {
    IntervalBounds b = intervals(std::vector<real>{2.5}, std::vector<real>{0}, 0.05);
    REQUIRE(b.lower[0] == 2.5);
    REQUIRE(b.upper[0] == 2.5);
  }
  SECTION("width widens as alpha shrinks, coverage follows") {
    RngStream rng(5);
    std::vector<real> mu(200), s2(200), y(200);
    for (std::size_t i = 0; i < 200; ++i) {
      mu[i] = rng.uniform(-1, 1);
      s2[i] = static_cast<real>(rng.uniform(0.5, 2));
      y[i] = mu[i] + static_cast<real>(std::sqrt(s2[i]) * rng.normal());
    }
    real prev_w = 0, prev_p = 0;
    for (real alpha : {real(0.5), real(0.2), real(0.05), real(0.01)}) {
      IntervalBounds b = intervals(mu, s2, alpha);
      REQUIRE(mpiw(b) > prev_w);
      REQUIRE(picp(y, b) >= prev_p);
      prev_w = mpiw(b);
      prev_p = picp(y, b);
    }
  }
}

TEST_CASE("coverage and width against naive references") {
  SECTION("hand case") {
    std::vector<real> y = {0, 10}, lo = {-1, 8}, hi = {1, 9};
    IntervalBounds b;
    b.lower = lo;
    b.upper = hi;
    REQUIRE(picp(y, b) == Approx(0.5));
    REQUIRE(mpiw(b) == Approx(1.5));
  }
  SECTION("everything covered") {
    std::vector<real> y = {0, 10};
    IntervalBounds b;
    b.lower = {-100, -100};
    b.upper = {100, 100};
    REQUIRE(picp(y, b) == 1.0);
  }
  SECTION("100 random arrays match the double-loop references exactly") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      RngStream rng(seed + 7);
      const std::size_t n = 5 + rng.below(60);
      std::vector<real> y(n), yh(n), s2(n), lo(n), hi(n);
      for (std::size_t i = 0; i < n; ++i) {
        y[i] = rng.uniform(-20, 20);
        yh[i] = rng.uniform(-20, 20);
        s2[i] = static_cast<real>(rng.uniform(0.1, 9));
        lo[i] = yh[i] - static_cast<real>(rng.uniform(0, 5));
        hi[i] = yh[i] + static_cast<real>(rng.uniform(0, 5));
      }
      REQUIRE(rmse(y, yh) == Naive::rmse(y, yh));
      REQUIRE(mae(y, yh) == Naive::mae(y, yh));
      REQUIRE(mape(y, yh, 1.0) == Naive::mape(y, yh, 1.0));
      REQUIRE(mnll(y, yh, s2) == Naive::mnll(y, yh, s2));
      IntervalBounds b;
      b.lower = lo;
      b.upper = hi;
      REQUIRE(picp(y, b) == Naive::picp(y, lo, hi));
      REQUIRE(mpiw(b) == Naive::mpiw(lo, hi));
    }
  }
}

TEST_CASE("coverage of the true distribution") {
  // draws with the exact predictive distribution supplied: coverage must sit
  // at the nominal level
  RngStream rng(99);
  const std::size_t n = 100000;
  std::vector<real> y(n), mu(n), s2(n);
  for (std::size_t i = 0; i < n; ++i) {
    mu[i] = rng.uniform(-10, 10);
    const double sigma = rng.uniform(0.5, 3);
    s2[i] = static_cast<real>(sigma * sigma);
    y[i] = mu[i] + static_cast<real>(sigma * rng.normal());
  }
  IntervalBounds b = intervals(mu, s2, 0.05);
  REQUIRE(picp(y, b) == Approx(0.95).margin(0.01));
}

TEST_CASE("monte carlo pooling") {
  SECTION("hand-set samples") {
    std::vector<std::vector<real>> mus = {{1}, {3}};
    std::vector<std::vector<real>> vars = {{1}, {1}};
    ForecastDistribution d = pool_mc_samples(mus, vars, Temperature{1, 2});
    REQUIRE(d.mu_hat[0] == Approx(2.0));
    REQUIRE(d.sigma2_hat[0] == Approx(3.0));  // 1 aleatoric + var({1,3}) = 2
    REQUIRE(d.aleatoric_hat[0] == Approx(1.0));
  }
  SECTION("single sample has zero epistemic part") {
    std::vector<std::vector<real>> mus = {{5, 7}};
    std::vector<std::vector<real>> vars = {{2, 4}};
    ForecastDistribution d = pool_mc_samples(mus, vars, Temperature{1, 2});
    REQUIRE(d.sigma2_hat == d.aleatoric_hat);
  }
  SECTION("temperature hits only the aleatoric part") {
    std::vector<std::vector<real>> mus = {{1}, {3}};
    std::vector<std::vector<real>> vars = {{4}, {4}};
    ForecastDistribution d = pool_mc_samples(mus, vars, Temperature{2, 2});
    REQUIRE(d.aleatoric_hat[0] == Approx(1.0));       // 4 / T^2
    REQUIRE(d.sigma2_hat[0] == Approx(1.0 + 2.0));    // epistemic unscaled
  }
}

TEST_CASE("model predictive inference") {
  ModelConfig cfg;
  cfg.nodes = 4;
  cfg.hidden = 6;
  cfg.embed_dim = 2;
  cfg.history = 5;
  cfg.horizon = 3;
  cfg.encoder_dropout = 0.2;
  cfg.decoder_dropout = 0.2;
  ModelParams model = ModelParams::init(cfg, 41);
  RngStream rng(4);
  std::vector<real> x(cfg.nodes * cfg.history);
  for (auto& v : x) v = rng.uniform(-1, 1);

  SECTION("no dropout makes every sample identical") {
    ModelConfig c0 = cfg;
    c0.encoder_dropout = 0;
    c0.decoder_dropout = 0;
    ModelParams m0 = model;
    m0.cfg = c0;
    ForecastDistribution d = mc_predict(m0, x, NormStats{}, 8, Temperature{1, 2}, 3);
    ForecastDistribution s = single_pass_predict(m0, x, NormStats{}, Temperature{1, 2});
    for (std::size_t i = 0; i < d.mu_hat.size(); ++i) {
      REQUIRE(d.mu_hat[i] == Approx(s.mu_hat[i]).margin(1e-12));
      REQUIRE(d.sigma2_hat[i] == Approx(s.sigma2_hat[i]).margin(1e-12));
    }
  }
  SECTION("total variance dominates the aleatoric part") {
    ForecastDistribution d = mc_predict(model, x, NormStats{}, 10, Temperature{1, 2}, 5);
    for (std::size_t i = 0; i < d.sigma2_hat.size(); ++i) {
      REQUIRE(d.sigma2_hat[i] >= d.aleatoric_hat[i]);
      REQUIRE(d.sigma2_hat[i] > 0);
    }
  }
  SECTION("n_mc of one is allowed, zero is not") {
    REQUIRE_NOTHROW(mc_predict(model, x, NormStats{}, 1, Temperature{1, 2}, 6));
    REQUIRE_THROWS_AS(mc_predict(model, x, NormStats{}, 0, Temperature{1, 2}, 6), UsageError);
  }
  SECTION("same pass key reproduces the distribution") {
    ForecastDistribution a = mc_predict(model, x, NormStats{}, 5, Temperature{1, 2}, 9);
    ForecastDistribution b = mc_predict(model, x, NormStats{}, 5, Temperature{1, 2}, 9);
    REQUIRE(a.mu_hat == b.mu_hat);
    REQUIRE(a.sigma2_hat == b.sigma2_hat);
  }
}
