#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "stuq/losses.hpp"
#include "stuq/model.hpp"
#include "stuq/tensor.hpp"

using namespace stuq;
using Catch::Approx;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.nodes = 4;
  c.in_channels = 1;
  c.hidden = 4;
  c.embed_dim = 2;
  c.history = 3;
  c.horizon = 2;
  c.encoder_dropout = 0;
  c.decoder_dropout = 0;
  return c;
}

void zero_params(ModelParams& p) {
  for (auto& a : p.arrays)
    if (a.name != "embed") std::fill(a.value.begin(), a.value.end(), real(0));
}

// Plain-loop re-evaluation of the adjacency, independent of the tensor ops.
std::vector<double> adjacency_oracle(const std::vector<double>& e, std::size_t v,
                                     std::size_t d) {
  std::vector<double> a(v * v, 0.0);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = 0; j < v; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += e[i * d + k] * e[j * d + k];
      a[i * v + j] = std::max(0.0, dot);
    }
  for (std::size_t i = 0; i < v; ++i) {
    double mx = a[i * v];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, a[i * v + j]);
    double sum = 0;
    for (std::size_t j = 0; j < v; ++j) {
      a[i * v + j] = std::exp(a[i * v + j] - mx);
      sum += a[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) a[i * v + j] /= sum;
  }
  return a;
}

// Plain-loop node-adaptive graph convolution:
// act((I + A) Z (E W) + E b), per node.
std::vector<double> napl_oracle(const std::vector<double>& z, const std::vector<double>& a,
                                const std::vector<double>& e, const std::vector<double>& w,
                                const std::vector<double>& b, std::size_t v, std::size_t d,
                                std::size_t ci, std::size_t co, bool use_tanh) {
  std::vector<double> mixed(v * ci, 0.0);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t c = 0; c < ci; ++c) {
      double s = z[i * ci + c];
      for (std::size_t j = 0; j < v; ++j) s += a[i * v + j] * z[j * ci + c];
      mixed[i * ci + c] = s;
    }
  std::vector<double> out(v * co, 0.0);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t o = 0; o < co; ++o) {
      double s = 0;
      for (std::size_t c = 0; c < ci; ++c) {
        double wv = 0;  // per-node weight from the shared pool
        for (std::size_t k = 0; k < d; ++k) wv += e[i * d + k] * w[k * ci * co + c * co + o];
        s += mixed[i * ci + c] * wv;
      }
      double bias = 0;
      for (std::size_t k = 0; k < d; ++k) bias += e[i * d + k] * b[k * co + o];
      s += bias;
      out[i * co + o] = use_tanh ? std::tanh(s) : 1.0 / (1.0 + std::exp(-s));
    }
  return out;
}

std::vector<real> random_vec(RngStream& rng, std::size_t n, double lo = -1, double hi = 1) {
  std::vector<real> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("adaptive adjacency") {
  SECTION("zero embedding gives the uniform matrix") {
    Tape t;
    Tensor e = t.full({5, 3}, 0.0);
    Tensor a = adaptive_adjacency(e);
    for (std::size_t i = 0; i < 25; ++i) REQUIRE(a.value()[i] == Approx(0.2));
  }
  SECTION("hand-evaluated 2-node case") {
    Tape t;
    Tensor e = t.leaf({2, 1}, std::vector<real>{1, 2});
    Tensor a = adaptive_adjacency(e);
    // rows are softmax([1,2]) and softmax([2,4])
    const double r0 = std::exp(1.0) / (std::exp(1.0) + std::exp(2.0));
    const double r1 = std::exp(2.0) / (std::exp(2.0) + std::exp(4.0));
    REQUIRE(a.value()[0] == Approx(r0));
    REQUIRE(a.value()[1] == Approx(1.0 - r0));
    REQUIRE(a.value()[2] == Approx(r1));
    REQUIRE(a.value()[3] == Approx(1.0 - r1));
  }
  SECTION("rows are probability distributions") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      RngStream rng(seed);
      const std::size_t v = 2 + rng.below(6), d = 1 + rng.below(v - 1);
      Tape t;
      Tensor a = adaptive_adjacency(t.leaf({v, d}, random_vec(rng, v * d, -3, 3)));
      for (std::size_t i = 0; i < v; ++i) {
        real sum = 0;
        for (std::size_t j = 0; j < v; ++j) {
          REQUIRE(a.value()[i * v + j] >= 0);
          sum += a.value()[i * v + j];
        }
        REQUIRE(std::fabs(sum - 1.0) <= 1e-12);
      }
    }
  }
  SECTION("matches the plain-loop oracle") {
    RngStream rng(11);
    const std::size_t v = 5, d = 2;
    auto e = random_vec(rng, v * d, -2, 2);
    Tape t;
    Tensor a = adaptive_adjacency(t.leaf({v, d}, e));
    std::vector<double> ed(e.begin(), e.end());
    auto oracle = adjacency_oracle(ed, v, d);
    for (std::size_t i = 0; i < v * v; ++i)
      REQUIRE(a.value()[i] == Approx(oracle[i]).margin(1e-14));
  }
}

TEST_CASE("node-adaptive graph convolution") {
  const std::size_t v = 4, d = 2, ci = 3, co = 4;
  RngStream rng(21);
  auto e = random_vec(rng, v * d);
  auto w = random_vec(rng, d * ci * co);
  auto b = random_vec(rng, d * co);
  auto z = random_vec(rng, v * ci);

  SECTION("zero pool collapses to the activation of zero") {
    Tape t;
    Tensor a = adaptive_adjacency(t.leaf({v, d}, e));
    Tensor out = napl_gcn(t.leaf({v, ci}, z), a, t.leaf({v, d}, e),
                          t.full({d, ci * co}, 0.0), t.full({d, co}, 0.0), nullptr,
                          Unary::sigmoid);
    for (std::size_t i = 0; i < v * co; ++i) REQUIRE(out.value()[i] == Approx(0.5));
  }
  SECTION("matches the direct formula with no dropout") {
    Tape t;
    Tensor et = t.leaf({v, d}, e);
    Tensor a = adaptive_adjacency(et);
    Tensor out = napl_gcn(t.leaf({v, ci}, z), a, et, t.leaf({d, ci * co}, w),
                          t.leaf({d, co}, b), nullptr, Unary::sigmoid);
    std::vector<double> ed(e.begin(), e.end()), wd(w.begin(), w.end()), bd(b.begin(), b.end()),
        zd(z.begin(), z.end());
    auto a_or = adjacency_oracle(ed, v, d);
    auto oracle = napl_oracle(zd, a_or, ed, wd, bd, v, d, ci, co, false);
    for (std::size_t i = 0; i < v * co; ++i)
      REQUIRE(out.value()[i] == Approx(oracle[i]).margin(1e-12));
  }
  SECTION("gradient w.r.t. the embedding matches finite differences") {
    auto eval = [&](std::span<const double> ew) {
      std::vector<real> er(ew.begin(), ew.end());
      Tape t;
      Tensor et = t.leaf({v, d}, er, false);
      Tensor a = adaptive_adjacency(et);
      Tensor out = napl_gcn(t.leaf({v, ci}, z), a, et, t.leaf({d, ci * co}, w),
                            t.leaf({d, co}, b), nullptr, Unary::sigmoid);
      return static_cast<double>(mean(out).scalar());
    };
    Tape t;
    Tensor et = t.leaf({v, d}, e, true);
    Tensor a = adaptive_adjacency(et);
    Tensor out = napl_gcn(t.leaf({v, ci}, z), a, et, t.leaf({d, ci * co}, w),
                          t.leaf({d, co}, b), nullptr, Unary::sigmoid);
    backward(mean(out));
    std::vector<double> analytic(et.grad().begin(), et.grad().end());
    std::vector<double> at(e.begin(), e.end());
    REQUIRE(grad_check(eval, at, analytic).max_rel_err <= 1e-5);
  }
}

TEST_CASE("recurrent cell") {
  const std::size_t v = 4, d = 2, h = 3, ci = 1 + h;
  RngStream rng(33);
  auto e = random_vec(rng, v * d);

  auto make_gate = [&](Tape& t, const std::vector<real>& w, const std::vector<real>& b) {
    return pool_gate(t.leaf({v, d}, e), t.leaf({d, ci * h}, w), t.leaf({d, h}, b));
  };

  SECTION("all-zero weights halve the previous hidden state") {
    Tape t;
    auto zw = std::vector<real>(d * ci * h, 0), zb = std::vector<real>(d * h, 0);
    GruGates g{make_gate(t, zw, zb), make_gate(t, zw, zb), make_gate(t, zw, zb)};
    auto hp = random_vec(rng, v * h);
    Tensor a = adaptive_adjacency(t.leaf({v, d}, e));
    Tensor ht = agcrn_cell(t.leaf({v, 1}, random_vec(rng, v)), t.leaf({v, h}, hp), a, g,
                           nullptr, nullptr, nullptr);
    for (std::size_t i = 0; i < v * h; ++i)
      REQUIRE(ht.value()[i] == Approx(0.5 * hp[i]).margin(1e-15));
  }
  SECTION("zero state and zero weights stay at zero") {
    Tape t;
    auto zw = std::vector<real>(d * ci * h, 0), zb = std::vector<real>(d * h, 0);
    GruGates g{make_gate(t, zw, zb), make_gate(t, zw, zb), make_gate(t, zw, zb)};
    Tensor ht = agcrn_cell(t.leaf({v, 1}, random_vec(rng, v)), t.full({v, h}, 0.0),
                           adaptive_adjacency(t.leaf({v, d}, e)), g, nullptr, nullptr, nullptr);
    for (std::size_t i = 0; i < v * h; ++i) REQUIRE(ht.value()[i] == 0.0);
  }
  SECTION("matches a step-by-step re-evaluation") {
    auto wz = random_vec(rng, d * ci * h), bz = random_vec(rng, d * h);
    auto wr = random_vec(rng, d * ci * h), br = random_vec(rng, d * h);
    auto wc = random_vec(rng, d * ci * h), bc = random_vec(rng, d * h);
    auto x = random_vec(rng, v), hp = random_vec(rng, v * h);

    Tape t;
    GruGates g{make_gate(t, wz, bz), make_gate(t, wr, br), make_gate(t, wc, bc)};
    Tensor ht = agcrn_cell(t.leaf({v, 1}, x), t.leaf({v, h}, hp),
                           adaptive_adjacency(t.leaf({v, d}, e)), g, nullptr, nullptr, nullptr);

    // oracle: raw loops through the published update equations
    std::vector<double> ed(e.begin(), e.end());
    auto a_or = adjacency_oracle(ed, v, d);
    std::vector<double> joint(v * ci);
    for (std::size_t i = 0; i < v; ++i) {
      joint[i * ci] = x[i];
      for (std::size_t k = 0; k < h; ++k) joint[i * ci + 1 + k] = hp[i * h + k];
    }
    auto to_d = [](const std::vector<real>& s) { return std::vector<double>(s.begin(), s.end()); };
    auto zg = napl_oracle(joint, a_or, ed, to_d(wz), to_d(bz), v, d, ci, h, false);
    auto rg = napl_oracle(joint, a_or, ed, to_d(wr), to_d(br), v, d, ci, h, false);
    std::vector<double> joint2(v * ci);
    for (std::size_t i = 0; i < v; ++i) {
      joint2[i * ci] = x[i];
      for (std::size_t k = 0; k < h; ++k)
        joint2[i * ci + 1 + k] = rg[i * h + k] * hp[i * h + k];
    }
    auto cg = napl_oracle(joint2, a_or, ed, to_d(wc), to_d(bc), v, d, ci, h, true);
    for (std::size_t i = 0; i < v * h; ++i) {
      const double expect = zg[i] * hp[i] + (1.0 - zg[i]) * cg[i];
      REQUIRE(ht.value()[i] == Approx(expect).margin(1e-12));
    }
  }
  SECTION("outputs stay inside the gate hull") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      RngStream r2(seed + 100);
      auto hp = random_vec(r2, v * h, -2, 2);
      Tape t;
      GruGates g{make_gate(t, random_vec(r2, d * ci * h), random_vec(r2, d * h)),
                 make_gate(t, random_vec(r2, d * ci * h), random_vec(r2, d * h)),
                 make_gate(t, random_vec(r2, d * ci * h), random_vec(r2, d * h))};
      Tensor ht = agcrn_cell(t.leaf({v, 1}, random_vec(r2, v)), t.leaf({v, h}, hp),
                             adaptive_adjacency(t.leaf({v, d}, e)), g, nullptr, nullptr,
                             nullptr);
      for (std::size_t i = 0; i < v * h; ++i) {
        const real bound = std::max<real>(std::fabs(hp[i]), 1);
        REQUIRE(std::fabs(ht.value()[i]) <= bound + 1e-12);
      }
    }
  }
}

TEST_CASE("encoder") {
  ModelConfig cfg = tiny_config();
  RngStream rng(7);
  ModelParams params = ModelParams::init(cfg, rng);

  SECTION("history of one equals a single cell application") {
    ModelConfig c1 = cfg;
    c1.history = 1;
    ModelParams p1 = params;
    p1.cfg = c1;
    auto x = random_vec(rng, cfg.nodes);
    Tape t;
    ModelLeaves leaves = stage_params(t, p1, false);
    std::vector<real> xw(x);
    Tensor enc = encode(t, leaves, xw, PassConfig{false, nullptr});

    Tensor a = adaptive_adjacency(leaves.embed());
    GruGates g{pool_gate(leaves.embed(), leaves.gate_w(0, 0), leaves.gate_b(0, 0)),
               pool_gate(leaves.embed(), leaves.gate_w(0, 1), leaves.gate_b(0, 1)),
               pool_gate(leaves.embed(), leaves.gate_w(0, 2), leaves.gate_b(0, 2))};
    Tensor cell = agcrn_cell(t.leaf({cfg.nodes, 1}, x), t.full({cfg.nodes, cfg.hidden}, 0.0),
                             a, g, nullptr, nullptr, nullptr);
    for (std::size_t i = 0; i < cfg.nodes * cfg.hidden; ++i)
      REQUIRE(enc.value()[i] == cell.value()[i]);
  }
  SECTION("zero weights keep the hidden state at zero") {
    ModelParams pz = params;
    zero_params(pz);
    Tape t;
    auto x = random_vec(rng, cfg.nodes * cfg.history);
    Tensor enc = encode(t, stage_params(t, pz, false), x, PassConfig{false, nullptr});
    for (std::size_t i = 0; i < cfg.nodes * cfg.hidden; ++i) REQUIRE(enc.value()[i] == 0.0);
  }
  SECTION("stochastic pass is reproducible under the same stream seed") {
    ModelConfig cs = cfg;
    cs.encoder_dropout = 0.3;
    cs.decoder_dropout = 0.2;
    RngStream ir(9);
    ModelParams ps = ModelParams::init(cs, ir);
    auto x = random_vec(rng, cs.nodes * cs.history);
    auto run = [&](std::uint64_t seed) {
      RngStream r(seed);
      Tape t;
      ModelLeaves leaves = stage_params(t, ps, false);
      std::vector<Tensor> heads =
          forward_sample(t, leaves, x, NormStats{}, PassConfig{true, &r});
      return std::vector<real>(heads[0].value().begin(), heads[0].value().end());
    };
    REQUIRE(run(5) == run(5));
    REQUIRE(run(5) != run(6));
  }
  SECTION("deterministic passes are bit-identical across repeats") {
    auto x = random_vec(rng, cfg.nodes * cfg.history);
    auto run = [&] {
      Tape t;
      std::vector<Tensor> heads = forward_sample(t, stage_params(t, params, false), x,
                                                 NormStats{}, PassConfig{false, nullptr});
      return std::vector<real>(heads[0].value().begin(), heads[0].value().end());
    };
    REQUIRE(run() == run());
  }
}

TEST_CASE("decoder") {
  ModelConfig cfg = tiny_config();
  RngStream rng(15);
  ModelParams params = ModelParams::init(cfg, rng);

  SECTION("zero heads give mu = 0 and unit variance") {
    ModelParams pz = params;
    pz.at("head.mu.w").value.assign(cfg.hidden * cfg.horizon, 0);
    pz.at("head.mu.b").value.assign(cfg.horizon, 0);
    pz.at("head.logvar.w").value.assign(cfg.hidden * cfg.horizon, 0);
    pz.at("head.logvar.b").value.assign(cfg.horizon, 0);
    Tape t;
    ModelLeaves leaves = stage_params(t, pz, false);
    Tensor h = t.leaf({cfg.nodes, cfg.hidden}, random_vec(rng, cfg.nodes * cfg.hidden));
    auto heads = decode(leaves, h, PassConfig{false, nullptr});
    for (real v : heads[0].value()) REQUIRE(v == 0.0);
    for (real v : heads[1].value()) REQUIRE(v == 0.0);  // sigma^2 = exp(0) = 1
  }
  SECTION("log-variance is clamped") {
    ModelParams pz = params;
    pz.at("head.logvar.w").value.assign(cfg.hidden * cfg.horizon, 0);
    pz.at("head.logvar.b").value.assign(cfg.horizon, 12.0);
    Tape t;
    ModelLeaves leaves = stage_params(t, pz, false);
    Tensor h = t.leaf({cfg.nodes, cfg.hidden}, random_vec(rng, cfg.nodes * cfg.hidden));
    auto heads = decode(leaves, h, PassConfig{false, nullptr});
    for (real v : heads[1].value()) REQUIRE(v == 10.0);
  }
  SECTION("no decoder dropout means identical outputs") {
    Tape t;
    ModelLeaves leaves = stage_params(t, params, false);
    Tensor h = t.leaf({cfg.nodes, cfg.hidden}, random_vec(rng, cfg.nodes * cfg.hidden));
    auto h1 = decode(leaves, h, PassConfig{false, nullptr});
    auto h2 = decode(leaves, h, PassConfig{false, nullptr});
    for (std::size_t i = 0; i < h1[0].numel(); ++i)
      REQUIRE(h1[0].value()[i] == h2[0].value()[i]);
  }
}

TEST_CASE("parameter vector round trip") {
  RngStream rng(77);
  for (HeadMode mode : {HeadMode::gaussian, HeadMode::quantile, HeadMode::point}) {
    ModelConfig cfg = tiny_config();
    cfg.head_mode = mode;
    ModelParams p = ModelParams::init(cfg, rng);
    std::vector<real> flat = p.flatten();
    REQUIRE(flat.size() == p.flat_size());
    ModelParams q = p;
    for (auto& a : q.arrays) std::fill(a.value.begin(), a.value.end(), real(-9));
    q.unflatten(flat);
    REQUIRE(q.flatten() == flat);
    std::vector<real> wrong(flat.size() + 1, 0);
    REQUIRE_THROWS_AS(q.unflatten(wrong), DimensionError);
  }
}

TEST_CASE("end-to-end gradient of the training objective") {
  ModelConfig cfg = tiny_config();
  LossConfig lc;
  lc.lambda = 0.1;
  lc.head_mode = HeadMode::gaussian;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RngStream rng(derive_seed(55, {seed}));
    ModelParams params = ModelParams::init(cfg, rng);
    auto x = random_vec(rng, cfg.nodes * cfg.history, -1.5, 1.5);
    auto y = random_vec(rng, cfg.nodes * cfg.horizon, -2, 2);

    auto eval = [&](std::span<const double> w) {
      ModelParams p = params;
      std::vector<real> wr(w.begin(), w.end());
      p.unflatten(wr);
      Tape t;
      ModelLeaves leaves = stage_params(t, p, false);
      auto heads = forward_sample(t, leaves, x, NormStats{}, PassConfig{false, nullptr});
      Tensor yt = t.constant({cfg.nodes, cfg.horizon}, y);
      return static_cast<double>(head_loss(lc, yt, heads).scalar());
    };

    Tape t;
    ModelLeaves leaves = stage_params(t, params, true);
    auto heads = forward_sample(t, leaves, x, NormStats{}, PassConfig{false, nullptr});
    Tensor yt = t.constant({cfg.nodes, cfg.horizon}, y);
    backward(head_loss(lc, yt, heads));
    std::vector<real> g = collect_flat_grad(leaves);
    std::vector<double> analytic(g.begin(), g.end());
    std::vector<real> flat = params.flatten();
    std::vector<double> at(flat.begin(), flat.end());
    GradCheckResult r = grad_check(eval, at, analytic);
    INFO("seed " << seed << " worst index " << r.worst_index);
    REQUIRE(r.max_rel_err <= 1e-5);
  }
}
