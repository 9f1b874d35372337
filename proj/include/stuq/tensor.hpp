#ifndef STUQ_TENSOR_HPP
#define STUQ_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "stuq/common.hpp"

namespace stuq {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Multiplicative dropout mask with inverted scaling: surviving entries are
/// 1/keep_prob, dropped entries 0, so the expected value of each entry is 1
/// and activations keep their scale between stochastic passes. Treated as a
/// constant by the tape.
struct DropoutMask {
  std::vector<std::size_t> shape;
  std::vector<real> scale;
  real keep_prob = 1;
};

inline DropoutMask make_dropout_mask(std::vector<std::size_t> shape, real keep_prob,
                                     RngStream& rng) {
  if (!(keep_prob > 0 && keep_prob <= 1))
    throw DomainError("dropout keep_prob must be in (0,1], got " + std::to_string(keep_prob));
  DropoutMask m;
  m.keep_prob = keep_prob;
  m.shape = std::move(shape);
  const std::size_t n = shape_numel(m.shape);
  m.scale.assign(n, real(1));
  if (keep_prob < 1) {
    const real inv = real(1) / keep_prob;
    for (std::size_t i = 0; i < n; ++i)
      m.scale[i] = rng.uniform01() < keep_prob ? inv : real(0);
  }
  return m;
}

inline DropoutMask dropout_rate_mask(std::vector<std::size_t> shape, real rate, RngStream& rng) {
  return make_dropout_mask(std::move(shape), real(1) - rate, rng);
}

class Tape;

namespace detail {
struct TapeNode {
  std::vector<std::size_t> shape;
  std::vector<real> value;
  std::vector<real> grad;  // allocated during backward
  bool requires_grad = false;
  std::size_t index = 0;
  std::vector<TapeNode*> parents;
  std::function<void(TapeNode&)> pull;  // pushes this node's grad into parents
};
}  // namespace detail

/// Handle to a value recorded on a Tape. Cheap to copy; the tape owns storage.
class Tensor {
 public:
  Tensor() = default;
  Tensor(detail::TapeNode* node, Tape* tape) : node_(node), tape_(tape) {}

  bool valid() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const real> value() const { return node_->value; }
  std::span<const real> grad() const { return node_->grad; }
  real scalar() const {
    if (numel() != 1) throw UsageError("scalar() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  detail::TapeNode* node() const { return node_; }
  Tape* tape() const { return tape_; }

 private:
  detail::TapeNode* node_ = nullptr;
  Tape* tape_ = nullptr;
};

/// Records every op of one forward pass so backward() can replay it in
/// reverse. A tape and its tensors belong to one logical thread; concurrent
/// passes each use a private tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(std::vector<std::size_t> shape, std::span<const real> data,
              bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("leaf: shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    detail::TapeNode* n = fresh(std::move(shape), requires_grad, {});
    n->value.assign(data.begin(), data.end());
    check_finite(*n, "leaf");
    return Tensor(n, this);
  }

  Tensor constant(std::vector<std::size_t> shape, std::span<const real> data) {
    return leaf(std::move(shape), data, false);
  }

  Tensor full(std::vector<std::size_t> shape, real v, bool requires_grad = false) {
    detail::TapeNode* n = fresh(std::move(shape), requires_grad, {});
    n->value.assign(shape_numel(n->shape), v);
    return Tensor(n, this);
  }

  /// Populates gradients of every requires_grad node from a scalar loss.
  /// Reverse creation order is a reverse topological order, so each node's
  /// gradient is complete before it is pushed to its parents; every node is
  /// visited at most once. Leaves that do not influence the loss keep a
  /// zero gradient of their own shape.
  void backward(const Tensor& loss) {
    if (!loss.valid() || loss.tape() != this)
      throw UsageError("backward: loss does not live on this tape");
    if (loss.numel() != 1)
      throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

    for (auto& n : nodes_) {
      if (n->requires_grad)
        n->grad.assign(n->value.size(), real(0));
      else
        n->grad.clear();
    }
    std::vector<char> marked(nodes_.size(), 0);
    std::vector<detail::TapeNode*> stack{loss.node()};
    marked[loss.node()->index] = 1;
    while (!stack.empty()) {
      detail::TapeNode* n = stack.back();
      stack.pop_back();
      for (detail::TapeNode* p : n->parents) {
        if (!marked[p->index]) {
          marked[p->index] = 1;
          stack.push_back(p);
        }
      }
    }
    if (loss.node()->requires_grad) loss.node()->grad[0] = real(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      detail::TapeNode& n = *nodes_[i];
      if (marked[i] && n.requires_grad && n.pull) n.pull(n);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // --- op construction helpers (used by the free-function ops below) ---

  detail::TapeNode* fresh(std::vector<std::size_t> shape, bool requires_grad,
                          std::vector<detail::TapeNode*> parents) {
    auto n = std::make_unique<detail::TapeNode>();
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    n->parents = std::move(parents);
    n->index = nodes_.size();
    nodes_.push_back(std::move(n));
    return nodes_.back().get();
  }

  static void check_finite(const detail::TapeNode& n, const char* op) {
    for (std::size_t i = 0; i < n.value.size(); ++i) {
      if (!std::isfinite(static_cast<double>(n.value[i])))
        throw NumericError(std::string(op) + " produced a non-finite value at flat index " +
                           std::to_string(i));
    }
  }

 private:
  std::vector<std::unique_ptr<detail::TapeNode>> nodes_;
};

namespace detail {

inline Tape* common_tape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.tape() != b.tape())
    throw UsageError(std::string(op) + ": operands live on different tapes");
  return a.tape();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline bool any_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

template <class Forward, class Pull>
Tensor make_op(Tape& tape, const char* name, std::vector<std::size_t> out_shape,
               std::vector<TapeNode*> parents, bool requires_grad, Forward&& fwd, Pull&& pull) {
  TapeNode* n = tape.fresh(std::move(out_shape), requires_grad, std::move(parents));
  n->value.resize(shape_numel(n->shape));
  fwd(*n);
  Tape::check_finite(*n, name);
  if (requires_grad) n->pull = std::forward<Pull>(pull);
  return Tensor(n, &tape);
}

inline void accumulate(TapeNode* p, std::size_t i, real v) {
  if (p->requires_grad) p->grad[i] += v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = *detail::common_tape(a, b, "add");
  detail::require_same_shape(a, b, "add");
  auto *pa = a.node(), *pb = b.node();
  return detail::make_op(
      t, "add", a.shape(), {pa, pb}, detail::any_grad({&a, &b}),
      [&](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.value.size(); ++i)
          n.value[i] = pa->value[i] + pb->value[i];
      },
      [pa, pb](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          detail::accumulate(pa, i, n.grad[i]);
          detail::accumulate(pb, i, n.grad[i]);
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& t = *detail::common_tape(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  auto *pa = a.node(), *pb = b.node();
  return detail::make_op(
      t, "sub", a.shape(), {pa, pb}, detail::any_grad({&a, &b}),
      [&](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.value.size(); ++i)
          n.value[i] = pa->value[i] - pb->value[i];
      },
      [pa, pb](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          detail::accumulate(pa, i, n.grad[i]);
          detail::accumulate(pb, i, -n.grad[i]);
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Tape& t = *detail::common_tape(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  auto *pa = a.node(), *pb = b.node();
  return detail::make_op(
      t, "mul", a.shape(), {pa, pb}, detail::any_grad({&a, &b}),
      [&](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.value.size(); ++i)
          n.value[i] = pa->value[i] * pb->value[i];
      },
      [pa, pb](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          detail::accumulate(pa, i, n.grad[i] * pb->value[i]);
          detail::accumulate(pb, i, n.grad[i] * pa->value[i]);
        }
      });
}

/// scale * x + shift, elementwise with scalar coefficients.
inline Tensor affine(const Tensor& x, real scale, real shift) {
  Tape& t = *x.tape();
  auto* px = x.node();
  return detail::make_op(
      t, "affine", x.shape(), {px}, x.requires_grad(),
      [&](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.value.size(); ++i)
          n.value[i] = scale * px->value[i] + shift;
      },
      [px, scale](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          detail::accumulate(px, i, scale * n.grad[i]);
      });
}

/// x[m x n] + row vector b[n] broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  Tape& t = *detail::common_tape(x, b, "add_rowvec");
  if (x.shape().size() != 2 || b.numel() != x.cols())
    throw DimensionError("add_rowvec: need [m x n] + [n], got " + shape_str(x.shape()) + " + " +
                         shape_str(b.shape()));
  auto *px = x.node(), *pb = b.node();
  const std::size_t m = x.rows(), nn = x.cols();
  return detail::make_op(
      t, "add_rowvec", x.shape(), {px, pb}, detail::any_grad({&x, &b}),
      [&](detail::TapeNode& n) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nn; ++j)
            n.value[i * nn + j] = px->value[i * nn + j] + pb->value[j];
      },
      [px, pb, m, nn](detail::TapeNode& n) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nn; ++j) {
            detail::accumulate(px, i * nn + j, n.grad[i * nn + j]);
            detail::accumulate(pb, j, n.grad[i * nn + j]);
          }
      });
}

// ---------------------------------------------------------------------------
// matrix products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = *detail::common_tape(a, b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  auto *pa = a.node(), *pb = b.node();
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  return detail::make_op(
      t, "matmul", {m, n}, {pa, pb}, detail::any_grad({&a, &b}),
      [&](detail::TapeNode& out) {
        std::fill(out.value.begin(), out.value.end(), real(0));
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const real av = pa->value[i * k + kk];
            if (av == real(0)) continue;
            const real* brow = &pb->value[kk * n];
            real* orow = &out.value[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
          }
      },
      [pa, pb, m, k, n](detail::TapeNode& out) {
        // dA = g . B^T, dB = A^T . g
        if (pa->requires_grad) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
              real s = 0;
              const real* grow = &out.grad[i * n];
              const real* brow = &pb->value[kk * n];
              for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              pa->grad[i * k + kk] += s;
            }
        }
        if (pb->requires_grad) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
              const real av = pa->value[i * k + kk];
              if (av == real(0)) continue;
              const real* grow = &out.grad[i * n];
              real* brow = &pb->grad[kk * n];
              for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
        }
      });
}

/// a . b^T for a[m x k], b[n x k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  Tape& t = *detail::common_tape(a, b, "matmul_nt");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()) + "^T");
  auto *pa = a.node(), *pb = b.node();
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  return detail::make_op(
      t, "matmul_nt", {m, n}, {pa, pb}, detail::any_grad({&a, &b}),
      [&](detail::TapeNode& out) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            real s = 0;
            const real* arow = &pa->value[i * k];
            const real* brow = &pb->value[j * k];
            for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            out.value[i * n + j] = s;
          }
      },
      [pa, pb, m, k, n](detail::TapeNode& out) {
        // dA = g . B, dB = g^T . A
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const real g = out.grad[i * n + j];
            if (g == real(0)) continue;
            if (pa->requires_grad) {
              real* arow = &pa->grad[i * k];
              const real* brow = &pb->value[j * k];
              for (std::size_t kk = 0; kk < k; ++kk) arow[kk] += g * brow[kk];
            }
            if (pb->requires_grad) {
              real* brow = &pb->grad[j * k];
              const real* arow = &pa->value[i * k];
              for (std::size_t kk = 0; kk < k; ++kk) brow[kk] += g * arow[kk];
            }
          }
      });
}

/// Per-row matrix product: out[v, o] = sum_i g[v, i] * w[v, i * c_out + o].
/// g is [V x C_in], w packs a per-row weight matrix [C_in x C_out] flattened
/// along the second axis.
inline Tensor pernode_matmul(const Tensor& g, const Tensor& w, std::size_t c_out) {
  Tape& t = *detail::common_tape(g, w, "pernode_matmul");
  if (g.shape().size() != 2 || w.shape().size() != 2 || g.rows() != w.rows() ||
      w.cols() != g.cols() * c_out)
    throw DimensionError("pernode_matmul: incompatible shapes " + shape_str(g.shape()) + ", " +
                         shape_str(w.shape()) + ", c_out=" + std::to_string(c_out));
  auto *pg = g.node(), *pw = w.node();
  const std::size_t v = g.rows(), ci = g.cols();
  return detail::make_op(
      t, "pernode_matmul", {v, c_out}, {pg, pw}, detail::any_grad({&g, &w}),
      [&](detail::TapeNode& out) {
        std::fill(out.value.begin(), out.value.end(), real(0));
        for (std::size_t r = 0; r < v; ++r) {
          const real* grow = &pg->value[r * ci];
          const real* wrow = &pw->value[r * ci * c_out];
          real* orow = &out.value[r * c_out];
          for (std::size_t i = 0; i < ci; ++i) {
            const real gv = grow[i];
            if (gv == real(0)) continue;
            const real* wslice = &wrow[i * c_out];
            for (std::size_t o = 0; o < c_out; ++o) orow[o] += gv * wslice[o];
          }
        }
      },
      [pg, pw, v, ci, c_out](detail::TapeNode& out) {
        for (std::size_t r = 0; r < v; ++r) {
          const real* orow = &out.grad[r * c_out];
          if (pg->requires_grad) {
            const real* wrow = &pw->value[r * ci * c_out];
            real* grow = &pg->grad[r * ci];
            for (std::size_t i = 0; i < ci; ++i) {
              real s = 0;
              const real* wslice = &wrow[i * c_out];
              for (std::size_t o = 0; o < c_out; ++o) s += orow[o] * wslice[o];
              grow[i] += s;
            }
          }
          if (pw->requires_grad) {
            const real* grow = &pg->value[r * ci];
            real* wrow = &pw->grad[r * ci * c_out];
            for (std::size_t i = 0; i < ci; ++i) {
              const real gv = grow[i];
              if (gv == real(0)) continue;
              real* wslice = &wrow[i * c_out];
              for (std::size_t o = 0; o < c_out; ++o) wslice[o] += gv * orow[o];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// nonlinearities

enum class Unary { sigmoid, tanh, relu, exp, log, square };

inline const char* unary_name(Unary k) {
  switch (k) {
    case Unary::sigmoid: return "sigmoid";
    case Unary::tanh: return "tanh";
    case Unary::relu: return "relu";
    case Unary::exp: return "exp";
    case Unary::log: return "log";
    case Unary::square: return "square";
  }
  return "?";
}

inline Tensor unary(Unary kind, const Tensor& x) {
  Tape& t = *x.tape();
  auto* px = x.node();
  if (kind == Unary::log) {
    for (std::size_t i = 0; i < px->value.size(); ++i)
      if (!(px->value[i] > real(0)))
        throw DomainError("log: non-positive entry at flat index " + std::to_string(i));
  }
  return detail::make_op(
      t, unary_name(kind), x.shape(), {px}, x.requires_grad(),
      [&](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.value.size(); ++i) {
          const real v = px->value[i];
          switch (kind) {
            case Unary::sigmoid: n.value[i] = real(1) / (real(1) + std::exp(-v)); break;
            case Unary::tanh: n.value[i] = std::tanh(v); break;
            case Unary::relu: n.value[i] = v > real(0) ? v : real(0); break;
            case Unary::exp: n.value[i] = std::exp(v); break;
            case Unary::log: n.value[i] = std::log(v); break;
            case Unary::square: n.value[i] = v * v; break;
          }
        }
      },
      [px, kind](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          const real v = px->value[i];
          const real y = n.value[i];
          real d = 0;
          switch (kind) {
            case Unary::sigmoid: d = y * (real(1) - y); break;
            case Unary::tanh: d = real(1) - y * y; break;
            case Unary::relu: d = v > real(0) ? real(1) : real(0); break;
            case Unary::exp: d = y; break;
            case Unary::log: d = real(1) / v; break;
            case Unary::square: d = real(2) * v; break;
          }
          detail::accumulate(px, i, n.grad[i] * d);
        }
      });
}

inline Tensor sigmoid(const Tensor& x) { return unary(Unary::sigmoid, x); }
inline Tensor tanh(const Tensor& x) { return unary(Unary::tanh, x); }
inline Tensor relu(const Tensor& x) { return unary(Unary::relu, x); }
inline Tensor exp(const Tensor& x) { return unary(Unary::exp, x); }
inline Tensor log(const Tensor& x) { return unary(Unary::log, x); }
inline Tensor square(const Tensor& x) { return unary(Unary::square, x); }

/// Row-wise softmax with per-row max subtraction for stability.
inline Tensor softmax_rows(const Tensor& x) {
  Tape& t = *x.tape();
  if (x.shape().size() != 2)
    throw DimensionError("softmax_rows: expected 2-d input, got " + shape_str(x.shape()));
  auto* px = x.node();
  const std::size_t m = x.rows(), n = x.cols();
  return detail::make_op(
      t, "softmax_rows", x.shape(), {px}, x.requires_grad(),
      [&](detail::TapeNode& out) {
        for (std::size_t i = 0; i < m; ++i) {
          const real* row = &px->value[i * n];
          real* orow = &out.value[i * n];
          real mx = row[0];
          for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
          real sum = 0;
          for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
          }
          for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
        }
      },
      [px, m, n](detail::TapeNode& out) {
        // dx_j = s_j * (g_j - sum_k g_k s_k) per row
        for (std::size_t i = 0; i < m; ++i) {
          const real* s = &out.value[i * n];
          const real* g = &out.grad[i * n];
          real dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[j] * s[j];
          for (std::size_t j = 0; j < n; ++j)
            detail::accumulate(px, i * n + j, s[j] * (g[j] - dot));
        }
      });
}

// ---------------------------------------------------------------------------
// structure ops

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  Tape& t = *detail::common_tape(a, b, "concat_cols");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.rows() != b.rows())
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) + " | " +
                         shape_str(b.shape()));
  auto *pa = a.node(), *pb = b.node();
  const std::size_t m = a.rows(), n1 = a.cols(), n2 = b.cols();
  return detail::make_op(
      t, "concat_cols", {m, n1 + n2}, {pa, pb}, detail::any_grad({&a, &b}),
      [&](detail::TapeNode& out) {
        for (std::size_t i = 0; i < m; ++i) {
          std::copy_n(&pa->value[i * n1], n1, &out.value[i * (n1 + n2)]);
          std::copy_n(&pb->value[i * n2], n2, &out.value[i * (n1 + n2) + n1]);
        }
      },
      [pa, pb, m, n1, n2](detail::TapeNode& out) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n1 + n2; ++j) {
            const real g = out.grad[i * (n1 + n2) + j];
            if (j < n1)
              detail::accumulate(pa, i * n1 + j, g);
            else
              detail::accumulate(pb, i * n2 + (j - n1), g);
          }
      });
}

/// Elementwise product with a dropout mask (mask is constant in backward).
/// A mask of matching shape applies entrywise; a [n]-shaped mask broadcasts
/// over the rows of [m x n] input.
inline Tensor apply_dropout(const Tensor& x, const DropoutMask& mask) {
  Tape& t = *x.tape();
  auto* px = x.node();
  const bool same = mask.shape == x.shape();
  const bool rowb = !same && x.shape().size() == 2 && shape_numel(mask.shape) == x.cols();
  if (!same && !rowb)
    throw DimensionError("apply_dropout: mask " + shape_str(mask.shape) +
                         " does not broadcast to " + shape_str(x.shape()));
  const std::size_t n = rowb ? x.cols() : 0;
  // mask values are copied so the caller may discard the mask before backward
  auto mv = std::make_shared<const std::vector<real>>(mask.scale);
  return detail::make_op(
      t, "apply_dropout", x.shape(), {px}, x.requires_grad(),
      [&](detail::TapeNode& out) {
        const auto& m = *mv;
        for (std::size_t i = 0; i < out.value.size(); ++i)
          out.value[i] = px->value[i] * (same ? m[i] : m[i % n]);
      },
      [px, mv, same, n](detail::TapeNode& out) {
        const auto& m = *mv;
        for (std::size_t i = 0; i < out.grad.size(); ++i)
          detail::accumulate(px, i, out.grad[i] * (same ? m[i] : m[i % n]));
      });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& x, real lo, real hi) {
  if (!(lo <= hi)) throw UsageError("clamp: lo > hi");
  Tape& t = *x.tape();
  auto* px = x.node();
  return detail::make_op(
      t, "clamp", x.shape(), {px}, x.requires_grad(),
      [&](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.value.size(); ++i)
          n.value[i] = std::min(hi, std::max(lo, px->value[i]));
      },
      [px, lo, hi](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          const real v = px->value[i];
          if (v > lo && v < hi) detail::accumulate(px, i, n.grad[i]);
        }
      });
}

inline Tensor abs(const Tensor& x) {
  Tape& t = *x.tape();
  auto* px = x.node();
  return detail::make_op(
      t, "abs", x.shape(), {px}, x.requires_grad(),
      [&](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::fabs(px->value[i]);
      },
      [px](detail::TapeNode& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          const real v = px->value[i];
          const real s = v > real(0) ? real(1) : (v < real(0) ? real(-1) : real(0));
          detail::accumulate(px, i, n.grad[i] * s);
        }
      });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& x) {
  Tape& t = *x.tape();
  auto* px = x.node();
  return detail::make_op(
      t, "sum", {1}, {px}, x.requires_grad(),
      [&](detail::TapeNode& n) {
        real s = 0;
        for (real v : px->value) s += v;
        n.value[0] = s;
      },
      [px](detail::TapeNode& n) {
        for (std::size_t i = 0; i < px->value.size(); ++i)
          detail::accumulate(px, i, n.grad[0]);
      });
}

inline Tensor mean(const Tensor& x) {
  Tape& t = *x.tape();
  auto* px = x.node();
  const real inv = real(1) / static_cast<real>(px->value.size());
  return detail::make_op(
      t, "mean", {1}, {px}, x.requires_grad(),
      [&](detail::TapeNode& n) {
        real s = 0;
        for (real v : px->value) s += v;
        n.value[0] = s * inv;
      },
      [px, inv](detail::TapeNode& n) {
        for (std::size_t i = 0; i < px->value.size(); ++i)
          detail::accumulate(px, i, n.grad[0] * inv);
      });
}

inline void backward(const Tensor& loss) { loss.tape()->backward(loss); }

// ---------------------------------------------------------------------------
// gradient verification

struct GradCheckResult {
  double max_rel_err = 0;
  std::size_t worst_index = 0;
};

/// Central-difference check of an analytic gradient. `f` evaluates the scalar
/// objective at an arbitrary parameter vector; `analytic` is the gradient
/// under test at `at`. Relative error uses a unit floor so coordinates with
/// tiny gradients are compared absolutely.
inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> at, std::span<const double> analytic,
                                  double eps = 1e-4) {
  if (!(eps > 0 && eps <= 1e-3)) throw UsageError("grad_check: eps must be in (0, 1e-3]");
  if (at.size() != analytic.size())
    throw DimensionError("grad_check: gradient length mismatch");
  std::vector<double> w(at.begin(), at.end());
  GradCheckResult r;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double orig = w[i];
    w[i] = orig + eps;
    const double fp = f(w);
    w[i] = orig - eps;
    const double fm = f(w);
    w[i] = orig;
    const double fd = (fp - fm) / (2 * eps);
    const double denom = std::max({1.0, std::fabs(fd), std::fabs(analytic[i])});
    const double rel = std::fabs(fd - analytic[i]) / denom;
    if (rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_index = i;
    }
  }
  return r;
}

}  // namespace stuq

#endif  // STUQ_TENSOR_HPP
