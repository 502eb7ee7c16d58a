#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "divae/autodiff/graph.hpp"

namespace divae::ad {

namespace detail {

inline void same_shape(const char* op, const Var& a, const Var& b) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Shape drop_last(const Shape& s) { return s.empty() ? s : Shape(s.begin(), s.end() - 1); }

inline Shape with_last(const Shape& s, std::size_t n) {
  Shape out = s.empty() ? Shape{} : s;
  if (out.empty()) out.push_back(n);
  else out.back() = n;
  return out;
}

/// Elementwise unary op; `df(x, y)` is dy/dx given input x and output y.
template <class F, class DF>
Var unary(const char* op, const Var& x, F f, DF df) {
  Tensor out(x.shape());
  const auto& in = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result(op, std::move(out), {x}, [df](Node& self) {
    Node& p = *self.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * df(p.value[i], self.value[i]);
    accumulate(p, g);
  });
}

inline double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (identical shapes)

inline Var add(const Var& a, const Var& b) {
  detail::same_shape("add", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result("add", std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape("sub", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result("sub", std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    Tensor g = self.grad;
    for (auto& v : g.values()) v = -v;
    accumulate(*self.parents[1], g);
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_shape("mul", a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result("mul", std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    Tensor ga(pa.value.shape()), gb(pb.value.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga[i] = self.grad[i] * pb.value[i];
      gb[i] = self.grad[i] * pa.value[i];
    }
    accumulate(pa, ga);
    accumulate(pb, gb);
  });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Scalar-constant arithmetic

inline Var scale(const Var& x, double c) {
  return detail::unary("scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& x, double c) {
  return detail::unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }
inline Var operator-(const Var& x) { return neg(x); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }
inline Var operator*(const Var& x, double c) { return scale(x, c); }
inline Var operator+(const Var& x, double c) { return add_scalar(x, c); }
inline Var operator-(const Var& x, double c) { return add_scalar(x, -c); }

/// Multiplies every element of `x` by the scalar node `s`.
inline Var mul_scalar(const Var& x, const Var& s) {
  require(s.value().size() == 1, "mul_scalar: multiplier must be scalar");
  const double c = s.value()[0];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.value()[i];
  return make_result("mul_scalar", std::move(out), {x, s}, [](Node& self) {
    Node& px = *self.parents[0];
    Node& ps = *self.parents[1];
    const double c = ps.value[0];
    Tensor gx(px.value.shape());
    double gs = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] = self.grad[i] * c;
      gs += self.grad[i] * px.value[i];
    }
    accumulate(px, gx);
    Tensor gst(ps.value.shape(), gs);
    accumulate(ps, gst);
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

inline Var exp(const Var& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(const Var& x) {
  for (double v : x.value().values()) {
    if (!(v > 0.0)) throw NumericError("log", "non-positive input " + std::to_string(v));
  }
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var tanh(const Var& x) {
  return detail::unary("tanh", x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var softplus(const Var& x) {
  return detail::unary("softplus", x, detail::stable_softplus,
                       [](double v, double) { return detail::stable_sigmoid(v); });
}

inline Var sigmoid(const Var& x) {
  return detail::unary("sigmoid", x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var square(const Var& x) {
  return detail::unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// sqrt with derivative 0 at exactly 0 (subgradient choice).
inline Var sqrt(const Var& x) {
  for (double v : x.value().values()) {
    if (v < 0.0) throw NumericError("sqrt", "negative input " + std::to_string(v));
  }
  return detail::unary("sqrt", x, [](double v) { return std::sqrt(v); },
                       [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside or on the boundary.
inline Var clamp(const Var& x, double lo, double hi) {
  return detail::unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                       [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

/// Elementwise Huber penalty: ½e² for |e| ≤ δ, δ(|e| − ½δ) beyond.
inline Var huber(const Var& x, double delta) {
  require(delta > 0.0, "huber: delta must be positive");
  return detail::unary(
      "huber", x,
      [delta](double e) { return std::abs(e) <= delta ? 0.5 * e * e : delta * (std::abs(e) - 0.5 * delta); },
      [delta](double e, double) { return std::abs(e) <= delta ? e : (e > 0 ? delta : -delta); });
}

/// Same value as `x`, but nothing upstream of it receives gradient.
inline Var stop_gradient(const Var& x) {
  auto node = std::make_shared<Node>();
  node->value = x.value();
  node->op = "stop_gradient";
  return Var(std::move(node));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [B,n] x [n,m] -> [B,m].
inline Var matmul(const Var& a, const Var& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.shape()[1] == b.shape()[0],
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t B = a.shape()[0], n = a.shape()[1], m = b.shape()[1];
  Tensor out(Shape{B, m});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < B; ++i) {
    double* orow = &out[i * m];
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = av[i * n + k];
      if (aik == 0.0) continue;
      const double* brow = &bv[k * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
  return make_result("matmul", std::move(out), {a, b}, [B, n, m](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      Tensor ga(pa.value.shape());
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t k = 0; k < n; ++k) {
          double acc = 0.0;
          const double* grow = &g[i * m];
          const double* brow = &pb.value[k * m];
          for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
          ga[i * n + k] = acc;
        }
      accumulate(pa, ga);
    }
    if (pb.requires_grad) {
      Tensor gb(pb.value.shape());
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t k = 0; k < n; ++k) {
          const double aik = pa.value[i * n + k];
          if (aik == 0.0) continue;
          const double* grow = &g[i * m];
          double* gbrow = &gb[k * m];
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += aik * grow[j];
        }
      accumulate(pb, gb);
    }
  });
}

/// Adds the vector `v` (length n) to every row of `a` ([...,n]).
inline Var add_rowvec(const Var& a, const Var& v) {
  require(v.value().rank() == 1 && a.value().rank() >= 1 && a.value().cols() == v.shape()[0],
          "add_rowvec: incompatible shapes " + shape_str(a.shape()) + " + " + shape_str(v.shape()));
  const std::size_t n = v.shape()[0], rows = a.value().rows();
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += v.value()[j];
  return make_result("add_rowvec", std::move(out), {a, v}, [n, rows](Node& self) {
    accumulate(*self.parents[0], self.grad);
    Node& pv = *self.parents[1];
    if (pv.requires_grad) {
      Tensor gv(pv.value.shape());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) gv[j] += self.grad[r * n + j];
      accumulate(pv, gv);
    }
  });
}

/// x W + b for x [B,n], W [n,m], b [m].
inline Var affine(const Var& x, const Var& w, const Var& b) { return add_rowvec(matmul(x, w), b); }

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_result("sum", Tensor::scalar(s), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    Tensor g(p.value.shape(), self.grad[0]);
    accumulate(p, g);
  });
}

inline Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  require(n > 0, "mean: empty tensor");
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make_result("mean", Tensor::scalar(s / n), {x}, [n](Node& self) {
    Node& p = *self.parents[0];
    Tensor g(p.value.shape(), self.grad[0] / n);
    accumulate(p, g);
  });
}

/// Sum over the last axis: [...,n] -> [...].
inline Var sum_last(const Var& x) {
  require(x.value().rank() >= 1, "sum_last: needs rank >= 1");
  const std::size_t n = x.value().cols(), rows = x.value().rows();
  Tensor out(detail::drop_last(x.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x.value()[r * n + j];
    out[r] = s;
  }
  return make_result("sum_last", std::move(out), {x}, [n, rows](Node& self) {
    Node& p = *self.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] = self.grad[r];
    accumulate(p, g);
  });
}

/// Overflow-safe log Σ exp over the last axis: [...,n] -> [...].
inline Var logsumexp_last(const Var& x) {
  require(x.value().rank() >= 1 && x.value().cols() > 0, "logsumexp_last: needs non-empty last axis");
  const std::size_t n = x.value().cols(), rows = x.value().rows();
  Tensor out(detail::drop_last(x.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &x.value()[r * n];
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    out[r] = mx + std::log(s);
  }
  return make_result("logsumexp", std::move(out), {x}, [n, rows](Node& self) {
    Node& p = *self.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] = self.grad[r] * std::exp(p.value[r * n + j] - self.value[r]);
    accumulate(p, g);
  });
}

/// x − logsumexp(x) along the last axis.
inline Var log_softmax_last(const Var& x) {
  require(x.value().rank() >= 1 && x.value().cols() > 0, "log_softmax: needs non-empty last axis");
  const std::size_t n = x.value().cols(), rows = x.value().rows();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &x.value()[r * n];
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] - lse;
  }
  return make_result("log_softmax", std::move(out), {x}, [n, rows](Node& self) {
    Node& p = *self.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += self.grad[r * n + j];
      for (std::size_t j = 0; j < n; ++j)
        g[r * n + j] = self.grad[r * n + j] - std::exp(self.value[r * n + j]) * gs;
    }
    accumulate(p, g);
  });
}

// ---------------------------------------------------------------------------
// Indexing along the last axis

/// Gathers columns `idx` of the last axis: [...,n] -> [...,idx.size()].
inline Var select_last(const Var& x, std::vector<std::size_t> idx) {
  require(x.value().rank() >= 1, "select_last: needs rank >= 1");
  const std::size_t n = x.value().cols(), rows = x.value().rows(), m = idx.size();
  for (auto j : idx) require(j < n, "select_last: index out of range");
  Tensor out(detail::with_last(x.shape(), m));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = x.value()[r * n + idx[j]];
  return make_result("select_last", std::move(out), {x}, [idx = std::move(idx), n, rows, m](Node& self) {
    Node& p = *self.parents[0];
    Tensor g(p.value.shape());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < m; ++j) g[r * n + idx[j]] += self.grad[r * m + j];
    accumulate(p, g);
  });
}

inline Var slice_last(const Var& x, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= x.value().cols(), "slice_last: bad range");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return select_last(x, std::move(idx));
}

inline Var concat_last(const Var& a, const Var& b) {
  require(a.value().rank() >= 1 && a.value().rank() == b.value().rank() &&
              detail::drop_last(a.shape()) == detail::drop_last(b.shape()),
          "concat_last: incompatible shapes " + shape_str(a.shape()) + ", " + shape_str(b.shape()));
  const std::size_t na = a.value().cols(), nb = b.value().cols(), rows = a.value().rows(), n = na + nb;
  Tensor out(detail::with_last(a.shape(), n));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < na; ++j) out[r * n + j] = a.value()[r * na + j];
    for (std::size_t j = 0; j < nb; ++j) out[r * n + na + j] = b.value()[r * nb + j];
  }
  return make_result("concat_last", std::move(out), {a, b}, [na, nb, n, rows](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    Tensor ga(pa.value.shape()), gb(pb.value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < na; ++j) ga[r * na + j] = self.grad[r * n + j];
      for (std::size_t j = 0; j < nb; ++j) gb[r * nb + j] = self.grad[r * n + na + j];
    }
    accumulate(pa, ga);
    accumulate(pb, gb);
  });
}

// ---------------------------------------------------------------------------
// Fused density kernel

/// Log-density of every row of z [B,d] under every diagonal Gaussian
/// N(mean_k, diag(exp(log_std_k)²)), giving [B,K].
inline Var pairwise_diag_gauss_logpdf(const Var& z, const Var& mean, const Var& log_std) {
  require(z.value().rank() == 2 && mean.value().rank() == 2 && mean.shape() == log_std.shape() &&
              z.shape()[1] == mean.shape()[1],
          "pairwise_diag_gauss_logpdf: incompatible shapes " + shape_str(z.shape()) + ", " +
              shape_str(mean.shape()) + ", " + shape_str(log_std.shape()));
  const std::size_t B = z.shape()[0], K = mean.shape()[0], d = z.shape()[1];
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Tensor out(Shape{B, K});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double ls = log_std.value()[k * d + j];
        const double t = (z.value()[b * d + j] - mean.value()[k * d + j]) * std::exp(-ls);
        acc += -half_log_2pi - ls - 0.5 * t * t;
      }
      out[b * K + k] = acc;
    }
  return make_result("pairwise_diag_gauss", std::move(out), {z, mean, log_std}, [B, K, d](Node& self) {
    Node& pz = *self.parents[0];
    Node& pm = *self.parents[1];
    Node& pl = *self.parents[2];
    Tensor gz(pz.value.shape()), gm(pm.value.shape()), gl(pl.value.shape());
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const double g = self.grad[b * K + k];
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) {
          const double inv = std::exp(-pl.value[k * d + j]);
          const double t = (pz.value[b * d + j] - pm.value[k * d + j]) * inv;
          // d/dz = -t/σ, d/dμ = t/σ, d/dlogσ = t² − 1
          gz[b * d + j] -= g * t * inv;
          gm[k * d + j] += g * t * inv;
          gl[k * d + j] += g * (t * t - 1.0);
        }
      }
    accumulate(pz, gz);
    accumulate(pm, gm);
    accumulate(pl, gl);
  });
}

}  // namespace divae::ad
