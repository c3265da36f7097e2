#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "urwkv/error.hpp"
#include "urwkv/parallel.hpp"
#include "urwkv/tape.hpp"
#include "urwkv/tensor.hpp"

namespace urwkv {

namespace kernels {

// out[M,N] (+)= a[M,K] * b[K,N]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t M, std::size_t K, std::size_t N) {
  parallel_for(M, K * N, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      double* o = out + i * N;
      const double* ai = a + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const double s = ai[k];
        if (s == 0.0) continue;
        const double* bk = b + k * N;
        for (std::size_t j = 0; j < N; ++j) o[j] += s * bk[j];
      }
    }
  });
}

// out[M,K] += g[M,N] * b[K,N]^T
inline void gemm_nt(const double* g, const double* b, double* out, std::size_t M, std::size_t K, std::size_t N) {
  parallel_for(M, K * N, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t i = r0; i < r1; ++i) {
      const double* gi = g + i * N;
      double* o = out + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const double* bk = b + k * N;
        double acc = 0.0;
        for (std::size_t j = 0; j < N; ++j) acc += gi[j] * bk[j];
        o[k] += acc;
      }
    }
  });
}

// out[K,N] += a[M,K]^T * g[M,N]
inline void gemm_tn(const double* a, const double* g, double* out, std::size_t M, std::size_t K, std::size_t N) {
  parallel_for(K, M * N, [&](std::size_t k0, std::size_t k1) {
    for (std::size_t i = 0; i < M; ++i) {
      const double* ai = a + i * K;
      const double* gi = g + i * N;
      for (std::size_t k = k0; k < k1; ++k) {
        const double s = ai[k];
        if (s == 0.0) continue;
        double* o = out + k * N;
        for (std::size_t j = 0; j < N; ++j) o[j] += s * gi[j];
      }
    }
  });
}

}  // namespace kernels

inline Var constant(Tape& tape, Tensor value) { return tape.leaf(std::move(value), false); }

/// Plain 2-D matrix product.
inline Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  check(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0], ErrorKind::shape,
        "matmul: incompatible shapes " + to_string(sa) + " x " + to_string(sb));
  const std::size_t M = sa[0], K = sa[1], N = sb[1];
  Tensor out({M, N});
  kernels::gemm_nn(a.value().ptr(), b.value().ptr(), out.ptr(), M, K, N);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [ai, bi, M, K, N](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_target(ai)) kernels::gemm_nt(g.ptr(), t.value(bi).ptr(), ga->ptr(), M, K, N);
    if (Tensor* gb = t.grad_target(bi)) kernels::gemm_tn(t.value(ai).ptr(), g.ptr(), gb->ptr(), M, K, N);
  });
}

/// x[..., K] * W[K, N] (+ bias[N]) applied over every leading position.
inline Var linear(const Var& x, const Var& weight, const Var* bias = nullptr) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  check(!sx.empty() && sw.size() == 2 && sx.back() == sw[0], ErrorKind::shape,
        "linear: input " + to_string(sx) + " incompatible with weight " + to_string(sw));
  const std::size_t K = sw[0], N = sw[1], M = x.size() / K;
  if (bias) {
    check(bias->shape() == Shape{N}, ErrorKind::shape,
          "linear: bias " + to_string(bias->shape()) + " does not match output width " + std::to_string(N));
  }
  Shape so = sx;
  so.back() = N;
  Tensor out(so);
  if (bias) {
    const double* b = bias->value().ptr();
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) out[i * N + j] = b[j];
  }
  kernels::gemm_nn(x.value().ptr(), weight.value().ptr(), out.ptr(), M, K, N);
  const std::size_t xi = x.id(), wi = weight.id();
  const std::size_t bi = bias ? bias->id() : 0;
  const bool has_bias = bias != nullptr;
  auto fn = [xi, wi, bi, has_bias, M, K, N](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* gx = t.grad_target(xi)) kernels::gemm_nt(g.ptr(), t.value(wi).ptr(), gx->ptr(), M, K, N);
    if (Tensor* gw = t.grad_target(wi)) kernels::gemm_tn(t.value(xi).ptr(), g.ptr(), gw->ptr(), M, K, N);
    if (has_bias) {
      if (Tensor* gb = t.grad_target(bi)) {
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < N; ++j) (*gb)[j] += g[i * N + j];
      }
    }
  };
  if (bias) return x.tape().record("linear", std::move(out), {x, weight, *bias}, fn);
  return x.tape().record("linear", std::move(out), {x, weight}, fn);
}

namespace detail {

// b broadcasts against a when b's shape equals a trailing slice of a's shape.
inline std::size_t broadcast_period(const Shape& sa, const Shape& sb, const char* op) {
  bool ok = sb.size() <= sa.size();
  for (std::size_t i = 0; ok && i < sb.size(); ++i) ok = sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  check(ok, ErrorKind::shape, std::string(op) + ": cannot broadcast " + to_string(sb) + " onto " + to_string(sa));
  return numel(sb);
}

template <typename Fwd, typename Bwd>
Var unary(const char* op, const Var& x, Fwd fwd, Bwd dydx) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xi = x.id();
  return x.tape().record(op, std::move(out), {x}, [xi, dydx](Tape& t, const Tensor& y, const Tensor& g) {
    if (Tensor* gx = t.grad_target(xi)) {
      const Tensor& xv = t.value(xi);
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * dydx(xv[i], y[i]);
    }
  });
}

}  // namespace detail

/// a + b, where b may be a trailing-shape broadcast (e.g. [C] or [T,C] onto [B,T,C]).
inline Var add(const Var& a, const Var& b) {
  const std::size_t period = detail::broadcast_period(a.shape(), b.shape(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % period];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [ai, bi, period](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_target(ai)) *ga += g;
    if (Tensor* gb = t.grad_target(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % period] += g[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  const std::size_t period = detail::broadcast_period(a.shape(), b.shape(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i % period];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("sub", std::move(out), {a, b}, [ai, bi, period](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_target(ai)) *ga += g;
    if (Tensor* gb = t.grad_target(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % period] -= g[i];
  });
}

/// Elementwise a * b with the same trailing broadcast rule as add().
inline Var mul(const Var& a, const Var& b) {
  const std::size_t period = detail::broadcast_period(a.shape(), b.shape(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % period];
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [ai, bi, period](Tape& t, const Tensor&, const Tensor& g) {
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (Tensor* ga = t.grad_target(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i % period];
    if (Tensor* gb = t.grad_target(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % period] += g[i] * av[i];
  });
}

inline Var scale(const Var& x, double s) {
  return detail::unary("scale", x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

/// max(0, x)^2
inline Var squared_relu(const Var& x) {
  return detail::unary(
      "squared_relu", x, [](double v) { return v > 0.0 ? v * v : 0.0; },
      [](double v, double) { return v > 0.0 ? 2.0 * v : 0.0; });
}

inline Var exp(const Var& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(const Var& x) {
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xi = x.id();
  return x.tape().record("sum", Tensor::scalar(s), {x}, [xi](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* gx = t.grad_target(xi))
      for (double& v : gx->data()) v += g[0];
  });
}

inline Var mean(const Var& x) {
  check(x.size() > 0, ErrorKind::shape, "mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return x.tape().record("reshape", std::move(out), {x}, [xi](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* gx = t.grad_target(xi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

inline Var transpose(const Var& x) {
  check(x.shape().size() == 2, ErrorKind::shape, "transpose expects a matrix, got " + to_string(x.shape()));
  const std::size_t R = x.dim(0), C = x.dim(1);
  Tensor out({C, R});
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = xv[r * C + c];
  const std::size_t xi = x.id();
  return x.tape().record("transpose", std::move(out), {x}, [xi, R, C](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* gx = t.grad_target(xi))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) (*gx)[r * C + c] += g[c * R + r];
  });
}

/// Concatenates along the last (channel) axis.
inline Var concat_channels(const std::vector<Var>& parts) {
  check(!parts.empty(), ErrorKind::invalid_argument, "concat_channels: no inputs");
  Shape lead = parts[0].shape();
  check(!lead.empty(), ErrorKind::shape, "concat_channels: scalar input");
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    check(!s.empty(), ErrorKind::shape, "concat_channels: scalar input");
    const std::size_t c = s.back();
    s.pop_back();
    check(s == lead, ErrorKind::shape,
          "concat_channels: leading shape " + to_string(s) + " differs from " + to_string(lead));
    widths.push_back(c);
    total += c;
  }
  Shape so = lead;
  so.push_back(total);
  Tensor out(so);
  const std::size_t rows = numel(lead);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    const std::size_t c = widths[p];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) out[r * total + off + j] = v[r * c + j];
    off += c;
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  Tape& tape = parts[0].tape();
  for (const Var& p : parts) check(&p.tape() == &tape, ErrorKind::state, "concat_channels: mixed tapes");
  auto fn = [ids, widths, rows, total](Tape& t, const Tensor&, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t c = widths[p];
      if (Tensor* gp = t.grad_target(ids[p]))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) (*gp)[r * c + j] += g[r * total + off + j];
      off += c;
    }
  };
  return tape.record("concat_channels", std::move(out), std::span<const Var>(parts), fn);
}

/// Channels [begin, end) of the last axis.
inline Var slice_channels(const Var& x, std::size_t begin, std::size_t end) {
  const Shape& sx = x.shape();
  check(!sx.empty() && begin < end && end <= sx.back(), ErrorKind::shape,
        "slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
            to_string(sx));
  const std::size_t C = sx.back(), W = end - begin, rows = x.size() / C;
  Shape so = sx;
  so.back() = W;
  Tensor out(so);
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < W; ++j) out[r * W + j] = xv[r * C + begin + j];
  const std::size_t xi = x.id();
  return x.tape().record("slice_channels", std::move(out), {x},
                         [xi, rows, C, W, begin](Tape& t, const Tensor&, const Tensor& g) {
                           if (Tensor* gx = t.grad_target(xi))
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < W; ++j) (*gx)[r * C + begin + j] += g[r * W + j];
                         });
}

/// Normalises over the last axis, then applies the per-channel affine map.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const Shape& sx = x.shape();
  check(!sx.empty(), ErrorKind::shape, "layer_norm: scalar input");
  const std::size_t C = sx.back();
  check(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, ErrorKind::shape,
        "layer_norm: affine parameters " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
            " do not match channel width " + std::to_string(C));
  const std::size_t rows = x.size() / C;
  auto xhat = std::make_shared<Tensor>(sx);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(sx);
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * C;
    double mu = 0.0;
    for (std::size_t j = 0; j < C; ++j) mu += xr[j];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t j = 0; j < C; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < C; ++j) {
      const double h = (xr[j] - mu) * is;
      (*xhat)[r * C + j] = h;
      out[r * C + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t xi = x.id(), gi = gamma.id(), bi = beta.id();
  return x.tape().record("layer_norm", std::move(out), {x, gamma, beta},
                         [xi, gi, bi, xhat, inv_std, rows, C](Tape& t, const Tensor&, const Tensor& g) {
                           const Tensor& gam = t.value(gi);
                           if (Tensor* gg = t.grad_target(gi))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gg)[i % C] += g[i] * (*xhat)[i];
                           if (Tensor* gb = t.grad_target(bi))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % C] += g[i];
                           if (Tensor* gx = t.grad_target(xi)) {
                             const double inv_c = 1.0 / static_cast<double>(C);
                             for (std::size_t r = 0; r < rows; ++r) {
                               double m1 = 0.0, m2 = 0.0;
                               for (std::size_t j = 0; j < C; ++j) {
                                 const double gh = g[r * C + j] * gam[j];
                                 m1 += gh;
                                 m2 += gh * (*xhat)[r * C + j];
                               }
                               m1 *= inv_c;
                               m2 *= inv_c;
                               for (std::size_t j = 0; j < C; ++j) {
                                 const double gh = g[r * C + j] * gam[j];
                                 (*gx)[r * C + j] += (*inv_std)[r] * (gh - m1 - (*xhat)[r * C + j] * m2);
                               }
                             }
                           }
                         });
}

}  // namespace urwkv
