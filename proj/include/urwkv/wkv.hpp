#pragma once

// Bidirectional WKV attention.
//
// For channel c of a length-T sequence, token t attends to every token i:
//
//   out[t] = ( sum_{i!=t} e^{-(|t-i|-1) w/T + k_i} v_i + e^{u + k_t} v_t )
//          / ( sum_{i!=t} e^{-(|t-i|-1) w/T + k_i}     + e^{u + k_t}     )
//
// Two forms compute the same value: a direct O(T^2) evaluation and an O(T)
// two-pass scan. The distance weight factorises as r^{|t-i|-1} with
// r = e^{-w/T}, so the i<t terms form a prefix recurrence and the i>t terms a
// suffix recurrence.
//
// Both forward forms work in long double: an output near zero is a difference
// of weighted values, and weights rounded to double leave it with a relative
// error far above 1e-10. Weights are built from per-lane tables
// e^{k_i - max k}, e^{-d s} and e^{u}, so a lane costs O(T) exp() calls. When
// those factors could leave the long double range (huge |w|, |u| or key
// spread) the lane falls back to accumulators kept as mantissa * e^{offset},
// with the offset tracking the largest exponent seen so every exp() argument
// stays <= 0.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "urwkv/error.hpp"
#include "urwkv/parallel.hpp"
#include "urwkv/tape.hpp"
#include "urwkv/tensor.hpp"

namespace urwkv::wkv {

enum class Form { naive, scan };

inline const char* to_string(Form f) { return f == Form::naive ? "naive" : "scan"; }

/// Per-channel decay (w) and current-token gain (u).
struct Params {
  std::vector<double> w;
  std::vector<double> u;
};

/// Forward output plus the per-token log-normaliser log(denominator) needed by
/// the backward pass.
struct Saved {
  Tensor out;
  Tensor log_norm;
};

struct Grads {
  Tensor dk;
  Tensor dv;
  std::vector<double> dw;
  std::vector<double> du;
};

namespace detail {

constexpr double neg_inf = -std::numeric_limits<double>::infinity();

using wide = long double;

struct Dims {
  std::size_t B, T, C;
};

inline Dims dims_of(const Tensor& k, const Tensor& v, std::span<const double> w, std::span<const double> u) {
  check(k.shape() == v.shape(), ErrorKind::shape,
        "wkv: k " + urwkv::to_string(k.shape()) + " and v " + urwkv::to_string(v.shape()) + " differ");
  check(k.rank() == 2 || k.rank() == 3, ErrorKind::shape,
        "wkv: expected [T,C] or [B,T,C], got " + urwkv::to_string(k.shape()));
  const std::size_t B = k.rank() == 3 ? k.dim(0) : 1;
  const std::size_t T = k.dim(k.rank() - 2);
  const std::size_t C = k.dim(k.rank() - 1);
  check(T >= 1, ErrorKind::empty_sequence, "wkv: empty sequence (T = 0)");
  check(w.size() == C && u.size() == C, ErrorKind::shape,
        "wkv: decay/gain length " + std::to_string(w.size()) + "/" + std::to_string(u.size()) +
            " does not match C = " + std::to_string(C));
  return {B, T, C};
}

// Strided view onto one (batch, channel) sequence.
struct Lane {
  std::size_t base, stride;
  std::size_t at(std::size_t t) const { return base + t * stride; }
};

// Log-domain accumulator: true value = mantissa * e^{offset}.
struct Acc {
  wide num = 0.0, den = 0.0, offset = neg_inf;

  // state <- r * state + e^{key} * (value, 1), with log r = -decay
  void push(wide decay, wide key, wide value) {
    const wide next = std::max(offset - decay, key);
    const wide keep = std::exp(offset - decay - next);
    const wide fresh = std::exp(key - next);
    num = keep * num + fresh * value;
    den = keep * den + fresh;
    offset = next;
  }
};

inline void naive_lane_shifted(const Tensor& k, const Tensor& v, wide s, wide u, Lane lane, std::size_t T, Tensor& out,
                       Tensor& log_norm, std::vector<wide>& expo) {
  for (std::size_t t = 0; t < T; ++t) {
    wide m = neg_inf;
    for (std::size_t i = 0; i < T; ++i) {
      const wide kk = k[lane.at(i)];
      const wide a = i == t ? u + kk : -(static_cast<wide>(i > t ? i - t : t - i) - 1) * s + kk;
      expo[i] = a;
      m = std::max(m, a);
    }
    wide num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < T; ++i) {
      const wide e = std::exp(expo[i] - m);
      num += e * v[lane.at(i)];
      den += e;
    }
    out[lane.at(t)] = static_cast<double>(num / den);
    log_norm[lane.at(t)] = static_cast<double>(m + std::log(den));
  }
}

inline void scan_lane_shifted(const Tensor& k, const Tensor& v, wide s, wide u, Lane lane, std::size_t T, Tensor& out,
                      Tensor& log_norm, std::vector<Acc>& prefix) {
  Acc acc;
  for (std::size_t t = 0; t < T; ++t) {
    prefix[t] = acc;
    acc.push(s, k[lane.at(t)], v[lane.at(t)]);
  }
  Acc suffix;
  for (std::size_t t = T; t-- > 0;) {
    const std::size_t idx = lane.at(t);
    const Acc& pre = prefix[t];
    const wide self = u + k[idx];
    const wide m = std::max({pre.offset, suffix.offset, self});
    const wide ep = std::exp(pre.offset - m);
    const wide es = std::exp(suffix.offset - m);
    const wide eu = std::exp(self - m);
    const wide num = ep * pre.num + es * suffix.num + eu * v[idx];
    const wide den = ep * pre.den + es * suffix.den + eu;
    out[idx] = static_cast<double>(num / den);
    log_norm[idx] = static_cast<double>(m + std::log(den));
    suffix.push(s, k[idx], v[idx]);
  }
}

// Factor tables stay far from the long double limits (about e^{+-11355}).
constexpr wide factor_range = 5000;

// Largest key of the lane, or nothing when the factored weights could
// overflow or underflow.
inline std::optional<wide> factor_shift(const Tensor& k, wide s, wide u, Lane lane, std::size_t T) {
  wide lo = k[lane.at(0)], hi = lo;
  for (std::size_t t = 1; t < T; ++t) {
    lo = std::min<wide>(lo, k[lane.at(t)]);
    hi = std::max<wide>(hi, k[lane.at(t)]);
  }
  const wide span = (hi - lo) + std::abs(s) * static_cast<wide>(T) + std::abs(u) + std::log(static_cast<wide>(T));
  if (!std::isfinite(span) || span > factor_range) return std::nullopt;
  return hi;
}

struct Scratch {
  std::vector<wide> key, dist, pre_num, pre_den;
  std::vector<wide> expo;
  std::vector<Acc> prefix;
};

inline void naive_lane(const Tensor& k, const Tensor& v, wide s, wide u, Lane lane, std::size_t T, Tensor& out,
                       Tensor& log_norm, Scratch& sc) {
  const auto K = factor_shift(k, s, u, lane, T);
  if (!K) {
    sc.expo.resize(T);
    naive_lane_shifted(k, v, s, u, lane, T, out, log_norm, sc.expo);
    return;
  }
  sc.key.resize(T);
  sc.dist.resize(T);
  for (std::size_t i = 0; i < T; ++i) sc.key[i] = std::exp(k[lane.at(i)] - *K);
  for (std::size_t d = 1; d < T; ++d) sc.dist[d] = std::exp(-static_cast<wide>(d - 1) * s);
  const wide gain = std::exp(u);
  for (std::size_t t = 0; t < T; ++t) {
    wide num = 0, den = 0;
    for (std::size_t i = 0; i < t; ++i) {
      const wide e = sc.key[i] * sc.dist[t - i];
      num += e * v[lane.at(i)];
      den += e;
    }
    const wide self = gain * sc.key[t];
    num += self * v[lane.at(t)];
    den += self;
    for (std::size_t i = t + 1; i < T; ++i) {
      const wide e = sc.key[i] * sc.dist[i - t];
      num += e * v[lane.at(i)];
      den += e;
    }
    out[lane.at(t)] = static_cast<double>(num / den);
    log_norm[lane.at(t)] = static_cast<double>(*K + std::log(den));
  }
}

inline void scan_lane(const Tensor& k, const Tensor& v, wide s, wide u, Lane lane, std::size_t T, Tensor& out,
                      Tensor& log_norm, Scratch& sc) {
  const auto K = factor_shift(k, s, u, lane, T);
  if (!K) {
    sc.prefix.resize(T);
    scan_lane_shifted(k, v, s, u, lane, T, out, log_norm, sc.prefix);
    return;
  }
  const wide r = std::exp(-s), gain = std::exp(u);
  sc.key.resize(T);
  sc.pre_num.resize(T);
  sc.pre_den.resize(T);
  wide num = 0, den = 0;
  for (std::size_t t = 0; t < T; ++t) {
    sc.pre_num[t] = num;
    sc.pre_den[t] = den;
    const wide e = sc.key[t] = std::exp(k[lane.at(t)] - *K);
    num = r * num + e * v[lane.at(t)];
    den = r * den + e;
  }
  num = den = 0;
  for (std::size_t t = T; t-- > 0;) {
    const std::size_t idx = lane.at(t);
    const wide self = gain * sc.key[t];
    const wide n = sc.pre_num[t] + num + self * v[idx];
    const wide d = sc.pre_den[t] + den + self;
    out[idx] = static_cast<double>(n / d);
    log_norm[idx] = static_cast<double>(*K + std::log(d));
    num = r * num + sc.key[t] * v[idx];
    den = r * den + sc.key[t];
  }
}

template <typename LaneFn>
void for_each_lane(Dims d, std::size_t work, LaneFn&& fn) {
  parallel_for(d.B * d.C, work, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t bc = b0; bc < b1; ++bc) {
      const std::size_t b = bc / d.C, c = bc % d.C;
      fn(b, c, Lane{b * d.T * d.C + c, d.C});
    }
  });
}

}  // namespace detail

/// Direct O(T^2) evaluation.
inline Saved forward_naive(const Tensor& k, const Tensor& v, std::span<const double> w, std::span<const double> u) {
  const auto d = detail::dims_of(k, v, w, u);
  Saved r{Tensor(k.shape()), Tensor(k.shape())};
  detail::for_each_lane(d, d.T * d.T * 8, [&](std::size_t, std::size_t c, detail::Lane lane) {
    thread_local detail::Scratch sc;
    detail::naive_lane(k, v, detail::wide(w[c]) / d.T, u[c], lane, d.T, r.out, r.log_norm, sc);
  });
  return r;
}

/// O(T) forward-prefix / backward-suffix scan.
inline Saved forward_scan(const Tensor& k, const Tensor& v, std::span<const double> w, std::span<const double> u) {
  const auto d = detail::dims_of(k, v, w, u);
  Saved r{Tensor(k.shape()), Tensor(k.shape())};
  detail::for_each_lane(d, d.T * 16, [&](std::size_t, std::size_t c, detail::Lane lane) {
    thread_local detail::Scratch sc;
    detail::scan_lane(k, v, detail::wide(w[c]) / d.T, u[c], lane, d.T, r.out, r.log_norm, sc);
  });
  return r;
}

inline Tensor naive(const Tensor& k, const Tensor& v, const Params& p) { return forward_naive(k, v, p.w, p.u).out; }
inline Tensor scan(const Tensor& k, const Tensor& v, const Params& p) { return forward_scan(k, v, p.w, p.u).out; }

namespace detail {

inline void check_saved(const Tensor& k, const Saved& saved) {
  check(saved.out.shape() == k.shape() && saved.log_norm.shape() == k.shape(), ErrorKind::state,
        "wkv backward: missing saved activations");
}

inline Grads zero_grads(const Tensor& k, std::size_t C) {
  return Grads{Tensor(k.shape()), Tensor(k.shape()), std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
}

}  // namespace detail

/// Exact gradients by direct O(T^2) differentiation of the weighted average:
/// d out_t / d a_{t,i} = p_{t,i} (v_i - out_t), with p the normalised weights.
inline Grads backward_naive(const Tensor& k, const Tensor& v, std::span<const double> w, std::span<const double> u,
                            const Saved& saved, const Tensor& grad_out) {
  const auto d = detail::dims_of(k, v, w, u);
  detail::check_saved(k, saved);
  check(grad_out.shape() == k.shape(), ErrorKind::shape, "wkv backward: upstream gradient shape mismatch");
  Grads g = detail::zero_grads(k, d.C);
  // dw/du are reduced per channel; lanes of one channel run in batch order so
  // the reduction order is fixed.
  std::vector<double> dw_lane(d.B * d.C, 0.0), du_lane(d.B * d.C, 0.0);
  detail::for_each_lane(d, d.T * d.T * 8, [&](std::size_t b, std::size_t c, detail::Lane lane) {
    const double s = w[c] / static_cast<double>(d.T);
    double ds = 0.0, du = 0.0;
    for (std::size_t t = 0; t < d.T; ++t) {
      const double gt = grad_out[lane.at(t)];
      if (gt == 0.0) continue;
      const double ot = saved.out[lane.at(t)];
      const double ln = saved.log_norm[lane.at(t)];
      for (std::size_t i = 0; i < d.T; ++i) {
        const std::size_t ii = lane.at(i);
        const double dist = static_cast<double>(i > t ? i - t : t - i) - 1.0;
        const double a = i == t ? u[c] + k[ii] : -dist * s + k[ii];
        const double p = std::exp(a - ln);
        g.dv[ii] += gt * p;
        const double da = gt * p * (v[ii] - ot);
        g.dk[ii] += da;
        if (i == t)
          du += da;
        else
          ds -= da * dist;
      }
    }
    dw_lane[b * d.C + c] = ds / static_cast<double>(d.T);
    du_lane[b * d.C + c] = du;
  });
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t c = 0; c < d.C; ++c) {
      g.dw[c] += dw_lane[b * d.C + c];
      g.du[c] += du_lane[b * d.C + c];
    }
  return g;
}

/// O(T) gradients. With lambda_t = g_t / D_t, token i receives from every
/// later token t the weight r^{t-1-i} e^{k_i} lambda_t, so reverse-time
/// accumulators G = sum r^{t-1-i} lambda_t and H = sum r^{t-1-i} lambda_t out_t
/// give dv_i = e^{k_i} G and dk_i = e^{k_i}(v_i G - H). Their distance-weighted
/// companions G' = r(G' + G), H' = r(H' + H) give the decay gradient. The same
/// runs forward in time for earlier tokens. Offsets stay in log space.
inline Grads backward_scan(const Tensor& k, const Tensor& v, std::span<const double> w, std::span<const double> u,
                           const Saved& saved, const Tensor& grad_out) {
  const auto d = detail::dims_of(k, v, w, u);
  detail::check_saved(k, saved);
  check(grad_out.shape() == k.shape(), ErrorKind::shape, "wkv backward: upstream gradient shape mismatch");
  Grads g = detail::zero_grads(k, d.C);
  std::vector<double> dw_lane(d.B * d.C, 0.0), du_lane(d.B * d.C, 0.0);

  struct GradAcc {
    double G = 0.0, H = 0.0, Gd = 0.0, Hd = 0.0, offset = detail::neg_inf;

    // Shift one step further from the contributing tokens, then add token j.
    void push(double decay, double log_lambda_scale, double gj, double oj) {
      const double next = std::max(offset - decay, log_lambda_scale);
      const double keep = std::exp(offset - decay - next);
      const double fresh = std::exp(log_lambda_scale - next);
      Gd = keep * (Gd + G);
      Hd = keep * (Hd + H);
      G = keep * G + fresh * gj;
      H = keep * H + fresh * gj * oj;
      offset = next;
    }
  };

  detail::for_each_lane(d, d.T * 32, [&](std::size_t b, std::size_t c, detail::Lane lane) {
    const double s = w[c] / static_cast<double>(d.T);
    double ds = 0.0, du = 0.0;
    // Self term.
    for (std::size_t t = 0; t < d.T; ++t) {
      const std::size_t idx = lane.at(t);
      const double p = std::exp(u[c] + k[idx] - saved.log_norm[idx]);
      const double gt = grad_out[idx];
      g.dv[idx] += gt * p;
      const double da = gt * p * (v[idx] - saved.out[idx]);
      g.dk[idx] += da;
      du += da;
    }
    auto contribute = [&](const GradAcc& acc, std::size_t i) {
      const std::size_t idx = lane.at(i);
      const double f = std::exp(k[idx] + acc.offset);
      g.dv[idx] += f * acc.G;
      g.dk[idx] += f * (v[idx] * acc.G - acc.H);
      ds -= f * (v[idx] * acc.Gd - acc.Hd);
    };
    // Later tokens t > i attend to i through the prefix accumulator.
    GradAcc later;
    for (std::size_t i = d.T; i-- > 0;) {
      if (i + 1 < d.T) {
        const std::size_t j = lane.at(i + 1);
        later.push(s, -saved.log_norm[j], grad_out[j], saved.out[j]);
      }
      contribute(later, i);
    }
    // Earlier tokens t < i attend to i through the suffix accumulator.
    GradAcc earlier;
    for (std::size_t i = 0; i < d.T; ++i) {
      if (i > 0) {
        const std::size_t j = lane.at(i - 1);
        earlier.push(s, -saved.log_norm[j], grad_out[j], saved.out[j]);
      }
      contribute(earlier, i);
    }
    dw_lane[b * d.C + c] = ds / static_cast<double>(d.T);
    du_lane[b * d.C + c] = du;
  });
  for (std::size_t b = 0; b < d.B; ++b)
    for (std::size_t c = 0; c < d.C; ++c) {
      g.dw[c] += dw_lane[b * d.C + c];
      g.du[c] += du_lane[b * d.C + c];
    }
  return g;
}

/// Differentiable WKV on the tape. k, v: [B,T,C] (or [T,C]); w, u: [C].
inline Var apply(const Var& k, const Var& v, const Var& w, const Var& u, Form form = Form::scan) {
  check(w.shape().size() == 1 && u.shape().size() == 1, ErrorKind::shape, "wkv: w and u must be vectors");
  auto saved = std::make_shared<Saved>(form == Form::scan
                                           ? forward_scan(k.value(), v.value(), w.value().data(), u.value().data())
                                           : forward_naive(k.value(), v.value(), w.value().data(), u.value().data()));
  Tensor out = saved->out;
  const std::size_t ki = k.id(), vi = v.id(), wi = w.id(), ui = u.id();
  return k.tape().record("wkv", std::move(out), {k, v, w, u}, [=](Tape& t, const Tensor&, const Tensor& g) {
    const Tensor& kv = t.value(ki);
    const Tensor& vv = t.value(vi);
    const auto wd = t.value(wi).data();
    const auto ud = t.value(ui).data();
    Grads gr = form == Form::scan ? backward_scan(kv, vv, wd, ud, *saved, g) : backward_naive(kv, vv, wd, ud, *saved, g);
    if (Tensor* gk = t.grad_target(ki)) *gk += gr.dk;
    if (Tensor* gv = t.grad_target(vi)) *gv += gr.dv;
    if (Tensor* gw = t.grad_target(wi))
      for (std::size_t c = 0; c < gr.dw.size(); ++c) (*gw)[c] += gr.dw[c];
    if (Tensor* gu = t.grad_target(ui))
      for (std::size_t c = 0; c < gr.du.size(); ++c) (*gu)[c] += gr.du[c];
  });
}

// ---------------------------------------------------------------------------
// Benchmark

struct BenchRow {
  Form form;
  std::size_t T;
  std::size_t C;
  double ns_per_token;
};

/// Times both forms for each sequence length (best of `repetitions`).
inline std::vector<BenchRow> bench(std::span<const std::size_t> T_list, std::size_t C, std::size_t repetitions,
                                   std::uint64_t seed = 0) {
  check(repetitions >= 1, ErrorKind::invalid_argument, "bench-wkv: repetitions must be >= 1");
  check(C >= 1, ErrorKind::invalid_argument, "bench-wkv: C must be >= 1");
  check(!T_list.empty(), ErrorKind::invalid_argument, "bench-wkv: empty T list");
  for (std::size_t i = 0; i < T_list.size(); ++i) {
    check(T_list[i] >= 1, ErrorKind::empty_sequence, "bench-wkv: T must be >= 1");
    check(i == 0 || T_list[i] > T_list[i - 1], ErrorKind::invalid_argument, "bench-wkv: T list must be ascending");
  }
  Rng rng(seed);
  std::vector<double> w(C), u(C);
  for (std::size_t c = 0; c < C; ++c) {
    w[c] = C > 1 ? -1.0 + 2.0 * static_cast<double>(c) / static_cast<double>(C - 1) : 0.0;
    u[c] = 0.5;
  }
  std::vector<BenchRow> rows;
  for (Form form : {Form::naive, Form::scan}) {
    for (std::size_t T : T_list) {
      const Tensor k = Tensor::uniform({T, C}, -1.0, 1.0, rng);
      const Tensor v = Tensor::uniform({T, C}, -1.0, 1.0, rng);
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < repetitions; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        Saved s = form == Form::naive ? forward_naive(k, v, w, u) : forward_scan(k, v, w, u);
        const auto t1 = std::chrono::steady_clock::now();
        volatile double sink = s.out[0];
        (void)sink;
        best = std::min(best, std::chrono::duration<double, std::nano>(t1 - t0).count());
      }
      rows.push_back({form, T, C, best / static_cast<double>(T)});
    }
  }
  return rows;
}

/// Least-squares slope of log(total time) against log(T) for one form.
inline double loglog_slope(std::span<const BenchRow> rows, Form form) {
  std::vector<double> xs, ys;
  for (const auto& r : rows)
    if (r.form == form) {
      xs.push_back(std::log(static_cast<double>(r.T)));
      ys.push_back(std::log(r.ns_per_token * static_cast<double>(r.T)));
    }
  check(xs.size() >= 2, ErrorKind::invalid_argument, "slope needs at least two sequence lengths");
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  return sxy / sxx;
}

inline void write_bench_csv(std::ostream& os, std::span<const BenchRow> rows) {
  os << "form,T,C,ns_per_token\n";
  for (const auto& r : rows) os << to_string(r.form) << ',' << r.T << ',' << r.C << ',' << r.ns_per_token << '\n';
}

}  // namespace urwkv::wkv
