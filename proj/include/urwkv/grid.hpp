#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "urwkv/error.hpp"
#include "urwkv/ops.hpp"
#include "urwkv/tape.hpp"
#include "urwkv/tensor.hpp"

namespace urwkv {

/// Tokens [B, T, C] laid out row-major over an h x w spatial grid (T == h*w).
struct TokenGrid {
  Var tokens;
  std::size_t h = 0;
  std::size_t w = 0;
  int stage = 0;
  int downsample = 1;

  std::size_t batch() const { return tokens.dim(0); }
  std::size_t count() const { return tokens.dim(1); }
  std::size_t channels() const { return tokens.dim(2); }
};

inline TokenGrid make_grid(Var tokens, std::size_t h, std::size_t w, int stage = 0, int downsample = 1) {
  check(tokens.shape().size() == 3, ErrorKind::shape, "token grid expects [B,T,C], got " + to_string(tokens.shape()));
  check(tokens.dim(1) == h * w, ErrorKind::shape,
        "token count " + std::to_string(tokens.dim(1)) + " does not match grid " + std::to_string(h) + "x" +
            std::to_string(w));
  return TokenGrid{std::move(tokens), h, w, stage, downsample};
}

inline TokenGrid with_tokens(const TokenGrid& like, Var tokens) {
  return make_grid(std::move(tokens), like.h, like.w, like.stage, like.downsample);
}

inline void check_same_geometry(const TokenGrid& a, const TokenGrid& b, const char* op) {
  check(a.h == b.h && a.w == b.w && a.tokens.shape() == b.tokens.shape(), ErrorKind::shape,
        std::string(op) + ": grids " + std::to_string(a.h) + "x" + std::to_string(a.w) + " " +
            to_string(a.tokens.shape()) + " and " + std::to_string(b.h) + "x" + std::to_string(b.w) + " " +
            to_string(b.tokens.shape()) + " differ");
}

namespace detail {

// Source token of the shifted map for channel quarter q at (r, c); -1 at a border.
inline long shift_source(std::size_t quarter, std::size_t r, std::size_t c, std::size_t h, std::size_t w) {
  switch (quarter) {
    case 0: return c >= 1 ? static_cast<long>(r * w + c - 1) : -1;      // from the left
    case 1: return c + 1 < w ? static_cast<long>(r * w + c + 1) : -1;   // from the right
    case 2: return r >= 1 ? static_cast<long>((r - 1) * w + c) : -1;    // from above
    default: return r + 1 < h ? static_cast<long>((r + 1) * w + c) : -1;  // from below
  }
}

inline double clamp01(double x) { return std::clamp(x, 0.0, 1.0); }

}  // namespace detail

/// Four-directional token shift blended with the input by a per-channel ratio.
/// Convex form: clamp(mu) * x + (1 - clamp(mu)) * shifted.
/// Literal form: x + (1 - clamp(mu)) * shifted.
inline Var q_shift(const Var& x, std::size_t h, std::size_t w, const Var& mu, bool literal = false) {
  const Shape& sx = x.shape();
  check(sx.size() == 3 && sx[1] == h * w, ErrorKind::shape,
        "q_shift: tokens " + to_string(sx) + " do not match grid " + std::to_string(h) + "x" + std::to_string(w));
  check(h >= 1 && w >= 1, ErrorKind::shape, "q_shift: empty grid");
  const std::size_t B = sx[0], T = sx[1], C = sx[2];
  check(C % 4 == 0, ErrorKind::shape, "q_shift: channel count " + std::to_string(C) + " is not divisible by 4");
  check(mu.shape() == Shape{C}, ErrorKind::shape, "q_shift: mu must have shape [" + std::to_string(C) + "]");
  const std::size_t q = C / 4;
  const Tensor& xv = x.value();
  const Tensor& mv = mu.value();
  Tensor out(sx);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t t = r * w + c;
        for (std::size_t ch = 0; ch < C; ++ch) {
          const long src = detail::shift_source(ch / q, r, c, h, w);
          const double shifted = src < 0 ? 0.0 : xv[(b * T + static_cast<std::size_t>(src)) * C + ch];
          const double m = detail::clamp01(mv[ch]);
          const double self = xv[(b * T + t) * C + ch];
          out[(b * T + t) * C + ch] = (literal ? self : m * self) + (1.0 - m) * shifted;
        }
      }
  const std::size_t xi = x.id(), mi = mu.id();
  return x.tape().record("q_shift", std::move(out), {x, mu},
                         [xi, mi, B, T, C, h, w, q, literal](Tape& t, const Tensor&, const Tensor& g) {
                           const Tensor& xv = t.value(xi);
                           const Tensor& mv = t.value(mi);
                           Tensor* gx = t.grad_target(xi);
                           Tensor* gm = t.grad_target(mi);
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t r = 0; r < h; ++r)
                               for (std::size_t c = 0; c < w; ++c) {
                                 const std::size_t tok = r * w + c;
                                 for (std::size_t ch = 0; ch < C; ++ch) {
                                   const std::size_t idx = (b * T + tok) * C + ch;
                                   const long src = detail::shift_source(ch / q, r, c, h, w);
                                   const std::size_t sidx =
                                       src < 0 ? 0 : (b * T + static_cast<std::size_t>(src)) * C + ch;
                                   const double m = detail::clamp01(mv[ch]);
                                   const double gi = g[idx];
                                   if (gx) {
                                     (*gx)[idx] += literal ? gi : m * gi;
                                     if (src >= 0) (*gx)[sidx] += (1.0 - m) * gi;
                                   }
                                   if (gm && mv[ch] > 0.0 && mv[ch] < 1.0) {
                                     const double shifted = src < 0 ? 0.0 : xv[sidx];
                                     (*gm)[ch] += gi * ((literal ? 0.0 : xv[idx]) - shifted);
                                   }
                                 }
                               }
                         });
}

namespace detail {

// Generic differentiable gather: out[j] = in[index[j]] (index -1 -> 0).
inline Var gather(const char* op, const Var& x, Shape out_shape, std::vector<long> index) {
  const Tensor& xv = x.value();
  Tensor out(std::move(out_shape));
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = index[j] < 0 ? 0.0 : xv[static_cast<std::size_t>(index[j])];
  const std::size_t xi = x.id();
  auto idx = std::make_shared<std::vector<long>>(std::move(index));
  return x.tape().record(op, std::move(out), {x}, [xi, idx](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* gx = t.grad_target(xi))
      for (std::size_t j = 0; j < g.size(); ++j)
        if ((*idx)[j] >= 0) (*gx)[static_cast<std::size_t>((*idx)[j])] += g[j];
  });
}

}  // namespace detail

/// Groups each f x f block of tokens into one token with f*f*C channels,
/// ordered (dy, dx, c). Grid shrinks by f per side.
inline Var space_to_depth(const Var& x, std::size_t h, std::size_t w, std::size_t f) {
  const Shape& sx = x.shape();
  check(sx.size() == 3 && sx[1] == h * w, ErrorKind::shape, "space_to_depth: tokens do not match grid");
  check(f >= 1 && h % f == 0 && w % f == 0, ErrorKind::shape,
        "space_to_depth: grid " + std::to_string(h) + "x" + std::to_string(w) + " is not a multiple of " +
            std::to_string(f));
  const std::size_t B = sx[0], C = sx[2], ho = h / f, wo = w / f, Co = f * f * C;
  std::vector<long> index(B * ho * wo * Co);
  std::size_t j = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t c = 0; c < wo; ++c)
        for (std::size_t dy = 0; dy < f; ++dy)
          for (std::size_t dx = 0; dx < f; ++dx)
            for (std::size_t ch = 0; ch < C; ++ch)
              index[j++] = static_cast<long>((b * h * w + (r * f + dy) * w + (c * f + dx)) * C + ch);
  return detail::gather("space_to_depth", x, {B, ho * wo, Co}, std::move(index));
}

/// Inverse of space_to_depth: channel group (dy, dx) becomes sub-pixel (dy, dx).
inline Var depth_to_space(const Var& x, std::size_t h, std::size_t w, std::size_t f) {
  const Shape& sx = x.shape();
  check(sx.size() == 3 && sx[1] == h * w, ErrorKind::shape, "depth_to_space: tokens do not match grid");
  check(f >= 1 && sx[2] % (f * f) == 0, ErrorKind::shape,
        "depth_to_space: channels " + std::to_string(sx[2]) + " not divisible by " + std::to_string(f * f));
  const std::size_t B = sx[0], Ci = sx[2], C = Ci / (f * f), ho = h * f, wo = w * f;
  std::vector<long> index(B * ho * wo * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t c = 0; c < wo; ++c)
        for (std::size_t ch = 0; ch < C; ++ch) {
          const std::size_t src_tok = (r / f) * w + (c / f);
          const std::size_t group = (r % f) * f + (c % f);
          index[((b * ho + r) * wo + c) * C + ch] = static_cast<long>((b * h * w + src_tok) * Ci + group * C + ch);
        }
  return detail::gather("depth_to_space", x, {B, ho * wo, C}, std::move(index));
}

/// image [B,3,H,W] -> patches [B, (H/P)(W/P), 3*P*P], features ordered (channel, py, px).
inline Var patchify(const Var& image, std::size_t P) {
  const Shape& s = image.shape();
  check(s.size() == 4, ErrorKind::shape, "patchify expects [B,C,H,W], got " + to_string(s));
  const std::size_t B = s[0], Ch = s[1], H = s[2], W = s[3];
  check(P >= 1 && H % P == 0 && W % P == 0, ErrorKind::shape,
        "patch embedding: image " + std::to_string(H) + "x" + std::to_string(W) + " must be a multiple of patch size " +
            std::to_string(P));
  const std::size_t gh = H / P, gw = W / P, F = Ch * P * P;
  std::vector<long> index(B * gh * gw * F);
  std::size_t j = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t c = 0; c < gw; ++c)
        for (std::size_t ch = 0; ch < Ch; ++ch)
          for (std::size_t py = 0; py < P; ++py)
            for (std::size_t px = 0; px < P; ++px)
              index[j++] = static_cast<long>(((b * Ch + ch) * H + r * P + py) * W + c * P + px);
  return detail::gather("patchify", image, {B, gh * gw, F}, std::move(index));
}

/// tokens [B, H*W, n] -> [B, n, H, W]
inline Var tokens_to_nchw(const Var& x, std::size_t H, std::size_t W) {
  const Shape& s = x.shape();
  check(s.size() == 3 && s[1] == H * W, ErrorKind::shape, "tokens_to_nchw: tokens do not match grid");
  const std::size_t B = s[0], n = s[2];
  std::vector<long> index(B * n * H * W);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t p = 0; p < H * W; ++p) index[(b * n + c) * H * W + p] = static_cast<long>((b * H * W + p) * n + c);
  return detail::gather("tokens_to_nchw", x, {B, n, H, W}, std::move(index));
}

/// Half-pixel-centred (align-corners-false) bilinear resize to a larger grid.
inline Var bilinear_upsample(const Var& x, std::size_t h, std::size_t w, std::size_t th, std::size_t tw) {
  const Shape& s = x.shape();
  check(s.size() == 3 && s[1] == h * w, ErrorKind::shape, "bilinear_upsample: tokens do not match grid");
  check(th >= h && tw >= w, ErrorKind::invalid_argument,
        "bilinear_upsample: target " + std::to_string(th) + "x" + std::to_string(tw) + " is smaller than source " +
            std::to_string(h) + "x" + std::to_string(w));
  const std::size_t B = s[0], C = s[2];
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> v(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
      const std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      v[o] = {i0, i1, src - static_cast<double>(i0)};
    }
    return v;
  };
  const auto ty = taps(h, th), tx = taps(w, tw);
  const Tensor& xv = x.value();
  Tensor out({B, th * tw, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < th; ++r)
      for (std::size_t c = 0; c < tw; ++c) {
        const Tap& a = ty[r];
        const Tap& e = tx[c];
        const double w00 = (1 - a.f) * (1 - e.f), w01 = (1 - a.f) * e.f, w10 = a.f * (1 - e.f), w11 = a.f * e.f;
        const double* p00 = xv.ptr() + (b * h * w + a.i0 * w + e.i0) * C;
        const double* p01 = xv.ptr() + (b * h * w + a.i0 * w + e.i1) * C;
        const double* p10 = xv.ptr() + (b * h * w + a.i1 * w + e.i0) * C;
        const double* p11 = xv.ptr() + (b * h * w + a.i1 * w + e.i1) * C;
        double* o = out.ptr() + (b * th * tw + r * tw + c) * C;
        for (std::size_t ch = 0; ch < C; ++ch) o[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
      }
  const std::size_t xi = x.id();
  return x.tape().record("bilinear_upsample", std::move(out), {x},
                         [xi, ty, tx, B, C, h, w, th, tw](Tape& t, const Tensor&, const Tensor& g) {
                           Tensor* gx = t.grad_target(xi);
                           if (!gx) return;
                           for (std::size_t b = 0; b < B; ++b)
                             for (std::size_t r = 0; r < th; ++r)
                               for (std::size_t c = 0; c < tw; ++c) {
                                 const Tap& a = ty[r];
                                 const Tap& e = tx[c];
                                 const double w00 = (1 - a.f) * (1 - e.f), w01 = (1 - a.f) * e.f,
                                              w10 = a.f * (1 - e.f), w11 = a.f * e.f;
                                 const double* go = g.ptr() + (b * th * tw + r * tw + c) * C;
                                 double* p00 = gx->ptr() + (b * h * w + a.i0 * w + e.i0) * C;
                                 double* p01 = gx->ptr() + (b * h * w + a.i0 * w + e.i1) * C;
                                 double* p10 = gx->ptr() + (b * h * w + a.i1 * w + e.i0) * C;
                                 double* p11 = gx->ptr() + (b * h * w + a.i1 * w + e.i1) * C;
                                 for (std::size_t ch = 0; ch < C; ++ch) {
                                   p00[ch] += w00 * go[ch];
                                   p01[ch] += w01 * go[ch];
                                   p10[ch] += w10 * go[ch];
                                   p11[ch] += w11 * go[ch];
                                 }
                               }
                         });
}

/// Nearest-neighbour resize to a larger grid.
inline Var nearest_upsample(const Var& x, std::size_t h, std::size_t w, std::size_t th, std::size_t tw) {
  const Shape& s = x.shape();
  check(s.size() == 3 && s[1] == h * w, ErrorKind::shape, "nearest_upsample: tokens do not match grid");
  check(th >= h && tw >= w, ErrorKind::invalid_argument, "nearest_upsample: downsampling is not supported");
  const std::size_t B = s[0], C = s[2];
  std::vector<long> index(B * th * tw * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < th; ++r)
      for (std::size_t c = 0; c < tw; ++c) {
        const std::size_t sr = r * h / th, sc = c * w / tw;
        for (std::size_t ch = 0; ch < C; ++ch)
          index[((b * th + r) * tw + c) * C + ch] = static_cast<long>((b * h * w + sr * w + sc) * C + ch);
      }
  return detail::gather("nearest_upsample", x, {B, th * tw, C}, std::move(index));
}

}  // namespace urwkv
