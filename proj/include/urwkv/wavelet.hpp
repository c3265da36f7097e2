#pragma once

// Single-level orthonormal 2-D Haar transform on token grids and the
// frequency-aware wavelet attention built on it.
//
// For each 2x2 block [[a, b], [c, d]] of a channel:
//   LL = (a + b + c + d) / 2     LH = (a - b + c - d) / 2
//   HL = (a + b - c - d) / 2     HH = (a - b - c + d) / 2
// The transform matrix is symmetric and orthogonal, so it is its own inverse.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "urwkv/blocks.hpp"
#include "urwkv/error.hpp"
#include "urwkv/grid.hpp"

namespace urwkv {

enum class Band : std::size_t { ll = 0, lh = 1, hl = 2, hh = 3 };

struct SubBands {
  TokenGrid ll, lh, hl, hh;

  const TokenGrid& operator[](Band b) const {
    switch (b) {
      case Band::ll: return ll;
      case Band::lh: return lh;
      case Band::hl: return hl;
      default: return hh;
    }
  }
};

namespace detail {

// Signs of (a, b, c, d) for each band; rows double as the synthesis weights.
constexpr std::array<std::array<double, 4>, 4> haar_signs{{
    {{1, 1, 1, 1}},
    {{1, -1, 1, -1}},
    {{1, 1, -1, -1}},
    {{1, -1, -1, 1}},
}};

inline void check_even(const TokenGrid& x, const char* op) {
  check(x.h % 2 == 0 && x.w % 2 == 0, ErrorKind::shape,
        std::string(op) + ": grid " + std::to_string(x.h) + "x" + std::to_string(x.w) + " has an odd dimension");
}

inline Var haar_band(const TokenGrid& x, Band band) {
  const std::size_t B = x.batch(), C = x.channels(), h = x.h, w = x.w, ho = h / 2, wo = w / 2;
  const auto& sg = haar_signs[static_cast<std::size_t>(band)];
  const Tensor& xv = x.tokens.value();
  Tensor out({B, ho * wo, C});
  auto corner = [&](std::size_t b, std::size_t r, std::size_t c, std::size_t q) {
    return (b * h * w + (2 * r + q / 2) * w + 2 * c + q % 2) * C;
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t c = 0; c < wo; ++c) {
        double* o = out.ptr() + (b * ho * wo + r * wo + c) * C;
        for (std::size_t q = 0; q < 4; ++q) {
          const double* p = xv.ptr() + corner(b, r, c, q);
          const double s = 0.5 * sg[q];
          for (std::size_t ch = 0; ch < C; ++ch) o[ch] += s * p[ch];
        }
      }
  const std::size_t xi = x.tokens.id();
  return x.tokens.tape().record("haar_dwt", std::move(out), {x.tokens},
                                [xi, sg, B, C, h, w, ho, wo](Tape& t, const Tensor&, const Tensor& g) {
                                  Tensor* gx = t.grad_target(xi);
                                  if (!gx) return;
                                  for (std::size_t b = 0; b < B; ++b)
                                    for (std::size_t r = 0; r < ho; ++r)
                                      for (std::size_t c = 0; c < wo; ++c) {
                                        const double* go = g.ptr() + (b * ho * wo + r * wo + c) * C;
                                        for (std::size_t q = 0; q < 4; ++q) {
                                          double* p = gx->ptr() + (b * h * w + (2 * r + q / 2) * w + 2 * c + q % 2) * C;
                                          const double s = 0.5 * sg[q];
                                          for (std::size_t ch = 0; ch < C; ++ch) p[ch] += s * go[ch];
                                        }
                                      }
                                });
}

}  // namespace detail

inline SubBands haar_dwt(const TokenGrid& x) {
  detail::check_even(x, "haar_dwt");
  auto band = [&](Band b) {
    return make_grid(detail::haar_band(x, b), x.h / 2, x.w / 2, x.stage, x.downsample * 2);
  };
  return {band(Band::ll), band(Band::lh), band(Band::hl), band(Band::hh)};
}

inline TokenGrid haar_idwt(const SubBands& s) {
  for (const TokenGrid* g : {&s.lh, &s.hl, &s.hh}) check_same_geometry(s.ll, *g, "haar_idwt");
  const std::size_t B = s.ll.batch(), C = s.ll.channels(), hb = s.ll.h, wb = s.ll.w, h = 2 * hb, w = 2 * wb;
  const std::array<const Tensor*, 4> in{&s.ll.tokens.value(), &s.lh.tokens.value(), &s.hl.tokens.value(),
                                        &s.hh.tokens.value()};
  Tensor out({B, h * w, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < hb; ++r)
      for (std::size_t c = 0; c < wb; ++c)
        for (std::size_t q = 0; q < 4; ++q) {
          double* o = out.ptr() + (b * h * w + (2 * r + q / 2) * w + 2 * c + q % 2) * C;
          for (std::size_t band = 0; band < 4; ++band) {
            const double sgn = 0.5 * detail::haar_signs[band][q];
            const double* p = in[band]->ptr() + (b * hb * wb + r * wb + c) * C;
            for (std::size_t ch = 0; ch < C; ++ch) o[ch] += sgn * p[ch];
          }
        }
  const std::array<std::size_t, 4> ids{s.ll.tokens.id(), s.lh.tokens.id(), s.hl.tokens.id(), s.hh.tokens.id()};
  const Var out_var = s.ll.tokens.tape().record(
      "haar_idwt", std::move(out), {s.ll.tokens, s.lh.tokens, s.hl.tokens, s.hh.tokens},
      [ids, B, C, h, w, hb, wb](Tape& t, const Tensor&, const Tensor& g) {
        for (std::size_t band = 0; band < 4; ++band) {
          Tensor* gb = t.grad_target(ids[band]);
          if (!gb) continue;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t r = 0; r < hb; ++r)
              for (std::size_t c = 0; c < wb; ++c) {
                double* o = gb->ptr() + (b * hb * wb + r * wb + c) * C;
                for (std::size_t q = 0; q < 4; ++q) {
                  const double sgn = 0.5 * detail::haar_signs[band][q];
                  const double* go = g.ptr() + (b * h * w + (2 * r + q / 2) * w + 2 * c + q % 2) * C;
                  for (std::size_t ch = 0; ch < C; ++ch) o[ch] += sgn * go[ch];
                }
              }
        }
      });
  return make_grid(out_var, h, w, s.ll.stage, s.ll.downsample > 1 ? s.ll.downsample / 2 : 1);
}

/// Frequency-aware wavelet attention: every sub-band acts as the receiver of a
/// Spatial Mix whose keys and values come from the LL band; the adjusted bands
/// are synthesised back and added to the input.
struct Fawa {
  std::vector<SpatialMix> mixes;  // one shared, or one per band

  static Fawa create(ParamStore& store, const std::string& name, std::size_t C, Rng& rng, bool per_band = false,
                     bool qshift_literal = false) {
    Fawa f;
    if (per_band) {
      for (const char* band : {"ll", "lh", "hl", "hh"})
        f.mixes.push_back(SpatialMix::create(store, name + ".mix_" + band, C, rng, qshift_literal));
    } else {
      f.mixes.push_back(SpatialMix::create(store, name + ".mix", C, rng, qshift_literal));
    }
    return f;
  }

  TokenGrid operator()(Context& ctx, const TokenGrid& x) const {
    detail::check_even(x, "fawa");
    const SubBands bands = haar_dwt(x);
    std::array<TokenGrid, 4> adjusted;
    if (mixes.size() == 1) {
      // K and V depend only on LL, so the attended values are shared by all bands.
      const Var attended = mixes[0].attend(ctx, bands.ll);
      for (std::size_t b = 0; b < 4; ++b) adjusted[b] = mixes[0].gate(ctx, bands[static_cast<Band>(b)], attended);
    } else {
      for (std::size_t b = 0; b < 4; ++b) adjusted[b] = mixes[b](ctx, bands[static_cast<Band>(b)], bands.ll);
    }
    const TokenGrid fused = haar_idwt({adjusted[0], adjusted[1], adjusted[2], adjusted[3]});
    return with_tokens(x, add(fused.tokens, x.tokens));
  }
};

}  // namespace urwkv
