#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "urwkv/blocks.hpp"
#include "urwkv/error.hpp"
#include "urwkv/grid.hpp"

namespace urwkv {

enum class UpsampleMode { bilinear, nearest };

inline TokenGrid upsample_to(const TokenGrid& x, std::size_t th, std::size_t tw, UpsampleMode mode) {
  if (x.h == th && x.w == tw) return x;
  const Var y = mode == UpsampleMode::bilinear ? bilinear_upsample(x.tokens, x.h, x.w, th, tw)
                                               : nearest_upsample(x.tokens, x.h, x.w, th, tw);
  return make_grid(y, th, tw, x.stage, x.downsample);
}

/// Four decoder outputs from finest (f[0]) to coarsest (f[3]).
struct DecoderPyramid {
  std::array<TokenGrid, 4> f;
};

inline void check_pyramid(const DecoderPyramid& p) {
  for (std::size_t i = 1; i < 4; ++i) {
    const TokenGrid& a = p.f[i - 1];
    const TokenGrid& b = p.f[i];
    check(a.h == 2 * b.h && a.w == 2 * b.w && a.channels() == b.channels() && a.batch() == b.batch(),
          ErrorKind::shape,
          "mscf: pyramid level " + std::to_string(i + 1) + " (" + std::to_string(b.h) + "x" + std::to_string(b.w) +
              ") is not half of level " + std::to_string(i) + " (" + std::to_string(a.h) + "x" + std::to_string(a.w) +
              ")");
  }
}

/// Multi-scale channel fusion. Coarser levels are resized to the finest grid,
/// each aligned level gates a Channel Mix keyed by the aligned coarsest level,
/// and the result is added to the plain channel concatenation:
///   F = concat(f_i),  F' = concat(ChannelMix(f_i, f_4)),  out = F' + F.
struct Mscf {
  std::vector<ChannelMix> mixes;  // one shared, or one per branch
  UpsampleMode mode = UpsampleMode::bilinear;

  static Mscf create(ParamStore& store, const std::string& name, std::size_t C, std::size_t hidden_ratio, Rng& rng,
                     bool per_branch = false, UpsampleMode mode = UpsampleMode::bilinear, bool qshift_literal = false) {
    Mscf m;
    m.mode = mode;
    const std::size_t n = per_branch ? 4 : 1;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string suffix = per_branch ? ".mix" + std::to_string(i + 1) : ".mix";
      m.mixes.push_back(ChannelMix::create(store, name + suffix, C, hidden_ratio, rng, qshift_literal));
    }
    return m;
  }

  TokenGrid operator()(Context& ctx, const DecoderPyramid& p) const {
    check_pyramid(p);
    const std::size_t th = p.f[0].h, tw = p.f[0].w;
    std::array<TokenGrid, 4> aligned;
    for (std::size_t i = 0; i < 4; ++i) aligned[i] = upsample_to(p.f[i], th, tw, mode);
    std::vector<Var> base, enhanced;
    for (std::size_t i = 0; i < 4; ++i) {
      const ChannelMix& mix = mixes[mixes.size() == 1 ? 0 : i];
      base.push_back(aligned[i].tokens);
      enhanced.push_back(mix(ctx, aligned[i], aligned[3]).tokens);
    }
    const Var fused = add(concat_channels(enhanced), concat_channels(base));
    return make_grid(fused, th, tw, p.f[0].stage, p.f[0].downsample);
  }
};

/// Patch expansion back to full resolution followed by a 1x1 projection to
/// class logits [B, n, H, W].
struct SegHead {
  PatchExpand expand;
  Linear classifier;

  static SegHead create(ParamStore& store, const std::string& name, std::size_t C, std::size_t factor,
                        std::size_t classes, Rng& rng) {
    return {PatchExpand::create(store, name + ".expand", C, factor, rng),
            Linear::create(store, name + ".classifier", C, classes, rng)};
  }

  Var operator()(Context& ctx, const TokenGrid& x) const {
    const TokenGrid full = expand(ctx, x);
    return tokens_to_nchw(classifier(ctx, full.tokens), full.h, full.w);
  }
};

}  // namespace urwkv
