#pragma once

// VRWKV building blocks: Spatial Mix, Channel Mix, the residual block and the
// patch-level resolution operators that move token grids between scales.

#include <cstddef>
#include <string>
#include <vector>

#include "urwkv/error.hpp"
#include "urwkv/grid.hpp"
#include "urwkv/ops.hpp"
#include "urwkv/params.hpp"
#include "urwkv/wkv.hpp"

namespace urwkv {

struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       bool with_bias = true) {
    Linear l;
    l.weight = &store.add(name + ".weight", init::normal_fan_in(in, out, rng));
    if (with_bias) l.bias = &store.add(name + ".bias", Tensor({out}));
    return l;
  }

  Var operator()(Context& ctx, const Var& x) const {
    const Var w = ctx.param(*weight);
    if (!bias) return linear(x, w);
    const Var b = ctx.param(*bias);
    return linear(x, w, &b);
  }
};

struct LayerNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  static LayerNorm create(ParamStore& store, const std::string& name, std::size_t C) {
    return {&store.add(name + ".gamma", Tensor({C}, 1.0)), &store.add(name + ".beta", Tensor({C}))};
  }

  Var operator()(Context& ctx, const Var& x) const { return layer_norm(x, ctx.param(*gamma), ctx.param(*beta), 1e-5); }
  TokenGrid operator()(Context& ctx, const TokenGrid& x) const { return with_tokens(x, (*this)(ctx, x.tokens)); }
};

/// Token-axis attention: gated bidirectional WKV over Q-shifted projections.
struct SpatialMix {
  Parameter* mu_r = nullptr;
  Parameter* mu_k = nullptr;
  Parameter* mu_v = nullptr;
  Parameter* W_R = nullptr;
  Parameter* W_K = nullptr;
  Parameter* W_V = nullptr;
  Parameter* W_O = nullptr;
  Parameter* decay = nullptr;  // w
  Parameter* gain = nullptr;   // u
  bool qshift_literal = false;
  wkv::Form form = wkv::Form::scan;

  static SpatialMix create(ParamStore& store, const std::string& name, std::size_t C, Rng& rng,
                           bool qshift_literal = false) {
    SpatialMix m;
    m.mu_r = &store.add(name + ".mu_r", Tensor({C}, 0.5));
    m.mu_k = &store.add(name + ".mu_k", Tensor({C}, 0.5));
    m.mu_v = &store.add(name + ".mu_v", Tensor({C}, 0.5));
    m.W_R = &store.add(name + ".W_R", init::normal_fan_in(C, C, rng));
    m.W_K = &store.add(name + ".W_K", init::normal_fan_in(C, C, rng));
    m.W_V = &store.add(name + ".W_V", init::normal_fan_in(C, C, rng));
    m.W_O = &store.add(name + ".W_O", init::normal_fan_in(C, C, rng));
    m.decay = &store.add(name + ".w", init::linspace(C, -1.0, 1.0));
    m.gain = &store.add(name + ".u", Tensor({C}, 0.5));
    m.qshift_literal = qshift_literal;
    return m;
  }

  /// The key/value half: wkv(K, V) from the kv source grid.
  Var attend(Context& ctx, const TokenGrid& kv) const {
    const Var k = linear(q_shift(kv.tokens, kv.h, kv.w, ctx.param(*mu_k), qshift_literal), ctx.param(*W_K));
    const Var v = linear(q_shift(kv.tokens, kv.h, kv.w, ctx.param(*mu_v), qshift_literal), ctx.param(*W_V));
    return wkv::apply(k, v, ctx.param(*decay), ctx.param(*gain), form);
  }

  /// The receptance half: (sigmoid(R) * wkv) W_O.
  TokenGrid gate(Context& ctx, const TokenGrid& receiver, const Var& attended) const {
    const Var r = linear(q_shift(receiver.tokens, receiver.h, receiver.w, ctx.param(*mu_r), qshift_literal),
                         ctx.param(*W_R));
    return with_tokens(receiver, linear(mul(sigmoid(r), attended), ctx.param(*W_O)));
  }

  TokenGrid operator()(Context& ctx, const TokenGrid& x) const { return (*this)(ctx, x, x); }

  /// Receiver supplies R; kv supplies K and V. No residual is added here.
  TokenGrid operator()(Context& ctx, const TokenGrid& receiver, const TokenGrid& kv) const {
    check_same_geometry(receiver, kv, "spatial_mix");
    return gate(ctx, receiver, attend(ctx, kv));
  }
};

/// Position-wise gated feed-forward with a widened squared-ReLU hidden layer.
struct ChannelMix {
  Parameter* mu_r = nullptr;
  Parameter* mu_k = nullptr;
  Parameter* W_R = nullptr;
  Parameter* W_K = nullptr;  // [C, hidden]
  Parameter* W_V = nullptr;  // [hidden, C]
  Parameter* W_O = nullptr;
  bool qshift_literal = false;

  static ChannelMix create(ParamStore& store, const std::string& name, std::size_t C, std::size_t hidden_ratio,
                           Rng& rng, bool qshift_literal = false) {
    ChannelMix m;
    const std::size_t hidden = hidden_ratio * C;
    m.mu_r = &store.add(name + ".mu_r", Tensor({C}, 0.5));
    m.mu_k = &store.add(name + ".mu_k", Tensor({C}, 0.5));
    m.W_R = &store.add(name + ".W_R", init::normal_fan_in(C, C, rng));
    m.W_K = &store.add(name + ".W_K", init::normal_fan_in(C, hidden, rng));
    m.W_V = &store.add(name + ".W_V", init::normal_fan_in(hidden, C, rng));
    m.W_O = &store.add(name + ".W_O", init::normal_fan_in(C, C, rng));
    m.qshift_literal = qshift_literal;
    return m;
  }

  TokenGrid operator()(Context& ctx, const TokenGrid& x) const { return (*this)(ctx, x, x); }

  /// Receiver supplies R; key supplies K (and through it V).
  TokenGrid operator()(Context& ctx, const TokenGrid& receiver, const TokenGrid& key) const {
    check(receiver.tokens.shape() == key.tokens.shape() && receiver.h == key.h && receiver.w == key.w,
          ErrorKind::shape,
          "channel_mix: receiver " + to_string(receiver.tokens.shape()) + " and key " + to_string(key.tokens.shape()) +
              " token layouts differ");
    const Var r = linear(q_shift(receiver.tokens, receiver.h, receiver.w, ctx.param(*mu_r), qshift_literal),
                         ctx.param(*W_R));
    const Var k = linear(q_shift(key.tokens, key.h, key.w, ctx.param(*mu_k), qshift_literal), ctx.param(*W_K));
    const Var v = linear(squared_relu(k), ctx.param(*W_V));
    return with_tokens(receiver, linear(mul(sigmoid(r), v), ctx.param(*W_O)));
  }
};

/// Pre-norm residual block: y = x + SpatialMix(LN(x)); out = y + ChannelMix(LN(y)).
struct VrwkvBlock {
  LayerNorm ln1;
  SpatialMix spatial;
  LayerNorm ln2;
  ChannelMix channel;

  static VrwkvBlock create(ParamStore& store, const std::string& name, std::size_t C, std::size_t hidden_ratio,
                           Rng& rng, bool qshift_literal = false) {
    VrwkvBlock b;
    b.ln1 = LayerNorm::create(store, name + ".ln1", C);
    b.spatial = SpatialMix::create(store, name + ".spatial", C, rng, qshift_literal);
    b.ln2 = LayerNorm::create(store, name + ".ln2", C);
    b.channel = ChannelMix::create(store, name + ".channel", C, hidden_ratio, rng, qshift_literal);
    return b;
  }

  TokenGrid operator()(Context& ctx, const TokenGrid& x) const {
    const TokenGrid y = with_tokens(x, add(x.tokens, spatial(ctx, ln1(ctx, x)).tokens));
    return with_tokens(y, add(y.tokens, channel(ctx, ln2(ctx, y)).tokens));
  }
};

inline std::vector<VrwkvBlock> make_blocks(ParamStore& store, const std::string& name, std::size_t count,
                                           std::size_t C, std::size_t hidden_ratio, Rng& rng, bool qshift_literal) {
  std::vector<VrwkvBlock> blocks;
  for (std::size_t i = 0; i < count; ++i)
    blocks.push_back(VrwkvBlock::create(store, name + ".block" + std::to_string(i), C, hidden_ratio, rng, qshift_literal));
  return blocks;
}

inline TokenGrid run_blocks(Context& ctx, const std::vector<VrwkvBlock>& blocks, TokenGrid x) {
  for (const auto& b : blocks) x = b(ctx, x);
  return x;
}

/// Non-overlapping P x P patches, linearly projected, plus a learnable
/// position embedding over the fixed token grid.
struct PatchEmbed {
  Linear proj;
  Parameter* position = nullptr;
  std::size_t patch = 4;
  std::size_t grid_h = 0, grid_w = 0;

  static PatchEmbed create(ParamStore& store, const std::string& name, std::size_t in_channels, std::size_t patch,
                           std::size_t dims, std::size_t image_h, std::size_t image_w, Rng& rng) {
    check(patch >= 1 && image_h % patch == 0 && image_w % patch == 0, ErrorKind::shape,
          "patch embedding: image size must be a multiple of patch size " + std::to_string(patch));
    PatchEmbed e;
    e.patch = patch;
    e.grid_h = image_h / patch;
    e.grid_w = image_w / patch;
    e.proj = Linear::create(store, name + ".proj", in_channels * patch * patch, dims, rng);
    e.position = &store.add(name + ".position", Tensor({e.grid_h * e.grid_w, dims}));
    return e;
  }

  TokenGrid operator()(Context& ctx, const Var& image) const {
    const Shape& s = image.shape();
    check(s.size() == 4 && s[2] == grid_h * patch && s[3] == grid_w * patch, ErrorKind::shape,
          "patch embedding: expected image [B,C," + std::to_string(grid_h * patch) + "," +
              std::to_string(grid_w * patch) + "], got " + to_string(s));
    const Var tokens = add(proj(ctx, patchify(image, patch)), ctx.param(*position));
    return make_grid(tokens, grid_h, grid_w, 1, static_cast<int>(patch));
  }
};

/// 2x2 token neighbourhoods concatenated (4C) and projected back to C.
struct PatchMerge {
  Linear proj;

  static PatchMerge create(ParamStore& store, const std::string& name, std::size_t C, Rng& rng) {
    return {Linear::create(store, name + ".proj", 4 * C, C, rng)};
  }

  TokenGrid operator()(Context& ctx, const TokenGrid& x) const {
    check(x.h % 2 == 0 && x.w % 2 == 0, ErrorKind::shape,
          "patch_merge: grid " + std::to_string(x.h) + "x" + std::to_string(x.w) + " must be even");
    const Var merged = proj(ctx, space_to_depth(x.tokens, x.h, x.w, 2));
    return make_grid(merged, x.h / 2, x.w / 2, x.stage + 1, x.downsample * 2);
  }
};

/// Linear expansion to factor^2 * C followed by depth-to-space.
struct PatchExpand {
  Linear proj;
  std::size_t factor = 2;

  static PatchExpand create(ParamStore& store, const std::string& name, std::size_t C, std::size_t factor, Rng& rng) {
    return {Linear::create(store, name + ".proj", C, factor * factor * C, rng), factor};
  }

  TokenGrid operator()(Context& ctx, const TokenGrid& x) const {
    const Var expanded = depth_to_space(proj(ctx, x.tokens), x.h, x.w, factor);
    const int ds = x.downsample / static_cast<int>(factor);
    return make_grid(expanded, x.h * factor, x.w * factor, x.stage - 1, ds > 0 ? ds : 1);
  }
};

}  // namespace urwkv
