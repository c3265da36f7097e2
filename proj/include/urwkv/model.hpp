#pragma once

// U-shaped segmentation model. Encoder: patch embedding and three 2x merges
// at constant width; bottleneck: LN, VRWKV blocks, linear; decoder: expand,
// fuse with the skip, blocks. The dagger variant routes every skip through a
// FAWA module and fuses the four decoder outputs with MSCF before the head.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "urwkv/blocks.hpp"
#include "urwkv/config.hpp"
#include "urwkv/error.hpp"
#include "urwkv/mscf.hpp"
#include "urwkv/params.hpp"
#include "urwkv/wavelet.hpp"

namespace urwkv {

constexpr std::size_t kImageChannels = 3;

class Model {
 public:
  explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    validate(cfg_);
    Rng rng(seed);
    const std::size_t D = cfg_.dims, R = cfg_.hidden_ratio;
    const bool lit = cfg_.qshift_literal;
    embed_ = PatchEmbed::create(store_, "encoder.embed", kImageChannels, cfg_.patch, D, cfg_.image_size,
                                cfg_.image_size, rng);
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string stage = "encoder.stage" + std::to_string(i + 1);
      if (i > 0) merges_[i - 1] = PatchMerge::create(store_, stage + ".merge", D, rng);
      encoder_[i] = make_blocks(store_, stage, cfg_.depths[i], D, R, rng, lit);
    }
    bottleneck_norm_ = LayerNorm::create(store_, "bottleneck.norm", D);
    bottleneck_ = make_blocks(store_, "bottleneck", cfg_.bottleneck_depth, D, R, rng, lit);
    bottleneck_proj_ = Linear::create(store_, "bottleneck.proj", D, D, rng);
    if (cfg_.fawa)
      for (std::size_t i = 0; i < 4; ++i)
        fawa_[i] = Fawa::create(store_, "skip" + std::to_string(i + 1) + ".fawa", D, rng, cfg_.per_band_params, lit);
    for (std::size_t i = 4; i-- > 0;) {
      const std::string stage = "decoder.stage" + std::to_string(i + 1);
      if (i < 3) expands_[i] = PatchExpand::create(store_, stage + ".expand", D, 2, rng);
      if (cfg_.skip_mode == SkipMode::concat) fuse_[i] = Linear::create(store_, stage + ".fuse", 2 * D, D, rng);
      decoder_[i] = make_blocks(store_, stage, cfg_.decoder_depths[i], D, R, rng, lit);
    }
    if (cfg_.mscf) {
      mscf_ = Mscf::create(store_, "mscf", D, R, rng, cfg_.per_branch_params,
                           cfg_.nearest_upsample ? UpsampleMode::nearest : UpsampleMode::bilinear, lit);
      mscf_reduce_ = Linear::create(store_, "mscf.reduce", 4 * D, D, rng);
    }
    head_ = SegHead::create(store_, "head", D, cfg_.patch, cfg_.classes, rng);
  }

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// image [B, 3, H, W] -> logits [B, classes, H, W].
  Var forward(Context& ctx, const Var& image) const {
    const Shape& s = image.shape();
    check(s.size() == 4 && s[1] == kImageChannels, ErrorKind::shape,
          "model: expected image [B,3,H,W], got " + to_string(s));
    check(s[2] % 32 == 0 && s[3] % 32 == 0 && s[2] > 0 && s[3] > 0, ErrorKind::shape,
          "model: image height and width must be multiples of 32, got " + std::to_string(s[2]) + "x" +
              std::to_string(s[3]));
    check(s[2] == cfg_.image_size && s[3] == cfg_.image_size, ErrorKind::shape,
          "model: configured for " + std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) +
              " images, got " + std::to_string(s[2]) + "x" + std::to_string(s[3]));

    std::array<TokenGrid, 4> skips;
    TokenGrid x = embed_(ctx, image);
    for (std::size_t i = 0; i < 4; ++i) {
      if (i > 0) x = merges_[i - 1](ctx, x);
      x = run_blocks(ctx, encoder_[i], x);
      skips[i] = cfg_.fawa ? fawa_[i](ctx, x) : x;
    }

    TokenGrid y = run_blocks(ctx, bottleneck_, bottleneck_norm_(ctx, x));
    y = with_tokens(y, bottleneck_proj_(ctx, y.tokens));

    DecoderPyramid pyramid;
    for (std::size_t i = 4; i-- > 0;) {
      if (i < 3) y = expands_[i](ctx, y);
      check_same_geometry(y, skips[i], "decoder skip");
      const Var fused = cfg_.skip_mode == SkipMode::concat
                            ? fuse_[i](ctx, concat_channels({y.tokens, skips[i].tokens}))
                            : add(y.tokens, skips[i].tokens);
      y = run_blocks(ctx, decoder_[i], with_tokens(skips[i], fused));
      pyramid.f[i] = y;
    }

    TokenGrid top = pyramid.f[0];
    if (cfg_.mscf) {
      const TokenGrid fused = (*mscf_)(ctx, pyramid);
      top = with_tokens(pyramid.f[0], mscf_reduce_(ctx, fused.tokens));
    }
    return head_(ctx, top);
  }

  /// Inference convenience: no tape gradients, returns the logits tensor.
  Tensor predict(const Tensor& images) const {
    Context ctx(false, TapeOptions{false, false});
    return forward(ctx, ctx.input(images)).value();
  }

  /// Encoder parameters are frozen while epoch < freeze_epochs.
  void apply_freeze_schedule(std::size_t epoch, std::size_t freeze_epochs) {
    const bool frozen = epoch < freeze_epochs;
    store_.for_each([&](Parameter& p) {
      if (is_encoder_param(p.name)) p.frozen = frozen;
    });
  }

  static bool is_encoder_param(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  PatchEmbed embed_;
  std::array<PatchMerge, 3> merges_{};
  std::array<std::vector<VrwkvBlock>, 4> encoder_;
  LayerNorm bottleneck_norm_;
  std::vector<VrwkvBlock> bottleneck_;
  Linear bottleneck_proj_;
  std::array<Fawa, 4> fawa_;
  std::array<PatchExpand, 3> expands_{};
  std::array<Linear, 4> fuse_{};
  std::array<std::vector<VrwkvBlock>, 4> decoder_;
  std::optional<Mscf> mscf_;
  Linear mscf_reduce_;
  SegHead head_;
};

/// Copies every parameter of src whose name exists in dst (shapes must agree).
/// Returns the number of tensors copied.
inline std::size_t copy_shared_params(const Model& src, Model& dst) {
  std::size_t n = 0;
  src.params().for_each([&](const Parameter& p) {
    Parameter* q = dst.params().find(p.name);
    if (!q) return;
    check(q->value.shape() == p.value.shape(), ErrorKind::shape,
          "copy_shared_params: '" + p.name + "' shape " + to_string(p.value.shape()) + " vs " +
              to_string(q->value.shape()));
    q->value = p.value;
    ++n;
  });
  return n;
}

}  // namespace urwkv
