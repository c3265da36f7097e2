#pragma once

// Central finite-difference gradient checks. A graph maps the tensors of a
// ParamStore to an output y; the checked scalar is sum(y * R) for a fixed
// random R, so every output element contributes with a distinct weight.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "urwkv/blocks.hpp"
#include "urwkv/loss.hpp"
#include "urwkv/model.hpp"
#include "urwkv/mscf.hpp"
#include "urwkv/ops.hpp"
#include "urwkv/params.hpp"
#include "urwkv/wavelet.hpp"
#include "urwkv/wkv.hpp"

namespace urwkv {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  std::size_t max_per_tensor = 48;  // elements sampled per tensor; 0 checks all
  std::size_t total_samples = 0;    // when > 0, sample this many (tensor, element) pairs overall
  // Denominator floor relative to the largest finite-difference magnitude of
  // the check: rel = |a - n| / max(|n| + 1e-8, floor_ratio * max|n|).
  double floor_ratio = 1e-3;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t elements = 0;
  double tolerance = 0;
  std::string worst;  // "tensor[index]" of the largest relative error

  bool passed() const { return elements > 0 && max_rel_error < tolerance; }
};

using GraphFn = std::function<Var(Context&)>;

inline GradCheckReport check_gradients(const std::string& name, ParamStore& store, const GraphFn& graph,
                                       const GradCheckOptions& opt = {}) {
  const TapeOptions tape_opts{true, false};
  Rng rng(opt.seed);
  Tensor proj;
  auto scalar_of = [&](Context& ctx, const Var& y) {
    if (proj.size() == 0) proj = Tensor::normal(y.shape(), 1.0, rng);
    return sum(mul(y, constant(ctx.tape(), proj)));
  };

  store.zero_grad();
  {
    Context ctx(true, tape_opts);
    const Var loss = scalar_of(ctx, graph(ctx));
    ctx.backward(loss);
    ctx.accumulate_grads();
  }
  auto value = [&]() {
    Context ctx(false, tape_opts);
    return scalar_of(ctx, graph(ctx)).value().item();
  };

  struct Pick {
    Parameter* p;
    std::size_t index;
  };
  std::vector<Parameter*> params;
  store.for_each([&](Parameter& p) {
    if (!p.frozen && p.value.size() > 0) params.push_back(&p);
  });
  std::vector<Pick> picks;
  if (opt.total_samples > 0) {
    std::uniform_int_distribution<std::size_t> which(0, params.size() - 1);
    for (std::size_t i = 0; i < opt.total_samples; ++i) {
      Parameter* p = params[which(rng)];
      picks.push_back({p, std::uniform_int_distribution<std::size_t>(0, p->value.size() - 1)(rng)});
    }
  } else {
    for (Parameter* p : params) {
      const std::size_t n = p->value.size();
      if (opt.max_per_tensor == 0 || n <= opt.max_per_tensor) {
        for (std::size_t i = 0; i < n; ++i) picks.push_back({p, i});
      } else {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < opt.max_per_tensor; ++i) picks.push_back({p, idx[i]});
      }
    }
  }

  std::vector<double> analytic, numeric;
  for (const Pick& pk : picks) {
    double& x = pk.p->value[pk.index];
    const double x0 = x;
    x = x0 + opt.step;
    const double fp = value();
    x = x0 - opt.step;
    const double fm = value();
    x = x0;
    analytic.push_back(pk.p->grad[pk.index]);
    numeric.push_back((fp - fm) / (2 * opt.step));
  }
  double scale = 0;
  for (double n : numeric) scale = std::max(scale, std::abs(n));

  GradCheckReport r;
  r.name = name;
  r.tolerance = opt.tolerance;
  r.elements = picks.size();
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]);
    const double rel = err / std::max(std::abs(numeric[i]) + 1e-8, opt.floor_ratio * scale);
    r.max_abs_error = std::max(r.max_abs_error, err);
    if (rel >= r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst = picks[i].p->name + "[" + std::to_string(picks[i].index) + "]";
    }
  }
  return r;
}

namespace gradcheck_detail {

inline Tensor uniform(Shape s, double lo, double hi, Rng& rng) { return Tensor::uniform(std::move(s), lo, hi, rng); }

/// Zeroes no parameters but re-draws every one uniformly in [lo, hi] so that
/// structurally zero initialisations (biases, position embeddings) are exercised.
inline void randomize(ParamStore& store, Rng& rng, double lo = -1.0, double hi = 1.0) {
  store.for_each([&](Parameter& p) { p.value = Tensor::uniform(p.value.shape(), lo, hi, rng); });
}

/// Keeps the initialisation but re-draws tensors that start at zero, so bias,
/// position and shift terms carry gradient signal in deep checks.
inline void fill_zero_params(ParamStore& store, Rng& rng, double mag) {
  store.for_each([&](Parameter& p) {
    const auto d = p.value.data();
    if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; }))
      p.value = Tensor::uniform(p.value.shape(), -mag, mag, rng);
  });
}

/// Keeps Q-Shift fusion ratios strictly inside (0, 1), away from the clamp kinks.
inline void interior_mu(ParamStore& store, Rng& rng) {
  store.for_each([&](Parameter& p) {
    if (p.name.find(".mu_") != std::string::npos) p.value = Tensor::uniform(p.value.shape(), 0.15, 0.85, rng);
  });
}

inline TokenGrid grid_of(Context& ctx, ParamStore& s, const std::string& name, std::size_t h, std::size_t w) {
  return make_grid(ctx.param(s.at(name)), h, w);
}

}  // namespace gradcheck_detail

struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

/// Every differentiable op and module, plus the two end-to-end model checks.
inline std::vector<GradCheckCase> gradcheck_cases() {
  using namespace gradcheck_detail;
  std::vector<GradCheckCase> cases;
  auto simple = [&](std::string name, std::function<void(ParamStore&, Rng&)> setup, GraphFn (*make)(ParamStore&),
                    double tol = 1e-5) {
    cases.push_back({name, [name, setup, make, tol](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore s;
                       setup(s, rng);
                       GradCheckOptions o;
                       o.tolerance = tol;
                       o.seed = seed;
                       return check_gradients(name, s, make(s), o);
                     }});
  };
  auto add_inputs = [](std::vector<std::pair<std::string, Shape>> shapes, double lo = -2, double hi = 2) {
    return [shapes, lo, hi](ParamStore& s, Rng& rng) {
      for (const auto& [n, sh] : shapes) s.add(n, Tensor::uniform(sh, lo, hi, rng));
    };
  };

  simple("matmul", add_inputs({{"a", {4, 5}}, {"b", {5, 3}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return matmul(c.param(s.at("a")), c.param(s.at("b"))); };
  });
  simple("linear", add_inputs({{"x", {2, 3, 5}}, {"w", {5, 4}}, {"b", {4}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) {
      const Var b = c.param(s.at("b"));
      return linear(c.param(s.at("x")), c.param(s.at("w")), &b);
    };
  });
  simple("add", add_inputs({{"a", {3, 4}}, {"b", {4}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return add(c.param(s.at("a")), c.param(s.at("b"))); };
  });
  simple("sub", add_inputs({{"a", {3, 4}}, {"b", {4}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return sub(c.param(s.at("a")), c.param(s.at("b"))); };
  });
  simple("mul", add_inputs({{"a", {3, 4}}, {"b", {3, 4}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return mul(c.param(s.at("a")), c.param(s.at("b"))); };
  });
  simple("scale", add_inputs({{"x", {3, 4}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return scale(c.param(s.at("x")), -1.7); };
  });
  simple("sigmoid", add_inputs({{"x", {3, 5}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return sigmoid(c.param(s.at("x"))); };
  });
  simple("squared_relu", add_inputs({{"x", {3, 5}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return squared_relu(c.param(s.at("x"))); };
  });
  simple("exp", add_inputs({{"x", {3, 5}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return exp(c.param(s.at("x"))); };
  });
  simple("log", add_inputs({{"x", {3, 5}}}, 0.5, 2.0), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return log(c.param(s.at("x"))); };
  });
  simple("sum", add_inputs({{"x", {3, 5}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return sum(c.param(s.at("x"))); };
  });
  simple("mean", add_inputs({{"x", {3, 5}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return mean(c.param(s.at("x"))); };
  });
  simple("reshape", add_inputs({{"x", {3, 4}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return reshape(c.param(s.at("x")), {2, 6}); };
  });
  simple("transpose", add_inputs({{"x", {3, 4}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return transpose(c.param(s.at("x"))); };
  });
  simple("concat_channels", add_inputs({{"a", {2, 3, 2}}, {"b", {2, 3, 3}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return concat_channels({c.param(s.at("a")), c.param(s.at("b"))}); };
  });
  simple("slice_channels", add_inputs({{"x", {2, 3, 6}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return slice_channels(c.param(s.at("x")), 1, 4); };
  });
  simple("layer_norm", add_inputs({{"x", {2, 3, 6}}, {"gamma", {6}}, {"beta", {6}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return layer_norm(c.param(s.at("x")), c.param(s.at("gamma")), c.param(s.at("beta"))); };
  });
  auto qshift_setup = [](ParamStore& s, Rng& rng) {
    s.add("x", uniform({2, 12, 8}, -2, 2, rng));
    s.add("mu", uniform({8}, 0.15, 0.85, rng));
  };
  simple("q_shift", qshift_setup, [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return q_shift(c.param(s.at("x")), 3, 4, c.param(s.at("mu")), false); };
  });
  simple("q_shift_literal", qshift_setup, [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return q_shift(c.param(s.at("x")), 3, 4, c.param(s.at("mu")), true); };
  });
  auto wkv_setup = [](ParamStore& s, Rng& rng) {
    s.add("k", uniform({2, 8, 3}, -1, 1, rng));
    s.add("v", uniform({2, 8, 3}, -1, 1, rng));
    s.add("w", uniform({3}, -1, 1, rng));
    s.add("u", uniform({3}, -1, 1, rng));
  };
  simple("wkv_naive", wkv_setup, [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) {
      return wkv::apply(c.param(s.at("k")), c.param(s.at("v")), c.param(s.at("w")), c.param(s.at("u")),
                        wkv::Form::naive);
    };
  });
  simple("wkv_scan", wkv_setup, [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) {
      return wkv::apply(c.param(s.at("k")), c.param(s.at("v")), c.param(s.at("w")), c.param(s.at("u")),
                        wkv::Form::scan);
    };
  });
  simple("patchify", add_inputs({{"img", {1, 3, 8, 8}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return patchify(c.param(s.at("img")), 4); };
  });
  simple("space_to_depth", add_inputs({{"x", {1, 16, 3}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return space_to_depth(c.param(s.at("x")), 4, 4, 2); };
  });
  simple("depth_to_space", add_inputs({{"x", {1, 4, 12}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return depth_to_space(c.param(s.at("x")), 2, 2, 2); };
  });
  simple("bilinear_upsample", add_inputs({{"x", {1, 6, 3}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) { return bilinear_upsample(c.param(s.at("x")), 2, 3, 8, 12); };
  });
  simple("haar_dwt", add_inputs({{"x", {2, 16, 3}}}), [](ParamStore& s) -> GraphFn {
    return [&s](Context& c) {
      const SubBands b = haar_dwt(grid_of(c, s, "x", 4, 4));
      return concat_channels({b.ll.tokens, b.lh.tokens, b.hl.tokens, b.hh.tokens});
    };
  });
  simple("haar_idwt", add_inputs({{"ll", {2, 4, 3}}, {"lh", {2, 4, 3}}, {"hl", {2, 4, 3}}, {"hh", {2, 4, 3}}}),
         [](ParamStore& s) -> GraphFn {
           return [&s](Context& c) {
             return haar_idwt({grid_of(c, s, "ll", 2, 2), grid_of(c, s, "lh", 2, 2), grid_of(c, s, "hl", 2, 2),
                               grid_of(c, s, "hh", 2, 2)})
                 .tokens;
           };
         });
  auto ce_dice_case = [](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore s;
    s.add("logits", uniform({2, 3, 4, 4}, -2, 2, rng));
    std::vector<std::uint8_t> labels(2 * 16);
    for (auto& l : labels) l = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 2)(rng));
    GradCheckOptions o;
    o.seed = seed;
    return check_gradients("ce_dice_loss", s,
                           [&s, labels](Context& c) { return ce_dice_loss(c.param(s.at("logits")), labels); }, o);
  };
  cases.push_back({"ce_dice_loss", ce_dice_case});

  // Modules: inputs and every parameter are checked.
  auto module_case = [&](std::string name, std::function<GraphFn(ParamStore&, Rng&)> build) {
    cases.push_back({name, [name, build](std::uint64_t seed) {
                       Rng rng(seed);
                       ParamStore s;
                       GraphFn f = build(s, rng);
                       randomize(s, rng, -0.8, 0.8);
                       interior_mu(s, rng);
                       GradCheckOptions o;
                       o.seed = seed;
                       return check_gradients(name, s, f, o);
                     }});
  };
  module_case("spatial_mix", [](ParamStore& s, Rng& rng) -> GraphFn {
    s.add("x", Tensor({1, 16, 8}));
    s.add("kv", Tensor({1, 16, 8}));
    auto m = std::make_shared<SpatialMix>(SpatialMix::create(s, "mix", 8, rng));
    return [&s, m](Context& c) { return (*m)(c, grid_of(c, s, "x", 4, 4), grid_of(c, s, "kv", 4, 4)).tokens; };
  });
  module_case("channel_mix", [](ParamStore& s, Rng& rng) -> GraphFn {
    s.add("x", Tensor({1, 16, 8}));
    s.add("key", Tensor({1, 16, 8}));
    auto m = std::make_shared<ChannelMix>(ChannelMix::create(s, "mix", 8, 4, rng));
    return [&s, m](Context& c) { return (*m)(c, grid_of(c, s, "x", 4, 4), grid_of(c, s, "key", 4, 4)).tokens; };
  });
  module_case("vrwkv_block_x2", [](ParamStore& s, Rng& rng) -> GraphFn {
    s.add("x", Tensor({1, 16, 8}));
    auto blocks = std::make_shared<std::vector<VrwkvBlock>>(make_blocks(s, "stack", 2, 8, 4, rng, false));
    return [&s, blocks](Context& c) { return run_blocks(c, *blocks, grid_of(c, s, "x", 4, 4)).tokens; };
  });
  module_case("patch_embed", [](ParamStore& s, Rng& rng) -> GraphFn {
    s.add("img", Tensor({1, 3, 8, 8}));
    auto e = std::make_shared<PatchEmbed>(PatchEmbed::create(s, "embed", 3, 4, 8, 8, 8, rng));
    return [&s, e](Context& c) { return (*e)(c, c.param(s.at("img"))).tokens; };
  });
  module_case("patch_merge", [](ParamStore& s, Rng& rng) -> GraphFn {
    s.add("x", Tensor({1, 16, 4}));
    auto m = std::make_shared<PatchMerge>(PatchMerge::create(s, "merge", 4, rng));
    return [&s, m](Context& c) { return (*m)(c, grid_of(c, s, "x", 4, 4)).tokens; };
  });
  module_case("patch_expand", [](ParamStore& s, Rng& rng) -> GraphFn {
    s.add("x", Tensor({1, 4, 4}));
    auto m = std::make_shared<PatchExpand>(PatchExpand::create(s, "expand", 4, 2, rng));
    return [&s, m](Context& c) { return (*m)(c, grid_of(c, s, "x", 2, 2)).tokens; };
  });
  module_case("fawa", [](ParamStore& s, Rng& rng) -> GraphFn {
    s.add("x", Tensor({1, 16, 8}));
    auto f = std::make_shared<Fawa>(Fawa::create(s, "fawa", 8, rng));
    return [&s, f](Context& c) { return (*f)(c, grid_of(c, s, "x", 4, 4)).tokens; };
  });
  module_case("fawa_per_band", [](ParamStore& s, Rng& rng) -> GraphFn {
    s.add("x", Tensor({1, 16, 8}));
    auto f = std::make_shared<Fawa>(Fawa::create(s, "fawa", 8, rng, true));
    return [&s, f](Context& c) { return (*f)(c, grid_of(c, s, "x", 4, 4)).tokens; };
  });
  module_case("mscf", [](ParamStore& s, Rng& rng) -> GraphFn {
    for (std::size_t i = 0; i < 4; ++i) s.add("f" + std::to_string(i + 1), Tensor({1, (8u >> i) * (8u >> i), 4}));
    auto m = std::make_shared<Mscf>(Mscf::create(s, "mscf", 4, 4, rng));
    return [&s, m](Context& c) {
      DecoderPyramid p;
      for (std::size_t i = 0; i < 4; ++i) p.f[i] = grid_of(c, s, "f" + std::to_string(i + 1), 8u >> i, 8u >> i);
      return (*m)(c, p).tokens;
    };
  });
  module_case("seg_head", [](ParamStore& s, Rng& rng) -> GraphFn {
    s.add("x", Tensor({1, 4, 4}));
    auto h = std::make_shared<SegHead>(SegHead::create(s, "head", 4, 4, 3, rng));
    return [&s, h](Context& c) { return (*h)(c, grid_of(c, s, "x", 2, 2)); };
  });

  // End-to-end: 20 sampled parameters of a randomly initialised micro model.
  auto model_case = [](std::string name, bool dagger, std::size_t size) {
    return GradCheckCase{name, [name, dagger, size](std::uint64_t seed) {
                           ModelConfig cfg = preset("micro");
                           cfg.image_size = size;
                           cfg.fawa = cfg.mscf = dagger;
                           Model model(cfg, seed);
                           Rng rng(seed + 17);
                           fill_zero_params(model.params(), rng, 0.1);
                           interior_mu(model.params(), rng);
                           const Tensor images = Tensor::uniform({1, 3, size, size}, 0.0, 1.0, rng);
                           std::vector<std::uint8_t> labels(size * size);
                           for (auto& l : labels) l = static_cast<std::uint8_t>(rng() % cfg.classes);
                           GradCheckOptions o;
                           o.seed = seed;
                           o.tolerance = 1e-4;
                           o.total_samples = 20;
                           return check_gradients(name, model.params(),
                                                  [&](Context& c) {
                                                    return ce_dice_loss(model.forward(c, c.input(images)), labels);
                                                  },
                                                  o);
                         }};
  };
  cases.push_back(model_case("model_base_end_to_end", false, 32));
  cases.push_back(model_case("model_dagger_end_to_end", true, 64));
  return cases;
}

inline std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed = 1) {
  std::vector<GradCheckReport> out;
  for (const auto& c : gradcheck_cases()) out.push_back(c.run(seed));
  return out;
}

}  // namespace urwkv
