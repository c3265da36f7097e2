#include <set>

#include "test_util.hpp"

using namespace urwkv;
using namespace urwkv::testing;

namespace {

Tensor triple_loop(const Tensor& a, const Tensor& b) {
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor c({M, N});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

TapeOptions checked() { return TapeOptions{true, true}; }

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  t.at(1, 2, 3) = 5;
  EXPECT_EQ(t[23], 5);
  EXPECT_EQ(numel({}), 1u);
  EXPECT_EQ(error_kind([] { Tensor({2, 2}, std::vector<double>(3)); }), ErrorKind::shape);
  EXPECT_EQ(error_kind([&] { t.reshaped({5, 5}); }), ErrorKind::shape);
}

TEST(Matmul, IdentityAndZeros) {
  Rng rng(1);
  Tape tape;
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1;
  const Tensor b = Tensor::uniform({3, 4}, -2, 2, rng);
  EXPECT_EQ(matmul(tape.leaf(eye), tape.leaf(b)).value(), b);
  const Var z = matmul(tape.leaf(b), tape.leaf(Tensor({4, 2})));
  for (double v : z.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(2);
  Tape tape;
  const Tensor a = Tensor::uniform({4, 5}, -2, 2, rng), b = Tensor::uniform({5, 3}, -2, 2, rng);
  EXPECT_LT(max_abs(matmul(tape.leaf(a), tape.leaf(b)).value(), triple_loop(a, b)), 1e-12);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Tape tape;
  std::string msg;
  const auto kind = error_kind([&] { matmul(tape.leaf(Tensor({2, 3})), tape.leaf(Tensor({4, 5}))); }, &msg);
  EXPECT_EQ(kind, ErrorKind::shape);
  EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  EXPECT_NE(msg.find("[4,5]"), std::string::npos) << msg;
}

TEST(Matmul, GradientsAreGtimesBtAndAtimesG) {
  Rng rng(3);
  Tape tape;
  const Tensor a = Tensor::uniform({3, 4}, -1, 1, rng), b = Tensor::uniform({4, 2}, -1, 1, rng);
  const Var va = tape.leaf(a, true), vb = tape.leaf(b, true);
  tape.backward(sum(matmul(va, vb)));
  // With g = ones: da[i,k] = sum_j b[k,j], db[k,j] = sum_i a[i,k].
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(va.grad().at(i, k), b.at(k, 0) + b.at(k, 1), 1e-14);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(vb.grad().at(k, j), a.at(0, k) + a.at(1, k) + a.at(2, k), 1e-14);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  Tape tape;
  const Var y = layer_norm(tape.leaf(Tensor({1, 4}, 3.0)), tape.leaf(Tensor({4}, 1.0)), tape.leaf(Tensor({4})));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, PlusMinusOne) {
  Tape tape;
  const Var y = layer_norm(tape.leaf(Tensor({2}, {1.0, -1.0})), tape.leaf(Tensor({2}, 1.0)), tape.leaf(Tensor({2})));
  const double e = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y.value()[0], e, 1e-15);
  EXPECT_NEAR(y.value()[1], -e, 1e-15);
  EXPECT_NEAR(y.value()[0], 0.999995, 1e-6);
}

TEST(LayerNorm, RowStatistics) {
  Rng rng(4);
  Tape tape;
  const std::size_t C = 16;
  const Var y = layer_norm(tape.leaf(Tensor::normal({6, C}, 10.0, rng)), tape.leaf(Tensor({C}, 1.0)),
                           tape.leaf(Tensor({C})));
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < C; ++j) m += y.value().at(r, j);
    m /= C;
    for (std::size_t j = 0; j < C; ++j) v += (y.value().at(r, j) - m) * (y.value().at(r, j) - m);
    v /= C;
    EXPECT_LT(std::abs(m), 1e-10);
    EXPECT_LT(std::abs(v - 1), 1e-6);
  }
}

TEST(LayerNorm, ChannelMismatch) {
  Tape tape;
  EXPECT_EQ(error_kind([&] { layer_norm(tape.leaf(Tensor({2, 3})), tape.leaf(Tensor({4})), tape.leaf(Tensor({4}))); }),
            ErrorKind::shape);
}

TEST(Activations, PointValues) {
  Tape tape;
  EXPECT_EQ(sigmoid(tape.leaf(Tensor::scalar(0))).value().item(), 0.5);
  EXPECT_EQ(squared_relu(tape.leaf(Tensor::scalar(-3))).value().item(), 0.0);
  EXPECT_EQ(squared_relu(tape.leaf(Tensor::scalar(2))).value().item(), 4.0);
}

TEST(Activations, SquaredReluGradientAtTwo) {
  Tape tape;
  const Var x = tape.leaf(Tensor::scalar(2), true);
  tape.backward(squared_relu(x));
  EXPECT_EQ(x.grad().item(), 4.0);
  const Tensor fd = numeric_grad(
      [](const Tensor& t) {
        Tape inner;
        return squared_relu(inner.leaf(t)).value().item();
      },
      Tensor::scalar(2));
  EXPECT_NEAR(fd.item(), 4.0, 1e-8);
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  const Var x = tape.leaf(Tensor({2, 3}, 0.7), true);
  tape.backward(sum(x));
  for (double g : x.grad().data()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwoX) {
  Rng rng(5);
  Tape tape;
  const Tensor xv = Tensor::uniform({5}, -2, 2, rng);
  const Var x = tape.leaf(xv, true);
  tape.backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(x.grad()[i], 2 * xv[i]);
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  Rng rng(6);
  const Tensor a0 = Tensor::uniform({3, 4}, -2, 2, rng), w = Tensor::uniform({4, 5}, -2, 2, rng);
  const Tensor gamma = Tensor::uniform({5}, -2, 2, rng), beta = Tensor::uniform({5}, -2, 2, rng);
  auto f = [&](const Tensor& a) {
    Tape t;
    return sum(sigmoid(layer_norm(matmul(t.leaf(a), t.leaf(w)), t.leaf(gamma), t.leaf(beta)))).value().item();
  };
  Tape tape;
  const Var a = tape.leaf(a0, true);
  tape.backward(sum(sigmoid(layer_norm(matmul(a, tape.leaf(w)), tape.leaf(gamma), tape.leaf(beta)))));
  EXPECT_LT(max_rel(a.grad(), numeric_grad(f, a0)), 1e-6);
}

TEST(Backward, SharedSubexpressionsAccumulate) {
  Rng rng(7);
  const Tensor xv = Tensor::uniform({4}, -2, 2, rng);
  Tape t1;
  const Var x1 = t1.leaf(xv, true);
  const Var f1 = sigmoid(mul(x1, x1));
  t1.backward(sum(add(f1, f1)));
  Tape t2;
  const Var x2 = t2.leaf(xv, true);
  t2.backward(sum(scale(sigmoid(mul(x2, x2)), 2.0)));
  EXPECT_LT(max_abs(x1.grad(), x2.grad()), 1e-15);
}

TEST(Backward, Errors) {
  Tape tape;
  const Var x = tape.leaf(Tensor({3}, 1.0), true);
  EXPECT_EQ(error_kind([&] { tape.backward(x); }), ErrorKind::shape);
  const Var detached = sum(tape.leaf(Tensor({3}, 1.0)));
  EXPECT_EQ(error_kind([&] { tape.backward(detached); }), ErrorKind::state);
  const Var loss = sum(x);
  tape.backward(loss);
  EXPECT_EQ(error_kind([&] { tape.backward(loss); }), ErrorKind::state);
  tape.zero_grad();
  EXPECT_NO_THROW(tape.backward(loss));
}

TEST(Sentinel, NonFiniteIsAnErrorWhenEnabled) {
  Tape on(checked());
  EXPECT_EQ(error_kind([&] { log(on.leaf(Tensor::scalar(-1.0))); }), ErrorKind::non_finite);
  Tape off(TapeOptions{true, false});
  EXPECT_NO_THROW(log(off.leaf(Tensor::scalar(-1.0))));
}

TEST(Ops, BroadcastAddSubMul) {
  Tape tape;
  const Var a = tape.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  const Var b = tape.leaf(Tensor({3}, {10, 20, 30}));
  EXPECT_EQ(add(a, b).value(), Tensor({2, 3}, {11, 22, 33, 14, 25, 36}));
  EXPECT_EQ(sub(a, b).value(), Tensor({2, 3}, {-9, -18, -27, -6, -15, -24}));
  EXPECT_EQ(mul(a, b).value(), Tensor({2, 3}, {10, 40, 90, 40, 100, 180}));
  EXPECT_EQ(error_kind([&] { add(a, tape.leaf(Tensor({2}))); }), ErrorKind::shape);
}

TEST(Ops, ConcatSliceReshapeTranspose) {
  Tape tape;
  const Var a = tape.leaf(Tensor({2, 1}, {1, 2}));
  const Var b = tape.leaf(Tensor({2, 2}, {3, 4, 5, 6}));
  const Var c = concat_channels({a, b});
  EXPECT_EQ(c.value(), Tensor({2, 3}, {1, 3, 4, 2, 5, 6}));
  EXPECT_EQ(slice_channels(c, 1, 3).value(), b.value());
  EXPECT_EQ(transpose(c).value(), Tensor({3, 2}, {1, 2, 3, 5, 4, 6}));
  EXPECT_EQ(reshape(c, {3, 2}).value().shape(), (Shape{3, 2}));
  EXPECT_EQ(error_kind([&] { slice_channels(c, 2, 5); }), ErrorKind::shape);
}

TEST(Ops, EveryPlumbingOpPassesFiniteDifferences) {
  GradCheckOptions strict;
  strict.tolerance = 1e-6;
  strict.floor_ratio = 0;  // plain |a - n| / (|n| + 1e-8)
  const std::set<std::string> plumbing{"matmul", "linear", "add", "sub", "mul", "scale", "sigmoid", "squared_relu",
                                       "exp", "log", "sum", "mean", "reshape", "transpose", "concat_channels",
                                       "slice_channels", "layer_norm"};
  std::size_t seen = 0;
  for (const auto& c : gradcheck_cases()) {
    if (!plumbing.count(c.name)) continue;
    ++seen;
    const GradCheckReport r = c.run(11);
    EXPECT_TRUE(r.passed()) << r.name << " max_rel " << r.max_rel_error << " at " << r.worst;
  }
  EXPECT_EQ(seen, plumbing.size());
}

TEST(Ops, Determinism) {
  auto run = [] {
    Rng rng(9);
    Tape t;
    const Var x = t.leaf(Tensor::uniform({8, 16}, -2, 2, rng));
    const Var w = t.leaf(Tensor::uniform({16, 16}, -2, 2, rng));
    return layer_norm(matmul(x, w), t.leaf(Tensor({16}, 1.0)), t.leaf(Tensor({16}))).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParams) {
  Tensor p({3}, {1, -2, 3});
  Moments m;
  adamw_update(p, Tensor({3}), m, {0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(p, Tensor({3}, {1, -2, 3}));
  EXPECT_EQ(m.step, 1u);
  EXPECT_EQ(m.m.shape(), p.shape());
}

TEST(AdamW, FirstStepMovesByLr) {
  Tensor p = Tensor::scalar(1.0);
  Moments m;
  adamw_update(p, Tensor::scalar(1.0), m, {0.1, 0.9, 0.999, 1e-8, 0.0});
  // m_hat = v_hat = 1 -> p = 1 - 0.1 / (1 + 1e-8)
  EXPECT_NEAR(p.item(), 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.item(), 0.9, 1e-8);
}

TEST(AdamW, DecayOnly) {
  Tensor p = Tensor::scalar(1.0);
  Moments m;
  adamw_update(p, Tensor::scalar(0.0), m, {0.1, 0.9, 0.999, 1e-8, 0.01});
  EXPECT_DOUBLE_EQ(p.item(), 0.999);
}

TEST(AdamW, TwoStepsByHand) {
  Tensor p = Tensor::scalar(0.5);
  Moments m;
  const AdamWOptions o{0.01, 0.9, 0.999, 1e-8, 0.1};
  adamw_update(p, Tensor::scalar(2.0), m, o);
  adamw_update(p, Tensor::scalar(-1.0), m, o);
  double x = 0.5, mm = 0, vv = 0;
  const double g[2] = {2.0, -1.0};
  for (int t = 1; t <= 2; ++t) {
    x *= 1 - 0.01 * 0.1;
    mm = 0.9 * mm + 0.1 * g[t - 1];
    vv = 0.999 * vv + 0.001 * g[t - 1] * g[t - 1];
    x -= 0.01 * (mm / (1 - std::pow(0.9, t))) / (std::sqrt(vv / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(p.item(), x, 1e-15);
}

TEST(AdamW, ShapeMismatch) {
  Tensor p({3});
  Moments m;
  EXPECT_EQ(error_kind([&] { adamw_update(p, Tensor({4}), m, {}); }), ErrorKind::shape);
}

TEST(AdamW, FrozenParametersAreUntouched) {
  ParamStore s;
  Parameter& a = s.add("a", Tensor({2}, 1.0));
  Parameter& b = s.add("b", Tensor({2}, 1.0));
  a.grad.fill(1.0);
  b.grad.fill(1.0);
  a.frozen = true;
  AdamW opt(AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.5});
  opt.step(s);
  EXPECT_EQ(a.value, Tensor({2}, 1.0));
  EXPECT_LT(b.value[0], 1.0);
  EXPECT_EQ(opt.moments("a"), nullptr);
}
