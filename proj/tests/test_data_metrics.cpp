#include <fstream>

#include "test_util.hpp"

using namespace urwkv;
using namespace urwkv::testing;

namespace {

std::size_t foreground(const Mask& m) { return static_cast<std::size_t>(std::count(m.labels.begin(), m.labels.end(), 1)); }

Tensor logits_for(const std::vector<std::uint8_t>& labels, std::size_t H, std::size_t W, double margin) {
  Tensor z({1, 2, H, W});
  for (std::size_t i = 0; i < H * W; ++i) z[labels[i] * H * W + i] = margin;
  return z;
}

std::vector<std::uint8_t> square_mask(std::size_t n, bool (*inside)(std::size_t, std::size_t, std::size_t)) {
  std::vector<std::uint8_t> m(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) m[y * n + x] = inside(y, x, n) ? 1 : 0;
  return m;
}

}  // namespace

TEST(Synthetic, SameSeedGivesIdenticalSamples) {
  const auto a = gen_synthetic(5, 64, 64, 42), b = gen_synthetic(5, 64, 64, 42), c = gen_synthetic(5, 64, 64, 43);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask, b[i].mask);
  }
  EXPECT_NE(a[0].image, c[0].image);
}

TEST(Synthetic, CountZeroIsEmpty) { EXPECT_TRUE(gen_synthetic(0, 64, 64, 1).empty()); }

TEST(Synthetic, RejectsSizesThatAreNotMultiplesOf32) {
  EXPECT_EQ(error_kind([] { gen_synthetic(1, 48, 64, 1); }), ErrorKind::invalid_argument);
}

TEST(Synthetic, ForegroundFractionIsModerate) {
  const auto s = gen_synthetic(200, 64, 64, 7);
  double frac = 0;
  for (const auto& x : s) {
    frac += static_cast<double>(foreground(x.mask)) / (64.0 * 64.0);
    for (double v : x.image.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
  frac /= 200;
  EXPECT_GE(frac, 0.1);
  EXPECT_LE(frac, 0.4);
}

TEST(Dataset, WriteThenLoadRoundTripsWithin8BitQuantisation) {
  const std::string dir = tmp_dir("dataset_round_trip");
  const auto s = gen_synthetic(5, 32, 32, 3);
  write_dataset(dir, s);
  const Dataset ds = load_dataset(dir);
  ASSERT_EQ(ds.train.size(), 4u);
  ASSERT_EQ(ds.test.size(), 1u);
  EXPECT_EQ(ds.train_stems[0], "sample_00000");
  EXPECT_EQ(ds.test_stems[0], "sample_00004");
  for (std::size_t i = 0; i < 5; ++i) {
    const Sample& got = i < 4 ? ds.train[i] : ds.test[0];
    EXPECT_EQ(got.mask, s[i].mask);
    EXPECT_LE(max_abs(got.image, s[i].image), 0.5 / 255 + 1e-12);
  }
}

TEST(Dataset, LoadPairResizesToTarget) {
  const std::string dir = tmp_dir("dataset_resize");
  write_dataset(dir, gen_synthetic(1, 64, 64, 4));
  const Sample s = load_pair(dir + "/images/sample_00000.png", dir + "/masks/sample_00000.png", LabelTable(), 32);
  EXPECT_EQ(s.image.shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(s.mask.h, 32u);
  EXPECT_EQ(s.mask.labels.size(), 32u * 32u);
}

TEST(Dataset, UnknownMaskValueIsAnError) {
  const std::string dir = tmp_dir("dataset_unknown_label");
  Image8 img{4, 4, 3, std::vector<std::uint8_t>(48, 100)};
  Image8 mask{4, 4, 1, std::vector<std::uint8_t>(16, 0)};
  mask.pixels[5] = 128;
  write_image(dir + "/i.png", img);
  write_image(dir + "/m.png", mask);
  std::string msg;
  EXPECT_EQ(error_kind([&] { load_pair(dir + "/i.png", dir + "/m.png", LabelTable()); }, &msg),
            ErrorKind::unknown_label);
  EXPECT_NE(msg.find("128"), std::string::npos) << msg;
  // A table that lists 128 accepts it.
  const LabelTable t = LabelTable::parse("0 0\n1 255\n2 128\n");
  EXPECT_EQ(load_pair(dir + "/i.png", dir + "/m.png", t).mask.labels[5], 2);
}

TEST(Dataset, GrayscaleImageIsReplicatedToThreeChannels) {
  const std::string dir = tmp_dir("dataset_gray");
  Image8 img{3, 2, 1, {0, 51, 102, 153, 204, 255}};
  Image8 mask{3, 2, 1, {0, 0, 255, 255, 0, 0}};
  write_image(dir + "/i.png", img);
  write_image(dir + "/m.png", mask);
  write_image(dir + "/i.pgm", img);
  write_image(dir + "/m.pgm", mask);
  for (const char* ext : {".png", ".pgm"}) {
    const Sample s = load_pair(dir + "/i" + ext, dir + "/m" + ext, LabelTable());
    ASSERT_EQ(s.image.shape(), (Shape{3, 2, 3}));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(s.image[c * 6 + i], img.pixels[i] / 255.0) << ext;
    EXPECT_EQ(s.mask.labels, (std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0}));
  }
}

TEST(Dataset, ErrorsOnMissingFilesAndMismatchedPairs) {
  const std::string dir = tmp_dir("dataset_errors");
  write_image(dir + "/i.png", Image8{4, 4, 3, std::vector<std::uint8_t>(48)});
  write_image(dir + "/m.png", Image8{2, 2, 1, std::vector<std::uint8_t>(4)});
  write_image(dir + "/rgb_mask.png", Image8{4, 4, 3, std::vector<std::uint8_t>(48)});
  EXPECT_EQ(error_kind([&] { load_pair(dir + "/i.png", dir + "/m.png", LabelTable()); }), ErrorKind::shape);
  EXPECT_EQ(error_kind([&] { load_pair(dir + "/none.png", dir + "/m.png", LabelTable()); }), ErrorKind::not_found);
  EXPECT_EQ(error_kind([&] { load_pair(dir + "/i.png", dir + "/rgb_mask.png", LabelTable()); }), ErrorKind::io);
  EXPECT_EQ(error_kind([&] { load_dataset(dir + "/nope"); }), ErrorKind::not_found);
}

TEST(LabelTable, ParsesLabelValueLines) {
  const LabelTable t = LabelTable::parse("# label value\n0 0\n1 255\n");
  EXPECT_EQ(t.label_of(255), 1);
  EXPECT_EQ(t.value_of(1), 255);
  EXPECT_EQ(LabelTable::parse(t.to_text()).label_of(0), 0);
  EXPECT_EQ(error_kind([] { LabelTable::parse("1\n"); }), ErrorKind::io);
  EXPECT_EQ(error_kind([] { LabelTable::parse(""); }), ErrorKind::io);
}

TEST(Augment, NoDrawsIsIdentity) {
  const Sample s = gen_synthetic(1, 32, 64, 5)[0];
  const Sample a = apply_augment(s, AugmentDraw{});
  EXPECT_EQ(a.image, s.image);
  EXPECT_EQ(a.mask, s.mask);
}

TEST(Augment, DoubleFlipsAndFourTurnsAreIdentity) {
  const Sample s = gen_synthetic(1, 32, 64, 6)[0];
  EXPECT_EQ(hflip(hflip(s)).image, s.image);
  EXPECT_EQ(vflip(vflip(s)).mask, s.mask);
  const Sample r = rot90(s);
  EXPECT_EQ(r.mask.h, 64u);
  EXPECT_EQ(r.mask.w, 32u);
  EXPECT_EQ(r.image.shape(), (Shape{3, 64, 32}));
  EXPECT_EQ(rot90(rot90(rot90(r))).image, s.image);
  // Two quarter turns equal both flips.
  EXPECT_EQ(rot90(rot90(s)).mask, vflip(hflip(s)).mask);
}

TEST(Augment, QuarterTurnIsCounterClockwise) {
  Sample s;
  s.image = Tensor({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  s.mask = Mask{2, 2, {1, 2, 3, 4}};
  // [[1,2],[3,4]] turned a quarter counter-clockwise is [[2,4],[1,3]].
  EXPECT_EQ(rot90(s).mask.labels, (std::vector<std::uint8_t>{2, 4, 1, 3}));
  EXPECT_EQ(rot90(s).image, Tensor({1, 2, 2}, std::vector<double>{2, 4, 1, 3}));
}

TEST(Augment, PreservesForegroundCountAndIntensityLabelRelation) {
  Rng rng(7);
  const auto samples = gen_synthetic(20, 64, 64, 8, SynthOptions{0.0, false});
  for (const Sample& s : samples) {
    for (int rep = 0; rep < 4; ++rep) {
      const Sample a = augment(s, rng);
      EXPECT_EQ(foreground(a.mask), foreground(s.mask));
      // Lesion pixels are darker than every background pixel.
      for (std::size_t i = 0; i < a.mask.labels.size(); ++i)
        ASSERT_EQ(a.mask.labels[i] == 1, a.image[i] < 0.45) << i;
    }
  }
}

TEST(Augment, DrawsCoverEveryOutcome) {
  Rng rng(9);
  std::array<int, 4> turns{};
  int h = 0, v = 0;
  for (int i = 0; i < 400; ++i) {
    const AugmentDraw d = draw_augment(rng);
    ++turns[static_cast<std::size_t>(d.quarter_turns)];
    h += d.hflip;
    v += d.vflip;
  }
  for (int t : turns) EXPECT_GT(t, 50);
  EXPECT_GT(h, 140);
  EXPECT_LT(h, 260);
  EXPECT_GT(v, 140);
  EXPECT_LT(v, 260);
}

TEST(Loss, ConfidentCorrectLogitsGiveSmallLoss) {
  const auto s = gen_synthetic(1, 32, 32, 10)[0];
  const LossTerms t = ce_dice_terms(logits_for(s.mask.labels, 32, 32, 20), s.mask.labels);
  EXPECT_LT(t.total, 0.01);
  EXPECT_GE(t.total, 0.0);
}

TEST(Loss, UniformLogitsMatchClosedForm) {
  // Balanced binary mask of N pixels, p = 1/2 everywhere:
  // CE = ln 2; soft Dice = (2 * N/4 + 1) / (N/2 + N/2 + 1).
  const std::size_t H = 4, W = 4, N = 16;
  std::vector<std::uint8_t> labels(N);
  for (std::size_t i = 0; i < N; ++i) labels[i] = i < N / 2 ? 1 : 0;
  const LossTerms t = ce_dice_terms(Tensor({1, 2, H, W}), labels);
  const double dice = (2.0 * N / 4 + 1) / (N + 1.0);
  EXPECT_NEAR(t.ce, std::log(2.0), 1e-15);
  EXPECT_NEAR(t.dice, dice, 1e-15);
  EXPECT_NEAR(t.total, 0.5 * std::log(2.0) + 0.5 * (1 - dice), 1e-15);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  for (std::size_t n : {2u, 3u}) {
    const Tensor z = Tensor::uniform({2, n, 3, 4}, -2, 2, rng);
    std::vector<std::uint8_t> labels(24);
    std::uniform_int_distribution<int> d(0, static_cast<int>(n) - 1);
    for (auto& l : labels) l = static_cast<std::uint8_t>(d(rng));
    Tape tape;
    const Var vz = tape.leaf(z, true);
    tape.backward(ce_dice_loss(vz, labels));
    const Tensor num = numeric_grad([&](const Tensor& x) { return ce_dice_terms(x, labels).total; }, z);
    EXPECT_LT(max_rel(vz.grad(), num), 1e-6) << "classes " << n;
  }
}

TEST(Loss, RejectsBadLabels) {
  const std::vector<std::uint8_t> labels{0, 1, 2, 0};
  EXPECT_EQ(error_kind([&] { ce_dice_terms(Tensor({1, 2, 2, 2}), labels); }), ErrorKind::invalid_argument);
  const std::vector<std::uint8_t> short_labels{0, 1};
  EXPECT_EQ(error_kind([&] { ce_dice_terms(Tensor({1, 2, 2, 2}), short_labels); }), ErrorKind::shape);
}

TEST(Loss, DecreasesWhileOverfittingOneSample) {
  const auto data = gen_synthetic(1, 64, 64, 12);
  Model model(preset("micro"), 1);
  AdamW opt;
  const Batch batch = make_batch({&data[0]});
  double prev = 1e300;
  for (int step = 0; step < 20; ++step) {
    const double l = train_step(model, opt, batch, LossWeights{});
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, prev) << "step " << step;
    prev = l;
  }
}

TEST(Metrics, IdenticalMasksScoreOne) {
  const auto m = square_mask(8, [](std::size_t y, std::size_t x, std::size_t) { return (x + y) % 3 == 0; });
  const MetricReport r = dsc_iou(m, m, 2);
  EXPECT_EQ(r.dsc[1], 1.0);
  EXPECT_EQ(r.iou[1], 1.0);
  EXPECT_EQ(r.mean_dsc, 1.0);
}

TEST(Metrics, DisjointMasksScoreZero) {
  const auto a = square_mask(8, [](std::size_t y, std::size_t, std::size_t n) { return y < n / 2; });
  const auto b = square_mask(8, [](std::size_t y, std::size_t, std::size_t n) { return y >= n / 2; });
  const MetricReport r = dsc_iou(a, b, 2);
  EXPECT_EQ(r.dsc[1], 0.0);
  EXPECT_EQ(r.iou[1], 0.0);
}

TEST(Metrics, HalfOverlapCountsQuadrants) {
  // A = left half, B = top half: one shared quadrant, union of three.
  const auto a = square_mask(10, [](std::size_t, std::size_t x, std::size_t n) { return x < n / 2; });
  const auto b = square_mask(10, [](std::size_t y, std::size_t, std::size_t n) { return y < n / 2; });
  const MetricReport r = dsc_iou(a, b, 2);
  EXPECT_EQ(r.iou[1], 1.0 / 3.0);
  EXPECT_EQ(r.dsc[1], 0.5);
}

TEST(Metrics, EmptyVersusEmptyScoresOne) {
  const std::vector<std::uint8_t> z(16, 0);
  const MetricReport r = dsc_iou(z, z, 3);
  EXPECT_EQ(r.dsc[2], 1.0);
  EXPECT_EQ(r.iou[2], 1.0);
}

TEST(Metrics, DiceIouIdentityHoldsOnRandomPairs) {
  Rng rng(13);
  std::uniform_int_distribution<int> d(0, 2);
  MetricAccumulator acc(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint8_t> a(50), b(50);
    for (auto& x : a) x = static_cast<std::uint8_t>(d(rng));
    for (auto& x : b) x = static_cast<std::uint8_t>(trial % 7 == 0 ? 0 : d(rng));
    acc.add(a, b);
    const MetricAccumulator one = [&] {
      MetricAccumulator m(3);
      m.add(a, b);
      return m;
    }();
    for (const ClassCounts& c : one.counts()) {
      // With U = P + T - I: 2 IoU / (1 + IoU) = 2I / (U + I) = 2I / (P + T) = DSC.
      EXPECT_EQ(c.uni() + c.inter, c.pred + c.truth);
      EXPECT_NEAR(c.dsc(), 2 * c.iou() / (1 + c.iou()), 1e-15);
      EXPECT_LE(c.iou(), c.dsc());
    }
  }
  EXPECT_EQ(acc.report().samples, 200u);
}

TEST(Metrics, ShapeMismatchIsAnError) {
  const std::vector<std::uint8_t> a(4), b(5);
  EXPECT_EQ(error_kind([&] { dsc_iou(a, b, 2); }), ErrorKind::shape);
}
