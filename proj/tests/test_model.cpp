#include <fstream>
#include <map>
#include <set>

#include "test_util.hpp"

using namespace urwkv;
using namespace urwkv::testing;

namespace {

ModelConfig small(bool dagger, std::size_t dims = 8, std::size_t size = 64) {
  ModelConfig c;
  c.dims = dims;
  c.depths = {1, 1, 1, 1};
  c.decoder_depths = {1, 1, 1, 1};
  c.image_size = size;
  c.fawa = c.mscf = dagger;
  return c;
}

// Closed-form parameter count from the layer shapes.
std::size_t expected_params(const ModelConfig& c) {
  const std::size_t D = c.dims, R = c.hidden_ratio, S = c.image_size, P = c.patch;
  const std::size_t spatial = 4 * D * D + 5 * D;                  // W_R,K,V,O + mu x3 + w + u
  const std::size_t channel = 2 * D * D + 2 * R * D * D + 2 * D;  // W_R, W_O, W_K, W_V + mu x2
  const std::size_t block = spatial + channel + 4 * D;            // + two layer norms
  std::size_t blocks = c.bottleneck_depth;
  for (std::size_t i = 0; i < 4; ++i) blocks += c.depths[i] + c.decoder_depths[i];
  std::size_t n = blocks * block;
  n += 3 * P * P * D + D + (S / P) * (S / P) * D;  // embed
  n += 3 * (4 * D * D + D);                        // merges
  n += 2 * D + D * D + D;                          // bottleneck norm + proj
  n += 3 * (D * 4 * D + 4 * D);                    // decoder expands
  if (c.skip_mode == SkipMode::concat) n += 4 * (2 * D * D + D);
  if (c.fawa) n += 4 * spatial * (c.per_band_params ? 4 : 1);
  if (c.mscf) n += channel * (c.per_branch_params ? 4 : 1) + 4 * D * D + D;
  n += D * P * P * D + P * P * D + D * c.classes + c.classes;  // head
  return n;
}

Tensor random_images(std::size_t B, std::size_t S, Rng& rng) { return Tensor::uniform({B, 3, S, S}, 0, 1, rng); }

std::vector<unsigned char> file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::map<std::string, Tensor> snapshot(const Model& m) {
  std::map<std::string, Tensor> out;
  m.params().for_each([&](const Parameter& p) { out[p.name] = p.value; });
  return out;
}

}  // namespace

TEST(Model, ProducesFullResolutionLogits) {
  Rng rng(1);
  ModelConfig c = small(false, 32, 64);
  const Model m(c, 3);
  const Tensor y = m.predict(random_images(2, 64, rng));
  EXPECT_EQ(y.shape(), (Shape{2, 2, 64, 64}));
  EXPECT_TRUE(y.all_finite());
  const Model d(small(true, 32, 64), 3);
  EXPECT_EQ(d.predict(random_images(1, 64, rng)).shape(), (Shape{1, 2, 64, 64}));
}

TEST(Model, RejectsSizesThatAreNotMultiplesOf32) {
  const Model m(small(false, 8, 64));
  std::string msg;
  EXPECT_EQ(error_kind([&] { m.predict(Tensor({1, 3, 48, 64})); }, &msg), ErrorKind::shape);
  EXPECT_NE(msg.find("multiples of 32"), std::string::npos) << msg;
  EXPECT_EQ(error_kind([&] { m.predict(Tensor({1, 3, 32, 32})); }), ErrorKind::shape);
  EXPECT_EQ(error_kind([&] { m.predict(Tensor({1, 1, 64, 64})); }), ErrorKind::shape);
}

TEST(Model, ZeroImageGivesFiniteLogits) {
  const Model m(small(true, 16, 64), 5);
  EXPECT_TRUE(m.predict(Tensor({1, 3, 64, 64})).all_finite());
}

TEST(Model, IdenticalImagesInABatchGiveIdenticalRows) {
  Rng rng(2);
  const Model m(small(true, 8, 64), 6);
  const Tensor one = random_images(1, 64, rng);
  Tensor two({2, 3, 64, 64});
  std::copy(one.data().begin(), one.data().end(), two.ptr());
  std::copy(one.data().begin(), one.data().end(), two.ptr() + one.size());
  const Tensor y = m.predict(two);
  const std::size_t half = y.size() / 2;
  for (std::size_t i = 0; i < half; ++i) ASSERT_EQ(y[i], y[half + i]);
  EXPECT_EQ(m.predict(two), y);
}

TEST(Model, GateClosedDaggerEqualsBaseBitForBit) {
  Rng rng(3);
  for (std::size_t dims : {8u, 32u}) {
    Model dagger(small(true, dims, 64), 11);
    Model base(small(false, dims, 64), 99);
    EXPECT_EQ(copy_shared_params(dagger, base), base.params().size());
    dagger.params().for_each([&](Parameter& p) {
      if (p.name.find(".fawa.") != std::string::npos && p.name.ends_with(".W_O")) p.value.fill(0.0);
      if (p.name.rfind("mscf.mix", 0) == 0 && p.name.ends_with(".W_O")) p.value.fill(0.0);
    });
    Tensor& reduce = dagger.params().at("mscf.reduce.weight").value;
    reduce.fill(0.0);
    for (std::size_t i = 0; i < dims; ++i) reduce.at(i, i) = 1.0;
    dagger.params().at("mscf.reduce.bias").value.fill(0.0);
    const Tensor img = random_images(2, 64, rng);
    EXPECT_EQ(dagger.predict(img), base.predict(img)) << "dims " << dims;
  }
}

TEST(Model, ParameterCountMatchesClosedForm) {
  for (const ModelConfig& c : {small(false), small(true), small(true, 16, 128), preset("micro")}) {
    const Model m(c);
    EXPECT_EQ(m.params().scalar_count(), expected_params(c)) << c.variant() << " dims " << c.dims;
  }
  ModelConfig c = preset("micro");
  c.per_band_params = c.per_branch_params = true;
  c.skip_mode = SkipMode::add;
  EXPECT_EQ(Model(c).params().scalar_count(), expected_params(c));
}

TEST(Model, ParameterNamesAreUnique) {
  const Model m(preset("micro"));
  std::set<std::string> names;
  m.params().for_each([&](const Parameter& p) { EXPECT_TRUE(names.insert(p.name).second) << p.name; });
  EXPECT_EQ(names.size(), m.params().size());
}

TEST(Model, SeedDeterminesInitialisation) {
  EXPECT_EQ(snapshot(Model(small(true), 4)).at("head.classifier.weight"),
            snapshot(Model(small(true), 4)).at("head.classifier.weight"));
  EXPECT_NE(snapshot(Model(small(true), 4)).at("head.classifier.weight"),
            snapshot(Model(small(true), 5)).at("head.classifier.weight"));
}

TEST(Checkpoint, RoundTripReproducesLogits) {
  Rng rng(4);
  const std::string dir = tmp_dir("ckpt_round_trip");
  const Model m(small(true, 16, 64), 7);
  save_checkpoint(m, dir + "/m.ckpt", 42);
  const LoadedModel l = load_checkpoint(dir + "/m.ckpt");
  EXPECT_EQ(l.step, 42u);
  EXPECT_EQ(l.model.config(), m.config());
  const Tensor img = random_images(2, 64, rng);
  const Tensor a = m.predict(img), b = l.model.predict(img);
  // Relative to the largest logit magnitude.
  EXPECT_LT(max_abs(b, a) / max_abs(a, Tensor(a.shape())), 1e-6);
  // A saved-then-reloaded model saves byte-identical files.
  save_checkpoint(l.model, dir + "/again.ckpt", 42);
  EXPECT_EQ(file_bytes(dir + "/m.ckpt"), file_bytes(dir + "/again.ckpt"));
}

TEST(Checkpoint, RoundedModelMatchesReloadExactly) {
  Rng rng(5);
  const std::string dir = tmp_dir("ckpt_rounded");
  Model m(small(false, 8, 64), 8);
  save_checkpoint(m, dir + "/m.ckpt");
  round_params_to_f32(m);
  const Tensor img = random_images(1, 64, rng);
  EXPECT_EQ(load_checkpoint(dir + "/m.ckpt").model.predict(img), m.predict(img));
}

TEST(Checkpoint, CorruptFilesRaiseSpecificErrors) {
  const std::string dir = tmp_dir("ckpt_corrupt");
  const Model m(small(false, 8, 64), 9);
  const std::string good = dir + "/good.ckpt";
  save_checkpoint(m, good);
  const auto bytes = file_bytes(good);

  auto kind_of = [&](const std::vector<unsigned char>& b) {
    write_bytes(dir + "/bad.ckpt", b);
    return error_kind([&] { load_checkpoint(dir + "/bad.ckpt"); });
  };
  EXPECT_EQ(kind_of({bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2)}), ErrorKind::truncated);
  EXPECT_EQ(kind_of({bytes.begin(), bytes.begin() + 2}), ErrorKind::truncated);
  EXPECT_EQ(kind_of({bytes.begin(), bytes.end() - 1}), ErrorKind::truncated);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(kind_of(bad_magic), ErrorKind::bad_magic);

  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_EQ(kind_of(bad_version), ErrorKind::version);

  // Rename the first tensor: the name follows the header and config block.
  const std::uint32_t cfg_len = bytes[8] | bytes[9] << 8 | bytes[10] << 16 | static_cast<std::uint32_t>(bytes[11]) << 24;
  const std::size_t first_name = 12 + cfg_len + 8 + 4 + 4;
  auto unknown = bytes;
  unknown[first_name] = 'Z';
  EXPECT_EQ(kind_of(unknown), ErrorKind::unknown_tensor);

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_EQ(kind_of(trailing), ErrorKind::invalid_argument);

  EXPECT_EQ(error_kind([] { load_checkpoint(""); }), ErrorKind::not_found);
  EXPECT_EQ(error_kind([&] { load_checkpoint(dir + "/does_not_exist.ckpt"); }), ErrorKind::not_found);
}

TEST(Checkpoint, ConfigMismatchOnLoadInto) {
  const std::string dir = tmp_dir("ckpt_mismatch");
  save_checkpoint(Model(small(false, 8, 64)), dir + "/m.ckpt");
  Model other(small(false, 16, 64));
  EXPECT_EQ(error_kind([&] { load_checkpoint_into(other, dir + "/m.ckpt"); }), ErrorKind::config_mismatch);
  Model same(small(false, 8, 64), 123);
  EXPECT_EQ(load_checkpoint_into(same, dir + "/m.ckpt"), 0u);
}

TEST(FreezeSchedule, EncoderFrozenForTheFirstTenEpochs) {
  Rng rng(6);
  Model m(small(true, 8, 64), 10);
  AdamW opt(AdamWOptions{1e-2, 0.9, 0.999, 1e-8, 1e-4});
  const std::vector<Sample> data = gen_synthetic(2, 64, 64, 3);
  const Batch batch = make_batch({&data[0], &data[1]});
  const auto start = snapshot(m);
  std::map<std::string, Tensor> after_epoch9;
  for (std::size_t epoch = 0; epoch <= 10; ++epoch) {
    m.apply_freeze_schedule(epoch, 10);
    train_step(m, opt, batch, LossWeights{});
    if (epoch == 9) after_epoch9 = snapshot(m);
  }
  const auto end = snapshot(m);
  std::size_t encoder = 0, moved_decoder = 0;
  for (const auto& [name, value] : start) {
    if (Model::is_encoder_param(name)) {
      ++encoder;
      EXPECT_EQ(after_epoch9.at(name), value) << name;
      if (name.ends_with(".weight") || name.ends_with("W_R")) {
        EXPECT_NE(end.at(name), value) << name;
      }
    } else if (after_epoch9.at(name) != value) {
      ++moved_decoder;
    }
  }
  EXPECT_GT(encoder, 0u);
  EXPECT_GT(moved_decoder, 0u);
  m.params().for_each([](const Parameter& p) { EXPECT_FALSE(p.frozen) << p.name; });
}

TEST(Config, ParsesKeyValueTextWithComments) {
  RunConfig rc;
  apply_text(rc, "# comment\n dims = 16 \ndepths = 1,2,3,4\nvariant = base  # trailing\nlr = 0.001\n\naugment = false\n");
  EXPECT_EQ(rc.model.dims, 16u);
  EXPECT_EQ(rc.model.depths, (std::array<std::size_t, 4>{1, 2, 3, 4}));
  EXPECT_FALSE(rc.model.fawa);
  EXPECT_FALSE(rc.model.mscf);
  EXPECT_DOUBLE_EQ(rc.train.lr, 0.001);
  EXPECT_FALSE(rc.train.augment);
  apply_override(rc, "epochs=3");
  EXPECT_EQ(rc.train.epochs, 3u);
}

TEST(Config, EchoedTextParsesBackToTheSameConfig) {
  RunConfig rc;
  apply_text(rc, "dims = 12\nper_band_params = true\nskip_mode = add\nupsample = nearest\nseed = 77\n");
  RunConfig back;
  apply_text(back, to_text(rc));
  EXPECT_EQ(back.model, rc.model);
  EXPECT_EQ(back.train, rc.train);
  EXPECT_EQ(parse_model_config(to_text(rc.model)), rc.model);
}

TEST(Config, RejectsBadInput) {
  RunConfig rc;
  EXPECT_EQ(error_kind([&] { apply_text(rc, "nonsense = 1\n"); }), ErrorKind::config);
  EXPECT_EQ(error_kind([&] { apply_text(rc, "dims 16\n"); }), ErrorKind::config);
  EXPECT_EQ(error_kind([&] { apply_text(rc, "dims = abc\n"); }), ErrorKind::config);
  EXPECT_EQ(error_kind([&] { apply_text(rc, "variant = huge\n"); }), ErrorKind::config);
  EXPECT_EQ(error_kind([&] { apply_override(rc, "dims"); }), ErrorKind::config);
  EXPECT_EQ(error_kind([] { load_run_config("/nonexistent/run.cfg"); }), ErrorKind::not_found);
}

TEST(Config, ValidationListsEveryViolation) {
  ModelConfig c;
  c.dims = 6;
  c.depths = {1, 0, 1, 1};
  c.image_size = 48;
  c.classes = 1;
  EXPECT_EQ(validation_errors(c).size(), 4u);
  std::string msg;
  EXPECT_EQ(error_kind([&] { Model m(c); }, &msg), ErrorKind::config);
  EXPECT_NE(msg.find("multiple of 32"), std::string::npos) << msg;
  EXPECT_TRUE(validation_errors(preset("micro")).empty());
  ModelConfig odd = small(true, 8, 32);
  EXPECT_EQ(validation_errors(odd).size(), 1u);
  odd.fawa = false;
  EXPECT_TRUE(validation_errors(odd).empty());
}
