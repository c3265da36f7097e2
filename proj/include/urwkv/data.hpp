#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "urwkv/error.hpp"
#include "urwkv/image_io.hpp"
#include "urwkv/tensor.hpp"

namespace urwkv {

struct Mask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> labels;  // row-major [h, w]

  friend bool operator==(const Mask&, const Mask&) = default;
};

/// image [3, H, W] in [0, 1]; mask [H, W].
struct Sample {
  Tensor image;
  Mask mask;
};

struct SynthOptions {
  double noise_sigma = 0.05;
  bool hair = true;
};

namespace data_detail {

inline double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

inline Sample gen_one(std::size_t H, std::size_t W, std::uint64_t seed, const SynthOptions& opt) {
  Rng rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * U(rng); };
  const double pi = std::numbers::pi;

  // Background: skin-like tint with a low-frequency texture.
  const double bg[3] = {uni(0.62, 0.8), uni(0.5, 0.65), uni(0.45, 0.6)};
  const double fx = uni(1.0, 4.0), fy = uni(1.0, 4.0), ph = uni(0.0, 2 * pi), tex = uni(0.02, 0.05);
  // Foreground: darker lesion, ellipse or rounded blob.
  const double fg[3] = {uni(0.15, 0.35), uni(0.08, 0.25), uni(0.05, 0.22)};
  const bool blob = U(rng) < 0.5;
  const double ry = uni(0.18, 0.34) * H, rx = uni(0.18, 0.34) * W;
  const double cy = uni(ry, H - ry), cx = uni(rx, W - rx);
  const double theta = uni(0.0, pi);
  const int lobes = 3 + static_cast<int>(U(rng) * 3);
  const double wobble = blob ? uni(0.08, 0.18) : 0.0, lobe_ph = uni(0.0, 2 * pi);

  Sample s;
  s.image = Tensor({3, H, W});
  s.mask = Mask{H, W, std::vector<std::uint8_t>(H * W, 0)};
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double dy = (y + 0.5) - cy, dx = (x + 0.5) - cx;
      const double u = (dx * ct + dy * st) / rx, v = (-dx * st + dy * ct) / ry;
      const double r = std::sqrt(u * u + v * v);
      const double ang = std::atan2(v, u);
      const bool inside = r <= 1.0 + wobble * std::sin(lobes * ang + lobe_ph);
      const double t = tex * std::sin(2 * pi * (fx * x / W + fy * y / H) + ph);
      for (std::size_t c = 0; c < 3; ++c) s.image.at(c, y, x) = inside ? fg[c] : bg[c] + t;
      s.mask.labels[y * W + x] = inside ? 1 : 0;
    }

  // Hair-like dark arcs over image only.
  if (opt.hair) {
    const int arcs = static_cast<int>(U(rng) * 4);
    for (int a = 0; a < arcs; ++a) {
      const double R = uni(0.4, 1.2) * std::max(H, W);
      const double acx = uni(-0.5, 1.5) * W, acy = uni(-0.5, 1.5) * H;
      const double shade = uni(0.05, 0.2);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double d = std::hypot(x + 0.5 - acx, y + 0.5 - acy);
          if (std::abs(d - R) < 0.6)
            for (std::size_t c = 0; c < 3; ++c) s.image.at(c, y, x) = shade;
        }
    }
  }
  if (opt.noise_sigma > 0) {
    std::normal_distribution<double> N(0.0, opt.noise_sigma);
    for (double& p : s.image.data()) p = clamp01(p + N(rng));
  } else {
    for (double& p : s.image.data()) p = clamp01(p);
  }
  return s;
}

}  // namespace data_detail

/// Deterministic synthetic lesion images; sample i depends only on (seed, i).
inline std::vector<Sample> gen_synthetic(std::size_t count, std::size_t H, std::size_t W, std::uint64_t seed,
                                         const SynthOptions& opt = {}) {
  check(H > 0 && W > 0 && H % 32 == 0 && W % 32 == 0, ErrorKind::invalid_argument,
        "gen_synthetic: height and width must be positive multiples of 32");
  std::vector<Sample> out;
  out.reserve(count);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::vector<std::uint64_t> seeds(count);
  {
    std::vector<std::uint32_t> raw(2 * count);
    seq.generate(raw.begin(), raw.end());
    for (std::size_t i = 0; i < count; ++i) seeds[i] = (std::uint64_t{raw[2 * i]} << 32) | raw[2 * i + 1];
  }
  for (std::size_t i = 0; i < count; ++i) out.push_back(data_detail::gen_one(H, W, seeds[i], opt));
  return out;
}

struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  int quarter_turns = 0;  // counter-clockwise
};

inline AugmentDraw draw_augment(Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> turns(0, 3);
  AugmentDraw d;
  d.hflip = coin(rng);
  d.vflip = coin(rng);
  d.quarter_turns = turns(rng);
  return d;
}

namespace data_detail {

/// out(y, x) = in(map(y, x)) over an OH x OW output grid.
template <typename Map>
Sample remap(const Sample& s, std::size_t OH, std::size_t OW, Map map) {
  const std::size_t C = s.image.dim(0), W = s.mask.w;
  Sample out;
  out.image = Tensor({C, OH, OW});
  out.mask = Mask{OH, OW, std::vector<std::uint8_t>(OH * OW)};
  for (std::size_t y = 0; y < OH; ++y)
    for (std::size_t x = 0; x < OW; ++x) {
      const auto [sy, sx] = map(y, x);
      for (std::size_t c = 0; c < C; ++c) out.image.at(c, y, x) = s.image.at(c, sy, sx);
      out.mask.labels[y * OW + x] = s.mask.labels[sy * W + sx];
    }
  return out;
}

}  // namespace data_detail

inline Sample hflip(const Sample& s) {
  const std::size_t W = s.mask.w;
  return data_detail::remap(s, s.mask.h, W, [&](std::size_t y, std::size_t x) { return std::pair{y, W - 1 - x}; });
}

inline Sample vflip(const Sample& s) {
  const std::size_t H = s.mask.h;
  return data_detail::remap(s, H, s.mask.w, [&](std::size_t y, std::size_t x) { return std::pair{H - 1 - y, x}; });
}

/// One counter-clockwise quarter turn; an H x W sample becomes W x H.
inline Sample rot90(const Sample& s) {
  const std::size_t W = s.mask.w;
  return data_detail::remap(s, W, s.mask.h, [&](std::size_t y, std::size_t x) { return std::pair{x, W - 1 - y}; });
}

/// Flips, then rotation, applied identically to every image channel and the mask.
inline Sample apply_augment(const Sample& s, const AugmentDraw& d) {
  Sample out = s;
  if (d.hflip) out = hflip(out);
  if (d.vflip) out = vflip(out);
  for (int i = 0; i < ((d.quarter_turns % 4) + 4) % 4; ++i) out = rot90(out);
  return out;
}

inline Sample augment(const Sample& s, Rng& rng) { return apply_augment(s, draw_augment(rng)); }

/// Maps raw mask pixel values to class labels; file lines are `label value`.
class LabelTable {
 public:
  LabelTable() : LabelTable(std::map<int, std::uint8_t>{{0, 0}, {255, 1}}) {}
  explicit LabelTable(std::map<int, std::uint8_t> value_to_label) : map_(std::move(value_to_label)) {}

  static LabelTable identity(std::size_t classes) {
    std::map<int, std::uint8_t> m;
    for (std::size_t c = 0; c < classes; ++c) m[static_cast<int>(c)] = static_cast<std::uint8_t>(c);
    return LabelTable(m);
  }

  static LabelTable parse(const std::string& text) {
    std::map<int, std::uint8_t> m;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      std::istringstream ls(line);
      int label = 0, value = 0;
      if (!(ls >> label)) continue;
      check(static_cast<bool>(ls >> value) && label >= 0 && label < 256 && value >= 0 && value < 256,
            ErrorKind::io, "label table line " + std::to_string(lineno) + ": expected 'label value' in 0..255");
      m[value] = static_cast<std::uint8_t>(label);
    }
    check(!m.empty(), ErrorKind::io, "label table is empty");
    return LabelTable(m);
  }

  static LabelTable load(const std::string& path) {
    std::ifstream f(path);
    check(static_cast<bool>(f), ErrorKind::not_found, "label table not found: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  std::uint8_t label_of(int value) const {
    auto it = map_.find(value);
    check(it != map_.end(), ErrorKind::unknown_label,
          "mask value " + std::to_string(value) + " is not in the label table");
    return it->second;
  }

  /// Pixel value used when writing label l (the smallest value mapping to it).
  std::uint8_t value_of(std::uint8_t label) const {
    for (const auto& [v, l] : map_)
      if (l == label) return static_cast<std::uint8_t>(v);
    throw Error(ErrorKind::unknown_label, "label " + std::to_string(label) + " has no pixel value in the table");
  }

  std::string to_text() const {
    std::string s;
    for (const auto& [v, l] : map_) s += std::to_string(l) + " " + std::to_string(v) + "\n";
    return s;
  }

 private:
  std::map<int, std::uint8_t> map_;
};

inline Image8 to_image8(const Tensor& image) {
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  Image8 img{W, H, C, std::vector<std::uint8_t>(C * H * W)};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c)
        img.pixels[(y * W + x) * C + c] =
            static_cast<std::uint8_t>(std::lround(data_detail::clamp01(image.at(c, y, x)) * 255.0));
  return img;
}

inline Image8 mask_to_image8(const Mask& m, const LabelTable& table) {
  Image8 img{m.w, m.h, 1, std::vector<std::uint8_t>(m.h * m.w)};
  for (std::size_t i = 0; i < m.labels.size(); ++i) img.pixels[i] = table.value_of(m.labels[i]);
  return img;
}

namespace data_detail {

/// Align-corners-false bilinear resize of [C, H, W].
inline Tensor resize_bilinear(const Tensor& in, std::size_t OH, std::size_t OW) {
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  if (H == OH && W == OW) return in;
  Tensor out({C, OH, OW});
  auto tap = [](std::size_t o, std::size_t n_in, std::size_t n_out) {
    double s = (o + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    s = std::max(s, 0.0);
    std::size_t i0 = std::min(static_cast<std::size_t>(s), n_in - 1);
    const std::size_t i1 = std::min(i0 + 1, n_in - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  for (std::size_t y = 0; y < OH; ++y) {
    const auto [y0, y1, fy] = tap(y, H, OH);
    for (std::size_t x = 0; x < OW; ++x) {
      const auto [x0, x1, fx] = tap(x, W, OW);
      for (std::size_t c = 0; c < C; ++c)
        out.at(c, y, x) = (1 - fy) * ((1 - fx) * in.at(c, y0, x0) + fx * in.at(c, y0, x1)) +
                          fy * ((1 - fx) * in.at(c, y1, x0) + fx * in.at(c, y1, x1));
    }
  }
  return out;
}

inline Mask resize_nearest(const Mask& m, std::size_t OH, std::size_t OW) {
  if (m.h == OH && m.w == OW) return m;
  Mask out{OH, OW, std::vector<std::uint8_t>(OH * OW)};
  for (std::size_t y = 0; y < OH; ++y)
    for (std::size_t x = 0; x < OW; ++x)
      out.labels[y * OW + x] = m.labels[std::min(y * m.h / OH, m.h - 1) * m.w + std::min(x * m.w / OW, m.w - 1)];
  return out;
}

}  // namespace data_detail

/// Decodes an image/mask pair, maps mask values through the table, and resizes
/// to target x target (0 keeps the native size).
inline Sample load_pair(const std::string& image_path, const std::string& mask_path, const LabelTable& table,
                        std::size_t target = 0) {
  const Image8 img = read_image(image_path);
  const Image8 msk = read_image(mask_path, true);
  check(msk.channels == 1, ErrorKind::io, mask_path + ": mask must be single-channel");
  check(img.width == msk.width && img.height == msk.height, ErrorKind::shape,
        "image " + image_path + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) + " but mask is " +
            std::to_string(msk.width) + "x" + std::to_string(msk.height));
  const std::size_t H = img.height, W = img.width;
  Sample s;
  s.image = Tensor({3, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        s.image.at(c, y, x) = img.pixels[(y * W + x) * img.channels + (img.channels == 3 ? c : 0)] / 255.0;
  s.mask = Mask{H, W, std::vector<std::uint8_t>(H * W)};
  for (std::size_t i = 0; i < H * W; ++i) s.mask.labels[i] = table.label_of(msk.pixels[i]);
  if (target > 0 && (H != target || W != target)) {
    s.image = data_detail::resize_bilinear(s.image, target, target);
    s.mask = data_detail::resize_nearest(s.mask, target, target);
  }
  return s;
}

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::vector<std::string> train_stems;
  std::vector<std::string> test_stems;
};

inline std::string sample_stem(std::size_t i) {
  std::string n = std::to_string(i);
  return "sample_" + std::string(n.size() < 5 ? 5 - n.size() : 0, '0') + n;
}

/// Writes images/<stem>.png, masks/<stem>.png, manifest.csv and labels.txt.
/// The first ceil(80%) of the samples form the training split.
inline void write_dataset(const std::string& dir, const std::vector<Sample>& samples,
                          const LabelTable& table = LabelTable()) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  const std::size_t n_train = (samples.size() * 8 + 9) / 10;
  std::ofstream manifest(fs::path(dir) / "manifest.csv", std::ios::trunc);
  check(static_cast<bool>(manifest), ErrorKind::io, "cannot write manifest in " + dir);
  manifest << "stem,split\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string stem = sample_stem(i);
    write_image((fs::path(dir) / "images" / (stem + ".png")).string(), to_image8(samples[i].image));
    write_image((fs::path(dir) / "masks" / (stem + ".png")).string(), mask_to_image8(samples[i].mask, table));
    manifest << stem << ',' << (i < n_train ? "train" : "test") << '\n';
  }
  std::ofstream labels(fs::path(dir) / "labels.txt", std::ios::trunc);
  labels << table.to_text();
}

inline Dataset load_dataset(const std::string& dir, std::size_t target = 0) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  check(fs::is_directory(root), ErrorKind::not_found, "dataset directory not found: " + dir);
  std::ifstream manifest(root / "manifest.csv");
  check(static_cast<bool>(manifest), ErrorKind::not_found, "dataset manifest not found: " + (root / "manifest.csv").string());
  const LabelTable table =
      fs::exists(root / "labels.txt") ? LabelTable::load((root / "labels.txt").string()) : LabelTable();
  Dataset ds;
  std::string line;
  std::getline(manifest, line);
  check(line.rfind("stem,split", 0) == 0, ErrorKind::io, "manifest.csv must start with header 'stem,split'");
  while (std::getline(manifest, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    check(comma != std::string::npos, ErrorKind::io, "manifest line '" + line + "' is not 'stem,split'");
    const std::string stem = line.substr(0, comma), split = line.substr(comma + 1);
    check(split == "train" || split == "test", ErrorKind::io, "manifest split must be train or test, got '" + split + "'");
    Sample s = load_pair((root / "images" / (stem + ".png")).string(), (root / "masks" / (stem + ".png")).string(),
                         table, target);
    (split == "train" ? ds.train : ds.test).push_back(std::move(s));
    (split == "train" ? ds.train_stems : ds.test_stems).push_back(stem);
  }
  return ds;
}

/// Stacks samples into images [B, 3, H, W] and labels [B, H, W].
struct Batch {
  Tensor images;
  std::vector<std::uint8_t> labels;
};

inline Batch make_batch(const std::vector<const Sample*>& samples) {
  check(!samples.empty(), ErrorKind::invalid_argument, "make_batch: no samples");
  const Shape& s0 = samples[0]->image.shape();
  Batch b;
  b.images = Tensor({samples.size(), s0[0], s0[1], s0[2]});
  const std::size_t per = samples[0]->image.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    check(samples[i]->image.shape() == s0, ErrorKind::shape, "make_batch: samples differ in shape");
    std::copy(samples[i]->image.data().begin(), samples[i]->image.data().end(), b.images.ptr() + i * per);
    b.labels.insert(b.labels.end(), samples[i]->mask.labels.begin(), samples[i]->mask.labels.end());
  }
  return b;
}

}  // namespace urwkv
