#pragma once

// Binary checkpoint, all integers little-endian:
//   "MURW" | u32 version | u32 len + config text | u64 step | u32 count |
//   count x (u32 len + name | u32 rank | rank x u64 dim | f32 payload)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "urwkv/config.hpp"
#include "urwkv/error.hpp"
#include "urwkv/model.hpp"

namespace urwkv {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'M', 'U', 'R', 'W'};

namespace ckpt_detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void f32(float f) { uint(std::bit_cast<std::uint32_t>(f)); }
  const std::vector<unsigned char>& data() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<unsigned char> buf) : buf_(std::move(buf)) {}

  void need(std::size_t n, const char* what) {
    check(pos_ + n <= buf_.size(), ErrorKind::truncated,
          std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos_));
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(const char* what) {
    const auto n = uint<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32(const char* what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::string& path) {
  check(!path.empty(), ErrorKind::not_found, "checkpoint path is empty");
  std::ifstream f(path, std::ios::binary);
  check(static_cast<bool>(f), ErrorKind::not_found, "checkpoint not found: " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace ckpt_detail

struct CheckpointHeader {
  ModelConfig config;
  std::uint64_t step = 0;
};

inline std::vector<unsigned char> encode_checkpoint(const Model& model, std::uint64_t step) {
  ckpt_detail::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.uint(kCheckpointVersion);
  w.str(to_text(model.config()));
  w.uint(static_cast<std::uint64_t>(step));
  w.uint(static_cast<std::uint32_t>(model.params().size()));
  model.params().for_each([&](const Parameter& p) {
    w.str(p.name);
    w.uint(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) w.uint(static_cast<std::uint64_t>(d));
    for (double x : p.value.data()) w.f32(static_cast<float>(x));
  });
  return w.data();
}

inline void save_checkpoint(const Model& model, const std::string& path, std::uint64_t step = 0) {
  check(!path.empty(), ErrorKind::not_found, "checkpoint path is empty");
  const auto bytes = encode_checkpoint(model, step);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check(static_cast<bool>(f), ErrorKind::io, "cannot write checkpoint: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  check(static_cast<bool>(f), ErrorKind::io, "failed writing checkpoint: " + path);
}

namespace ckpt_detail {

inline CheckpointHeader read_header(Reader& r) {
  r.need(4, "magic");
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.uint<std::uint8_t>("magic"));
  check(std::memcmp(magic, kCheckpointMagic, 4) == 0, ErrorKind::bad_magic, "not a checkpoint (bad magic)");
  const auto version = r.uint<std::uint32_t>("version");
  check(version == kCheckpointVersion, ErrorKind::version,
        "checkpoint version " + std::to_string(version) + " unsupported (expected " +
            std::to_string(kCheckpointVersion) + ")");
  CheckpointHeader h;
  h.config = parse_model_config(r.str("config"));
  h.step = r.uint<std::uint64_t>("step");
  return h;
}

inline void read_tensors(Reader& r, Model& model) {
  const auto count = r.uint<std::uint32_t>("tensor count");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str("tensor name");
    Parameter* p = model.params().find(name);
    check(p != nullptr, ErrorKind::unknown_tensor, "checkpoint has unknown tensor '" + name + "'");
    check(seen.insert(name).second, ErrorKind::unknown_tensor, "checkpoint repeats tensor '" + name + "'");
    const auto rank = r.uint<std::uint32_t>("tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>("dims")));
    check(shape == p->value.shape(), ErrorKind::config_mismatch,
          "tensor '" + name + "' has shape " + to_string(shape) + ", model expects " + to_string(p->value.shape()));
    for (double& x : p->value.data()) x = static_cast<double>(r.f32("payload"));
  }
  check(seen.size() == model.params().size(), ErrorKind::missing_tensor,
        "checkpoint is missing " + std::to_string(model.params().size() - seen.size()) + " tensor(s)");
  check(r.at_end(), ErrorKind::invalid_argument, "checkpoint has trailing bytes");
}

}  // namespace ckpt_detail

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  ckpt_detail::Reader r(ckpt_detail::read_file(path));
  return ckpt_detail::read_header(r);
}

struct LoadedModel {
  Model model;
  std::uint64_t step = 0;
};

/// Rebuilds the model from the embedded config and fills its parameters.
inline LoadedModel load_checkpoint(const std::string& path) {
  ckpt_detail::Reader r(ckpt_detail::read_file(path));
  const CheckpointHeader h = ckpt_detail::read_header(r);
  LoadedModel out{Model(h.config), h.step};
  ckpt_detail::read_tensors(r, out.model);
  return out;
}

/// Loads into an existing model; the embedded config must match its config.
inline std::uint64_t load_checkpoint_into(Model& model, const std::string& path) {
  ckpt_detail::Reader r(ckpt_detail::read_file(path));
  const CheckpointHeader h = ckpt_detail::read_header(r);
  check(h.config == model.config(), ErrorKind::config_mismatch,
        "checkpoint config (" + h.config.variant() + ", dims " + std::to_string(h.config.dims) +
            ") does not match the model config (" + model.config().variant() + ", dims " +
            std::to_string(model.config().dims) + ")");
  ckpt_detail::read_tensors(r, model);
  return h.step;
}

/// Rounds every parameter to float precision, as a save/load round trip would.
inline void round_params_to_f32(Model& model) {
  model.params().for_each([](Parameter& p) {
    for (double& x : p.value.data()) x = static_cast<double>(static_cast<float>(x));
  });
}

}  // namespace urwkv
