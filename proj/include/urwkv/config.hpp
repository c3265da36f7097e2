#pragma once

// Line-oriented `key = value` configuration (a TOML subset): `#` starts a
// comment, blank lines are ignored, lists are comma-separated.

#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "urwkv/error.hpp"

namespace urwkv {

enum class SkipMode { concat, add };

struct ModelConfig {
  std::size_t dims = 32;
  std::array<std::size_t, 4> depths{2, 2, 2, 2};
  std::array<std::size_t, 4> decoder_depths{2, 2, 2, 2};
  std::size_t bottleneck_depth = 1;
  std::size_t patch = 4;
  std::size_t hidden_ratio = 4;
  std::size_t classes = 2;
  std::size_t image_size = 64;
  bool fawa = true;
  bool mscf = true;
  bool qshift_literal = false;
  bool per_band_params = false;
  bool per_branch_params = false;
  SkipMode skip_mode = SkipMode::concat;
  bool nearest_upsample = false;

  std::string variant() const {
    if (fawa && mscf) return "dagger";
    if (!fawa && !mscf) return "base";
    return fawa ? "fawa" : "mscf";
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 8;
  std::size_t patience = 10;
  std::size_t freeze_epochs = 10;
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double ce_weight = 0.5;
  double dice_weight = 0.5;
  bool augment = true;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: leave the URWKV_THREADS / hardware default

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (...) {
    throw Error(ErrorKind::config, "config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  check(pos == v.size(), ErrorKind::config, "config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (...) {
    throw Error(ErrorKind::config, "config: '" + key + "' expects a number, got '" + v + "'");
  }
  check(pos == v.size(), ErrorKind::config, "config: '" + key + "' expects a number, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorKind::config, "config: '" + key + "' expects true/false, got '" + v + "'");
}

inline std::array<std::size_t, 4> parse_depths(const std::string& key, const std::string& v) {
  std::array<std::size_t, 4> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t n = 0;
  while (std::getline(ss, item, ',')) {
    check(n < 4, ErrorKind::config, "config: '" + key + "' expects exactly 4 comma-separated values");
    out[n++] = parse_size(key, trim(item));
  }
  check(n == 4, ErrorKind::config, "config: '" + key + "' expects exactly 4 comma-separated values");
  return out;
}

inline std::string join(const std::array<std::size_t, 4>& a) {
  return std::to_string(a[0]) + "," + std::to_string(a[1]) + "," + std::to_string(a[2]) + "," + std::to_string(a[3]);
}

}  // namespace config_detail

/// Named presets. micro: CI-scale; tiny: Dims 192 with depths 2/2/6/2.
inline ModelConfig preset(const std::string& name) {
  ModelConfig c;
  if (name == "micro") {
    c.dims = 32;
    c.depths = {2, 2, 2, 2};
  } else if (name == "tiny") {
    c.dims = 192;
    c.depths = {2, 2, 6, 2};
    c.image_size = 512;
  } else {
    throw Error(ErrorKind::config, "config: unknown preset '" + name + "' (expected micro or tiny)");
  }
  return c;
}

/// Applies one key; returns false when the key is not recognised.
inline bool apply_key(RunConfig& rc, const std::string& key, const std::string& value) {
  using namespace config_detail;
  ModelConfig& m = rc.model;
  TrainConfig& t = rc.train;
  if (key == "preset") {
    const ModelConfig p = preset(value);
    m.dims = p.dims;
    m.depths = p.depths;
    m.image_size = p.image_size;
  } else if (key == "variant") {
    check(value == "base" || value == "dagger", ErrorKind::config,
          "config: variant must be base or dagger, got '" + value + "'");
    m.fawa = m.mscf = value == "dagger";
  } else if (key == "dims") m.dims = parse_size(key, value);
  else if (key == "depths") m.depths = parse_depths(key, value);
  else if (key == "decoder_depths") m.decoder_depths = parse_depths(key, value);
  else if (key == "bottleneck_depth") m.bottleneck_depth = parse_size(key, value);
  else if (key == "patch") m.patch = parse_size(key, value);
  else if (key == "hidden_ratio") m.hidden_ratio = parse_size(key, value);
  else if (key == "classes") m.classes = parse_size(key, value);
  else if (key == "image_size") m.image_size = parse_size(key, value);
  else if (key == "fawa") m.fawa = parse_bool(key, value);
  else if (key == "mscf") m.mscf = parse_bool(key, value);
  else if (key == "qshift_literal") m.qshift_literal = parse_bool(key, value);
  else if (key == "per_band_params") m.per_band_params = parse_bool(key, value);
  else if (key == "per_branch_params") m.per_branch_params = parse_bool(key, value);
  else if (key == "skip_mode") {
    check(value == "concat" || value == "add", ErrorKind::config,
          "config: skip_mode must be concat or add, got '" + value + "'");
    m.skip_mode = value == "concat" ? SkipMode::concat : SkipMode::add;
  } else if (key == "upsample") {
    check(value == "bilinear" || value == "nearest", ErrorKind::config,
          "config: upsample must be bilinear or nearest, got '" + value + "'");
    m.nearest_upsample = value == "nearest";
  } else if (key == "epochs") t.epochs = parse_size(key, value);
  else if (key == "batch_size") t.batch_size = parse_size(key, value);
  else if (key == "patience") t.patience = parse_size(key, value);
  else if (key == "freeze_epochs") t.freeze_epochs = parse_size(key, value);
  else if (key == "lr") t.lr = parse_double(key, value);
  else if (key == "weight_decay") t.weight_decay = parse_double(key, value);
  else if (key == "ce_weight") t.ce_weight = parse_double(key, value);
  else if (key == "dice_weight") t.dice_weight = parse_double(key, value);
  else if (key == "augment") t.augment = parse_bool(key, value);
  else if (key == "seed") t.seed = parse_size(key, value);
  else if (key == "threads") t.threads = parse_size(key, value);
  else return false;
  return true;
}

/// Parses `key = value` text on top of rc; unknown keys are errors.
inline void apply_text(RunConfig& rc, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    check(eq != std::string::npos, ErrorKind::config,
          "config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    check(apply_key(rc, key, value), ErrorKind::config,
          "config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
}

inline void apply_override(RunConfig& rc, const std::string& kv) {
  const auto eq = kv.find('=');
  check(eq != std::string::npos, ErrorKind::config, "override must be key=value, got '" + kv + "'");
  const std::string key = config_detail::trim(kv.substr(0, eq));
  check(apply_key(rc, key, config_detail::trim(kv.substr(eq + 1))), ErrorKind::config,
        "override: unknown key '" + key + "'");
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  check(static_cast<bool>(f), ErrorKind::not_found, "config file not found: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  RunConfig rc;
  apply_text(rc, ss.str());
  return rc;
}

/// Every violated constraint, one message each; empty when valid.
inline std::vector<std::string> validation_errors(const ModelConfig& m) {
  std::vector<std::string> errs;
  if (m.dims == 0 || m.dims % 4 != 0) errs.push_back("dims must be a positive multiple of 4 (Q-Shift quarters)");
  for (std::size_t d : m.depths)
    if (d < 1) errs.push_back("every encoder depth must be >= 1");
  for (std::size_t d : m.decoder_depths)
    if (d < 1) errs.push_back("every decoder depth must be >= 1");
  if (m.bottleneck_depth < 1) errs.push_back("bottleneck_depth must be >= 1");
  if (m.patch != 4) errs.push_back("patch must be 4 (three 2x merges reach the /32 stage)");
  if (m.hidden_ratio < 1) errs.push_back("hidden_ratio must be >= 1");
  if (m.classes < 2) errs.push_back("classes must be >= 2");
  if (m.image_size == 0 || m.image_size % 32 != 0) errs.push_back("image_size must be a positive multiple of 32");
  else if (m.fawa && m.image_size % 64 != 0)
    errs.push_back("image_size must be a multiple of 64 when fawa is enabled (even /32 grid for the wavelet)");
  return errs;
}

inline void validate(const ModelConfig& m) {
  const auto errs = validation_errors(m);
  if (errs.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& e : errs) msg += " " + e + ";";
  throw Error(ErrorKind::config, msg);
}

inline std::string to_text(const ModelConfig& m) {
  std::ostringstream os;
  os << "dims = " << m.dims << '\n'
     << "depths = " << config_detail::join(m.depths) << '\n'
     << "decoder_depths = " << config_detail::join(m.decoder_depths) << '\n'
     << "bottleneck_depth = " << m.bottleneck_depth << '\n'
     << "patch = " << m.patch << '\n'
     << "hidden_ratio = " << m.hidden_ratio << '\n'
     << "classes = " << m.classes << '\n'
     << "image_size = " << m.image_size << '\n'
     << "fawa = " << (m.fawa ? "true" : "false") << '\n'
     << "mscf = " << (m.mscf ? "true" : "false") << '\n'
     << "qshift_literal = " << (m.qshift_literal ? "true" : "false") << '\n'
     << "per_band_params = " << (m.per_band_params ? "true" : "false") << '\n'
     << "per_branch_params = " << (m.per_branch_params ? "true" : "false") << '\n'
     << "skip_mode = " << (m.skip_mode == SkipMode::concat ? "concat" : "add") << '\n'
     << "upsample = " << (m.nearest_upsample ? "nearest" : "bilinear") << '\n';
  return os.str();
}

inline std::string to_text(const TrainConfig& t) {
  std::ostringstream os;
  os.precision(17);
  os << "epochs = " << t.epochs << '\n'
     << "batch_size = " << t.batch_size << '\n'
     << "patience = " << t.patience << '\n'
     << "freeze_epochs = " << t.freeze_epochs << '\n'
     << "lr = " << t.lr << '\n'
     << "weight_decay = " << t.weight_decay << '\n'
     << "ce_weight = " << t.ce_weight << '\n'
     << "dice_weight = " << t.dice_weight << '\n'
     << "augment = " << (t.augment ? "true" : "false") << '\n'
     << "seed = " << t.seed << '\n'
     << "threads = " << t.threads << '\n';
  return os.str();
}

inline std::string to_text(const RunConfig& rc) { return to_text(rc.model) + to_text(rc.train); }

inline ModelConfig parse_model_config(const std::string& text) {
  RunConfig rc;
  apply_text(rc, text);
  return rc.model;
}

}  // namespace urwkv
