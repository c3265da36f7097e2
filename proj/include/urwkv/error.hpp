#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace urwkv {

enum class ErrorKind {
  shape,
  invalid_argument,
  empty_sequence,
  non_finite,
  state,
  io,
  not_found,
  bad_magic,
  version,
  truncated,
  unknown_tensor,
  missing_tensor,
  config,
  config_mismatch,
  unknown_label,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::empty_sequence: return "empty_sequence";
    case ErrorKind::non_finite: return "non_finite";
    case ErrorKind::state: return "state";
    case ErrorKind::io: return "io";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::bad_magic: return "bad_magic";
    case ErrorKind::version: return "version";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::unknown_tensor: return "unknown_tensor";
    case ErrorKind::missing_tensor: return "missing_tensor";
    case ErrorKind::config: return "config";
    case ErrorKind::config_mismatch: return "config_mismatch";
    case ErrorKind::unknown_label: return "unknown_label";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void check(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace urwkv
