#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "urwkv/urwkv.hpp"

namespace urwkv::testing {

/// Central differences of a scalar function of one tensor.
inline Tensor numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-5) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / (|b_i| + floor)
inline double max_rel(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / (std::abs(b[i]) + floor));
  return m;
}

inline double max_abs(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Runs f and returns the kind of the urwkv::Error it throws.
template <typename Fn>
std::optional<ErrorKind> error_kind(Fn&& f, std::string* message = nullptr) {
  try {
    f();
  } catch (const Error& e) {
    if (message) *message = e.what();
    return e.kind();
  }
  return std::nullopt;
}

inline std::string tmp_dir(const std::string& name) {
  const std::string dir = std::string(URWKV_TEST_TMP) + "/" + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace urwkv::testing
