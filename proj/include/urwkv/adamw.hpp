#pragma once

// AdamW with decoupled weight decay:
//   p <- p - lr * wd * p
//   m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
//   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>

#include "urwkv/error.hpp"
#include "urwkv/params.hpp"
#include "urwkv/tensor.hpp"

namespace urwkv {

struct AdamWOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct Moments {
  Tensor m;
  Tensor v;
  std::uint64_t step = 0;
};

/// Updates p in place from g; the moments must match p's shape (or be empty on first use).
inline void adamw_update(Tensor& p, const Tensor& g, Moments& s, const AdamWOptions& o) {
  check(g.shape() == p.shape(), ErrorKind::shape,
        "adamw: gradient shape " + to_string(g.shape()) + " does not match parameter " + to_string(p.shape()));
  if (s.m.size() == 0 && p.size() > 0) {
    s.m = Tensor(p.shape());
    s.v = Tensor(p.shape());
  }
  check(s.m.shape() == p.shape() && s.v.shape() == p.shape(), ErrorKind::shape,
        "adamw: moment shape " + to_string(s.m.shape()) + " does not match parameter " + to_string(p.shape()));
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] -= o.lr * o.weight_decay * p[i];
    s.m[i] = o.beta1 * s.m[i] + (1 - o.beta1) * g[i];
    s.v[i] = o.beta2 * s.v[i] + (1 - o.beta2) * g[i] * g[i];
    p[i] -= o.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + o.eps);
  }
}

/// Optimizer state keyed by parameter name. Frozen parameters are skipped
/// entirely: no decay, no moment update, no step count.
class AdamW {
 public:
  explicit AdamW(AdamWOptions o = {}) : opts_(o) {}

  const AdamWOptions& options() const { return opts_; }
  void set_lr(double lr) { opts_.lr = lr; }

  void step(ParamStore& store) {
    store.for_each([&](Parameter& p) {
      if (p.frozen) return;
      adamw_update(p.value, p.grad, state_[p.name], opts_);
    });
  }

  const Moments* moments(const std::string& name) const {
    auto it = state_.find(name);
    return it == state_.end() ? nullptr : &it->second;
  }

 private:
  AdamWOptions opts_;
  std::unordered_map<std::string, Moments> state_;
};

}  // namespace urwkv
