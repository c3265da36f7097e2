#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "urwkv/error.hpp"
#include "urwkv/tape.hpp"
#include "urwkv/tensor.hpp"

namespace urwkv {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;
};

/// Owns every trainable tensor under a unique dotted name, in creation order.
/// Parameter addresses are stable for the lifetime of the store.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter& add(const std::string& name, Tensor init) {
    check(!index_.count(name), ErrorKind::invalid_argument, "duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->grad = Tensor(init.shape());
    p->value = std::move(init);
    index_[name] = p.get();
    items_.push_back(std::move(p));
    return *items_.back();
  }

  Parameter* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
  }
  const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
  }
  Parameter& at(const std::string& name) {
    Parameter* p = find(name);
    check(p != nullptr, ErrorKind::unknown_tensor, "unknown parameter '" + name + "'");
    return *p;
  }

  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) p->grad.fill(0.0);
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& p : items_) fn(*p);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& p : items_) fn(static_cast<const Parameter&>(*p));
  }

 private:
  std::vector<std::unique_ptr<Parameter>> items_;
  std::unordered_map<std::string, Parameter*> index_;
};

/// One forward (and optionally backward) pass: the tape plus the binding of
/// parameters to tape leaves.
class Context {
 public:
  explicit Context(bool training, TapeOptions options = {}) : training_(training), tape_(with_grad(options, training)) {}

  Tape& tape() { return tape_; }
  bool training() const { return training_; }

  Var param(Parameter& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Var v = tape_.leaf(p.value, training_ && !p.frozen);
    bound_.emplace(&p, v);
    return v;
  }

  Var input(Tensor t, bool requires_grad = false) { return tape_.leaf(std::move(t), requires_grad); }

  void backward(const Var& loss) { tape_.backward(loss); }

  /// Adds the gradients of every bound, unfrozen parameter into Parameter::grad.
  void accumulate_grads() {
    for (auto& [p, v] : bound_) {
      const Tensor& g = v.grad();
      if (!p->frozen && g.size() == p->value.size() && g.size() > 0) p->grad += g;
    }
  }

 private:
  static TapeOptions with_grad(TapeOptions o, bool training) {
    o.grad_enabled = training;
    return o;
  }

  bool training_;
  Tape tape_;
  std::unordered_map<Parameter*, Var> bound_;
};

namespace init {

inline Tensor normal_fan_in(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return Tensor::normal({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

inline Tensor linspace(std::size_t n, double lo, double hi) {
  Tensor t({n});
  for (std::size_t i = 0; i < n; ++i)
    t[i] = n > 1 ? lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1) : 0.5 * (lo + hi);
  return t;
}

}  // namespace init

}  // namespace urwkv
