#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>

#include "urwkv/error.hpp"
#include "urwkv/tensor.hpp"

namespace urwkv {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const {
    check(tape_ != nullptr, ErrorKind::state, "use of an unbound Var");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  /// Gradient accumulated by the last backward pass; empty when none reached this node.
  const Tensor& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct TapeOptions {
  bool grad_enabled = true;
#ifdef NDEBUG
  bool check_finite = false;
#else
  bool check_finite = true;
#endif
};

/// Records every forward operation in topological order and replays them in
/// reverse to accumulate gradients. One tape belongs to one forward/backward pass.
class Tape {
 public:
  /// Receives the node's own output value and the gradient flowing into it.
  using BackwardFn = std::function<void(Tape&, const Tensor& out, const Tensor& grad_out)>;

  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return options_.grad_enabled; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var leaf(Tensor value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad && options_.grad_enabled, {}, "leaf"});
    return Var(this, nodes_.size() - 1);
  }

  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs_grad = false;
    for (const Var& in : inputs) {
      check(&in.tape() == this, ErrorKind::state, std::string(op) + ": input recorded on a different tape");
      needs_grad = needs_grad || nodes_[in.id()].requires_grad;
    }
    if (options_.check_finite && !value.all_finite()) {
      throw Error(ErrorKind::non_finite, std::string(op) + " produced non-finite values");
    }
    needs_grad = needs_grad && options_.grad_enabled;
    nodes_.push_back(Node{std::move(value), {}, needs_grad, needs_grad ? std::move(fn) : BackwardFn{}, op});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }

  /// Gradient buffer of a node, zero-initialised on first use; nullptr when the
  /// node does not participate in differentiation.
  Tensor* grad_target(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  void backward(const Var& loss) {
    check(&loss.tape() == this, ErrorKind::state, "backward: loss recorded on a different tape");
    const Node& root = nodes_[loss.id()];
    check(root.value.size() == 1, ErrorKind::shape,
          "backward requires a scalar loss, got shape " + to_string(root.value.shape()));
    check(root.requires_grad, ErrorKind::state, "backward: loss is detached from every trainable input");
    check(!backward_done_, ErrorKind::state, "backward called twice without zero_grad()");
    backward_done_ = true;
    (*grad_target(loss.id()))[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() == n.value.size() && n.grad.size() > 0) n.backward(*this, n.value, n.grad);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad = Tensor();
    backward_done_ = false;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    const char* op = "";
  };

  TapeOptions options_;
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape().value(id_); }
inline bool Var::requires_grad() const { return tape().requires_grad(id_); }
inline const Tensor& Var::grad() const { return tape().grad(id_); }

}  // namespace urwkv
