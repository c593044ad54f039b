// Dense tensors and the reverse-mode gradient tape.
//
// A Tensor is a shared handle to a row-major buffer of Real (f32 unless the
// build overrides it). Ops in ops.hpp produce new tensors and, while a Tape
// is active and any input requires a gradient, append a node holding the
// backward closure. Tape::backward walks the nodes in reverse and
// accumulates into the inputs' grad buffers.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mnx/config.hpp"

namespace mnx::inline MNX_ABI {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  bool leaf = true;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = 0.0f) : p_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape) {
      if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    p_->data.assign(static_cast<std::size_t>(mnx::numel(shape)), fill);
    p_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<Real> values) : p_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape) {
      if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (static_cast<std::int64_t>(values.size()) != mnx::numel(shape)) {
      throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                           to_string(shape));
    }
    p_->shape = std::move(shape);
    p_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor full(Shape shape, Real v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(Real v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  int ndim() const { return static_cast<int>(p_->shape.size()); }
  std::int64_t dim(int axis) const {
    if (axis < 0) axis += ndim();
    return p_->shape.at(static_cast<std::size_t>(axis));
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(p_->data.size()); }

  std::span<Real> data() { return p_->data; }
  std::span<const Real> data() const { return p_->data; }
  Real* ptr() { return p_->data.data(); }
  const Real* ptr() const { return p_->data.data(); }
  Real operator[](std::int64_t i) const { return p_->data[static_cast<std::size_t>(i)]; }
  Real& operator[](std::int64_t i) { return p_->data[static_cast<std::size_t>(i)]; }

  Real item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return p_->data[0];
  }

  bool requires_grad() const { return p_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    p_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return p_->leaf; }

  bool has_grad() const { return !p_->grad.empty(); }
  std::span<const Real> grad() const { return p_->grad; }
  std::span<Real> grad_mut() { return p_->grad; }
  void zero_grad() { std::fill(p_->grad.begin(), p_->grad.end(), 0.0f); }
  void drop_grad() { std::vector<Real>().swap(p_->grad); }

  // Copy of the values with no tape history.
  Tensor detach() const { return Tensor(shape(), p_->data); }

  bool same(const Tensor& o) const { return p_ == o.p_; }
  detail::TensorImpl* impl() const { return p_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> p_;
};

class Tape;

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const Real> grad_out)>;

  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
    if (consumed_) throw TapeError("record on a consumed tape");
    nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(fn)});
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Populates grads of every requires_grad leaf reachable from the tape.
  // Leaves recorded on the tape but not reached from `loss` get zero grads.
  void backward(const Tensor& loss) {
    if (consumed_) throw TapeError("tape already consumed by a previous backward()");
    if (!loss.defined() || loss.numel() != 1) throw TapeError("backward() needs a scalar loss");
    std::size_t end = nodes_.size();
    while (end > 0 && !nodes_[end - 1].output.same(loss)) --end;
    if (end == 0) throw TapeError("loss tensor was not produced on this tape");
    consumed_ = true;

    loss.impl()->grad.assign(1, 1.0f);
    for (std::size_t i = end; i-- > 0;) {
      Node& n = nodes_[i];
      auto* out = n.output.impl();
      if (!out->grad.empty()) n.backward(out->grad);
      std::vector<Real>().swap(out->grad);
    }
    std::unordered_set<detail::TensorImpl*> seen;
    for (auto& n : nodes_) {
      for (auto& in : n.inputs) {
        auto* p = in.impl();
        if (p && p->leaf && p->requires_grad && p->grad.empty() && seen.insert(p).second) {
          p->grad.assign(p->data.size(), 0.0f);
        }
      }
    }
    nodes_.clear();
  }

  void clear() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Makes `tape` the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = &tape; }
  ~TapeScope() { detail::active_tape_slot() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Suspends recording, e.g. for evaluation inside a training step.
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
  ~NoGradScope() { detail::active_tape_slot() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

// Grad buffer of `t`, allocated on first use; nullptr when t takes no grad.
inline Real* grad_buffer(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  auto* p = t.impl();
  if (p->grad.empty()) p->grad.assign(p->data.size(), 0.0f);
  return p->grad.data();
}

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Records `fn` as the backward of `out` if a tape is active and some input
// takes a gradient.
inline void record(const char* op, std::vector<Tensor> inputs, Tensor& out, Tape::BackwardFn fn) {
  Tape* tape = active_tape();
  if (!tape) return;
  bool any = false;
  for (auto& t : inputs) any = any || (t.defined() && t.requires_grad());
  if (!any) return;
  out.set_requires_grad(true);
  out.impl()->leaf = false;
  tape->record(op, std::move(inputs), out, std::move(fn));
}

inline void debug_check_finite([[maybe_unused]] const Tensor& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (Real v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
#endif
}

}  // namespace detail

// FLOP tally fed by conv/linear and scan kernels; lets the analytic cost
// model be cross-checked against an instrumented forward pass.
inline std::uint64_t& flop_tally() {
  thread_local std::uint64_t count = 0;
  return count;
}

}  // namespace mnx
