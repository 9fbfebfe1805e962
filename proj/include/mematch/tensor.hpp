#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mematch/error.hpp"
#include "mematch/rng.hpp"

namespace mematch {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError(concat("non-positive extent ", d));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major tensor. A Tensor is a shared handle: copies alias the same
// buffer, which is what lets tape closures see gradients accumulated after
// the forward pass. The gradient buffer exists only while requires_grad is
// set and always matches the data shape.
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(shape_numel(t.impl_->shape), S(0));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& v : t.impl_->data) v = value;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError(concat("data length ", data.size(), " does not match shape ",
                              shape_str(shape)));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& v : t.impl_->data) v = static_cast<S>(rng.uniform(lo, hi));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }

  // Shared-handle semantics: a const Tensor is a const handle to shared
  // mutable storage (like shared_ptr), so the accessors stay const-qualified.
  S* data() const { return impl_->data.data(); }
  S& operator[](std::size_t i) const { return impl_->data[i]; }
  S item() const {
    if (size() != 1) throw ShapeError(concat("item() on tensor of shape ", shape_str(shape())));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
      impl_->grad.assign(impl_->data.size(), S(0));
    } else {
      impl_->grad.clear();
      impl_->grad.shrink_to_fit();
    }
  }

  S* grad() const {
    check_grad();
    return impl_->grad.data();
  }

  void zero_grad() {
    if (requires_grad()) impl_->grad.assign(impl_->data.size(), S(0));
  }

  // Detached copy of the values (no grad, fresh buffer).
  Tensor clone_values() const { return from_data(shape(), impl_->data); }

  bool same_buffer(const Tensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const {
    for (S v : impl_->data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;
    bool requires_grad = false;
  };

  void check_grad() const {
    if (!impl_ || !impl_->requires_grad) {
      throw ValueError("grad() on tensor without requires_grad");
    }
  }

  std::shared_ptr<Impl> impl_;
};

// Dynamic tape: every differentiable op appends a backward closure during the
// forward pass; backward() replays them in reverse. Closures accumulate with
// += into input gradients, so a tensor used k times receives k contributions
// exactly once each.
template <class S>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Tensor<S>& loss) {
    if (loss.size() != 1) {
      throw ShapeError(concat("backward: loss must be scalar, got ", shape_str(loss.shape())));
    }
    if (!loss.requires_grad()) {
      throw ValueError("backward: loss is detached from this tape (requires_grad is false)");
    }
    if (used_) {
      throw ValueError("backward: tape already replayed; build a fresh graph");
    }
    used_ = true;
    loss.grad()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  bool used() const { return used_; }

 private:
  std::vector<std::function<void()>> nodes_;
  bool used_ = false;
};

namespace detail {

template <class S>
inline bool want_grad(Tape<S>* tape, const Tensor<S>& a) {
  return tape != nullptr && a.requires_grad();
}

template <class S>
inline bool want_grad(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

template <class S>
inline bool want_grad(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& c) {
  return tape != nullptr && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

}  // namespace detail

}  // namespace mematch
