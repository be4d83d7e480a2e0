// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qatf {

using Shape = std::vector<std::int64_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

inline std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Storage aligned to a cache line. Vectorised reductions peel by address,
/// so a fixed alignment keeps results independent of where the heap lands.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign))); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(kAlign)); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorNode {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
};

/// Handle to a dense row-major tensor. Copies share storage; use clone() for
/// a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}
  Tensor(Shape shape, std::initializer_list<T> data) : Tensor(std::move(shape), Buffer<T>(data)) {}

  Tensor(Shape shape, Buffer<T> data) : node_(std::make_shared<TensorNode<T>>()) {
    for (auto d : shape)
      if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
    if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), Buffer<T>(static_cast<std::size_t>(n), T(0)));
  }
  static Tensor full(Shape shape, T value) {
    auto n = numel_of(shape);
    return Tensor(std::move(shape), Buffer<T>(static_cast<std::size_t>(n), value));
  }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const {
    if (i < 0) i += rank();
    return node_->shape.at(static_cast<std::size_t>(i));
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T> values() const { return std::vector<T>(node_->data.begin(), node_->data.end()); }
  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  /// Gradient buffer, zero-allocated on first use. The handle is shared, so
  /// this is available on const handles (backward closures hold those).
  std::span<T> grad_buffer() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void drop_grad() { node_->grad.clear(); }

  Tensor clone() const { return Tensor(node_->shape, node_->data); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of differentiable operations. Ops record onto the tape that
/// is active on the current thread (see Tape::Scope); backward replays the
/// records in exact reverse order.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T> out_grad)>;

  struct Entry {
    std::string name;
    std::shared_ptr<TensorNode<T>> output;
    BackwardFn backward;
  };

  class Scope {
   public:
    explicit Scope(Tape& tape) : prev_(current()) { current() = &tape; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& current() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  void record(std::string name, std::shared_ptr<TensorNode<T>> output, BackwardFn fn) {
    entries_.push_back({std::move(name), std::move(output), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  void clear() { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every node that requires a
  /// gradient. Leaf gradients accumulate.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    loss.grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      const auto& out = *it->output;
      if (out.grad.empty()) continue;
      it->backward(std::span<const T>(out.grad));
    }
  }

 private:
  std::vector<Entry> entries_;
};

namespace detail {

inline std::uint64_t& op_counter() {
  thread_local std::uint64_t counter = 0;
  return counter;
}

template <typename T>
void check_finite(std::string_view op, const Tensor<T>& out) {
  ++op_counter();
  auto d = out.data();
  if (!Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(d.data(), static_cast<Eigen::Index>(d.size()))
           .allFinite()) {
    throw NonFiniteError("op '" + std::string(op) + "' (#" + std::to_string(op_counter()) +
                         ") produced a non-finite value");
  }
}

}  // namespace detail

/// Validates `out`, then records `backward` on the active tape if any input
/// requires a gradient. Building block for every differentiable op.
template <typename T, typename Backward>
Tensor<T> record_op(std::string_view name, Tensor<T> out,
                    std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  detail::check_finite(name, out);
  auto* tape = Tape<T>::current();
  if (tape == nullptr) return out;
  bool needs = false;
  for (const auto* in : inputs) needs = needs || in->requires_grad();
  if (!needs) return out;
  out.set_requires_grad(true);
  tape->record(std::string(name), out.node(), std::forward<Backward>(backward));
  return out;
}

/// Disables recording for its lifetime (evaluation / teacher forwards).
template <typename T>
class NoGrad {
 public:
  NoGrad() : prev_(Tape<T>::current()) { Tape<T>::current() = nullptr; }
  ~NoGrad() { Tape<T>::current() = prev_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace qatf
