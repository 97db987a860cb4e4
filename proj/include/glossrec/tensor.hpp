#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "glossrec/common.hpp"

namespace glossrec {

template <typename R>
class TapeT;

// Dense row-major tensor. Data and gradient buffers are shared, so copies are
// cheap handles onto the same storage; the tape captures these handles.
template <typename R>
class TensorT {
 public:
  using Storage = std::shared_ptr<std::vector<R>>;

  TensorT() = default;

  explicit TensorT(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<R>>(size_t(count(shape_)), R(0))) {}

  TensorT(std::vector<int> shape, std::vector<R> values) : shape_(std::move(shape)) {
    if (count(shape_) != long(values.size()))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape of " + std::to_string(count(shape_)));
    data_ = std::make_shared<std::vector<R>>(std::move(values));
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int> shape, R v) {
    TensorT t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static TensorT scalar(R v) { return TensorT({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int dim(int i) const { return shape_[size_t(i)]; }
  long numel() const { return data_ ? long(data_->size()) : 0; }
  bool defined() const { return data_ != nullptr; }

  R* data() { return data_->data(); }
  const R* data() const { return data_->data(); }
  std::vector<R>& values() { return *data_; }
  const std::vector<R>& values() const { return *data_; }
  const Storage& storage() const { return data_; }

  bool requires_grad() const { return grad_ != nullptr; }

  TensorT& set_requires_grad(bool on) {
    if (on && !grad_) grad_ = std::make_shared<std::vector<R>>(data_->size(), R(0));
    if (!on) grad_.reset();
    return *this;
  }

  R* grad() { return grad_ ? grad_->data() : nullptr; }
  const R* grad() const { return grad_ ? grad_->data() : nullptr; }
  const Storage& grad_storage() const { return grad_; }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), R(0));
  }

  R item() const {
    if (numel() != 1) throw UsageError("item(): tensor is not scalar");
    return (*data_)[0];
  }

  static long count(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("tensor: non-positive extent " + std::to_string(d));
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  Storage data_;
  Storage grad_;
};

// Reverse-mode tape over a dynamically recorded graph. Ops append one node per
// output; backward zeroes every node's output gradient, seeds the loss and
// replays the pull closures in reverse creation order. Leaf gradients are left
// untouched, so repeated backward calls accumulate.
template <typename R>
class TapeT {
 public:
  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  static TapeT* active() { return slot(); }

  void record(const TensorT<R>& out, std::function<void()> pull) {
    nodes_.push_back(Node{out.grad_storage(), std::move(pull)});
  }

  void backward(const TensorT<R>& loss) {
    if (loss.numel() != 1) throw UsageError("backward: loss must be scalar");
    if (!loss.requires_grad())
      throw UsageError("backward: loss does not participate in the recorded graph");
    for (auto& n : nodes_) std::fill(n.out_grad->begin(), n.out_grad->end(), R(0));
    (*loss.grad_storage())[0] += R(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->pull();
  }

  void clear() { nodes_.clear(); }
  size_t node_count() const { return nodes_.size(); }

  // RAII activation of a tape for the current thread.
  class Scope {
   public:
    explicit Scope(TapeT& tape) : prev_(slot()) { slot() = &tape; }
    ~Scope() { slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

  // Temporarily disables recording (inference inside a training step).
  class NoGradScope {
   public:
    NoGradScope() : prev_(slot()) { slot() = nullptr; }
    ~NoGradScope() { slot() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

   private:
    TapeT* prev_;
  };

 private:
  struct Node {
    typename TensorT<R>::Storage out_grad;
    std::function<void()> pull;
  };

  static TapeT*& slot() {
    thread_local TapeT* t = nullptr;
    return t;
  }

  std::vector<Node> nodes_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace glossrec
