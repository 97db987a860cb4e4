#pragma once

#include <cmath>
#include <vector>

#include "glossrec/tensor.hpp"

namespace glossrec {

// Bias-corrected Adam over a fixed list of parameter tensors. Moment buffers
// are allocated lazily on the first step and stay shape-congruent with their
// parameter.
template <typename R>
class AdamT {
 public:
  R beta1 = R(0.9);
  R beta2 = R(0.999);
  R eps = R(1e-8);
  R alpha = R(1e-4);

  long step_count() const { return step_count_; }

  // One update over params whose gradients are already populated. Gradients
  // may be pre-scaled by the caller (gradient accumulation).
  void step(std::vector<TensorT<R>*> params) {
    if (first_moment_.empty()) {
      first_moment_.resize(params.size());
      second_moment_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        first_moment_[i].assign(size_t(params[i]->numel()), R(0));
        second_moment_[i].assign(size_t(params[i]->numel()), R(0));
      }
    }
    if (first_moment_.size() != params.size())
      throw UsageError("adam: parameter list changed between steps");
    ++step_count_;
    const R bc1 = R(1) - R(std::pow(double(beta1), double(step_count_)));
    const R bc2 = R(1) - R(std::pow(double(beta2), double(step_count_)));
    for (size_t i = 0; i < params.size(); ++i) {
      TensorT<R>& p = *params[i];
      if (long(first_moment_[i].size()) != p.numel())
        throw UsageError("adam: parameter shape changed between steps");
      const R* g = p.grad();
      if (!g) throw UsageError("adam: parameter has no gradient buffer");
      R* m = first_moment_[i].data();
      R* v = second_moment_[i].data();
      R* x = p.data();
      for (long j = 0; j < p.numel(); ++j) {
        m[j] = beta1 * m[j] + (R(1) - beta1) * g[j];
        v[j] = beta2 * v[j] + (R(1) - beta2) * g[j] * g[j];
        const R mhat = m[j] / bc1;
        const R vhat = v[j] / bc2;
        x[j] -= alpha * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  std::vector<std::vector<R>> first_moment_;
  std::vector<std::vector<R>> second_moment_;
  long step_count_ = 0;
};

using Adam = AdamT<float>;

}  // namespace glossrec
