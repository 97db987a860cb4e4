#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "glossrec/tensor.hpp"

namespace glossrec {

// All dynamic programming runs in log space. -inf is represented by a large
// negative sentinel that survives addition without overflowing.
namespace ctcdetail {

constexpr double kLogZero = -1e30;
constexpr double kLogZeroHalf = -5e29;

template <typename R>
R lse2(R a, R b) {
  if (a < R(kLogZeroHalf)) return b;
  if (b < R(kLogZeroHalf)) return a;
  const R m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

template <typename R>
R lse3(R a, R b, R c) {
  return lse2(lse2(a, b), c);
}

inline int extended_label(const std::vector<int>& y, int s, int blank) {
  return (s % 2 == 0) ? blank : y[size_t(s / 2)];
}

}  // namespace ctcdetail

// Removes adjacent repeats, then blanks (the CTC many-to-one map).
inline std::vector<int> collapse(const std::vector<int>& path, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (int c : path) {
    if (c != prev && c != blank) out.push_back(c);
    prev = c;
  }
  return out;
}

// Minimum number of decoding steps able to emit y.
inline int ctc_min_steps(const std::vector<int>& y) {
  int repeats = 0;
  for (size_t i = 1; i < y.size(); ++i)
    if (y[i] == y[i - 1]) ++repeats;
  return int(y.size()) + repeats;
}

inline void ctc_check_target(const std::vector<int>& y, int u, int blank, int k) {
  for (int c : y)
    if (c < 0 || c >= u || c == blank)
      throw UsageError("ctc: target label " + std::to_string(c) + " is out of range");
  const int need = ctc_min_steps(y);
  if (k < need)
    throw InfeasibleTargetError("ctc: target needs at least " + std::to_string(need) +
                                " steps but the map has " + std::to_string(k));
}

// Exact CTC negative log-likelihood via the forward recursion on the
// blank-interleaved extended sequence. When grad is non-null it receives
// d(loss)/d(log_probs), computed with the backward recursion as well.
template <typename R>
R ctc_loss_grad(const R* log_probs, int k, int u, const std::vector<int>& y, int blank,
                R* grad) {
  using ctcdetail::extended_label;
  using ctcdetail::kLogZero;
  using ctcdetail::lse3;
  ctc_check_target(y, u, blank, k);
  const int S = 2 * int(y.size()) + 1;

  auto lab = [&](int s) { return extended_label(y, s, blank); };
  auto skip_ok = [&](int s) {
    return s >= 2 && lab(s) != blank && lab(s) != lab(s - 2);
  };

  std::vector<R> alpha(size_t(k) * S, R(kLogZero));
  alpha[0] = log_probs[blank];
  if (S > 1) alpha[1] = log_probs[lab(1)];
  for (int t = 1; t < k; ++t) {
    const R* prev = alpha.data() + size_t(t - 1) * S;
    R* cur = alpha.data() + size_t(t) * S;
    for (int s = 0; s < S; ++s) {
      const R stay = prev[s];
      const R adv1 = s >= 1 ? prev[s - 1] : R(kLogZero);
      const R adv2 = skip_ok(s) ? prev[s - 2] : R(kLogZero);
      const R best = lse3(stay, adv1, adv2);
      cur[s] = best < R(ctcdetail::kLogZeroHalf)
                   ? R(kLogZero)
                   : best + log_probs[size_t(t) * u + lab(s)];
    }
  }
  const R* last = alpha.data() + size_t(k - 1) * S;
  R log_z = last[S - 1];
  if (S > 1) log_z = ctcdetail::lse2(log_z, last[S - 2]);
  if (log_z < R(ctcdetail::kLogZeroHalf))
    throw InfeasibleTargetError("ctc: no valid alignment path");
  const R loss = -log_z;

  if (grad) {
    std::vector<R> beta(size_t(k) * S, R(kLogZero));
    R* blast = beta.data() + size_t(k - 1) * S;
    blast[S - 1] = log_probs[size_t(k - 1) * u + blank];
    if (S > 1) blast[S - 2] = log_probs[size_t(k - 1) * u + lab(S - 2)];
    for (int t = k - 2; t >= 0; --t) {
      const R* nxt = beta.data() + size_t(t + 1) * S;
      R* cur = beta.data() + size_t(t) * S;
      for (int s = 0; s < S; ++s) {
        const R stay = nxt[s];
        const R adv1 = s + 1 < S ? nxt[s + 1] : R(kLogZero);
        const R adv2 = (s + 2 < S && skip_ok(s + 2)) ? nxt[s + 2] : R(kLogZero);
        const R best = lse3(stay, adv1, adv2);
        cur[s] = best < R(ctcdetail::kLogZeroHalf)
                     ? R(kLogZero)
                     : best + log_probs[size_t(t) * u + lab(s)];
      }
    }
    // d(loss)/d(log p(t,c)) = -sum over paths emitting c at t / total.
    for (int t = 0; t < k; ++t) {
      std::vector<R> occ(size_t(u), R(kLogZero));
      const R* at = alpha.data() + size_t(t) * S;
      const R* bt = beta.data() + size_t(t) * S;
      for (int s = 0; s < S; ++s) {
        if (at[s] < R(ctcdetail::kLogZeroHalf) || bt[s] < R(ctcdetail::kLogZeroHalf))
          continue;
        const int c = lab(s);
        // Emission at t is counted in both alpha and beta; remove one copy.
        const R mass = at[s] + bt[s] - log_probs[size_t(t) * u + c];
        occ[size_t(c)] = ctcdetail::lse2(occ[size_t(c)], mass);
      }
      for (int c = 0; c < u; ++c)
        grad[size_t(t) * u + c] =
            occ[size_t(c)] < R(ctcdetail::kLogZeroHalf)
                ? R(0)
                : -std::exp(occ[size_t(c)] - log_z);
    }
  }
  return loss;
}

// Tape op: scalar CTC loss over a (k,u) log-probability map.
template <typename R>
TensorT<R> ctc_loss(const TensorT<R>& log_probs, const std::vector<int>& y, int blank) {
  if (log_probs.rank() != 2) throw ShapeError("ctc_loss: log_probs must be (k,u)");
  const int k = log_probs.dim(0);
  const int u = log_probs.dim(1);
  const bool need_grad = TapeT<R>::active() && log_probs.requires_grad();
  std::vector<R> grad;
  if (need_grad) grad.resize(size_t(k) * u);
  const R loss =
      ctc_loss_grad(log_probs.data(), k, u, y, blank, need_grad ? grad.data() : nullptr);
  TensorT<R> out = TensorT<R>::scalar(loss);
  if (need_grad) {
    out.set_requires_grad(true);
    auto g = std::make_shared<std::vector<R>>(std::move(grad));
    TapeT<R>::active()->record(out, [log_probs, out, g]() {
      R* din = const_cast<R*>(log_probs.grad());
      const R go = out.grad()[0];
      for (size_t i = 0; i < g->size(); ++i) din[i] += go * (*g)[i];
    });
  }
  return out;
}

// Best valid alignment for y (Viterbi on the extended-label trellis).
// Tie-break: prefer the predecessor that had already advanced the extended
// index, so equal-probability alignments resolve to the earliest emission.
template <typename R>
std::vector<int> forced_align(const R* log_probs, int k, int u, const std::vector<int>& y,
                              int blank) {
  using ctcdetail::extended_label;
  using ctcdetail::kLogZero;
  ctc_check_target(y, u, blank, k);
  const int S = 2 * int(y.size()) + 1;
  auto lab = [&](int s) { return extended_label(y, s, blank); };
  auto skip_ok = [&](int s) { return s >= 2 && lab(s) != blank && lab(s) != lab(s - 2); };

  std::vector<R> score(size_t(k) * S, R(kLogZero));
  std::vector<int8_t> back(size_t(k) * S, int8_t(0));
  score[0] = log_probs[blank];
  if (S > 1) score[1] = log_probs[lab(1)];
  for (int t = 1; t < k; ++t) {
    const R* prev = score.data() + size_t(t - 1) * S;
    R* cur = score.data() + size_t(t) * S;
    int8_t* bp = back.data() + size_t(t) * S;
    for (int s = 0; s < S; ++s) {
      R best = prev[s];
      int8_t choice = 0;
      if (s >= 1 && prev[s - 1] > best) {
        best = prev[s - 1];
        choice = 1;
      }
      if (skip_ok(s) && prev[s - 2] > best) {
        best = prev[s - 2];
        choice = 2;
      }
      cur[s] = best < R(ctcdetail::kLogZeroHalf)
                   ? R(kLogZero)
                   : best + log_probs[size_t(t) * u + lab(s)];
      bp[s] = choice;
    }
  }
  const R* last = score.data() + size_t(k - 1) * S;
  int s = S - 1;
  if (S > 1 && last[S - 2] > last[S - 1]) s = S - 2;
  if (last[s] < R(ctcdetail::kLogZeroHalf))
    throw InfeasibleTargetError("ctc: no valid alignment path");

  std::vector<int> path(size_t(k));
  for (int t = k - 1; t >= 0; --t) {
    path[size_t(t)] = lab(s);
    if (t > 0) s -= back[size_t(t) * S + s];
  }
  return path;
}

template <typename R>
std::vector<int> forced_align(const TensorT<R>& log_probs, const std::vector<int>& y,
                              int blank) {
  if (log_probs.rank() != 2) throw ShapeError("forced_align: log_probs must be (k,u)");
  return forced_align(log_probs.data(), log_probs.dim(0), log_probs.dim(1), y, blank);
}

// Log probability of one explicit alignment path under the map.
template <typename R>
R path_log_prob(const R* log_probs, int k, int u, const std::vector<int>& path) {
  R acc = R(0);
  for (int t = 0; t < k; ++t) acc += log_probs[size_t(t) * u + path[size_t(t)]];
  return acc;
}

// Per-step argmax (ties to the lowest class index), then collapse.
template <typename R>
std::pair<std::vector<int>, std::vector<int>> greedy_decode(const TensorT<R>& probs,
                                                            int blank) {
  if (probs.rank() != 2) throw ShapeError("greedy_decode: map must be (k,u)");
  const int k = probs.dim(0);
  const int u = probs.dim(1);
  std::vector<int> path(size_t(k));
  for (int t = 0; t < k; ++t) {
    const R* row = probs.data() + size_t(t) * u;
    int best = 0;
    for (int c = 1; c < u; ++c)
      if (row[c] > row[best]) best = c;
    path[size_t(t)] = best;
  }
  return {path, collapse(path, blank)};
}

}  // namespace glossrec
