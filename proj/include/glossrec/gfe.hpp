#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "glossrec/ctc.hpp"
#include "glossrec/model.hpp"
#include "glossrec/nn_ops.hpp"

namespace glossrec {

// Fraction of non-blank steps in an alignment proposal.
inline double balance_ratio(const std::vector<int>& proposal, int blank) {
  if (proposal.empty()) throw UsageError("balance_ratio: empty proposal");
  long non_blank = 0;
  for (int c : proposal)
    if (c != blank) ++non_blank;
  return double(non_blank) / double(proposal.size());
}

// One enhancement supervision batch: first-level gloss features paired with
// the proposal path, one pair per step.
template <typename R>
struct GfePairBatchT {
  TensorT<R> g;              // (k, f_g)
  std::vector<int> targets;  // length k, values in [0,u)
  int sample_id = -1;
  int proposal_epoch = -1;
};

// Pair a given proposal path with the current first-level features. Throws if
// the path does not collapse back to y or does not match k.
template <typename R>
GfePairBatchT<R> pairs_from_path(const TensorT<R>& g, const std::vector<int>& path,
                                 const std::vector<int>& y, int blank, int sample_id = -1,
                                 int proposal_epoch = -1) {
  if (g.rank() != 2) throw ShapeError("gfe: features must be (k,f_g)");
  if (int(path.size()) != g.dim(0))
    throw InfeasibleTargetError("gfe: proposal length " + std::to_string(path.size()) +
                                " does not match k=" + std::to_string(g.dim(0)));
  if (collapse(path, blank) != y)
    throw InfeasibleTargetError("gfe: proposal does not collapse to the target sequence");
  return GfePairBatchT<R>{g, path, sample_id, proposal_epoch};
}

// Build pairs from the map's own best valid alignment.
template <typename R>
GfePairBatchT<R> build_pairs(const PredictionMapT<R>& map, const TensorT<R>& g,
                             const std::vector<int>& y, int blank, int sample_id = -1,
                             int proposal_epoch = -1) {
  std::vector<int> path = forced_align(map.log_probs, y, blank);
  return pairs_from_path(g, path, y, blank, sample_id, proposal_epoch);
}

// Balance-ratio-weighted cross entropy against the proposal targets, averaged
// over the k steps. Blank steps are scaled by br, non-blank steps by 1.
template <typename R>
TensorT<R> gfe_loss(const GfePairBatchT<R>& batch, const TensorT<R>& gfe_probs, R br,
                    int blank) {
  if (gfe_probs.rank() != 2) throw ShapeError("gfe_loss: probs must be (k,u)");
  if (gfe_probs.dim(0) != int(batch.targets.size()))
    throw ShapeError("gfe_loss: probs row count does not match pair count");
  std::vector<R> weights(batch.targets.size());
  for (size_t j = 0; j < batch.targets.size(); ++j)
    weights[j] = batch.targets[j] == blank ? br : R(1);
  return weighted_nll(gfe_probs, batch.targets, weights);
}

// Scalar components of one optimization step, plus the composed objective.
struct LossBreakdown {
  double l_ctc = 0;
  double l_gfe = 0;  // 0 when inactive
  double l_reg = 0;
  double total = 0;
  double lambda1 = 0;
  double lambda2 = 0;
  bool gfe_active = false;
};

// total = l_ctc + lambda2 * l_gfe + lambda1 * sum of squared trainable
// parameters (batch-norm running statistics excluded by construction).
template <typename R>
std::pair<TensorT<R>, LossBreakdown> total_loss(const TensorT<R>& l_ctc,
                                                const std::optional<TensorT<R>>& l_gfe,
                                                ModelParamsT<R>& params, R lambda1,
                                                R lambda2) {
  TensorT<R> reg = TensorT<R>::scalar(R(0));
  for (auto& e : params.entries) {
    if (!e.trainable) continue;
    reg = add(reg, sum_squares(e.tensor));
  }
  TensorT<R> total = add(l_ctc, scale(reg, lambda1));
  if (l_gfe) total = add(total, scale(*l_gfe, lambda2));

  LossBreakdown b;
  b.l_ctc = double(l_ctc.item());
  b.l_gfe = l_gfe ? double(l_gfe->item()) : 0.0;
  b.l_reg = double(reg.item());
  b.total = double(total.item());
  b.lambda1 = double(lambda1);
  b.lambda2 = double(lambda2);
  b.gfe_active = l_gfe.has_value();
  return {total, b};
}

// On-disk proposal cache: sample id -> alignment path, stamped with the epoch
// that generated it. Little-endian, magic "GFA1".
struct ProposalCache {
  int epoch = -1;
  std::map<int, std::vector<int>> paths;

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("proposal cache: cannot write " + path);
    out.write("GFA1", 4);
    auto put_u32 = [&](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    put_u32(uint32_t(epoch));
    put_u32(uint32_t(paths.size()));
    for (const auto& [id, p] : paths) {
      put_u32(uint32_t(id));
      put_u32(uint32_t(p.size()));
      for (int c : p) put_u32(uint32_t(c));
    }
  }

  static ProposalCache load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("proposal cache: cannot read " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "GFA1")
      throw FormatError("proposal cache: bad magic in " + path);
    auto get_u32 = [&]() {
      uint32_t v = 0;
      in.read(reinterpret_cast<char*>(&v), 4);
      if (!in) throw FormatError("proposal cache: truncated file " + path);
      return v;
    };
    ProposalCache c;
    c.epoch = int(get_u32());
    const uint32_t n = get_u32();
    for (uint32_t i = 0; i < n; ++i) {
      const int id = int(get_u32());
      const uint32_t k = get_u32();
      std::vector<int> p(k);
      for (uint32_t j = 0; j < k; ++j) p[j] = int(get_u32());
      c.paths.emplace(id, std::move(p));
    }
    return c;
  }
};

// Stretch or shrink a proposal computed at one step count onto another, using
// endpoint-matched nearest-index resampling (the same index mapping the
// temporal augmentation applies to frames). Returns nullopt when shrinking
// drops a gloss, i.e. the resampled path no longer collapses to y.
inline std::optional<std::vector<int>> resample_proposal(const std::vector<int>& path,
                                                         int k_target,
                                                         const std::vector<int>& y,
                                                         int blank) {
  if (k_target < 1 || path.empty()) return std::nullopt;
  const int k_src = int(path.size());
  std::vector<int> out(size_t(k_target));
  if (k_target == 1) {
    out[0] = path[size_t(k_src / 2)];
  } else {
    for (int j = 0; j < k_target; ++j) {
      const double pos = double(j) * double(k_src - 1) / double(k_target - 1);
      out[size_t(j)] = path[size_t(llround(pos))];
    }
  }
  if (collapse(out, blank) != y) return std::nullopt;
  return out;
}

}  // namespace glossrec
