#pragma once

#include "granroute/pyramid.hpp"

#include <algorithm>
#include <numeric>

namespace granroute {

template <typename S>
struct InstructionTokens {
  Tensor<S> vectors;     // length x dim, same dim as visual tokens
  std::vector<int> ids;  // symbol ids, aligned with vectors
  Index length() const { return vectors.rows(); }
};

template <typename S>
struct FilteredInstructions {
  Tensor<S> vectors;              // min(k, length) x dim, original order
  std::vector<int> ids;
  std::vector<Index> kept_indices;  // strictly ascending
  int k = 0;
};

// Per-token relevance: max cosine similarity over all finest-level visual tokens.
template <typename S>
std::vector<S> relevance_scores(const InstructionTokens<S>& instr, const TokenGrid<S>& finest) {
  if (instr.vectors.cols() != finest.dim)
    throw ShapeMismatch("instruction dim vs visual dim");
  const auto vis = finest.data.mat();
  VectorX<S> vis_norms(vis.rows());
  for (Index i = 0; i < vis.rows(); ++i) {
    vis_norms[i] = vis.row(i).norm();
    if (vis_norms[i] == S(0)) throw ZeroNormToken("visual token " + std::to_string(i));
  }
  std::vector<S> scores;
  scores.reserve(size_t(instr.length()));
  for (Index t = 0; t < instr.length(); ++t) {
    const auto row = instr.vectors.mat().row(t);
    const S n = row.norm();
    if (n == S(0)) throw ZeroNormToken("instruction token " + std::to_string(t));
    S best = S(-1);
    for (Index i = 0; i < vis.rows(); ++i)
      best = std::max(best, row.dot(vis.row(i)) / (n * vis_norms[i]));
    scores.push_back(best);
  }
  return scores;
}

// Keep the k highest-scoring tokens in original sequence order.
// Ties break toward the earlier token.
template <typename S>
FilteredInstructions<S> filter_top_k(const InstructionTokens<S>& instr,
                                     const std::vector<S>& scores, int k) {
  if (Index(scores.size()) != instr.length())
    throw ShapeMismatch("scores length vs instruction length");
  if (k < 1) throw SchemaError("k must be >= 1");
  std::vector<Index> order(size_t(instr.length()));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return scores[size_t(a)] > scores[size_t(b)]; });
  const Index kept_n = std::min<Index>(k, instr.length());
  std::vector<Index> kept(order.begin(), order.begin() + kept_n);
  std::sort(kept.begin(), kept.end());

  FilteredInstructions<S> out;
  out.k = k;
  out.kept_indices = kept;
  out.vectors = Tensor<S>::zeros({kept_n, instr.vectors.cols()});
  for (Index i = 0; i < kept_n; ++i) {
    out.vectors.mat().row(i) = instr.vectors.mat().row(kept[size_t(i)]);
    out.ids.push_back(instr.ids[size_t(kept[size_t(i)])]);
  }
  return out;
}

}  // namespace granroute
