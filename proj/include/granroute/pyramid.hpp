#pragma once

#include "granroute/tensor.hpp"

#include <vector>

namespace granroute {

// One granularity level of one image: rows x cols grid of dim-channel tokens,
// stored as a (rows*cols) x dim tensor in row-major grid order.
template <typename S>
struct TokenGrid {
  Index rows = 0, cols = 0, dim = 0;
  int level = 0;
  Tensor<S> data;  // (rows*cols) x dim

  Index tokens() const { return rows * cols; }

  static TokenGrid zeros(Index r, Index c, Index d, int level = 0) {
    return {r, c, d, level, Tensor<S>::zeros({r * c, d})};
  }
};

// Fine-to-coarse list of grids; level 0 is the finest.
template <typename S>
struct GranularityPyramid {
  std::vector<TokenGrid<S>> levels;
  int n_levels() const { return int(levels.size()); }
  std::vector<Index> token_counts() const {
    std::vector<Index> out;
    for (const auto& g : levels) out.push_back(g.tokens());
    return out;
  }
  Index total_tokens() const {
    Index n = 0;
    for (const auto& g : levels) n += g.tokens();
    return n;
  }
};

enum class PoolDim { kWidth, kHeight };

// Halve one axis by averaging adjacent pairs of token vectors.
template <typename S>
TokenGrid<S> avg_pool_step(const TokenGrid<S>& grid, PoolDim axis) {
  const Index r = grid.rows, c = grid.cols, d = grid.dim;
  TokenGrid<S> out;
  out.dim = d;
  out.level = grid.level + 1;
  if (axis == PoolDim::kWidth) {
    if (c % 2 != 0) throw OddAxis("width " + std::to_string(c));
    out.rows = r;
    out.cols = c / 2;
    out.data = Tensor<S>::zeros({r * c / 2, d});
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c / 2; ++j)
        out.data.mat().row(i * (c / 2) + j) =
            (grid.data.mat().row(i * c + 2 * j) + grid.data.mat().row(i * c + 2 * j + 1)) / S(2);
  } else {
    if (r % 2 != 0) throw OddAxis("height " + std::to_string(r));
    out.rows = r / 2;
    out.cols = c;
    out.data = Tensor<S>::zeros({(r / 2) * c, d});
    for (Index i = 0; i < r / 2; ++i)
      for (Index j = 0; j < c; ++j)
        out.data.mat().row(i * c + j) =
            (grid.data.mat().row(2 * i * c + j) + grid.data.mat().row((2 * i + 1) * c + j)) / S(2);
  }
  return out;
}

// Alternating width/height halving, starting with width, fine to coarse.
template <typename S>
GranularityPyramid<S> build_pyramid(const TokenGrid<S>& grid, int n_levels) {
  if (n_levels < 1) throw SchemaError("n_levels must be >= 1");
  GranularityPyramid<S> pyr;
  pyr.levels.push_back(grid);
  pyr.levels.back().level = 0;
  for (int l = 1; l < n_levels; ++l) {
    const PoolDim axis = (l % 2 == 1) ? PoolDim::kWidth : PoolDim::kHeight;
    try {
      pyr.levels.push_back(avg_pool_step(pyr.levels.back(), axis));
    } catch (const OddAxis& e) {
      throw OddAxis(std::string(e.what()) + " at level " + std::to_string(l));
    }
  }
  return pyr;
}

// Keep a subset of levels (e.g. {0, 2, 4} for the {576, 144, 36} range).
// Levels keep their original ids so token counts stay interpretable.
template <typename S>
GranularityPyramid<S> select_levels(const GranularityPyramid<S>& pyr,
                                    const std::vector<int>& keep) {
  if (keep.empty()) throw EmptyList("select_levels: empty mask");
  GranularityPyramid<S> out;
  for (int l : keep) {
    if (l < 0 || l >= pyr.n_levels()) throw SchemaError("level mask out of range");
    out.levels.push_back(pyr.levels[size_t(l)]);
  }
  return out;
}

}  // namespace granroute
