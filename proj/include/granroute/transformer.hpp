#pragma once

#include "granroute/graph.hpp"
#include "granroute/tensor_io.hpp"

#include <random>

namespace granroute {

template <typename S>
Tensor<S> randn(std::vector<Index> shape, double stddev, std::mt19937_64& rng) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < t.numel(); ++i) t.data[i] = S(dist(rng));
  return t;
}

// Parameter slots of one pre-norm transformer layer (multi-head attention +
// 4x GELU FFN), stored per head so the whole layer stays inside the op catalog.
struct TransformerLayerIdx {
  std::vector<Index> wq, wk, wv;  // per head, d x dh
  Index wo = 0, bo = 0;
  Index ln1g = 0, ln1b = 0, ln2g = 0, ln2b = 0;
  Index w1 = 0, b1 = 0, w2 = 0, b2 = 0;
  int heads = 0;
  Index d = 0;
};

template <typename S>
TransformerLayerIdx register_transformer_layer(ParamSet<S>& ps, const std::string& prefix,
                                               Index d, int heads, std::mt19937_64& rng) {
  if (d % heads != 0) throw SchemaError("model dim must divide heads");
  const Index dh = d / heads;
  const double std_w = 1.0 / std::sqrt(double(d));
  TransformerLayerIdx idx;
  idx.heads = heads;
  idx.d = d;
  for (int h = 0; h < heads; ++h) {
    idx.wq.push_back(ps.add(prefix + ".q" + std::to_string(h), randn<S>({d, dh}, std_w, rng)));
    idx.wk.push_back(ps.add(prefix + ".k" + std::to_string(h), randn<S>({d, dh}, std_w, rng)));
    idx.wv.push_back(ps.add(prefix + ".v" + std::to_string(h), randn<S>({d, dh}, std_w, rng)));
  }
  idx.wo = ps.add(prefix + ".o", randn<S>({d, d}, std_w, rng));
  idx.bo = ps.add(prefix + ".o_bias", Tensor<S>::zeros({1, d}));
  idx.ln1g = ps.add(prefix + ".ln1_g", Tensor<S>::full({1, d}, S(1)));
  idx.ln1b = ps.add(prefix + ".ln1_b", Tensor<S>::zeros({1, d}));
  idx.ln2g = ps.add(prefix + ".ln2_g", Tensor<S>::full({1, d}, S(1)));
  idx.ln2b = ps.add(prefix + ".ln2_b", Tensor<S>::zeros({1, d}));
  idx.w1 = ps.add(prefix + ".ffn_w1", randn<S>({d, 4 * d}, std_w, rng));
  idx.b1 = ps.add(prefix + ".ffn_b1", Tensor<S>::zeros({1, 4 * d}));
  idx.w2 = ps.add(prefix + ".ffn_w2", randn<S>({4 * d, d}, 1.0 / std::sqrt(double(4 * d)), rng));
  idx.b2 = ps.add(prefix + ".ffn_b2", Tensor<S>::zeros({1, d}));
  return idx;
}

// Leaf every parameter into the graph; returns node ids aligned with ps order.
template <typename S>
std::vector<int> leaf_params(Graph<S>& g, const ParamSet<S>& ps) {
  std::vector<int> nodes;
  nodes.reserve(size_t(ps.size()));
  for (Index i = 0; i < ps.size(); ++i) nodes.push_back(g.leaf(ps[i]));
  return nodes;
}

// Pre-norm block: x + Attn(LN1(x)), then + FFN(LN2(.)).
// attn_mask, when present, is an L*L byte matrix; 1 blocks (query, key).
template <typename S>
int transformer_layer_forward(Graph<S>& g, int x, const TransformerLayerIdx& idx,
                              const std::vector<int>& pn,
                              const std::vector<std::uint8_t>* attn_mask = nullptr) {
  const Index dh = idx.d / idx.heads;
  OpAttrs ln;
  const int a = g.apply(OpKind::kLayerNorm, {x, pn[size_t(idx.ln1g)], pn[size_t(idx.ln1b)]}, ln);
  std::vector<int> head_ctx;
  for (int h = 0; h < idx.heads; ++h) {
    const int q = g.apply(OpKind::kMatmul, {a, pn[size_t(idx.wq[size_t(h)])]});
    const int k = g.apply(OpKind::kMatmul, {a, pn[size_t(idx.wk[size_t(h)])]});
    const int v = g.apply(OpKind::kMatmul, {a, pn[size_t(idx.wv[size_t(h)])]});
    OpAttrs mm;
    mm.trans_b = true;
    int scores = g.apply(OpKind::kMatmul, {q, k}, mm);
    OpAttrs sc;
    sc.scalar = 1.0 / std::sqrt(double(dh));
    scores = g.apply(OpKind::kScale, {scores}, sc);
    if (attn_mask) {
      OpAttrs mf;
      mf.mask = *attn_mask;
      mf.fill = -1e9;
      scores = g.apply(OpKind::kMaskFill, {scores}, mf);
    }
    const int probs = g.apply(OpKind::kSoftmax, {scores});
    head_ctx.push_back(g.apply(OpKind::kMatmul, {probs, v}));
  }
  OpAttrs cat;
  cat.axis = 1;
  const int ctx = g.apply(OpKind::kConcat, head_ctx, cat);
  int attn_out = g.apply(OpKind::kMatmul, {ctx, pn[size_t(idx.wo)]});
  attn_out = g.apply(OpKind::kAdd, {attn_out, pn[size_t(idx.bo)]});
  const int x2 = g.apply(OpKind::kAdd, {x, attn_out});

  const int f = g.apply(OpKind::kLayerNorm, {x2, pn[size_t(idx.ln2g)], pn[size_t(idx.ln2b)]}, ln);
  int ff = g.apply(OpKind::kMatmul, {f, pn[size_t(idx.w1)]});
  ff = g.apply(OpKind::kAdd, {ff, pn[size_t(idx.b1)]});
  ff = g.apply(OpKind::kGelu, {ff});
  ff = g.apply(OpKind::kMatmul, {ff, pn[size_t(idx.w2)]});
  ff = g.apply(OpKind::kAdd, {ff, pn[size_t(idx.b2)]});
  return g.apply(OpKind::kAdd, {x2, ff});
}

// Zero-pad token vectors from d_in channels up to d_model (identity connector).
template <typename S>
Tensor<S> lift_tokens(const Tensor<S>& tokens, Index d_model) {
  if (tokens.cols() > d_model) throw ShapeMismatch("cannot lift tokens down");
  Tensor<S> out = Tensor<S>::zeros({tokens.rows(), d_model});
  out.mat().leftCols(tokens.cols()) = tokens.mat();
  return out;
}

}  // namespace granroute
