#pragma once

#include "granroute/instruction.hpp"
#include "granroute/transformer.hpp"

namespace granroute {

struct RouterConfig {
  Index d = 64;         // router model dim
  Index d_vis = 16;     // incoming token channel count
  int n_levels = 5;
  int k = 32;           // filtered instruction slots
  int heads = 4;
  std::vector<Index> level_token_counts;  // per level, finest first

  Index visual_tokens() const {
    Index n = 0;
    for (Index t : level_token_counts) n += t;
    return n;
  }
  Index voter_len() const { return visual_tokens() + k; }
};

template <typename S>
struct RouterParams {
  RouterConfig cfg;
  ParamSet<S> params;
  TransformerLayerIdx layer;
  Index mlp_w1 = 0, mlp_b1 = 0, mlp_w2 = 0, mlp_b2 = 0;
  Index voter = 0, segments = 0;
};

template <typename S>
struct RouterOutput {
  Tensor<S> z_out;    // L x N, padded instruction rows zeroed
  Tensor<S> z_final;  // 1 x N
  Tensor<S> probs;    // 1 x N simplex
  int selected = 0;   // argmax after image aggregation
};

// Argmax with ties broken toward the coarser (higher-index) level.
template <typename S>
int argmax_prefer_coarse(const Tensor<S>& row) {
  int best = 0;
  for (Index i = 1; i < row.numel(); ++i)
    if (row.data[i] >= row.data[best]) best = int(i);
  return best;
}

template <typename S>
RouterParams<S> init_router_params(const RouterConfig& cfg, unsigned long long seed) {
  if (cfg.d < 1 || cfg.n_levels < 1 || cfg.k < 1) throw SchemaError("bad router config");
  if (Index(cfg.level_token_counts.size()) != cfg.n_levels)
    throw SchemaError("level_token_counts must have n_levels entries");
  std::mt19937_64 rng(seed);
  RouterParams<S> rp;
  rp.cfg = cfg;
  rp.layer = register_transformer_layer(rp.params, "layer", cfg.d, cfg.heads, rng);
  const double std_w = 1.0 / std::sqrt(double(cfg.d));
  rp.mlp_w1 = rp.params.add("mlp_w1", randn<S>({cfg.d, cfg.d}, std_w, rng));
  rp.mlp_b1 = rp.params.add("mlp_b1", Tensor<S>::zeros({1, cfg.d}));
  rp.mlp_w2 = rp.params.add("mlp_w2", randn<S>({cfg.d, Index(cfg.n_levels)}, std_w, rng));
  rp.mlp_b2 = rp.params.add("mlp_b2", Tensor<S>::zeros({1, Index(cfg.n_levels)}));
  rp.voter = rp.params.add("voter", Tensor<S>::full({1, cfg.voter_len()}, S(1) / S(cfg.voter_len())));
  rp.segments = rp.params.add("segments", randn<S>({Index(cfg.n_levels) + 1, cfg.d}, std_w, rng));
  return rp;
}

// Graph-building forward; returns node ids so trainers can seed custom
// gradients at z_final.
template <typename S>
struct RouterForwardNodes {
  int z_out = -1;   // zeroed-padded-rows version fed to the voter
  int z_final = -1;
  std::vector<int> pnodes;  // aligned with params order
  std::vector<std::uint8_t> pad;  // per input slot, 1 = padded instruction slot
};

template <typename S>
RouterForwardNodes<S> router_forward_graph(Graph<S>& g, const GranularityPyramid<S>& pyramid,
                                           const FilteredInstructions<S>& instr,
                                           const RouterParams<S>& rp) {
  const RouterConfig& cfg = rp.cfg;
  if (pyramid.n_levels() != cfg.n_levels) throw ShapeMismatch("pyramid levels vs router config");
  for (int l = 0; l < cfg.n_levels; ++l)
    if (pyramid.levels[size_t(l)].tokens() != cfg.level_token_counts[size_t(l)])
      throw ShapeMismatch("level token count vs router config");
  if (instr.vectors.rows() > cfg.k) throw ShapeMismatch("more instruction tokens than k slots");

  const Index L = cfg.voter_len();
  const Index n_real = instr.vectors.rows();

  // Constant input block: lifted visual tokens of every level, then the
  // filtered instruction tokens, then zero padding up to k slots.
  Tensor<S> x = Tensor<S>::zeros({L, cfg.d});
  std::vector<int> seg_ids(size_t(L), 0);
  Index row = 0;
  for (int l = 0; l < cfg.n_levels; ++l) {
    const auto& grid = pyramid.levels[size_t(l)];
    if (grid.dim > cfg.d) throw ShapeMismatch("visual dim exceeds router dim");
    x.mat().block(row, 0, grid.tokens(), grid.dim) = grid.data.mat();
    for (Index t = 0; t < grid.tokens(); ++t) seg_ids[size_t(row + t)] = l;
    row += grid.tokens();
  }
  std::vector<std::uint8_t> pad(size_t(L), 0);
  if (n_real > 0) {
    if (instr.vectors.cols() > cfg.d) throw ShapeMismatch("instruction dim exceeds router dim");
    x.mat().block(row, 0, n_real, instr.vectors.cols()) = instr.vectors.mat();
  }
  for (Index t = 0; t < cfg.k; ++t) {
    seg_ids[size_t(row + t)] = cfg.n_levels;
    if (t >= n_real) pad[size_t(row + t)] = 1;
  }

  RouterForwardNodes<S> out;
  out.pad = pad;
  out.pnodes = leaf_params(g, rp.params);
  const int x_node = g.leaf(std::move(x));

  OpAttrs seg_attrs;
  seg_attrs.ids.assign(seg_ids.begin(), seg_ids.end());
  const int seg = g.apply(OpKind::kEmbedLookup, {out.pnodes[size_t(rp.segments)]}, seg_attrs);
  int h = g.apply(OpKind::kAdd, {x_node, seg});

  // Padded slots are masked out as attention keys.
  std::vector<std::uint8_t> attn_mask(size_t(L * L), 0);
  bool any_pad = false;
  for (Index j = 0; j < L; ++j)
    if (pad[size_t(j)]) {
      any_pad = true;
      for (Index i = 0; i < L; ++i) attn_mask[size_t(i * L + j)] = 1;
    }
  h = transformer_layer_forward(g, h, rp.layer, out.pnodes, any_pad ? &attn_mask : nullptr);

  int z = g.apply(OpKind::kMatmul, {h, out.pnodes[size_t(rp.mlp_w1)]});
  z = g.apply(OpKind::kAdd, {z, out.pnodes[size_t(rp.mlp_b1)]});
  z = g.apply(OpKind::kGelu, {z});
  z = g.apply(OpKind::kMatmul, {z, out.pnodes[size_t(rp.mlp_w2)]});
  z = g.apply(OpKind::kAdd, {z, out.pnodes[size_t(rp.mlp_b2)]});

  // Padded slots contribute exactly zero to the vote.
  if (any_pad) {
    OpAttrs zero_rows;
    zero_rows.fill = 0.0;
    zero_rows.mask.assign(size_t(L) * size_t(cfg.n_levels), 0);
    for (Index i = 0; i < L; ++i)
      if (pad[size_t(i)])
        for (Index c = 0; c < Index(cfg.n_levels); ++c)
          zero_rows.mask[size_t(i * cfg.n_levels + c)] = 1;
    z = g.apply(OpKind::kMaskFill, {z}, zero_rows);
  }
  out.z_out = z;
  out.z_final = g.apply(OpKind::kMatmul, {out.pnodes[size_t(rp.voter)], z});
  return out;
}

template <typename S>
RouterOutput<S> router_forward(const GranularityPyramid<S>& pyramid,
                               const FilteredInstructions<S>& instr, const RouterParams<S>& rp) {
  Graph<S> g;
  RouterForwardNodes<S> nodes = router_forward_graph(g, pyramid, instr, rp);

  RouterOutput<S> out;
  out.z_out = g.value(nodes.z_out);
  out.z_final = g.value(nodes.z_final);
  std::vector<const Tensor<S>*> in{&out.z_final};
  out.probs = forward_op(OpKind::kSoftmax, in);
  out.selected = argmax_prefer_coarse(out.probs);
  return out;
}

// Footnote-style multi-image aggregation: mean of pre-softmax logits.
template <typename S>
std::pair<Tensor<S>, int> aggregate_images(const std::vector<RouterOutput<S>>& outputs) {
  if (outputs.empty()) throw EmptyList("aggregate_images: no outputs");
  Tensor<S> mean = outputs[0].z_final;
  for (size_t i = 1; i < outputs.size(); ++i) {
    if (!same_shape(mean, outputs[i].z_final)) throw ShapeMismatch("z_final shapes differ");
    mean.data += outputs[i].z_final.data;
  }
  mean.data /= S(outputs.size());
  std::vector<const Tensor<S>*> in{&mean};
  Tensor<S> probs = forward_op(OpKind::kSoftmax, in);
  return {probs, argmax_prefer_coarse(probs)};
}

template <typename S>
void save_router(const RouterParams<S>& rp, const std::filesystem::path& dir) {
  nlohmann::json m;
  m["d"] = rp.cfg.d;
  m["d_vis"] = rp.cfg.d_vis;
  m["n_levels"] = rp.cfg.n_levels;
  m["k"] = rp.cfg.k;
  m["heads"] = rp.cfg.heads;
  m["level_token_counts"] = rp.cfg.level_token_counts;
  rp.params.save(dir, m);
}

template <typename S>
RouterParams<S> load_router(const std::filesystem::path& dir) {
  nlohmann::json m;
  ParamSet<S> ps = ParamSet<S>::load(dir, &m);
  RouterConfig cfg;
  cfg.d = m.at("d").get<Index>();
  cfg.d_vis = m.at("d_vis").get<Index>();
  cfg.n_levels = m.at("n_levels").get<int>();
  cfg.k = m.at("k").get<int>();
  cfg.heads = m.at("heads").get<int>();
  cfg.level_token_counts = m.at("level_token_counts").get<std::vector<Index>>();
  // Rebuild slot indices with the same registration order, then swap in the
  // loaded tensors.
  RouterParams<S> rp = init_router_params<S>(cfg, 0);
  if (rp.params.names != ps.names) throw CorruptManifest("router checkpoint layout mismatch");
  rp.params = std::move(ps);
  return rp;
}

}  // namespace granroute
