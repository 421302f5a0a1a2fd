#pragma once

#include "granroute/optimizer.hpp"
#include "granroute/pyramid.hpp"
#include "granroute/transformer.hpp"

namespace granroute {

struct LmmConfig {
  Index vocab = 64;
  Index d = 64;
  Index d_vis = 16;
  int heads = 4;
  int blocks = 2;
};

// Tiny decoder-only LM over [visual tokens; instruction ids; answer ids].
// Stage-1 trainee and frozen Stage-2 feedback oracle.
template <typename S>
struct ToyLmm {
  LmmConfig cfg;
  ParamSet<S> params;
  Index embed = 0, segments = 0, lnf_g = 0, lnf_b = 0, out_w = 0, out_b = 0;
  std::vector<TransformerLayerIdx> layers;
};

template <typename S>
ToyLmm<S> init_lmm(const LmmConfig& cfg, unsigned long long seed) {
  std::mt19937_64 rng(seed);
  ToyLmm<S> lmm;
  lmm.cfg = cfg;
  const double std_w = 1.0 / std::sqrt(double(cfg.d));
  lmm.embed = lmm.params.add("embed", randn<S>({cfg.vocab, cfg.d}, std_w, rng));
  lmm.segments = lmm.params.add("segments", randn<S>({3, cfg.d}, std_w, rng));
  for (int b = 0; b < cfg.blocks; ++b)
    lmm.layers.push_back(
        register_transformer_layer(lmm.params, "block" + std::to_string(b), cfg.d, cfg.heads, rng));
  lmm.lnf_g = lmm.params.add("lnf_g", Tensor<S>::full({1, cfg.d}, S(1)));
  lmm.lnf_b = lmm.params.add("lnf_b", Tensor<S>::zeros({1, cfg.d}));
  lmm.out_w = lmm.params.add("out_w", randn<S>({cfg.d, cfg.vocab}, std_w, rng));
  lmm.out_b = lmm.params.add("out_b", Tensor<S>::zeros({1, cfg.vocab}));
  return lmm;
}

template <typename S>
struct LmmForwardNodes {
  int logits = -1;  // L_seq x vocab
  std::vector<int> pnodes;
  Index n_vis = 0, n_ins = 0, n_ans = 0;
};

template <typename S>
LmmForwardNodes<S> lmm_forward_graph(Graph<S>& g, const ToyLmm<S>& lmm, const TokenGrid<S>& visual,
                                     const std::vector<int>& instr_ids,
                                     const std::vector<int>& answer_ids,
                                     const std::vector<int>* shared_pnodes = nullptr) {
  const LmmConfig& cfg = lmm.cfg;
  for (int id : instr_ids)
    if (id < 0 || id >= cfg.vocab) throw VocabOverflow("instruction id " + std::to_string(id));
  for (int id : answer_ids)
    if (id < 0 || id >= cfg.vocab) throw VocabOverflow("answer id " + std::to_string(id));
  if (instr_ids.empty()) throw ShapeMismatch("instruction must be non-empty");

  LmmForwardNodes<S> out;
  out.n_vis = visual.tokens();
  out.n_ins = Index(instr_ids.size());
  out.n_ans = Index(answer_ids.size());
  const Index L = out.n_vis + out.n_ins + out.n_ans;

  out.pnodes = shared_pnodes ? *shared_pnodes : leaf_params(g, lmm.params);
  const int vis = g.leaf(lift_tokens(visual.data, cfg.d));

  OpAttrs text_attrs;
  text_attrs.ids = instr_ids;
  text_attrs.ids.insert(text_attrs.ids.end(), answer_ids.begin(), answer_ids.end());
  const int text = g.apply(OpKind::kEmbedLookup, {out.pnodes[size_t(lmm.embed)]}, text_attrs);
  OpAttrs cat;
  cat.axis = 0;
  int h = g.apply(OpKind::kConcat, {vis, text}, cat);

  OpAttrs seg_attrs;
  for (Index i = 0; i < L; ++i)
    seg_attrs.ids.push_back(i < out.n_vis ? 0 : (i < out.n_vis + out.n_ins ? 1 : 2));
  const int seg = g.apply(OpKind::kEmbedLookup, {out.pnodes[size_t(lmm.segments)]}, seg_attrs);
  h = g.apply(OpKind::kAdd, {h, seg});

  // Causal mask over the full sequence.
  std::vector<std::uint8_t> mask(size_t(L * L), 0);
  for (Index i = 0; i < L; ++i)
    for (Index j = i + 1; j < L; ++j) mask[size_t(i * L + j)] = 1;

  for (const auto& layer : lmm.layers)
    h = transformer_layer_forward(g, h, layer, out.pnodes, &mask);

  OpAttrs ln;
  h = g.apply(OpKind::kLayerNorm, {h, out.pnodes[size_t(lmm.lnf_g)], out.pnodes[size_t(lmm.lnf_b)]}, ln);
  int logits = g.apply(OpKind::kMatmul, {h, out.pnodes[size_t(lmm.out_w)]});
  out.logits = g.apply(OpKind::kAdd, {logits, out.pnodes[size_t(lmm.out_b)]});
  return out;
}

// Next-token logits for the token following the answer prefix.
template <typename S>
Tensor<S> lmm_forward(const ToyLmm<S>& lmm, const TokenGrid<S>& visual,
                      const std::vector<int>& instr_ids, const std::vector<int>& answer_prefix) {
  Graph<S> g;
  LmmForwardNodes<S> n = lmm_forward_graph(g, lmm, visual, instr_ids, answer_prefix);
  const Tensor<S>& logits = g.value(n.logits);
  Tensor<S> row = Tensor<S>::zeros({1, logits.cols()});
  row.mat().row(0) = logits.mat().row(logits.rows() - 1);
  return row;
}

struct AnswerLogProb {
  double sum_logprob = 0.0;
  double avg_logprob = 0.0;
  Index T = 0;
};

// Teacher-forced sum/average of per-token log-softmax values at the gold ids.
template <typename S>
AnswerLogProb answer_logprob(const ToyLmm<S>& lmm, const TokenGrid<S>& visual,
                             const std::vector<int>& instr_ids, const std::vector<int>& answer) {
  if (answer.empty()) throw ShapeMismatch("answer must be non-empty");
  Graph<S> g;
  LmmForwardNodes<S> n = lmm_forward_graph(g, lmm, visual, instr_ids, answer);
  const Tensor<S>& logits = g.value(n.logits);
  AnswerLogProb out;
  out.T = Index(answer.size());
  for (Index t = 0; t < out.T; ++t) {
    const Index row = n.n_vis + n.n_ins - 1 + t;  // position predicting answer[t]
    const auto lr = logits.mat().row(row);
    const double mx = double(lr.maxCoeff());
    double lse = 0.0;
    for (Index c = 0; c < logits.cols(); ++c) lse += std::exp(double(lr[c]) - mx);
    out.sum_logprob += double(lr[answer[size_t(t)]]) - mx - std::log(lse);
  }
  out.avg_logprob = out.sum_logprob / double(out.T);
  return out;
}

// Answer-only CE summed over answer tokens, averaged over pyramid levels.
// Returns the scalar loss node.
template <typename S>
int stage1_loss_graph(Graph<S>& g, const ToyLmm<S>& lmm, const GranularityPyramid<S>& pyramid,
                      const std::vector<int>& instr_ids, const std::vector<int>& answer,
                      std::vector<int>* pnodes_out = nullptr) {
  std::vector<int> pnodes = leaf_params(g, lmm.params);
  if (pnodes_out) *pnodes_out = pnodes;
  int total = -1;
  for (int l = 0; l < pyramid.n_levels(); ++l) {
    LmmForwardNodes<S> n =
        lmm_forward_graph(g, lmm, pyramid.levels[size_t(l)], instr_ids, answer, &pnodes);
    const int probs = g.apply(OpKind::kSoftmax, {n.logits});
    OpAttrs ce;
    ce.reduction = Reduction::kSum;
    const Index L = n.n_vis + n.n_ins + n.n_ans;
    ce.targets.assign(size_t(L), -1);
    for (Index t = 0; t < n.n_ans; ++t)
      ce.targets[size_t(n.n_vis + n.n_ins - 1 + t)] = answer[size_t(t)];
    const int loss = g.apply(OpKind::kCrossEntropy, {probs}, ce);
    total = total < 0 ? loss : g.apply(OpKind::kAdd, {total, loss});
  }
  OpAttrs sc;
  sc.scalar = 1.0 / double(pyramid.n_levels());
  return g.apply(OpKind::kScale, {total}, sc);
}

template <typename S>
std::vector<Tensor<S>> param_grads(const Graph<S>& g, const std::vector<int>& pnodes) {
  std::vector<Tensor<S>> grads;
  grads.reserve(pnodes.size());
  for (int id : pnodes) grads.push_back(g.has_grad(id) ? g.grad(id) : Tensor<S>{});
  return grads;
}

template <typename S>
void save_lmm(const ToyLmm<S>& lmm, const std::filesystem::path& dir) {
  nlohmann::json m;
  m["vocab"] = lmm.cfg.vocab;
  m["d"] = lmm.cfg.d;
  m["d_vis"] = lmm.cfg.d_vis;
  m["heads"] = lmm.cfg.heads;
  m["blocks"] = lmm.cfg.blocks;
  lmm.params.save(dir, m);
}

template <typename S>
ToyLmm<S> load_lmm(const std::filesystem::path& dir) {
  nlohmann::json m;
  ParamSet<S> ps = ParamSet<S>::load(dir, &m);
  LmmConfig cfg;
  cfg.vocab = m.at("vocab").get<Index>();
  cfg.d = m.at("d").get<Index>();
  cfg.d_vis = m.at("d_vis").get<Index>();
  cfg.heads = m.at("heads").get<int>();
  cfg.blocks = m.at("blocks").get<int>();
  ToyLmm<S> lmm = init_lmm<S>(cfg, 0);
  if (lmm.params.names != ps.names) throw CorruptManifest("lmm checkpoint layout mismatch");
  lmm.params = std::move(ps);
  return lmm;
}

// Single-sample step: answer-only CE averaged over levels, one update.
template <typename S>
double stage1_train_step(ToyLmm<S>& lmm, Adam<S>& opt, const GranularityPyramid<S>& pyramid,
                         const std::vector<int>& instr_ids, const std::vector<int>& answer) {
  Graph<S> g;
  std::vector<int> pn;
  const int loss = stage1_loss_graph(g, lmm, pyramid, instr_ids, answer, &pn);
  g.backward(loss);
  opt.step(param_grads(g, pn));
  return double(g.value(loss).data[0]);
}

}  // namespace granroute
