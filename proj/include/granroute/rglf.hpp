#pragma once

#include "granroute/lmm.hpp"
#include "granroute/router.hpp"

#include <random>

namespace granroute {

// Per-sample LMM feedback: answer log-probs per granularity, the descending
// permutation, and the adaptive margins over the sorted upper triangle.
struct FeedbackRecord {
  std::vector<AnswerLogProb> per_level;   // indexed by level
  std::vector<int> perm;                  // perm[rank] = level, best first
  std::vector<double> sorted_avg;         // avg_logprob in sorted order
  MatrixX<double> margins;                // margins(i, j) for j > i, sorted indexing

  int best_level() const { return perm.empty() ? 0 : perm[0]; }
};

struct RglfConfig {
  double alpha = 0.1;
  double lr = 1e-3;
  unsigned long long seed = 0;
  bool gumbel_mode = false;
  double gumbel_temperature = 1.0;
  bool use_rank_loss = true;  // ablations can turn either term off
  bool use_ce_loss = true;
};

// Sort levels by descending sum log-prob (exact ties toward the coarser
// level) and fill margins(i,j) = (j - i) * (avg_i - avg_j) for j > i.
inline FeedbackRecord rank_by_feedback(const std::vector<AnswerLogProb>& logprobs) {
  const int n = int(logprobs.size());
  if (n < 2) throw EmptyList("rank_by_feedback needs >= 2 levels");
  FeedbackRecord rec;
  rec.per_level = logprobs;
  rec.perm.resize(size_t(n));
  std::iota(rec.perm.begin(), rec.perm.end(), 0);
  std::sort(rec.perm.begin(), rec.perm.end(), [&](int a, int b) {
    if (logprobs[size_t(a)].sum_logprob != logprobs[size_t(b)].sum_logprob)
      return logprobs[size_t(a)].sum_logprob > logprobs[size_t(b)].sum_logprob;
    return a > b;
  });
  rec.sorted_avg.resize(size_t(n));
  for (int r = 0; r < n; ++r) rec.sorted_avg[size_t(r)] = logprobs[size_t(rec.perm[size_t(r)])].avg_logprob;
  rec.margins = MatrixX<double>::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double m = double(j - i) * (rec.sorted_avg[size_t(i)] - rec.sorted_avg[size_t(j)]);
      if (m < 0) throw NumericOverflow("negative margin after descending sort");
      rec.margins(i, j) = m;
    }
  return rec;
}

// Pairwise hinge over feedback-sorted router scores.
inline double ranking_loss(const std::vector<double>& sorted_scores, const MatrixX<double>& margins) {
  const int n = int(sorted_scores.size());
  double loss = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      loss += std::max(0.0, sorted_scores[size_t(j)] - sorted_scores[size_t(i)] + margins(i, j));
  return loss;
}

// Loss plus subgradient w.r.t. the sorted scores.
inline std::pair<double, std::vector<double>> ranking_loss_grad(
    const std::vector<double>& sorted_scores, const MatrixX<double>& margins) {
  const int n = int(sorted_scores.size());
  std::vector<double> grad(size_t(n), 0.0);
  double loss = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double h = sorted_scores[size_t(j)] - sorted_scores[size_t(i)] + margins(i, j);
      if (h > 0.0) {
        loss += h;
        grad[size_t(j)] += 1.0;
        grad[size_t(i)] -= 1.0;
      }
    }
  return {loss, grad};
}

// Argmax of sum log-prob (ties toward the coarser level).
inline int best_granularity(const std::vector<AnswerLogProb>& logprobs) {
  int best = 0;
  for (int i = 1; i < int(logprobs.size()); ++i)
    if (logprobs[size_t(i)].sum_logprob >= logprobs[size_t(best)].sum_logprob) best = i;
  return best;
}

template <typename S>
double ce_target_loss(const Tensor<S>& probs, const std::vector<AnswerLogProb>& logprobs,
                      double clamp = 1e-12) {
  if (Index(logprobs.size()) != probs.numel()) throw ShapeMismatch("probs vs logprobs length");
  const int k = best_granularity(logprobs);
  return -std::log(std::max(double(probs.data[k]), clamp));
}

struct RglfLosses {
  double total = 0.0, rank = 0.0, ce = 0.0;
  int selected = 0;
};

template <typename S>
std::vector<AnswerLogProb> score_all_levels(const ToyLmm<S>& lmm, const GranularityPyramid<S>& pyramid,
                                            const std::vector<int>& instr_ids,
                                            const std::vector<int>& answer) {
  std::vector<AnswerLogProb> out;
  out.reserve(size_t(pyramid.n_levels()));
  for (const auto& grid : pyramid.levels) out.push_back(answer_logprob(lmm, grid, instr_ids, answer));
  return out;
}

// Gradient of the Stage-2 loss w.r.t. z_final. Scores are log softmax probs;
// CE targets the feedback-best granularity.
template <typename S>
RglfLosses rglf_z_gradient(const Tensor<S>& z_final, const FeedbackRecord& fb,
                           const RglfConfig& cfg, Tensor<S>* seed_out) {
  const Index n = z_final.numel();
  std::vector<const Tensor<S>*> in{&z_final};
  Tensor<S> probs = forward_op(OpKind::kSoftmax, in);

  std::vector<double> s_level(size_t(n), 0.0);
  for (Index i = 0; i < n; ++i)
    s_level[size_t(i)] = std::log(std::max(double(probs.data[i]), 1e-12));

  RglfLosses out;
  out.selected = argmax_prefer_coarse(probs);
  Tensor<S> seed = Tensor<S>::zeros(z_final.shape);

  if (cfg.use_rank_loss) {
    std::vector<double> sorted(size_t(n), 0.0);
    for (Index r = 0; r < n; ++r) sorted[size_t(r)] = s_level[size_t(fb.perm[size_t(r)])];
    auto [rank, g_sorted] = ranking_loss_grad(sorted, fb.margins);
    out.rank = rank;
    std::vector<double> g_level(size_t(n), 0.0);
    for (Index r = 0; r < n; ++r) g_level[size_t(fb.perm[size_t(r)])] = g_sorted[size_t(r)];
    double gsum = 0.0;
    for (double g : g_level) gsum += g;
    // d(log softmax)/dz pulled back onto z.
    for (Index j = 0; j < n; ++j)
      seed.data[j] += S(g_level[size_t(j)] - gsum * double(probs.data[j]));
  }
  if (cfg.use_ce_loss) {
    const int kstar = best_granularity(fb.per_level);
    out.ce = -std::log(std::max(double(probs.data[kstar]), 1e-12));
    for (Index j = 0; j < n; ++j)
      seed.data[j] += S(cfg.alpha * (double(probs.data[j]) - (Index(kstar) == j ? 1.0 : 0.0)));
  }
  out.total = out.rank + cfg.alpha * out.ce;
  if (seed_out) *seed_out = std::move(seed);
  return out;
}

// One Stage-2 update: feedback-sorted ranking loss + alpha * CE toward the
// LMM-best level; gradients flow only into router params.
template <typename S>
RglfLosses rglf_step(const GranularityPyramid<S>& pyramid, const FilteredInstructions<S>& instr,
                     const FeedbackRecord& fb, RouterParams<S>& rp, Adam<S>& opt,
                     const RglfConfig& cfg) {
  Graph<S> g;
  RouterForwardNodes<S> nodes = router_forward_graph(g, pyramid, instr, rp);
  Tensor<S> seed;
  RglfLosses losses = rglf_z_gradient(g.value(nodes.z_final), fb, cfg, &seed);
  g.backward({{nodes.z_final, std::move(seed)}});
  opt.step(param_grads(g, nodes.pnodes));
  return losses;
}

// Gumbel-Softmax sample over granularity logits: soft relaxation plus
// straight-through hard one-hot.
template <typename S>
struct GumbelSelect {
  Tensor<S> soft;
  Tensor<S> hard;
  int hard_level = 0;
};

template <typename S>
GumbelSelect<S> gumbel_select(const Tensor<S>& z_final, double temperature,
                              unsigned long long seed) {
  if (!(temperature > 0.0)) throw SchemaError("gumbel temperature must be > 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(1e-12, 1.0);
  Tensor<S> noisy = z_final;
  for (Index i = 0; i < noisy.numel(); ++i)
    noisy.data[i] += S(-std::log(-std::log(unif(rng))));

  GumbelSelect<S> out;
  out.hard_level = argmax_prefer_coarse(noisy);
  out.hard = Tensor<S>::zeros(z_final.shape);
  out.hard.data[out.hard_level] = S(1);
  Tensor<S> scaled = noisy;
  scaled.data /= S(temperature);
  std::vector<const Tensor<S>*> in{&scaled};
  out.soft = forward_op(OpKind::kSoftmax, in);
  return out;
}

// Alternative trainer: expected answer CE under the straight-through Gumbel
// selection, gradients to the router through the soft weights.
template <typename S>
RglfLosses gumbel_step(const GranularityPyramid<S>& pyramid, const FilteredInstructions<S>& instr,
                       const std::vector<AnswerLogProb>& per_level, RouterParams<S>& rp,
                       Adam<S>& opt, const RglfConfig& cfg, unsigned long long noise_seed) {
  Graph<S> g;
  RouterForwardNodes<S> nodes = router_forward_graph(g, pyramid, instr, rp);
  const Tensor<S>& z = g.value(nodes.z_final);
  GumbelSelect<S> sel = gumbel_select(z, cfg.gumbel_temperature, noise_seed);

  const Index n = z.numel();
  VectorX<double> ce(n);
  for (Index i = 0; i < n; ++i) ce[i] = -per_level[size_t(i)].sum_logprob;
  double soft_dot = 0.0;
  for (Index i = 0; i < n; ++i) soft_dot += double(sel.soft.data[i]) * ce[i];

  Tensor<S> seed = Tensor<S>::zeros(z.shape);
  for (Index j = 0; j < n; ++j)
    seed.data[j] = S(double(sel.soft.data[j]) * (ce[j] - soft_dot) / cfg.gumbel_temperature);
  g.backward({{nodes.z_final, std::move(seed)}});
  opt.step(param_grads(g, nodes.pnodes));

  RglfLosses losses;
  losses.total = ce[sel.hard_level];  // straight-through forward value
  losses.ce = soft_dot;
  losses.selected = sel.hard_level;
  return losses;
}

}  // namespace granroute
