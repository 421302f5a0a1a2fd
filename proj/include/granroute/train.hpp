#pragma once

#include "granroute/probe.hpp"
#include "granroute/rglf.hpp"
#include "granroute/scenes.hpp"
#include "granroute/threading.hpp"

#include <numeric>

namespace granroute {

// Pyramids for a whole corpus, optionally restricted to a level subset.
template <typename S>
std::vector<GranularityPyramid<S>> build_pyramids(const Corpus<S>& corpus,
                                                  const std::vector<int>& level_mask = {}) {
  std::vector<GranularityPyramid<S>> out(corpus.samples.size());
  parallel_for(int(corpus.samples.size()), [&](int i) {
    auto pyr = build_pyramid(corpus.samples[size_t(i)].grid, corpus.cfg.n_levels);
    out[size_t(i)] = level_mask.empty() ? std::move(pyr) : select_levels(pyr, level_mask);
  });
  return out;
}

// Cosine top-k relevance filter against the sample's finest available level.
template <typename S>
FilteredInstructions<S> filter_for_router(const SceneSample<S>& sample,
                                          const GranularityPyramid<S>& pyramid, int k) {
  auto scores = relevance_scores(sample.instruction, pyramid.levels[0]);
  return filter_top_k(sample.instruction, scores, k);
}

// Fixed-order reduction: per-sample gradients are always summed in slot order,
// so results do not depend on the thread count.
template <typename S>
void reduce_mean_grads(std::vector<std::vector<Tensor<S>>>& per_sample,
                       std::vector<Tensor<S>>& out) {
  const size_t n = per_sample.size();
  out = std::move(per_sample[0]);
  for (size_t s = 1; s < n; ++s)
    for (size_t p = 0; p < out.size(); ++p) {
      if (per_sample[s][p].numel() == 0) continue;
      if (out[p].numel() == 0)
        out[p] = std::move(per_sample[s][p]);
      else
        out[p].data += per_sample[s][p].data;
    }
  for (auto& g : out)
    if (g.numel() > 0) g.data /= S(n);
}

struct Stage1Options {
  int epochs = 1;
  Index batch_size = 32;
  double lr = 1e-3;
  unsigned long long seed = 0;
  int threads = 0;
  std::ostream* log = nullptr;
};

// Stage 1: answer-only CE averaged over all granularities, every level of
// every sample teaching the same LMM.
template <typename S>
std::vector<double> train_lmm_stage1(ToyLmm<S>& lmm, const Corpus<S>& corpus,
                                     const std::vector<GranularityPyramid<S>>& pyramids,
                                     const Stage1Options& opt) {
  if (corpus.samples.empty()) throw EmptyList("stage-1 training needs samples");
  Adam<S> adam(lmm.params, opt.lr);
  std::mt19937_64 rng(opt.seed);
  std::vector<size_t> order(corpus.samples.size());
  std::iota(order.begin(), order.end(), size_t(0));

  std::vector<double> epoch_losses;
  long step = 0;
  for (int e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (size_t b = 0; b < order.size(); b += size_t(opt.batch_size)) {
      const size_t bn = std::min(size_t(opt.batch_size), order.size() - b);
      std::vector<std::vector<Tensor<S>>> grads(bn);
      std::vector<double> losses(bn, 0.0);
      parallel_for(int(bn), [&](int i) {
        const auto& s = corpus.samples[order[b + size_t(i)]];
        const auto& pyr = pyramids[order[b + size_t(i)]];
        Graph<S> g;
        std::vector<int> pn;
        const int loss = stage1_loss_graph(g, lmm, pyr, s.instruction.ids, s.answer, &pn);
        g.backward(loss);
        grads[size_t(i)] = param_grads(g, pn);
        losses[size_t(i)] = double(g.value(loss).data[0]);
      }, opt.threads);
      std::vector<Tensor<S>> mean;
      reduce_mean_grads(grads, mean);
      adam.step(mean);
      const double batch_loss =
          std::accumulate(losses.begin(), losses.end(), 0.0) / double(bn);
      epoch_loss += batch_loss * double(bn);
      ++step;
      if (opt.log) {
        nlohmann::json rec;
        rec["stage"] = 1;
        rec["step"] = step;
        rec["epoch"] = e;
        rec["loss"] = batch_loss;
        (*opt.log) << rec.dump() << "\n";
      }
    }
    epoch_losses.push_back(epoch_loss / double(order.size()));
  }
  return epoch_losses;
}

// Per-corpus LMM feedback, computed once against the frozen model.
template <typename S>
std::vector<FeedbackRecord> compute_feedback(const ToyLmm<S>& lmm, const Corpus<S>& corpus,
                                             const std::vector<GranularityPyramid<S>>& pyramids,
                                             int threads = 0) {
  std::vector<FeedbackRecord> out(corpus.samples.size());
  parallel_for(int(corpus.samples.size()), [&](int i) {
    const auto& s = corpus.samples[size_t(i)];
    out[size_t(i)] = rank_by_feedback(
        score_all_levels(lmm, pyramids[size_t(i)], s.instruction.ids, s.answer));
  }, threads);
  return out;
}

inline void save_feedback(const std::vector<FeedbackRecord>& records,
                          const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string());
  for (const auto& rec : records) {
    nlohmann::json j;
    for (const auto& lp : rec.per_level) {
      j["sum"].push_back(lp.sum_logprob);
      j["T"].push_back(lp.T);
    }
    os << j.dump() << "\n";
  }
  if (!os) throw IoError("feedback cache write failed");
}

inline std::vector<FeedbackRecord> load_feedback(const std::filesystem::path& path, size_t n) {
  std::ifstream is(path);
  if (!is) throw MissingCheckpoint("no feedback cache at " + path.string());
  std::vector<FeedbackRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("sum")) throw CorruptManifest("bad feedback record");
    std::vector<AnswerLogProb> lps;
    const auto sums = j["sum"].get<std::vector<double>>();
    const auto Ts = j["T"].get<std::vector<Index>>();
    if (sums.size() != Ts.size()) throw CorruptManifest("bad feedback record");
    for (size_t i = 0; i < sums.size(); ++i) {
      AnswerLogProb lp;
      lp.sum_logprob = sums[i];
      lp.T = Ts[i];
      lp.avg_logprob = lp.sum_logprob / double(lp.T);
      lps.push_back(lp);
    }
    out.push_back(rank_by_feedback(lps));
  }
  if (out.size() != n) throw CorruptManifest("feedback cache size mismatch");
  return out;
}

struct Stage2Options {
  int epochs = 1;
  Index batch_size = 8;
  unsigned long long seed = 0;
  int threads = 0;
  RglfConfig rglf;
  std::ostream* log = nullptr;
};

// Stage 2: ranking + CE feedback alignment (or the Gumbel variant) on the
// frozen-LMM feedback; only router parameters move.
template <typename S>
std::vector<double> train_router_stage2(RouterParams<S>& rp, const Corpus<S>& corpus,
                                        const std::vector<GranularityPyramid<S>>& pyramids,
                                        const std::vector<FeedbackRecord>& feedback,
                                        const Stage2Options& opt) {
  if (corpus.samples.empty()) throw EmptyList("stage-2 training needs samples");
  if (feedback.size() != corpus.samples.size())
    throw ShapeMismatch("feedback records vs corpus size");
  Adam<S> adam(rp.params, opt.rglf.lr);
  std::mt19937_64 rng(opt.seed);
  std::vector<size_t> order(corpus.samples.size());
  std::iota(order.begin(), order.end(), size_t(0));

  std::vector<FilteredInstructions<S>> filtered(corpus.samples.size());
  parallel_for(int(corpus.samples.size()), [&](int i) {
    filtered[size_t(i)] =
        filter_for_router(corpus.samples[size_t(i)], pyramids[size_t(i)], rp.cfg.k);
  }, opt.threads);

  std::vector<double> epoch_losses;
  long step = 0;
  for (int e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (size_t b = 0; b < order.size(); b += size_t(opt.batch_size)) {
      const size_t bn = std::min(size_t(opt.batch_size), order.size() - b);
      std::vector<std::vector<Tensor<S>>> grads(bn);
      std::vector<RglfLosses> losses(bn);
      parallel_for(int(bn), [&](int i) {
        const size_t idx = order[b + size_t(i)];
        Graph<S> g;
        auto nodes = router_forward_graph(g, pyramids[idx], filtered[idx], rp);
        Tensor<S> seed;
        if (opt.rglf.gumbel_mode) {
          const auto& per_level = feedback[idx].per_level;
          auto sel = gumbel_select(g.value(nodes.z_final), opt.rglf.gumbel_temperature,
                                   detail::mix_seed(opt.seed, (unsigned long long)(step * 1000 + i)));
          const Index n = g.value(nodes.z_final).numel();
          double soft_dot = 0.0;
          for (Index c = 0; c < n; ++c)
            soft_dot += double(sel.soft.data[c]) * -per_level[size_t(c)].sum_logprob;
          seed = Tensor<S>::zeros(g.value(nodes.z_final).shape);
          for (Index c = 0; c < n; ++c)
            seed.data[c] = S(double(sel.soft.data[c]) *
                             (-per_level[size_t(c)].sum_logprob - soft_dot) /
                             opt.rglf.gumbel_temperature);
          losses[size_t(i)].total = -per_level[size_t(sel.hard_level)].sum_logprob;
          losses[size_t(i)].ce = soft_dot;
          losses[size_t(i)].selected = sel.hard_level;
        } else {
          losses[size_t(i)] =
              rglf_z_gradient(g.value(nodes.z_final), feedback[idx], opt.rglf, &seed);
        }
        g.backward({{nodes.z_final, std::move(seed)}});
        grads[size_t(i)] = param_grads(g, nodes.pnodes);
      }, opt.threads);
      std::vector<Tensor<S>> mean;
      reduce_mean_grads(grads, mean);
      adam.step(mean);

      double rank = 0.0, ce = 0.0, total = 0.0;
      std::vector<int> hist(size_t(rp.cfg.n_levels), 0);
      for (const auto& l : losses) {
        rank += l.rank;
        ce += l.ce;
        total += l.total;
        hist[size_t(l.selected)]++;
      }
      rank /= double(bn);
      ce /= double(bn);
      total /= double(bn);
      epoch_loss += total * double(bn);
      ++step;
      if (opt.log) {
        nlohmann::json rec;
        rec["stage"] = 2;
        rec["step"] = step;
        rec["epoch"] = e;
        rec["rank_loss"] = rank;
        rec["ce_loss"] = ce;
        rec["total"] = total;
        rec["selected_level_histogram"] = hist;
        (*opt.log) << rec.dump() << "\n";
      }
    }
    epoch_losses.push_back(epoch_loss / double(order.size()));
  }
  return epoch_losses;
}

}  // namespace granroute
