#pragma once

#include "granroute/train.hpp"

#include <chrono>
#include <iomanip>

namespace granroute {

enum class PolicyKind { kAdaptive, kFixed, kRandom, kMatchedRandom, kOracle, kImageOnly };

struct EvalPolicy {
  PolicyKind kind = PolicyKind::kAdaptive;
  int fixed_level = 0;
  std::vector<double> histogram;  // sampling weights for kMatchedRandom
};

inline std::string policy_name(const EvalPolicy& p) {
  switch (p.kind) {
    case PolicyKind::kAdaptive: return "adaptive";
    case PolicyKind::kFixed: return "fixed:" + std::to_string(p.fixed_level);
    case PolicyKind::kRandom: return "random";
    case PolicyKind::kMatchedRandom: return "matched_random";
    case PolicyKind::kOracle: return "oracle";
    case PolicyKind::kImageOnly: return "image_only";
  }
  return "unknown";
}

inline EvalPolicy parse_policy(const std::string& name) {
  EvalPolicy p;
  if (name == "adaptive") p.kind = PolicyKind::kAdaptive;
  else if (name == "random") p.kind = PolicyKind::kRandom;
  else if (name == "matched_random") p.kind = PolicyKind::kMatchedRandom;
  else if (name == "oracle") p.kind = PolicyKind::kOracle;
  else if (name == "image_only") p.kind = PolicyKind::kImageOnly;
  else if (name.rfind("fixed:", 0) == 0) {
    p.kind = PolicyKind::kFixed;
    p.fixed_level = std::stoi(name.substr(6));
  } else {
    throw SchemaError("unknown policy: " + name);
  }
  return p;
}

struct EvalOptions {
  EvalPolicy policy;
  unsigned long long seed = 0;
  int threads = 0;
  int local_images = 1;       // >1 enables the multi-image aggregation path
  bool measure_wallclock = false;
  int wallclock_reps = 3;
};

struct EvalReport {
  std::string policy;
  Index n_samples = 0;
  double accuracy = 0.0;
  std::map<std::string, double> accuracy_by_task;
  double avg_tokens_per_grid = 0.0;
  double token_reduction_pct = 0.0;
  double oracle_agreement_pct = 0.0;
  double wallclock_speedup = 0.0;  // 0 when not measured
  double analytic_speedup = 0.0;   // quadratic-attention cost proxy
  std::vector<double> routing_histogram;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["policy"] = policy;
    j["n_samples"] = n_samples;
    j["accuracy"] = accuracy;
    j["accuracy_by_task"] = accuracy_by_task;
    j["avg_tokens_per_grid"] = avg_tokens_per_grid;
    j["token_reduction_pct"] = token_reduction_pct;
    j["oracle_agreement_pct"] = oracle_agreement_pct;
    j["wallclock_speedup"] = wallclock_speedup;
    j["analytic_speedup"] = analytic_speedup;
    j["routing_histogram"] = routing_histogram;
    return j;
  }
};

inline std::string report_csv_header() {
  return "policy,n_samples,accuracy,accuracy_coarse,accuracy_fine,avg_tokens_per_grid,"
         "token_reduction_pct,oracle_agreement_pct,wallclock_speedup,analytic_speedup";
}

inline std::string report_csv_row(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << r.policy << "," << r.n_samples << "," << r.accuracy << ","
     << r.accuracy_by_task.at("coarse_query") << "," << r.accuracy_by_task.at("fine_query") << ","
     << r.avg_tokens_per_grid << "," << r.token_reduction_pct << "," << r.oracle_agreement_pct
     << "," << r.wallclock_speedup << "," << r.analytic_speedup;
  return os.str();
}

// Greedy first-token decode at one granularity; the class symbol decides
// correctness, a well-formed answer also closes with the end marker.
template <typename S>
bool decode_correct(const ToyLmm<S>& lmm, const TokenGrid<S>& grid,
                    const std::vector<int>& instr_ids, const std::vector<int>& answer) {
  Tensor<S> logits = lmm_forward(lmm, grid, instr_ids, {});
  Index tok;
  logits.data.maxCoeff(&tok);
  return int(tok) == answer[0];
}

template <typename S>
FilteredInstructions<S> empty_instructions(Index d) {
  FilteredInstructions<S> fi;
  fi.vectors = Tensor<S>::zeros({0, d});
  return fi;
}

// Per-sample level choices for one policy over a whole corpus.
template <typename S>
std::vector<int> choose_levels(const ToyLmm<S>& lmm, const RouterParams<S>* rp,
                               const Corpus<S>& corpus,
                               const std::vector<GranularityPyramid<S>>& pyramids,
                               const std::vector<FeedbackRecord>& feedback,
                               const EvalOptions& opt) {
  (void)lmm;
  const int n_levels = pyramids.empty() ? 0 : pyramids[0].n_levels();
  std::vector<int> levels(corpus.samples.size(), 0);
  const EvalPolicy& pol = opt.policy;

  if (pol.kind == PolicyKind::kFixed) {
    if (pol.fixed_level < 0 || pol.fixed_level >= n_levels)
      throw SchemaError("fixed level out of range");
    std::fill(levels.begin(), levels.end(), pol.fixed_level);
    return levels;
  }
  if (pol.kind == PolicyKind::kRandom || pol.kind == PolicyKind::kMatchedRandom) {
    std::vector<double> weights(size_t(n_levels), 1.0);
    if (pol.kind == PolicyKind::kMatchedRandom) {
      if (Index(pol.histogram.size()) != n_levels)
        throw SchemaError("matched_random needs a histogram with one entry per level");
      weights = pol.histogram;
    }
    std::mt19937_64 rng(opt.seed);
    std::discrete_distribution<int> dist(weights.begin(), weights.end());
    for (auto& l : levels) l = dist(rng);
    return levels;
  }
  if (pol.kind == PolicyKind::kOracle) {
    if (feedback.size() != corpus.samples.size())
      throw ShapeMismatch("oracle policy needs feedback for every sample");
    for (size_t i = 0; i < levels.size(); ++i) levels[i] = feedback[i].best_level();
    return levels;
  }

  // Router-driven policies.
  if (!rp) throw MissingCheckpoint("router required for this policy");
  parallel_for(int(corpus.samples.size()), [&](int i) {
    const auto& s = corpus.samples[size_t(i)];
    FilteredInstructions<S> fi = pol.kind == PolicyKind::kImageOnly
                                     ? empty_instructions<S>(s.instruction.vectors.cols())
                                     : filter_for_router(s, pyramids[size_t(i)], rp->cfg.k);
    if (opt.local_images <= 1) {
      levels[size_t(i)] = router_forward(pyramids[size_t(i)], fi, *rp).selected;
    } else {
      std::vector<RouterOutput<S>> outs;
      outs.push_back(router_forward(pyramids[size_t(i)], fi, *rp));
      std::vector<int> mask;
      for (const auto& lvl : pyramids[size_t(i)].levels) mask.push_back(lvl.level);
      for (int m = 1; m < opt.local_images; ++m) {
        TokenGrid<S> extra = generate_extra_grid(corpus.cfg, s, m);
        auto pyr = select_levels(build_pyramid(extra, corpus.cfg.n_levels), mask);
        outs.push_back(router_forward(pyr, fi, *rp));
      }
      levels[size_t(i)] = aggregate_images(outs).second;
    }
  }, opt.threads);
  return levels;
}

template <typename S>
EvalReport run_eval(const ToyLmm<S>& lmm, const RouterParams<S>* rp, const Corpus<S>& corpus,
                    const std::vector<GranularityPyramid<S>>& pyramids,
                    const std::vector<FeedbackRecord>& feedback, const EvalOptions& opt) {
  if (corpus.samples.empty()) throw EmptyList("evaluation needs samples");
  const size_t n = corpus.samples.size();
  const int n_levels = pyramids[0].n_levels();
  std::vector<int> levels = choose_levels(lmm, rp, corpus, pyramids, feedback, opt);

  std::vector<std::uint8_t> correct(n, 0);
  parallel_for(int(n), [&](int i) {
    const auto& s = corpus.samples[size_t(i)];
    const auto& grid = pyramids[size_t(i)].levels[size_t(levels[size_t(i)])];
    correct[size_t(i)] = decode_correct(lmm, grid, s.instruction.ids, s.answer) ? 1 : 0;
  }, opt.threads);

  EvalReport rep;
  rep.policy = policy_name(opt.policy);
  rep.n_samples = Index(n);
  rep.routing_histogram.assign(size_t(n_levels), 0.0);

  std::map<std::string, Index> task_n, task_ok;
  double tokens = 0.0;
  Index ok = 0, agree = 0;
  double cost_sel = 0.0, cost_full = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const auto& s = corpus.samples[i];
    const auto& pyr = pyramids[i];
    ok += correct[i];
    task_n[task_name(s.task_kind)]++;
    task_ok[task_name(s.task_kind)] += correct[i];
    tokens += double(pyr.levels[size_t(levels[i])].tokens());
    rep.routing_histogram[size_t(levels[i])] += 1.0;
    if (!feedback.empty() && levels[i] == feedback[i].best_level()) ++agree;
    const double extra = double(s.instruction.ids.size() + s.answer.size());
    const double l_sel = double(pyr.levels[size_t(levels[i])].tokens()) + extra;
    const double l_full = double(pyr.levels[0].tokens()) + extra;
    cost_sel += l_sel * l_sel;
    cost_full += l_full * l_full;
  }
  rep.accuracy = double(ok) / double(n);
  for (const auto& [task, cnt] : task_n)
    rep.accuracy_by_task[task] = double(task_ok[task]) / double(cnt);
  if (!rep.accuracy_by_task.count("coarse_query")) rep.accuracy_by_task["coarse_query"] = 0.0;
  if (!rep.accuracy_by_task.count("fine_query")) rep.accuracy_by_task["fine_query"] = 0.0;
  rep.avg_tokens_per_grid = tokens / double(n);
  rep.token_reduction_pct =
      100.0 * (1.0 - rep.avg_tokens_per_grid / double(pyramids[0].levels[0].tokens()));
  rep.oracle_agreement_pct = feedback.empty() ? 0.0 : 100.0 * double(agree) / double(n);
  rep.analytic_speedup = cost_full / cost_sel;
  for (auto& h : rep.routing_histogram) h /= double(n);

  if (opt.measure_wallclock) {
    // Median over repetitions of one-by-one decoding, selected levels vs the
    // finest level for every sample.
    auto time_decode = [&](const std::vector<int>& lv) {
      const auto t0 = std::chrono::steady_clock::now();
      for (size_t i = 0; i < n; ++i) {
        const auto& s = corpus.samples[i];
        decode_correct(lmm, pyramids[i].levels[size_t(lv[i])], s.instruction.ids, s.answer);
      }
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    std::vector<int> finest(n, 0);
    std::vector<double> t_sel, t_full;
    for (int r = 0; r < std::max(1, opt.wallclock_reps); ++r) {
      t_sel.push_back(time_decode(levels));
      t_full.push_back(time_decode(finest));
    }
    std::sort(t_sel.begin(), t_sel.end());
    std::sort(t_full.begin(), t_full.end());
    rep.wallclock_speedup = t_full[t_full.size() / 2] / t_sel[t_sel.size() / 2];
  }
  return rep;
}

inline void write_reports(const std::vector<EvalReport>& reports,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(r.to_json());
  std::ofstream js(dir / "report.json");
  if (!js) throw IoError("cannot write report.json in " + dir.string());
  js << j.dump(2) << "\n";

  std::ofstream cs(dir / "report.csv");
  if (!cs) throw IoError("cannot write report.csv in " + dir.string());
  cs << report_csv_header() << "\n";
  for (const auto& r : reports) cs << report_csv_row(r) << "\n";
}

}  // namespace granroute
