#pragma once

#include "granroute/eval.hpp"

#include <iostream>

namespace granroute {

// One validated run configuration shared by every subcommand.
struct PipelineConfig {
  // data
  Index n_train = 5000, n_val = 0, n_test = 1000;
  unsigned long long data_seed = 0;
  std::filesystem::path data_dir = "data";
  SceneConfig scene;

  // stage 1
  std::filesystem::path lmm_dir = "lmm_ckpt";
  Stage1Options stage1;
  Index lmm_max_samples = 0;  // 0 = all

  // stage 2
  std::filesystem::path router_dir = "router_ckpt";
  Stage2Options stage2;
  int k = 32;
  std::vector<int> level_mask;  // empty = all levels
  bool cache_feedback = true;
  Index router_max_samples = 0;

  // eval
  EvalOptions eval;
  std::string eval_split = "test";
  Index eval_max_samples = 0;

  std::filesystem::path out_dir = "out";
};

namespace detail {

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError("config key '" + key + "' has the wrong type");
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::string& section,
                           std::initializer_list<const char*> known) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw SchemaError("unknown config key '" + section + "." + key + "'");
  }
}

inline std::string mask_tag(const std::vector<int>& mask) {
  if (mask.empty()) return "all";
  std::string s;
  for (int l : mask) s += std::to_string(l);
  return s;
}

}  // namespace detail

inline PipelineConfig parse_config(const nlohmann::json& j) {
  using detail::get_or;
  detail::reject_unknown(j, "", {"data", "lmm", "router", "eval", "ablate", "sweep", "out_dir"});
  PipelineConfig cfg;
  cfg.out_dir = get_or<std::string>(j, "out_dir", cfg.out_dir.string());

  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, "data", {"n_train", "n_val", "n_test", "seed", "dir", "scene"});
    cfg.n_train = get_or<Index>(d, "n_train", cfg.n_train);
    cfg.n_val = get_or<Index>(d, "n_val", cfg.n_val);
    cfg.n_test = get_or<Index>(d, "n_test", cfg.n_test);
    cfg.data_seed = get_or<unsigned long long>(d, "seed", cfg.data_seed);
    cfg.data_dir = get_or<std::string>(d, "dir", cfg.data_dir.string());
    if (d.contains("scene")) {
      const auto& s = d.at("scene");
      detail::reject_unknown(s, "data.scene",
                             {"bias_amp", "fine_amp", "clutter_amp", "noise_sigma", "instr_len"});
      cfg.scene.bias_amp = get_or<double>(s, "bias_amp", cfg.scene.bias_amp);
      cfg.scene.fine_amp = get_or<double>(s, "fine_amp", cfg.scene.fine_amp);
      cfg.scene.clutter_amp = get_or<double>(s, "clutter_amp", cfg.scene.clutter_amp);
      cfg.scene.noise_sigma = get_or<double>(s, "noise_sigma", cfg.scene.noise_sigma);
      cfg.scene.instr_len = get_or<Index>(s, "instr_len", cfg.scene.instr_len);
    }
    if (cfg.n_train < 1 || cfg.n_test < 1 || cfg.n_val < 0)
      throw SchemaError("data split sizes must be positive");
  }

  if (j.contains("lmm")) {
    const auto& l = j.at("lmm");
    detail::reject_unknown(l, "lmm", {"dir", "epochs", "batch_size", "lr", "seed", "max_samples"});
    cfg.lmm_dir = get_or<std::string>(l, "dir", cfg.lmm_dir.string());
    cfg.stage1.epochs = get_or<int>(l, "epochs", cfg.stage1.epochs);
    cfg.stage1.batch_size = get_or<Index>(l, "batch_size", cfg.stage1.batch_size);
    cfg.stage1.lr = get_or<double>(l, "lr", cfg.stage1.lr);
    cfg.stage1.seed = get_or<unsigned long long>(l, "seed", 1);
    cfg.lmm_max_samples = get_or<Index>(l, "max_samples", 0);
    if (cfg.stage1.epochs < 1 || cfg.stage1.batch_size < 1 || cfg.stage1.lr <= 0)
      throw SchemaError("bad lmm training parameters");
  }

  if (j.contains("router")) {
    const auto& r = j.at("router");
    detail::reject_unknown(
        r, "router",
        {"dir", "epochs", "batch_size", "lr", "alpha", "k", "seed", "level_mask", "gumbel",
         "gumbel_temperature", "use_rank_loss", "use_ce_loss", "cache_feedback", "max_samples"});
    cfg.router_dir = get_or<std::string>(r, "dir", cfg.router_dir.string());
    cfg.stage2.epochs = get_or<int>(r, "epochs", cfg.stage2.epochs);
    cfg.stage2.batch_size = get_or<Index>(r, "batch_size", cfg.stage2.batch_size);
    cfg.stage2.rglf.lr = get_or<double>(r, "lr", cfg.stage2.rglf.lr);
    cfg.stage2.rglf.alpha = get_or<double>(r, "alpha", cfg.stage2.rglf.alpha);
    cfg.stage2.rglf.gumbel_mode = get_or<bool>(r, "gumbel", false);
    cfg.stage2.rglf.gumbel_temperature = get_or<double>(r, "gumbel_temperature", 1.0);
    cfg.stage2.rglf.use_rank_loss = get_or<bool>(r, "use_rank_loss", true);
    cfg.stage2.rglf.use_ce_loss = get_or<bool>(r, "use_ce_loss", true);
    cfg.stage2.seed = get_or<unsigned long long>(r, "seed", 2);
    cfg.k = get_or<int>(r, "k", cfg.k);
    cfg.level_mask = get_or<std::vector<int>>(r, "level_mask", {});
    cfg.cache_feedback = get_or<bool>(r, "cache_feedback", true);
    cfg.router_max_samples = get_or<Index>(r, "max_samples", 0);
    if (cfg.k < 1 || cfg.stage2.epochs < 1 || cfg.stage2.rglf.alpha < 0)
      throw SchemaError("bad router training parameters");
    if (cfg.stage2.rglf.gumbel_temperature <= 0)
      throw SchemaError("gumbel_temperature must be > 0");
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown(e, "eval",
                           {"policy", "split", "local_images", "measure_wallclock", "reps", "seed",
                            "max_samples"});
    cfg.eval.policy = parse_policy(get_or<std::string>(e, "policy", "adaptive"));
    cfg.eval_split = get_or<std::string>(e, "split", "test");
    cfg.eval.local_images = get_or<int>(e, "local_images", 0);
    cfg.eval.measure_wallclock = get_or<bool>(e, "measure_wallclock", false);
    cfg.eval.wallclock_reps = get_or<int>(e, "reps", 3);
    cfg.eval.seed = get_or<unsigned long long>(e, "seed", 3);
    cfg.eval_max_samples = get_or<Index>(e, "max_samples", 0);
    if (cfg.eval.wallclock_reps < 1 || cfg.eval.local_images < 0)
      throw SchemaError("bad eval parameters");
  }
  return cfg;
}

inline PipelineConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw SchemaError("config is not valid JSON: " + path.string());
  return parse_config(j);
}

inline std::filesystem::path corpus_path(const PipelineConfig& cfg, const std::string& split) {
  return cfg.data_dir / (split + ".bin");
}

inline void gen_data(const PipelineConfig& cfg) {
  std::filesystem::create_directories(cfg.data_dir);
  const Index offs_val = cfg.n_train, offs_test = cfg.n_train + cfg.n_val;
  write_corpus(make_corpus<float>(cfg.scene, cfg.n_train, cfg.data_seed, "train", 0),
               corpus_path(cfg, "train"));
  if (cfg.n_val > 0)
    write_corpus(make_corpus<float>(cfg.scene, cfg.n_val, cfg.data_seed, "val", offs_val),
                 corpus_path(cfg, "val"));
  write_corpus(make_corpus<float>(cfg.scene, cfg.n_test, cfg.data_seed, "test", offs_test),
               corpus_path(cfg, "test"));
}

// A split plus everything derived from it that the stages share.
struct SplitData {
  Corpus<float> corpus;
  std::vector<GranularityPyramid<float>> pyramids;
  std::vector<FeedbackRecord> feedback;  // empty until computed
};

inline SplitData load_split(const PipelineConfig& cfg, const std::string& split,
                            const std::vector<int>& mask, Index max_samples) {
  SplitData sd;
  sd.corpus = read_corpus<float>(corpus_path(cfg, split));
  if (max_samples > 0 && Index(sd.corpus.samples.size()) > max_samples)
    sd.corpus.samples.resize(size_t(max_samples));
  sd.pyramids = build_pyramids(sd.corpus, mask);
  return sd;
}

// Feedback is tied to one LMM checkpoint + level mask, so the cache lives
// next to the checkpoint.
inline void ensure_feedback(const PipelineConfig& cfg, const ToyLmm<float>& lmm,
                            const std::string& split, SplitData& sd) {
  if (!sd.feedback.empty()) return;
  const auto cache = cfg.lmm_dir / ("feedback_" + split + "_m" +
                                    detail::mask_tag(cfg.level_mask) + "_n" +
                                    std::to_string(sd.corpus.samples.size()) + ".jsonl");
  if (cfg.cache_feedback && std::filesystem::exists(cache)) {
    try {
      sd.feedback = load_feedback(cache, sd.corpus.samples.size());
      return;
    } catch (const CorruptManifest&) {
      // stale or damaged cache: recompute below
    }
  }
  sd.feedback = compute_feedback(lmm, sd.corpus, sd.pyramids);
  if (cfg.cache_feedback) {
    std::filesystem::create_directories(cfg.lmm_dir);
    save_feedback(sd.feedback, cache);
  }
}

inline void train_lmm_cmd(const PipelineConfig& cfg, std::ostream* log = nullptr) {
  // Stage 1 always sees every granularity, whatever mask the router uses.
  SplitData train = load_split(cfg, "train", {}, cfg.lmm_max_samples);
  LmmConfig lcfg;
  ToyLmm<float> lmm = init_lmm<float>(lcfg, cfg.stage1.seed);
  Stage1Options opt = cfg.stage1;
  opt.log = log;
  train_lmm_stage1(lmm, train.corpus, train.pyramids, opt);
  save_lmm(lmm, cfg.lmm_dir);
}

inline RouterParams<float> train_router_cmd(const PipelineConfig& cfg,
                                            std::ostream* log = nullptr) {
  ToyLmm<float> lmm = load_lmm<float>(cfg.lmm_dir);
  SplitData train = load_split(cfg, "train", cfg.level_mask, cfg.router_max_samples);
  ensure_feedback(cfg, lmm, "train", train);

  RouterConfig rcfg;
  rcfg.d = lmm.cfg.d;
  rcfg.d_vis = train.corpus.cfg.d;
  rcfg.n_levels = train.pyramids[0].n_levels();
  rcfg.k = cfg.k;
  rcfg.level_token_counts.clear();
  for (const auto& lvl : train.pyramids[0].levels) rcfg.level_token_counts.push_back(lvl.tokens());
  RouterParams<float> rp = init_router_params<float>(rcfg, cfg.stage2.seed);

  Stage2Options opt = cfg.stage2;
  opt.log = log;
  train_router_stage2(rp, train.corpus, train.pyramids, train.feedback, opt);
  save_router(rp, cfg.router_dir);
  return rp;
}

inline bool policy_needs_router(PolicyKind k) {
  return k == PolicyKind::kAdaptive || k == PolicyKind::kImageOnly;
}

inline EvalReport eval_cmd(const PipelineConfig& cfg, std::string tag = "") {
  ToyLmm<float> lmm = load_lmm<float>(cfg.lmm_dir);
  SplitData test = load_split(cfg, cfg.eval_split, cfg.level_mask, cfg.eval_max_samples);
  ensure_feedback(cfg, lmm, cfg.eval_split, test);

  RouterParams<float> rp;
  const RouterParams<float>* rpp = nullptr;
  if (policy_needs_router(cfg.eval.policy.kind)) {
    rp = load_router<float>(cfg.router_dir);
    rpp = &rp;
  }
  EvalOptions opt = cfg.eval;
  if (opt.local_images < 1) opt.local_images = 1;
  EvalReport rep = run_eval(lmm, rpp, test.corpus, test.pyramids, test.feedback, opt);
  if (!tag.empty()) rep.policy = tag + ":" + rep.policy;
  return rep;
}

// Routing-proportion CSV alongside the main reports.
inline void write_histogram_csv(const EvalReport& rep, const std::vector<Index>& token_counts,
                                const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "level,tokens,proportion\n";
  for (size_t l = 0; l < rep.routing_histogram.size(); ++l)
    os << l << "," << token_counts[l] << "," << rep.routing_histogram[l] << "\n";
}

// Ablation runner. Policy-only variants reuse the trained router; trainer
// variants retrain Stage 2 with the same seed and an adjusted config.
inline std::vector<EvalReport> run_ablation(const PipelineConfig& cfg,
                                            const std::vector<std::string>& which,
                                            std::ostream* log = nullptr) {
  if (which.empty()) throw EmptyList("ablation list is empty");
  std::vector<EvalReport> reports;
  PipelineConfig base = cfg;
  base.eval.policy = parse_policy("adaptive");
  reports.push_back(eval_cmd(base, "baseline"));
  const std::vector<double> baseline_hist = reports[0].routing_histogram;

  for (const std::string& name : which) {
    if (name == "fixed") {
      SplitData probe = load_split(cfg, cfg.eval_split, cfg.level_mask, 1);
      for (int l = 0; l < probe.pyramids[0].n_levels(); ++l) {
        PipelineConfig c = cfg;
        c.eval.policy = parse_policy("fixed:" + std::to_string(l));
        reports.push_back(eval_cmd(c, "ablate"));
      }
    } else if (name == "random") {
      PipelineConfig c = cfg;
      c.eval.policy = parse_policy("random");
      reports.push_back(eval_cmd(c, "ablate"));
    } else if (name == "matched_random") {
      PipelineConfig c = cfg;
      c.eval.policy.kind = PolicyKind::kMatchedRandom;
      c.eval.policy.histogram = baseline_hist;
      reports.push_back(eval_cmd(c, "ablate"));
    } else if (name == "image_only") {
      PipelineConfig c = cfg;
      c.eval.policy = parse_policy("image_only");
      reports.push_back(eval_cmd(c, "ablate"));
    } else if (name == "no_rank_loss" || name == "no_ce_loss" || name == "gumbel" ||
               name == "granularity_range") {
      PipelineConfig c = cfg;
      c.router_dir = cfg.out_dir / ("router_" + name);
      if (name == "no_rank_loss") c.stage2.rglf.use_rank_loss = false;
      if (name == "no_ce_loss") c.stage2.rglf.use_ce_loss = false;
      if (name == "gumbel") c.stage2.rglf.gumbel_mode = true;
      if (name == "granularity_range") c.level_mask = {0, 2, 4};
      train_router_cmd(c, log);
      c.eval.policy = parse_policy("adaptive");
      reports.push_back(eval_cmd(c, "ablate:" + name));
    } else {
      throw SchemaError("unknown ablation: " + name);
    }
  }
  return reports;
}

// k / alpha sweeps; each value retrains Stage 2 only.
inline std::vector<EvalReport> run_sweep(const PipelineConfig& cfg, const std::string& param,
                                         const std::vector<double>& values,
                                         std::ostream* log = nullptr) {
  if (values.empty()) throw EmptyList("sweep values are empty");
  if (param != "k" && param != "alpha") throw SchemaError("sweep param must be k or alpha");
  std::vector<EvalReport> reports;
  for (double v : values) {
    PipelineConfig c = cfg;
    std::string tag;
    if (param == "k") {
      c.k = int(v);
      if (c.k < 1) throw SchemaError("swept k must be >= 1");
      tag = "sweep:k=" + std::to_string(c.k);
    } else {
      c.stage2.rglf.alpha = v;
      std::ostringstream t;
      t << "sweep:alpha=" << v;
      tag = t.str();
    }
    c.router_dir = cfg.out_dir / ("router_" + param + "_" + std::to_string(v));
    train_router_cmd(c, log);
    c.eval.policy = parse_policy("adaptive");
    reports.push_back(eval_cmd(c, tag));
  }
  return reports;
}

}  // namespace granroute
