#pragma once

#include "granroute/instruction.hpp"
#include "granroute/pyramid.hpp"
#include "granroute/tensor_io.hpp"
#include "granroute/transformer.hpp"

#include <random>
#include <sstream>

namespace granroute {

enum class TaskKind { kCoarseQuery, kFineQuery };

inline const char* task_name(TaskKind k) {
  return k == TaskKind::kCoarseQuery ? "coarse_query" : "fine_query";
}

// Token-id layout of the toy vocabulary.
struct SceneVocab {
  static constexpr int kCoarseAnswerBase = 0;   // 8 coarse answer symbols
  static constexpr int kFineAnswerBase = 8;     // 8 fine answer symbols
  static constexpr int kEos = 16;
  static constexpr int kQueryCoarse = 17;
  static constexpr int kQueryFine = 18;
  static constexpr int kFillerBase = 19;        // 12 filler symbols
  static constexpr int kFillerCount = 12;
  static constexpr int kVocab = 64;
};

struct SceneConfig {
  Index grid_rows = 24, grid_cols = 24, d = 16;
  int n_levels = 5;
  int n_classes = 8;          // per task kind
  Index instr_len = 8;
  // Channel split: fine codebook lives in channels [0, 8), coarse bias and
  // pyramid-scale clutter in [8, 16).
  double bias_amp = 1.5;
  double fine_amp = 16.0;
  double clutter_amp = 3.0;
  double noise_sigma = 0.3;
};

// One image + instruction + answer with the minimal sufficient granularity
// known by construction. Every grid carries BOTH attributes; only the
// instruction reveals which one is asked for.
template <typename S>
struct SceneSample {
  TokenGrid<S> grid;
  InstructionTokens<S> instruction;
  std::vector<int> answer;
  TaskKind task_kind = TaskKind::kCoarseQuery;
  int gt_min_level = 0;
  int coarse_class = 0, fine_class = 0;
  unsigned long long seed = 0;
};

// Fixed instruction-token embedding codebook (d-dim unit vectors per id),
// shared by the filter and the router across processes.
template <typename S>
const Tensor<S>& instruction_embedding_table(Index d = 16) {
  static Tensor<S> table = [] {
    std::mt19937_64 rng(0x5EEDC0DEULL);
    Tensor<S> t = randn<S>({Index(SceneVocab::kVocab), 16}, 1.0, rng);
    for (Index r = 0; r < t.rows(); ++r) t.mat().row(r).normalize();
    return t;
  }();
  if (d != table.cols()) throw ShapeMismatch("instruction embedding dim");
  return table;
}

template <typename S>
InstructionTokens<S> embed_instruction(const std::vector<int>& ids, Index d = 16) {
  const Tensor<S>& table = instruction_embedding_table<S>(d);
  InstructionTokens<S> out;
  out.ids = ids;
  out.vectors = Tensor<S>::zeros({Index(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) out.vectors.mat().row(Index(i)) = table.mat().row(ids[i]);
  return out;
}

namespace detail {

inline unsigned long long mix_seed(unsigned long long a, unsigned long long b) {
  unsigned long long x = a * 0x9E3779B97F4A7C15ULL + b;
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

// Per-level cell extents in level-0 cells, for the alternating pyramid.
inline void level_cell_extent(int level, Index& ch, Index& cw) {
  ch = 1;
  cw = 1;
  for (int l = 1; l <= level; ++l)
    (l % 2 == 1) ? cw *= 2 : ch *= 2;
}

}  // namespace detail

// Visual content of a scene, regenerable for extra local images.
template <typename S>
TokenGrid<S> generate_grid(const SceneConfig& cfg, int coarse_class, int fine_class,
                           unsigned long long grid_seed) {
  std::mt19937_64 rng(grid_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  TokenGrid<S> grid = TokenGrid<S>::zeros(cfg.grid_rows, cfg.grid_cols, cfg.d);
  auto m = grid.data.mat();
  const Index half = cfg.d / 2;

  // Coarse attribute: an antisymmetric half-field (+a left, -a right) on one
  // context channel. Cells never straddle the midline, so pooling preserves
  // the per-token magnitude exactly at every level. The zero global mean
  // forces a magnitude (not mean) readout, which the scale-indexed clutter
  // degrades at fine levels and leaves untouched at the coarsest.
  for (Index r = 0; r < cfg.grid_rows; ++r)
    for (Index c0 = 0; c0 < cfg.grid_cols; ++c0)
      m(r * cfg.grid_cols + c0, half + coarse_class) +=
          S(c0 < cfg.grid_cols / 2 ? cfg.bias_amp : -cfg.bias_amp);

  // Fine attribute: a texture of width-adjacent (+a, -a) pairs, two per row
  // at random positions, annihilated exactly by the first 1x2 pooling step.
  for (Index r = 0; r < cfg.grid_rows; ++r) {
    const Index half_cols = cfg.grid_cols / 2;
    const Index p1 = Index(rng() % (unsigned long long)half_cols);
    const Index p2 = (p1 + 1 + Index(rng() % (unsigned long long)(half_cols - 1))) % half_cols;
    for (Index p : {p1, p2}) {
      m(r * cfg.grid_cols + 2 * p, fine_class) += S(cfg.fine_amp);
      m(r * cfg.grid_cols + 2 * p + 1, fine_class) -= S(cfg.fine_amp);
    }
  }

  // Scale-indexed clutter on the context channels: the component added at
  // pyramid transition t survives levels <= t and is annihilated at t+1, so
  // each coarser level is strictly cleaner for the coarse readout.
  Index rows_t = cfg.grid_rows, cols_t = cfg.grid_cols;
  for (int t = 0; t < cfg.n_levels - 1; ++t) {
    const bool pool_width = (t % 2 == 0);
    Index ch, cw;
    detail::level_cell_extent(t, ch, cw);
    const Index out_rows = pool_width ? rows_t : rows_t / 2;
    const Index out_cols = pool_width ? cols_t / 2 : cols_t;
    for (Index i = 0; i < out_rows; ++i)
      for (Index j = 0; j < out_cols; ++j) {
        VectorX<S> v(half);
        for (Index c = 0; c < half; ++c) v[c] = S(cfg.clutter_amp * normal(rng));
        for (int sgn = 0; sgn < 2; ++sgn) {
          const Index ci = pool_width ? i : 2 * i + sgn;
          const Index cj = pool_width ? 2 * j + sgn : j;
          for (Index r0 = ci * ch; r0 < (ci + 1) * ch; ++r0)
            for (Index c0 = cj * cw; c0 < (cj + 1) * cw; ++c0)
              m.row(r0 * cfg.grid_cols + c0).segment(half, half) +=
                  (sgn == 0 ? v : -v).transpose();
        }
      }
    rows_t = out_rows;
    cols_t = out_cols;
  }

  for (Index t = 0; t < grid.tokens(); ++t)
    for (Index c = 0; c < cfg.d; ++c) m(t, c) += S(cfg.noise_sigma * normal(rng));
  return grid;
}

template <typename S>
SceneSample<S> generate_sample(const SceneConfig& cfg, unsigned long long seed, TaskKind kind) {
  std::mt19937_64 rng(detail::mix_seed(seed, kind == TaskKind::kFineQuery ? 1 : 0));
  SceneSample<S> s;
  s.seed = seed;
  s.task_kind = kind;
  s.coarse_class = int(rng() % (unsigned long long)cfg.n_classes);
  s.fine_class = int(rng() % (unsigned long long)cfg.n_classes);
  s.grid = generate_grid<S>(cfg, s.coarse_class, s.fine_class, rng());

  std::vector<int> ids;
  ids.push_back(kind == TaskKind::kCoarseQuery ? SceneVocab::kQueryCoarse : SceneVocab::kQueryFine);
  for (Index i = 1; i < cfg.instr_len; ++i)
    ids.push_back(SceneVocab::kFillerBase + int(rng() % SceneVocab::kFillerCount));
  s.instruction = embed_instruction<S>(ids, cfg.d);

  if (kind == TaskKind::kCoarseQuery) {
    s.answer = {SceneVocab::kCoarseAnswerBase + s.coarse_class, SceneVocab::kEos};
    s.gt_min_level = cfg.n_levels - 1;
  } else {
    s.answer = {SceneVocab::kFineAnswerBase + s.fine_class, SceneVocab::kEos};
    s.gt_min_level = 0;
  }
  return s;
}

// Extra local image for the multi-image aggregation path: same attributes,
// fresh location/clutter/noise.
template <typename S>
TokenGrid<S> generate_extra_grid(const SceneConfig& cfg, const SceneSample<S>& s, int image_idx) {
  return generate_grid<S>(cfg, s.coarse_class, s.fine_class,
                          detail::mix_seed(s.seed, 0xA110C000ULL + (unsigned long long)image_idx));
}

template <typename S>
struct Corpus {
  SceneConfig cfg;
  std::vector<SceneSample<S>> samples;
  std::string split;
  unsigned long long seed = 0;
};

// Split ids are disjoint ranges of a global sample counter so train/val/test
// never share a sample seed.
template <typename S>
Corpus<S> make_corpus(const SceneConfig& cfg, Index n, unsigned long long seed,
                      const std::string& split, Index id_offset) {
  Corpus<S> c;
  c.cfg = cfg;
  c.split = split;
  c.seed = seed;
  c.samples.reserve(size_t(n));
  for (Index i = 0; i < n; ++i) {
    const TaskKind kind = (i % 2 == 0) ? TaskKind::kCoarseQuery : TaskKind::kFineQuery;
    c.samples.push_back(
        generate_sample<S>(cfg, detail::mix_seed(seed, (unsigned long long)(id_offset + i)), kind));
  }
  return c;
}

namespace detail {

struct Fnv1a {
  unsigned long long state = 0xCBF29CE484222325ULL;
  void update(const char* data, size_t n) {
    for (size_t i = 0; i < n; ++i) {
      state ^= (unsigned char)data[i];
      state *= 0x100000001B3ULL;
    }
  }
};

inline std::string hex16(unsigned long long v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", v);
  return buf;
}

}  // namespace detail

template <typename S>
void write_corpus(const Corpus<S>& corpus, const std::filesystem::path& path) {
  std::ostringstream body;
  for (const auto& s : corpus.samples) {
    nlohmann::json rec;
    rec["kind"] = task_name(s.task_kind);
    rec["instr_ids"] = s.instruction.ids;
    rec["answer"] = s.answer;
    rec["gt_min_level"] = s.gt_min_level;
    rec["coarse"] = s.coarse_class;
    rec["fine"] = s.fine_class;
    rec["seed"] = s.seed;
    body << rec.dump() << "\n";
    write_tensor(body, s.grid.data);
  }
  const std::string payload = body.str();
  detail::Fnv1a fnv;
  fnv.update(payload.data(), payload.size());

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["n"] = corpus.samples.size();
  manifest["d"] = corpus.cfg.d;
  manifest["grid"] = {{"rows", corpus.cfg.grid_rows}, {"cols", corpus.cfg.grid_cols}};
  manifest["n_levels"] = corpus.cfg.n_levels;
  manifest["vocab"] = SceneVocab::kVocab;
  manifest["split"] = corpus.split;
  manifest["seed"] = corpus.seed;
  manifest["scene"] = {{"bias_amp", corpus.cfg.bias_amp},     {"fine_amp", corpus.cfg.fine_amp},
                       {"clutter_amp", corpus.cfg.clutter_amp}, {"noise_sigma", corpus.cfg.noise_sigma},
                       {"instr_len", corpus.cfg.instr_len},   {"n_classes", corpus.cfg.n_classes}};
  manifest["payload_bytes"] = payload.size();
  manifest["checksum"] = detail::hex16(fnv.state);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  os << manifest.dump() << "\n" << payload;
  if (!os) throw IoError("corpus write failed");
}

template <typename S>
Corpus<S> read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw CorruptManifest("missing corpus manifest");
  nlohmann::json manifest = nlohmann::json::parse(line, nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("checksum"))
    throw CorruptManifest("bad corpus manifest");

  std::ostringstream rest;
  rest << is.rdbuf();
  const std::string payload = rest.str();
  if (payload.size() != manifest["payload_bytes"].get<size_t>())
    throw CorruptManifest("corpus payload size mismatch");
  detail::Fnv1a fnv;
  fnv.update(payload.data(), payload.size());
  if (detail::hex16(fnv.state) != manifest["checksum"].get<std::string>())
    throw CorruptManifest("corpus checksum mismatch");

  Corpus<S> c;
  c.split = manifest["split"].get<std::string>();
  c.seed = manifest["seed"].get<unsigned long long>();
  c.cfg.grid_rows = manifest["grid"]["rows"].get<Index>();
  c.cfg.grid_cols = manifest["grid"]["cols"].get<Index>();
  c.cfg.d = manifest["d"].get<Index>();
  c.cfg.n_levels = manifest["n_levels"].get<int>();
  const auto& sc = manifest["scene"];
  c.cfg.bias_amp = sc["bias_amp"].get<double>();
  c.cfg.fine_amp = sc["fine_amp"].get<double>();
  c.cfg.clutter_amp = sc["clutter_amp"].get<double>();
  c.cfg.noise_sigma = sc["noise_sigma"].get<double>();
  c.cfg.instr_len = sc["instr_len"].get<Index>();
  c.cfg.n_classes = sc["n_classes"].get<int>();

  std::istringstream body(payload);
  const size_t n = manifest["n"].get<size_t>();
  for (size_t i = 0; i < n; ++i) {
    std::string rec_line;
    if (!std::getline(body, rec_line)) throw CorruptManifest("corpus record truncated");
    nlohmann::json rec = nlohmann::json::parse(rec_line, nullptr, false);
    if (rec.is_discarded()) throw CorruptManifest("bad corpus record");
    SceneSample<S> s;
    s.task_kind = rec["kind"].get<std::string>() == task_name(TaskKind::kFineQuery)
                      ? TaskKind::kFineQuery
                      : TaskKind::kCoarseQuery;
    s.answer = rec["answer"].get<std::vector<int>>();
    s.gt_min_level = rec["gt_min_level"].get<int>();
    s.coarse_class = rec["coarse"].get<int>();
    s.fine_class = rec["fine"].get<int>();
    s.seed = rec["seed"].get<unsigned long long>();
    s.instruction = embed_instruction<S>(rec["instr_ids"].get<std::vector<int>>(), c.cfg.d);
    s.grid.rows = c.cfg.grid_rows;
    s.grid.cols = c.cfg.grid_cols;
    s.grid.dim = c.cfg.d;
    s.grid.level = 0;
    s.grid.data = read_tensor<S>(body);
    if (s.grid.data.rows() != s.grid.tokens() || s.grid.data.cols() != c.cfg.d)
      throw CorruptManifest("corpus grid shape mismatch");
    c.samples.push_back(std::move(s));
  }
  return c;
}

}  // namespace granroute
