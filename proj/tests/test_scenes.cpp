#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "granroute/scenes.hpp"

#include <fstream>

using namespace granroute;

TEST_CASE("instruction embeddings are unit-norm, fixed, and dim-checked") {
  const auto& table = instruction_embedding_table<double>();
  CHECK(table.rows() == 64);
  CHECK(table.cols() == 16);
  for (Index r = 0; r < table.rows(); ++r)
    CHECK(table.mat().row(r).norm() == doctest::Approx(1.0));
  auto a = embed_instruction<double>({17, 19, 20});
  auto b = embed_instruction<double>({17, 19, 20});
  CHECK((a.vectors.data - b.vectors.data).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(embed_instruction<double>({1}, 8), ShapeMismatch);
}

TEST_CASE("sample generation is deterministic in the seed") {
  SceneConfig cfg;
  auto a = generate_sample<float>(cfg, 1234, TaskKind::kFineQuery);
  auto b = generate_sample<float>(cfg, 1234, TaskKind::kFineQuery);
  CHECK((a.grid.data.data - b.grid.data.data).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.instruction.ids == b.instruction.ids);
  CHECK(a.answer == b.answer);
  auto c = generate_sample<float>(cfg, 1235, TaskKind::kFineQuery);
  CHECK((a.grid.data.data - c.grid.data.data).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("answers and minimal levels follow the task kind") {
  SceneConfig cfg;
  auto coarse = generate_sample<float>(cfg, 7, TaskKind::kCoarseQuery);
  CHECK(coarse.answer.size() == 2);
  CHECK(coarse.answer[0] == SceneVocab::kCoarseAnswerBase + coarse.coarse_class);
  CHECK(coarse.answer[1] == SceneVocab::kEos);
  CHECK(coarse.gt_min_level == cfg.n_levels - 1);
  CHECK(coarse.instruction.ids[0] == SceneVocab::kQueryCoarse);

  auto fine = generate_sample<float>(cfg, 7, TaskKind::kFineQuery);
  CHECK(fine.answer[0] == SceneVocab::kFineAnswerBase + fine.fine_class);
  CHECK(fine.gt_min_level == 0);
  CHECK(fine.instruction.ids[0] == SceneVocab::kQueryFine);
  CHECK(fine.instruction.length() == cfg.instr_len);
}

TEST_CASE("the fine cue is annihilated by the first pooling step") {
  SceneConfig cfg;
  cfg.bias_amp = 0.0;
  cfg.clutter_amp = 0.0;
  cfg.noise_sigma = 0.0;
  auto grid = generate_grid<double>(cfg, 3, 5, 99);
  auto pyr = build_pyramid(grid, cfg.n_levels);
  // Level 0 carries the +/- pair on the fine channel.
  CHECK(pyr.levels[0].data.mat().col(5).cwiseAbs().maxCoeff() == doctest::Approx(cfg.fine_amp));
  for (int l = 1; l < cfg.n_levels; ++l)
    CHECK(pyr.levels[size_t(l)].data.data.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("the coarse cue survives pooling at full strength on every level") {
  SceneConfig cfg;
  cfg.fine_amp = 0.0;
  cfg.clutter_amp = 0.0;
  cfg.noise_sigma = 0.0;
  auto grid = generate_grid<double>(cfg, 6, 0, 100);
  auto pyr = build_pyramid(grid, cfg.n_levels);
  for (int l = 0; l < cfg.n_levels; ++l) {
    const auto m = pyr.levels[size_t(l)].data.mat();
    // Every pooled token keeps the exact +/- amplitude: cells never straddle
    // the midline, and the two halves stay balanced (zero channel mean).
    CHECK(m.col(8 + 6).cwiseAbs().minCoeff() == doctest::Approx(cfg.bias_amp));
    CHECK(m.col(8 + 6).cwiseAbs().maxCoeff() == doctest::Approx(cfg.bias_amp));
    CHECK(m.col(8 + 6).sum() == doctest::Approx(0.0));
    CHECK(m.col(8 + 6).maxCoeff() == doctest::Approx(cfg.bias_amp));
    CHECK(m.col(8 + 6).minCoeff() == doctest::Approx(-cfg.bias_amp));
  }
}

TEST_CASE("clutter fades out level by level and is gone at the coarsest") {
  SceneConfig cfg;
  cfg.bias_amp = 0.0;
  cfg.fine_amp = 0.0;
  cfg.noise_sigma = 0.0;
  auto grid = generate_grid<double>(cfg, 0, 0, 101);
  auto pyr = build_pyramid(grid, cfg.n_levels);
  std::vector<double> energy;
  for (int l = 0; l < cfg.n_levels; ++l)
    energy.push_back(pyr.levels[size_t(l)].data.mat().rightCols(8).squaredNorm() /
                     double(pyr.levels[size_t(l)].tokens()));
  for (int l = 1; l < cfg.n_levels; ++l) CHECK(energy[size_t(l)] < energy[size_t(l - 1)]);
  CHECK(pyr.levels[size_t(cfg.n_levels - 1)].data.data.cwiseAbs().maxCoeff() < 1e-10);
  // The fine channels stay untouched by clutter.
  CHECK(pyr.levels[0].data.mat().leftCols(8).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("extra local images share attributes but differ in content") {
  SceneConfig cfg;
  auto s = generate_sample<float>(cfg, 55, TaskKind::kCoarseQuery);
  auto extra0 = generate_extra_grid(cfg, s, 0);
  auto extra0b = generate_extra_grid(cfg, s, 0);
  auto extra1 = generate_extra_grid(cfg, s, 1);
  CHECK((extra0.data.data - extra0b.data.data).cwiseAbs().maxCoeff() == 0.0);
  CHECK((extra0.data.data - extra1.data.data).cwiseAbs().maxCoeff() > 0.0);
  CHECK((extra0.data.data - s.grid.data.data).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("corpus construction alternates tasks and uses disjoint id ranges") {
  SceneConfig cfg;
  auto train = make_corpus<float>(cfg, 6, 42, "train", 0);
  auto val = make_corpus<float>(cfg, 4, 42, "val", 6);
  CHECK(train.samples.size() == 6);
  for (size_t i = 0; i < train.samples.size(); ++i)
    CHECK(train.samples[i].task_kind ==
          (i % 2 == 0 ? TaskKind::kCoarseQuery : TaskKind::kFineQuery));
  for (const auto& a : train.samples)
    for (const auto& b : val.samples) CHECK(a.seed != b.seed);
}

TEST_CASE("corpus files round-trip exactly") {
  SceneConfig cfg;
  auto corpus = make_corpus<float>(cfg, 4, 7, "test", 100);
  const auto path = std::filesystem::temp_directory_path() / "granroute_corpus.bin";
  write_corpus(corpus, path);
  auto loaded = read_corpus<float>(path);
  REQUIRE(loaded.samples.size() == corpus.samples.size());
  CHECK(loaded.split == "test");
  CHECK(loaded.seed == 7);
  for (size_t i = 0; i < corpus.samples.size(); ++i) {
    const auto& a = corpus.samples[i];
    const auto& b = loaded.samples[i];
    CHECK((a.grid.data.data - b.grid.data.data).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.instruction.ids == b.instruction.ids);
    CHECK(a.answer == b.answer);
    CHECK(a.task_kind == b.task_kind);
    CHECK(a.gt_min_level == b.gt_min_level);
  }
  std::filesystem::remove(path);
}

TEST_CASE("truncated or corrupted corpus files are rejected") {
  SceneConfig cfg;
  auto corpus = make_corpus<float>(cfg, 3, 9, "train", 0);
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = dir / "granroute_corpus_full.bin";
  write_corpus(corpus, path);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();

  const auto trunc = dir / "granroute_corpus_trunc.bin";
  std::ofstream(trunc, std::ios::binary) << bytes.substr(0, bytes.size() - 100);
  CHECK_THROWS_AS(read_corpus<float>(trunc), CorruptManifest);

  std::string flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  const auto corrupt = dir / "granroute_corpus_corrupt.bin";
  std::ofstream(corrupt, std::ios::binary) << flipped;
  CHECK_THROWS_AS(read_corpus<float>(corrupt), CorruptManifest);

  const auto empty = dir / "granroute_corpus_empty.bin";
  std::ofstream(empty, std::ios::binary) << "";
  CHECK_THROWS_AS(read_corpus<float>(empty), CorruptManifest);

  for (const auto& p : {path, trunc, corrupt, empty}) std::filesystem::remove(p);
}
