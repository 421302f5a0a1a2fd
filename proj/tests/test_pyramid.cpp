#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "granroute/pyramid.hpp"

#include <random>

using namespace granroute;

namespace {

TokenGrid<double> random_grid(Index r, Index c, Index d, unsigned seed) {
  TokenGrid<double> g = TokenGrid<double>::zeros(r, c, d);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (Index i = 0; i < g.data.numel(); ++i) g.data.data[i] = dist(rng);
  return g;
}

}  // namespace

TEST_CASE("five-level pyramid from a 24x24 grid has the expected token counts") {
  auto pyr = build_pyramid(random_grid(24, 24, 16, 1), 5);
  CHECK(pyr.token_counts() == std::vector<Index>{576, 288, 144, 72, 36});
  CHECK(pyr.total_tokens() == 1116);
  // Alternating width-first halving.
  CHECK(pyr.levels[1].rows == 24);
  CHECK(pyr.levels[1].cols == 12);
  CHECK(pyr.levels[2].rows == 12);
  CHECK(pyr.levels[2].cols == 12);
  CHECK(pyr.levels[3].cols == 6);
  CHECK(pyr.levels[4].rows == 6);
  for (int l = 0; l < 5; ++l) CHECK(pyr.levels[size_t(l)].level == l);
}

TEST_CASE("width pooling averages horizontally adjacent pairs") {
  TokenGrid<double> g = TokenGrid<double>::zeros(2, 4, 1);
  for (Index i = 0; i < 8; ++i) g.data.data[i] = double(i);
  auto out = avg_pool_step(g, PoolDim::kWidth);
  CHECK(out.rows == 2);
  CHECK(out.cols == 2);
  CHECK(out.data.data[0] == doctest::Approx(0.5));   // (0+1)/2
  CHECK(out.data.data[1] == doctest::Approx(2.5));   // (2+3)/2
  CHECK(out.data.data[2] == doctest::Approx(4.5));
  CHECK(out.data.data[3] == doctest::Approx(6.5));
}

TEST_CASE("height pooling averages vertically adjacent pairs") {
  TokenGrid<double> g = TokenGrid<double>::zeros(4, 2, 1);
  for (Index i = 0; i < 8; ++i) g.data.data[i] = double(i);
  auto out = avg_pool_step(g, PoolDim::kHeight);
  CHECK(out.rows == 2);
  CHECK(out.cols == 2);
  CHECK(out.data.data[0] == doctest::Approx(1.0));  // (0+2)/2
  CHECK(out.data.data[1] == doctest::Approx(2.0));  // (1+3)/2
  CHECK(out.data.data[2] == doctest::Approx(5.0));
  CHECK(out.data.data[3] == doctest::Approx(6.0));
}

TEST_CASE("every level preserves the global mean") {
  auto g = random_grid(24, 24, 16, 2);
  auto pyr = build_pyramid(g, 5);
  VectorX<double> mean0 = g.data.mat().colwise().mean().transpose();
  for (const auto& lvl : pyr.levels) {
    VectorX<double> m = lvl.data.mat().colwise().mean().transpose();
    CHECK((m - mean0).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("pooling a constant grid is the identity on values") {
  TokenGrid<double> g = TokenGrid<double>::zeros(8, 8, 3);
  g.data.data.setConstant(0.7);
  auto pyr = build_pyramid(g, 5);
  for (const auto& lvl : pyr.levels) {
    CHECK(lvl.data.data.minCoeff() == doctest::Approx(0.7));
    CHECK(lvl.data.data.maxCoeff() == doctest::Approx(0.7));
  }
}

TEST_CASE("odd axis raises with the failing level in the message") {
  auto g = random_grid(6, 6, 2, 3);
  CHECK_NOTHROW(build_pyramid(g, 3));
  try {
    build_pyramid(g, 4);  // level 3 needs cols 3 halved
    CHECK(false);
  } catch (const OddAxis& e) {
    CHECK(std::string(e.what()).find("level 3") != std::string::npos);
  }
}

TEST_CASE("level selection keeps original ids and rejects bad masks") {
  auto pyr = build_pyramid(random_grid(24, 24, 4, 4), 5);
  auto sel = select_levels(pyr, {0, 2, 4});
  CHECK(sel.token_counts() == std::vector<Index>{576, 144, 36});
  CHECK(sel.levels[0].level == 0);
  CHECK(sel.levels[1].level == 2);
  CHECK(sel.levels[2].level == 4);
  CHECK_THROWS_AS(select_levels(pyr, {}), EmptyList);
  CHECK_THROWS_AS(select_levels(pyr, {5}), SchemaError);
}

TEST_CASE("pyramid construction is deterministic") {
  auto g = random_grid(24, 24, 16, 5);
  auto a = build_pyramid(g, 5);
  auto b = build_pyramid(g, 5);
  for (int l = 0; l < 5; ++l)
    CHECK((a.levels[size_t(l)].data.data - b.levels[size_t(l)].data.data).cwiseAbs().maxCoeff() ==
          0.0);
}
