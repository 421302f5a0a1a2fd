#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "granroute/router.hpp"

#include <cstdio>
#include <random>

using namespace granroute;

namespace {

// Small but structurally faithful setup: 4x4 grid, 3 levels, 4 instruction slots.
RouterConfig small_cfg() {
  RouterConfig cfg;
  cfg.d = 16;
  cfg.d_vis = 4;
  cfg.n_levels = 3;
  cfg.k = 4;
  cfg.heads = 4;
  cfg.level_token_counts = {16, 8, 4};
  return cfg;
}

template <typename S>
GranularityPyramid<S> small_pyramid(unsigned seed) {
  TokenGrid<S> g = TokenGrid<S>::zeros(4, 4, 4);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (Index i = 0; i < g.data.numel(); ++i) g.data.data[i] = S(dist(rng));
  return build_pyramid(g, 3);
}

template <typename S>
FilteredInstructions<S> small_instr(unsigned seed, Index n, Index d = 4) {
  FilteredInstructions<S> fi;
  fi.k = 4;
  fi.vectors = Tensor<S>::zeros({n, d});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (Index i = 0; i < fi.vectors.numel(); ++i) fi.vectors.data[i] = S(dist(rng));
  for (Index i = 0; i < n; ++i) {
    fi.ids.push_back(int(i));
    fi.kept_indices.push_back(i);
  }
  return fi;
}

}  // namespace

TEST_CASE("forward shapes and simplex output") {
  auto cfg = small_cfg();
  auto rp = init_router_params<double>(cfg, 1);
  auto pyr = small_pyramid<double>(2);
  auto instr = small_instr<double>(3, 4);
  auto out = router_forward(pyr, instr, rp);
  CHECK(out.z_out.rows() == cfg.voter_len());
  CHECK(out.z_out.cols() == 3);
  CHECK(out.z_final.rows() == 1);
  CHECK(out.z_final.cols() == 3);
  CHECK(out.probs.data.sum() == doctest::Approx(1.0));
  CHECK(out.probs.data.minCoeff() > 0.0);
  CHECK(out.selected >= 0);
  CHECK(out.selected < 3);
  CHECK(cfg.voter_len() == 32);
}

TEST_CASE("zero voter gives uniform probabilities and the coarsest pick") {
  auto cfg = small_cfg();
  auto rp = init_router_params<double>(cfg, 1);
  rp.params[rp.voter].data.setZero();
  auto out = router_forward(small_pyramid<double>(2), small_instr<double>(3, 4), rp);
  for (Index i = 0; i < 3; ++i) CHECK(out.probs.data[i] == doctest::Approx(1.0 / 3));
  CHECK(out.selected == 2);
}

TEST_CASE("argmax ties break toward the coarser level") {
  Tensor<double> row({1, 4}, VectorX<double>::Zero(4));
  CHECK(argmax_prefer_coarse(row) == 3);
  row.data[1] = 2.0;
  CHECK(argmax_prefer_coarse(row) == 1);
  row.data[3] = 2.0;
  CHECK(argmax_prefer_coarse(row) == 3);
}

TEST_CASE("padded instruction slots contribute exactly zero") {
  auto cfg = small_cfg();
  auto rp = init_router_params<double>(cfg, 7);
  auto pyr = small_pyramid<double>(8);
  auto out = router_forward(pyr, small_instr<double>(9, 2), rp);  // 2 real, 2 padded
  const Index L = cfg.voter_len();
  for (Index r = L - 2; r < L; ++r)
    for (Index c = 0; c < 3; ++c) CHECK(out.z_out.at(r, c) == 0.0);
  // With the padded rows inert, shrinking the voter weight on them is a no-op.
  auto rp2 = init_router_params<double>(cfg, 7);
  rp2.params[rp2.voter].data[L - 1] += 123.0;
  rp2.params[rp2.voter].data[L - 2] -= 55.0;
  auto out2 = router_forward(pyr, small_instr<double>(9, 2), rp2);
  CHECK((out.z_final.data - out2.z_final.data).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward is deterministic") {
  auto rp = init_router_params<double>(small_cfg(), 5);
  auto pyr = small_pyramid<double>(6);
  auto instr = small_instr<double>(7, 3);
  auto a = router_forward(pyr, instr, rp);
  auto b = router_forward(pyr, instr, rp);
  CHECK((a.z_final.data - b.z_final.data).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.selected == b.selected);
}

TEST_CASE("bad inputs raise ShapeMismatch") {
  auto cfg = small_cfg();
  auto rp = init_router_params<double>(cfg, 1);
  auto pyr = small_pyramid<double>(2);
  CHECK_THROWS_AS(router_forward(select_levels(pyr, {0, 1}), small_instr<double>(3, 2), rp),
                  ShapeMismatch);
  CHECK_THROWS_AS(router_forward(pyr, small_instr<double>(3, 6), rp), ShapeMismatch);
}

TEST_CASE("end-to-end gradients match finite differences") {
  auto cfg = small_cfg();
  auto rp = init_router_params<double>(cfg, 11);
  auto pyr = small_pyramid<double>(12);
  auto instr = small_instr<double>(13, 3);  // includes one padded slot

  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> dist(-1, 1);
  Tensor<double> R = Tensor<double>::zeros({1, 3});
  for (Index i = 0; i < 3; ++i) R.data[i] = dist(rng);

  auto scalarize = [&]() {
    Graph<double> g;
    auto nodes = router_forward_graph(g, pyr, instr, rp);
    return g.value(nodes.z_final).data.dot(R.data);
  };

  Graph<double> g;
  auto nodes = router_forward_graph(g, pyr, instr, rp);
  g.backward({{nodes.z_final, R}});

  const double eps = 1e-5;
  double worst = 0.0;
  for (Index p = 0; p < rp.params.size(); ++p) {
    REQUIRE(g.has_grad(nodes.pnodes[size_t(p)]));
    const Tensor<double>& grad = g.grad(nodes.pnodes[size_t(p)]);
    Tensor<double>& theta = rp.params[p];
    // Subsample coordinates per tensor to keep the test fast.
    const Index stride = std::max<Index>(1, theta.numel() / 24);
    for (Index i = rng() % (unsigned long long)stride; i < theta.numel(); i += stride) {
      const double orig = theta.data[i];
      theta.data[i] = orig + eps;
      const double fp = scalarize();
      theta.data[i] = orig - eps;
      const double fm = scalarize();
      theta.data[i] = orig;
      const double fd = (fp - fm) / (2 * eps);
      const double a = grad.data[i];
      worst = std::max(worst, std::abs(a - fd) / std::max(1.0, std::abs(a)));
    }
  }
  CHECK_MESSAGE(worst < 1e-4, "worst rel err ", worst);
}

TEST_CASE("multi-image aggregation averages pre-softmax scores") {
  RouterOutput<double> a, b;
  a.z_final = Tensor<double>({1, 3}, VectorX<double>::Zero(3));
  b.z_final = Tensor<double>({1, 3}, VectorX<double>::Zero(3));
  a.z_final.data << 2.0, 0.0, 0.0;
  b.z_final.data << 0.0, 0.0, 2.0;
  auto [probs, sel] = aggregate_images<double>({a, b});
  CHECK(probs.data[0] == doctest::Approx(probs.data[2]));
  CHECK(sel == 2);  // symmetric tie resolves coarse
  CHECK_THROWS_AS(aggregate_images<double>({}), EmptyList);
}

TEST_CASE("checkpoint round trip preserves behavior") {
  auto cfg = small_cfg();
  auto rp = init_router_params<double>(cfg, 21);
  auto pyr = small_pyramid<double>(22);
  auto instr = small_instr<double>(23, 4);
  auto before = router_forward(pyr, instr, rp);

  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "granroute_router_ckpt";
  std::filesystem::remove_all(dir);
  save_router(rp, dir);
  auto rp2 = load_router<double>(dir);
  auto after = router_forward(pyr, instr, rp2);
  CHECK((before.z_final.data - after.z_final.data).cwiseAbs().maxCoeff() == 0.0);
  CHECK(before.selected == after.selected);

  CHECK_THROWS_AS(load_router<double>(dir / "missing"), MissingCheckpoint);
  std::filesystem::remove_all(dir);
}

TEST_CASE("invalid configs are rejected") {
  RouterConfig cfg = small_cfg();
  cfg.level_token_counts.pop_back();
  CHECK_THROWS_AS(init_router_params<double>(cfg, 0), SchemaError);
  RouterConfig cfg2 = small_cfg();
  cfg2.k = 0;
  CHECK_THROWS_AS(init_router_params<double>(cfg2, 0), SchemaError);
}
