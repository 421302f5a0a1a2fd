#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "granroute/lmm.hpp"

#include <random>

using namespace granroute;

namespace {

LmmConfig small_cfg() {
  LmmConfig cfg;
  cfg.vocab = 64;
  cfg.d = 16;
  cfg.d_vis = 4;
  cfg.heads = 4;
  cfg.blocks = 2;
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

}  // namespace

TEST_CASE("logits cover the whole sequence and vocabulary") {
  auto lmm = init_lmm<double>(small_cfg(), 1);
  auto pyr = small_pyramid<double>(2);
  Graph<double> g;
  auto n = lmm_forward_graph(g, lmm, pyr.levels[0], {17, 20, 21}, {3, 16});
  CHECK(g.value(n.logits).rows() == 16 + 3 + 2);
  CHECK(g.value(n.logits).cols() == 64);
}

TEST_CASE("zeroed output head gives exactly uniform next-token log-probs") {
  auto lmm = init_lmm<double>(small_cfg(), 1);
  lmm.params[lmm.out_w].data.setZero();
  lmm.params[lmm.out_b].data.setZero();
  auto pyr = small_pyramid<double>(2);
  auto lp = answer_logprob(lmm, pyr.levels[2], {17, 20}, {3, 16});
  CHECK(lp.T == 2);
  CHECK(lp.avg_logprob == doctest::Approx(-4.1588830833596715).epsilon(1e-12));
  CHECK(lp.sum_logprob == doctest::Approx(2 * -4.1588830833596715).epsilon(1e-12));
}

TEST_CASE("multi-level loss equals the mean of per-level answer losses") {
  auto lmm = init_lmm<double>(small_cfg(), 3);
  auto pyr = small_pyramid<double>(4);
  const std::vector<int> instr = {17, 25, 26};
  const std::vector<int> answer = {5, 16};

  Graph<double> g;
  const int loss = stage1_loss_graph(g, lmm, pyr, instr, answer);

  double manual = 0.0;
  for (const auto& grid : pyr.levels)
    manual -= answer_logprob(lmm, grid, instr, answer).sum_logprob;
  manual /= double(pyr.n_levels());
  CHECK(g.value(loss).data[0] == doctest::Approx(manual).epsilon(1e-9));
}

TEST_CASE("causal mask: future answer tokens cannot affect earlier rows") {
  auto lmm = init_lmm<double>(small_cfg(), 5);
  auto pyr = small_pyramid<double>(6);
  const std::vector<int> instr = {18, 19};

  Graph<double> g1, g2;
  auto n1 = lmm_forward_graph(g1, lmm, pyr.levels[0], instr, {4, 16});
  auto n2 = lmm_forward_graph(g2, lmm, pyr.levels[0], instr, {4, 7});
  const Index cut = n1.n_vis + n1.n_ins + 1;  // rows before the changed token
  const auto& l1 = g1.value(n1.logits);
  const auto& l2 = g2.value(n2.logits);
  for (Index r = 0; r < cut; ++r)
    CHECK((l1.mat().row(r) - l2.mat().row(r)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((l1.mat().row(cut) - l2.mat().row(cut)).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("the visual tokens do influence the answer prediction") {
  auto lmm = init_lmm<double>(small_cfg(), 7);
  auto a = small_pyramid<double>(8);
  auto b = small_pyramid<double>(9);
  auto la = lmm_forward(lmm, a.levels[0], {17, 20}, {});
  auto lb = lmm_forward(lmm, b.levels[0], {17, 20}, {});
  CHECK((la.data - lb.data).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("invalid ids raise VocabOverflow, empty instruction raises") {
  auto lmm = init_lmm<double>(small_cfg(), 1);
  auto pyr = small_pyramid<double>(2);
  Graph<double> g;
  CHECK_THROWS_AS(lmm_forward_graph(g, lmm, pyr.levels[0], {64}, {1}), VocabOverflow);
  CHECK_THROWS_AS(lmm_forward_graph(g, lmm, pyr.levels[0], {1}, {-1}), VocabOverflow);
  CHECK_THROWS_AS(lmm_forward_graph(g, lmm, pyr.levels[0], {}, {1}), ShapeMismatch);
}

TEST_CASE("loss gradients match finite differences") {
  LmmConfig cfg = small_cfg();
  cfg.blocks = 1;
  auto lmm = init_lmm<double>(cfg, 11);
  TokenGrid<double> grid = TokenGrid<double>::zeros(2, 2, 4);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> dist(-1, 1);
  for (Index i = 0; i < grid.data.numel(); ++i) grid.data.data[i] = dist(rng);
  auto pyr = build_pyramid(grid, 2);
  const std::vector<int> instr = {17, 23};
  const std::vector<int> answer = {2, 16};

  auto loss_value = [&]() {
    Graph<double> g;
    return g.value(stage1_loss_graph(g, lmm, pyr, instr, answer)).data[0];
  };

  Graph<double> g;
  std::vector<int> pn;
  const int loss = stage1_loss_graph(g, lmm, pyr, instr, answer, &pn);
  g.backward(loss);

  const double eps = 1e-5;
  double worst = 0.0;
  for (Index p = 0; p < lmm.params.size(); ++p) {
    REQUIRE(g.has_grad(pn[size_t(p)]));
    const Tensor<double>& grad = g.grad(pn[size_t(p)]);
    Tensor<double>& theta = lmm.params[p];
    const Index stride = std::max<Index>(1, theta.numel() / 12);
    for (Index i = rng() % (unsigned long long)stride; i < theta.numel(); i += stride) {
      const double orig = theta.data[i];
      theta.data[i] = orig + eps;
      const double fp = loss_value();
      theta.data[i] = orig - eps;
      const double fm = loss_value();
      theta.data[i] = orig;
      const double fd = (fp - fm) / (2 * eps);
      worst = std::max(worst, std::abs(grad.data[i] - fd) / std::max(1.0, std::abs(grad.data[i])));
    }
  }
  CHECK_MESSAGE(worst < 1e-4, "worst rel err ", worst);
}

TEST_CASE("training steps reduce the loss on a fixed sample") {
  auto lmm = init_lmm<float>(small_cfg(), 13);
  auto pyr = small_pyramid<float>(14);
  Adam<float> opt(lmm.params, 1e-3);
  const std::vector<int> instr = {17, 21, 22};
  const std::vector<int> answer = {6, 16};
  const double first = stage1_train_step(lmm, opt, pyr, instr, answer);
  double last = first;
  for (int i = 0; i < 40; ++i) last = stage1_train_step(lmm, opt, pyr, instr, answer);
  CHECK(last < 0.5 * first);
}

TEST_CASE("checkpoint round trip preserves outputs") {
  auto lmm = init_lmm<double>(small_cfg(), 15);
  auto pyr = small_pyramid<double>(16);
  auto before = lmm_forward(lmm, pyr.levels[1], {17, 20}, {1});

  const auto dir = std::filesystem::temp_directory_path() / "granroute_lmm_ckpt";
  std::filesystem::remove_all(dir);
  save_lmm(lmm, dir);
  auto lmm2 = load_lmm<double>(dir);
  auto after = lmm_forward(lmm2, pyr.levels[1], {17, 20}, {1});
  CHECK((before.data - after.data).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(load_lmm<double>(dir / "nope"), MissingCheckpoint);
  std::filesystem::remove_all(dir);
}
