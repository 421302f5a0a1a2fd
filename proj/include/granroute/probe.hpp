#pragma once

#include "granroute/scenes.hpp"

namespace granroute {

// Multinomial logistic probe on flattened level-l tokens. Used as the corpus
// decodability oracle, independent of the router/LMM stack.
template <typename S>
struct LinearProbe {
  MatrixX<double> w;  // D x classes
  VectorX<double> b;

  int predict(const VectorX<double>& x) const {
    VectorX<double> z = w.transpose() * x + b;
    Index best;
    z.maxCoeff(&best);
    return int(best);
  }
};

template <typename S>
LinearProbe<S> train_probe(const MatrixX<double>& X, const std::vector<int>& labels, int classes,
                           int epochs = 120, double lr = 0.05, double l2 = 1e-4) {
  const Index n = X.rows(), D = X.cols();
  LinearProbe<S> probe;
  probe.w = MatrixX<double>::Zero(D, classes);
  probe.b = VectorX<double>::Zero(classes);
  MatrixX<double> mw = MatrixX<double>::Zero(D, classes), vw = mw;
  VectorX<double> mb = VectorX<double>::Zero(classes), vb = mb;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int e = 1; e <= epochs; ++e) {
    MatrixX<double> z = X * probe.w;
    z.rowwise() += probe.b.transpose();
    for (Index r = 0; r < n; ++r) {
      const double mx = z.row(r).maxCoeff();
      z.row(r) = (z.row(r).array() - mx).exp();
      z.row(r) /= z.row(r).sum();
      z(r, labels[size_t(r)]) -= 1.0;
    }
    MatrixX<double> gw = X.transpose() * z / double(n) + l2 * probe.w;
    VectorX<double> gb = z.colwise().sum().transpose() / double(n);
    const double c1 = 1.0 - std::pow(b1, e), c2 = 1.0 - std::pow(b2, e);
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
    probe.w -= lr * (mw / c1).cwiseQuotient(((vw / c2).cwiseSqrt().array() + eps).matrix());
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
    probe.b -= lr * (mb / c1).cwiseQuotient(((vb / c2).cwiseSqrt().array() + eps).matrix());
  }
  return probe;
}

// Decodability of one task's answer from level-l tokens: trains on the train
// corpus, returns accuracy on the test corpus. Features are per-column
// channel means of the level grid — a tied-weight (hence still linear)
// functional of the tokens that keeps the sample count ahead of the
// dimensionality at the finest level.
template <typename S>
double probe_accuracy(const Corpus<S>& train, const Corpus<S>& test, int level, TaskKind kind,
                      int epochs = 120, double lr = 0.05, double l2 = 1e-4) {
  auto features = [&](const SceneSample<S>& s) {
    GranularityPyramid<S> pyr = build_pyramid(s.grid, train.cfg.n_levels);
    const auto& lvl = pyr.levels[size_t(level)];
    const auto m = lvl.data.mat();
    VectorX<double> x = VectorX<double>::Zero(lvl.cols * lvl.dim);
    for (Index t = 0; t < lvl.tokens(); ++t) {
      const Index col = t % lvl.cols;
      for (Index c = 0; c < lvl.dim; ++c) x[col * lvl.dim + c] += double(m(t, c));
    }
    x /= double(lvl.rows);
    return x;
  };
  auto label = [&](const SceneSample<S>& s) {
    return kind == TaskKind::kCoarseQuery ? s.coarse_class : s.fine_class;
  };

  std::vector<const SceneSample<S>*> tr, te;
  for (const auto& s : train.samples)
    if (s.task_kind == kind) tr.push_back(&s);
  for (const auto& s : test.samples)
    if (s.task_kind == kind) te.push_back(&s);
  if (tr.empty() || te.empty()) throw EmptyList("probe: no samples of requested kind");

  const Index D = features(*tr[0]).size();
  MatrixX<double> X(Index(tr.size()), D);
  std::vector<int> y;
  for (size_t i = 0; i < tr.size(); ++i) {
    X.row(Index(i)) = features(*tr[i]).transpose();
    y.push_back(label(*tr[i]));
  }
  LinearProbe<S> probe = train_probe<S>(X, y, train.cfg.n_classes, epochs, lr, l2);

  Index correct = 0;
  for (const auto* s : te)
    if (probe.predict(features(*s)) == label(*s)) ++correct;
  return double(correct) / double(te.size());
}

}  // namespace granroute
