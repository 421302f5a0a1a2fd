#pragma once

#include "granroute/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

namespace granroute {

// Closed op catalog. Every tag has a matching VJP in backward_vjp().
enum class OpKind {
  kMatmul,
  kAdd,
  kScale,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kEmbedLookup,
  kCrossEntropy,
  kMeanPoolPair,
  kConcat,
  kMaskFill,
};

enum class Reduction { kMean, kSum };
enum class PoolAxis { kHeight, kWidth };

// Attribute bag; each op reads only the fields it documents.
struct OpAttrs {
  bool trans_a = false, trans_b = false;  // matmul
  double scalar = 1.0;                    // scale
  double eps = 1e-5;                      // layernorm
  std::vector<int> ids;                   // embed_lookup rows
  std::vector<int> targets;               // cross_entropy; -1 = ignore row
  Reduction reduction = Reduction::kMean; // cross_entropy
  double clamp = 1e-12;                   // cross_entropy probability floor
  std::vector<std::uint8_t> mask;         // mask_fill, per element
  double fill = -1e9;                     // mask_fill value
  int axis = 0;                           // concat: 0 rows, 1 cols
  Index grid_rows = 0, grid_cols = 0;     // mean_pool_pair
  PoolAxis pool_axis = PoolAxis::kWidth;  // mean_pool_pair
};

namespace detail {

template <typename S>
void require_finite(const Tensor<S>& t, const char* op) {
  if (!t.finite()) throw NumericOverflow(std::string(op) + " produced non-finite values");
}

template <typename S>
MatrixX<S> view_or_transpose(const Tensor<S>& t, bool trans) {
  if (!trans) return t.mat();
  return t.mat().transpose();
}

template <typename S>
S gelu_scalar(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / S(std::sqrt(2.0))));
}
template <typename S>
S gelu_grad_scalar(S x) {
  const S phi = std::exp(-x * x / S(2)) / S(std::sqrt(2.0 * M_PI));
  return S(0.5) * (S(1) + std::erf(x / S(std::sqrt(2.0)))) + x * phi;
}

}  // namespace detail

template <typename S>
Tensor<S> forward_op(OpKind kind, const std::vector<const Tensor<S>*>& in, const OpAttrs& attrs = {}) {
  using detail::require_finite;
  switch (kind) {
    case OpKind::kMatmul: {
      if (in.size() != 2) throw ShapeMismatch("matmul expects 2 inputs");
      MatrixX<S> a = detail::view_or_transpose(*in[0], attrs.trans_a);
      MatrixX<S> b = detail::view_or_transpose(*in[1], attrs.trans_b);
      if (a.cols() != b.rows())
        throw ShapeMismatch("matmul inner dims: " + shape_str(in[0]->shape) + " vs " + shape_str(in[1]->shape));
      Tensor<S> out = Tensor<S>::from_matrix(a * b);
      require_finite(out, "matmul");
      return out;
    }
    case OpKind::kAdd: {
      if (in.size() != 2) throw ShapeMismatch("add expects 2 inputs");
      const Tensor<S>& a = *in[0];
      const Tensor<S>& b = *in[1];
      if (same_shape(a, b)) {
        Tensor<S> out = a;
        out.data += b.data;
        require_finite(out, "add");
        return out;
      }
      // Row broadcast: b is a single row matching a's column count.
      if (b.rows() == 1 && b.cols() == a.cols()) {
        Tensor<S> out = a;
        out.mat().rowwise() += b.mat().row(0);
        require_finite(out, "add");
        return out;
      }
      throw ShapeMismatch("add: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    case OpKind::kScale: {
      if (in.size() != 1) throw ShapeMismatch("scale expects 1 input");
      Tensor<S> out = *in[0];
      out.data *= S(attrs.scalar);
      require_finite(out, "scale");
      return out;
    }
    case OpKind::kSoftmax: {
      if (in.size() != 1) throw ShapeMismatch("softmax expects 1 input");
      Tensor<S> out = *in[0];
      auto m = out.mat();
      for (Index r = 0; r < m.rows(); ++r) {
        const S mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp();
        m.row(r) /= m.row(r).sum();
      }
      require_finite(out, "softmax");
      return out;
    }
    case OpKind::kLayerNorm: {
      if (in.size() != 3) throw ShapeMismatch("layernorm expects (x, gamma, beta)");
      const Tensor<S>& x = *in[0];
      const Tensor<S>& gamma = *in[1];
      const Tensor<S>& beta = *in[2];
      if (gamma.numel() != x.cols() || beta.numel() != x.cols())
        throw ShapeMismatch("layernorm gamma/beta must match feature dim");
      Tensor<S> out = x;
      auto m = out.mat();
      const S eps = S(attrs.eps);
      for (Index r = 0; r < m.rows(); ++r) {
        const S mu = m.row(r).mean();
        const S var = (m.row(r).array() - mu).square().mean();
        m.row(r) = (m.row(r).array() - mu) / std::sqrt(var + eps);
      }
      m.array().rowwise() *= gamma.data.transpose().array();
      m.rowwise() += beta.data.transpose();
      require_finite(out, "layernorm");
      return out;
    }
    case OpKind::kGelu: {
      if (in.size() != 1) throw ShapeMismatch("gelu expects 1 input");
      Tensor<S> out = *in[0];
      out.data = out.data.unaryExpr([](S v) { return detail::gelu_scalar(v); });
      require_finite(out, "gelu");
      return out;
    }
    case OpKind::kEmbedLookup: {
      if (in.size() != 1) throw ShapeMismatch("embed_lookup expects a table input");
      const Tensor<S>& table = *in[0];
      Tensor<S> out = Tensor<S>::zeros({Index(attrs.ids.size()), table.cols()});
      for (size_t i = 0; i < attrs.ids.size(); ++i) {
        const int id = attrs.ids[i];
        if (id < 0 || id >= table.rows()) throw VocabOverflow("embed id " + std::to_string(id));
        out.mat().row(Index(i)) = table.mat().row(id);
      }
      return out;
    }
    case OpKind::kCrossEntropy: {
      if (in.size() != 1) throw ShapeMismatch("cross_entropy expects probs");
      const Tensor<S>& p = *in[0];
      if (Index(attrs.targets.size()) != p.rows())
        throw ShapeMismatch("cross_entropy targets must match rows");
      S loss = 0;
      Index counted = 0;
      for (Index r = 0; r < p.rows(); ++r) {
        const int t = attrs.targets[size_t(r)];
        if (t < 0) continue;
        if (t >= p.cols()) throw VocabOverflow("cross_entropy target " + std::to_string(t));
        loss -= std::log(std::max(p.at(r, t), S(attrs.clamp)));
        ++counted;
      }
      if (counted == 0) throw ShapeMismatch("cross_entropy: no unignored rows");
      if (attrs.reduction == Reduction::kMean) loss /= S(counted);
      Tensor<S> out = Tensor<S>::scalar(loss);
      require_finite(out, "cross_entropy");
      return out;
    }
    case OpKind::kMeanPoolPair: {
      if (in.size() != 1) throw ShapeMismatch("mean_pool_pair expects 1 input");
      const Tensor<S>& x = *in[0];
      const Index r = attrs.grid_rows, c = attrs.grid_cols, d = x.cols();
      if (r * c != x.rows()) throw ShapeMismatch("mean_pool_pair grid dims vs token count");
      if (attrs.pool_axis == PoolAxis::kWidth) {
        if (c % 2 != 0) throw OddAxis("width " + std::to_string(c) + " not divisible by 2");
        Tensor<S> out = Tensor<S>::zeros({r * c / 2, d});
        for (Index i = 0; i < r; ++i)
          for (Index j = 0; j < c / 2; ++j)
            out.mat().row(i * (c / 2) + j) =
                (x.mat().row(i * c + 2 * j) + x.mat().row(i * c + 2 * j + 1)) / S(2);
        return out;
      }
      if (r % 2 != 0) throw OddAxis("height " + std::to_string(r) + " not divisible by 2");
      Tensor<S> out = Tensor<S>::zeros({(r / 2) * c, d});
      for (Index i = 0; i < r / 2; ++i)
        for (Index j = 0; j < c; ++j)
          out.mat().row(i * c + j) =
              (x.mat().row(2 * i * c + j) + x.mat().row((2 * i + 1) * c + j)) / S(2);
      return out;
    }
    case OpKind::kConcat: {
      if (in.empty()) throw ShapeMismatch("concat expects >=1 input");
      if (attrs.axis == 0) {
        const Index d = in[0]->cols();
        Index total = 0;
        for (const auto* t : in) {
          if (t->cols() != d) throw ShapeMismatch("concat axis 0 needs equal cols");
          total += t->rows();
        }
        Tensor<S> out = Tensor<S>::zeros({total, d});
        Index r = 0;
        for (const auto* t : in) {
          out.mat().middleRows(r, t->rows()) = t->mat();
          r += t->rows();
        }
        return out;
      }
      const Index rws = in[0]->rows();
      Index total = 0;
      for (const auto* t : in) {
        if (t->rows() != rws) throw ShapeMismatch("concat axis 1 needs equal rows");
        total += t->cols();
      }
      Tensor<S> out = Tensor<S>::zeros({rws, total});
      Index c = 0;
      for (const auto* t : in) {
        out.mat().middleCols(c, t->cols()) = t->mat();
        c += t->cols();
      }
      return out;
    }
    case OpKind::kMaskFill: {
      if (in.size() != 1) throw ShapeMismatch("mask_fill expects 1 input");
      const Tensor<S>& x = *in[0];
      if (Index(attrs.mask.size()) != x.numel())
        throw ShapeMismatch("mask_fill mask must match numel");
      Tensor<S> out = x;
      for (Index i = 0; i < out.numel(); ++i)
        if (attrs.mask[size_t(i)]) out.data[i] = S(attrs.fill);
      return out;
    }
  }
  throw ShapeMismatch("unknown op");
}

// One gradient per input, same shape as that input.
template <typename S>
std::vector<Tensor<S>> backward_vjp(OpKind kind, const std::vector<const Tensor<S>*>& in,
                                    const Tensor<S>& upstream, const OpAttrs& attrs = {}) {
  switch (kind) {
    case OpKind::kMatmul: {
      const Tensor<S>& a = *in[0];
      const Tensor<S>& b = *in[1];
      MatrixX<S> g = upstream.mat();
      MatrixX<S> av = detail::view_or_transpose(a, attrs.trans_a);
      MatrixX<S> bv = detail::view_or_transpose(b, attrs.trans_b);
      MatrixX<S> ga = g * bv.transpose();
      MatrixX<S> gb = av.transpose() * g;
      if (attrs.trans_a) ga = ga.transpose().eval();
      if (attrs.trans_b) gb = gb.transpose().eval();
      Tensor<S> ta = Tensor<S>::from_matrix(ga);
      Tensor<S> tb = Tensor<S>::from_matrix(gb);
      ta.shape = a.shape;
      tb.shape = b.shape;
      return {ta, tb};
    }
    case OpKind::kAdd: {
      const Tensor<S>& a = *in[0];
      const Tensor<S>& b = *in[1];
      Tensor<S> ga = upstream;
      ga.shape = a.shape;
      if (same_shape(a, b)) {
        Tensor<S> gb = upstream;
        gb.shape = b.shape;
        return {ga, gb};
      }
      Tensor<S> gb = Tensor<S>::zeros(b.shape);
      gb.mat().row(0) = upstream.mat().colwise().sum();
      return {ga, gb};
    }
    case OpKind::kScale: {
      Tensor<S> g = upstream;
      g.data *= S(attrs.scalar);
      g.shape = in[0]->shape;
      return {g};
    }
    case OpKind::kSoftmax: {
      Tensor<S> p = forward_op(OpKind::kSoftmax, in, attrs);
      Tensor<S> g = upstream;
      auto gm = g.mat();
      auto pm = p.mat();
      for (Index r = 0; r < gm.rows(); ++r) {
        const S dot = upstream.mat().row(r).dot(pm.row(r));
        gm.row(r) = (pm.row(r).array() * (upstream.mat().row(r).array() - dot)).matrix();
      }
      g.shape = in[0]->shape;
      return {g};
    }
    case OpKind::kLayerNorm: {
      const Tensor<S>& x = *in[0];
      const Tensor<S>& gamma = *in[1];
      const Index D = x.cols();
      const S eps = S(attrs.eps);
      Tensor<S> gx = Tensor<S>::zeros(x.shape);
      Tensor<S> gg = Tensor<S>::zeros(in[1]->shape);
      Tensor<S> gb = Tensor<S>::zeros(in[2]->shape);
      Eigen::Map<VectorX<S>> ggv(gg.data.data(), D);
      Eigen::Map<VectorX<S>> gbv(gb.data.data(), D);
      for (Index r = 0; r < x.rows(); ++r) {
        const auto xr = x.mat().row(r);
        const S mu = xr.mean();
        const S var = (xr.array() - mu).square().mean();
        const S inv = S(1) / std::sqrt(var + eps);
        Eigen::Array<S, 1, Eigen::Dynamic> xhat = (xr.array() - mu) * inv;
        const auto gr = upstream.mat().row(r);
        Eigen::Array<S, 1, Eigen::Dynamic> gh = gr.array() * gamma.data.transpose().array();
        const S mean_gh = gh.mean();
        const S mean_ghx = (gh * xhat).mean();
        gx.mat().row(r) = (inv * (gh - mean_gh - xhat * mean_ghx)).matrix();
        ggv += (gr.array() * xhat).matrix().transpose();
        gbv += gr.transpose();
      }
      return {gx, gg, gb};
    }
    case OpKind::kGelu: {
      Tensor<S> g = upstream;
      for (Index i = 0; i < g.numel(); ++i)
        g.data[i] = upstream.data[i] * detail::gelu_grad_scalar(in[0]->data[i]);
      g.shape = in[0]->shape;
      return {g};
    }
    case OpKind::kEmbedLookup: {
      Tensor<S> g = Tensor<S>::zeros(in[0]->shape);
      for (size_t i = 0; i < attrs.ids.size(); ++i)
        g.mat().row(attrs.ids[i]) += upstream.mat().row(Index(i));
      return {g};
    }
    case OpKind::kCrossEntropy: {
      const Tensor<S>& p = *in[0];
      const S up = upstream.data[0];
      Index counted = 0;
      for (int t : attrs.targets)
        if (t >= 0) ++counted;
      const S norm = attrs.reduction == Reduction::kMean ? S(counted) : S(1);
      Tensor<S> g = Tensor<S>::zeros(p.shape);
      for (Index r = 0; r < p.rows(); ++r) {
        const int t = attrs.targets[size_t(r)];
        if (t < 0) continue;
        const S pv = std::max(p.at(r, t), S(attrs.clamp));
        g.at(r, t) = -up / (pv * norm);
      }
      return {g};
    }
    case OpKind::kMeanPoolPair: {
      const Tensor<S>& x = *in[0];
      const Index r = attrs.grid_rows, c = attrs.grid_cols;
      Tensor<S> g = Tensor<S>::zeros(x.shape);
      if (attrs.pool_axis == PoolAxis::kWidth) {
        for (Index i = 0; i < r; ++i)
          for (Index j = 0; j < c / 2; ++j) {
            const auto gr = upstream.mat().row(i * (c / 2) + j) / S(2);
            g.mat().row(i * c + 2 * j) += gr;
            g.mat().row(i * c + 2 * j + 1) += gr;
          }
      } else {
        for (Index i = 0; i < r / 2; ++i)
          for (Index j = 0; j < c; ++j) {
            const auto gr = upstream.mat().row(i * c + j) / S(2);
            g.mat().row(2 * i * c + j) += gr;
            g.mat().row((2 * i + 1) * c + j) += gr;
          }
      }
      return {g};
    }
    case OpKind::kConcat: {
      std::vector<Tensor<S>> grads;
      grads.reserve(in.size());
      if (attrs.axis == 0) {
        Index r = 0;
        for (const auto* t : in) {
          Tensor<S> g = Tensor<S>::zeros(t->shape);
          g.mat() = upstream.mat().middleRows(r, t->rows());
          r += t->rows();
          grads.push_back(std::move(g));
        }
      } else {
        Index c = 0;
        for (const auto* t : in) {
          Tensor<S> g = Tensor<S>::zeros(t->shape);
          g.mat() = upstream.mat().middleCols(c, t->cols());
          c += t->cols();
          grads.push_back(std::move(g));
        }
      }
      return grads;
    }
    case OpKind::kMaskFill: {
      Tensor<S> g = upstream;
      g.shape = in[0]->shape;
      for (Index i = 0; i < g.numel(); ++i)
        if (attrs.mask[size_t(i)]) g.data[i] = S(0);
      return {g};
    }
  }
  throw ShapeMismatch("unknown op");
}

}  // namespace granroute
