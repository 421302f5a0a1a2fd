#pragma once

#include "granroute/tensor_io.hpp"

namespace granroute {

// Adam with bias correction; one slot pair (m, v) per parameter tensor.
template <typename S>
class Adam {
 public:
  explicit Adam(ParamSet<S>& params, double lr = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Index i = 0; i < params.size(); ++i) {
      m_.push_back(VectorX<S>::Zero(params[i].numel()));
      v_.push_back(VectorX<S>::Zero(params[i].numel()));
    }
  }

  // grads[i] aligned with params[i]; empty tensors are skipped.
  void step(const std::vector<Tensor<S>>& grads) {
    ++t_;
    const S bc1 = S(1) - S(std::pow(beta1_, double(t_)));
    const S bc2 = S(1) - S(std::pow(beta2_, double(t_)));
    for (Index i = 0; i < params_.size(); ++i) {
      if (grads[size_t(i)].numel() == 0) continue;
      const auto& g = grads[size_t(i)].data;
      if (!g.allFinite()) throw NumericOverflow("non-finite gradient in Adam step");
      auto& m = m_[size_t(i)];
      auto& v = v_[size_t(i)];
      m = S(beta1_) * m + (S(1) - S(beta1_)) * g;
      v = S(beta2_) * v + (S(1) - S(beta2_)) * g.cwiseProduct(g);
      params_[i].data -=
          S(lr_) * (m / bc1).cwiseQuotient(((v / bc2).cwiseSqrt().array() + S(eps_)).matrix());
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return t_; }

 private:
  ParamSet<S>& params_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<VectorX<S>> m_, v_;
};

}  // namespace granroute
