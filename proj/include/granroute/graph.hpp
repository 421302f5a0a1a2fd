#pragma once

#include "granroute/ops.hpp"

#include <functional>
#include <utility>

namespace granroute {

// Thin tape over forward_op/backward_vjp. Node ids are insertion-ordered,
// so reverse iteration is a valid reverse topological order.
template <typename S>
class Graph {
 public:
  int leaf(Tensor<S> t) {
    nodes_.push_back(Node{OpKind::kAdd, {}, {}, std::move(t), {}, true});
    Node& n = nodes_.back();
    n.requires_grad = n.value.requires_grad;
    return int(nodes_.size()) - 1;
  }

  int apply(OpKind kind, const std::vector<int>& inputs, OpAttrs attrs = {}) {
    std::vector<const Tensor<S>*> in;
    in.reserve(inputs.size());
    bool rg = false;
    for (int id : inputs) {
      in.push_back(&nodes_[size_t(id)].value);
      rg = rg || nodes_[size_t(id)].requires_grad;
    }
    Tensor<S> out = forward_op(kind, in, attrs);
    nodes_.push_back(Node{kind, std::move(attrs), inputs, std::move(out), {}, rg});
    nodes_.back().is_leaf = false;
    return int(nodes_.size()) - 1;
  }

  const Tensor<S>& value(int id) const { return nodes_[size_t(id)].value; }
  const Tensor<S>& grad(int id) const { return nodes_[size_t(id)].grad; }
  bool has_grad(int id) const { return nodes_[size_t(id)].grad.numel() > 0; }

  // Backward from explicit (node, seed) pairs; seeds must match value shapes.
  void backward(const std::vector<std::pair<int, Tensor<S>>>& seeds) {
    for (const auto& [id, seed] : seeds) {
      Node& n = nodes_[size_t(id)];
      if (seed.shape != n.value.shape) throw ShapeMismatch("backward seed shape");
      accumulate(n, seed);
    }
    for (int id = int(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[size_t(id)];
      if (n.is_leaf || !n.requires_grad || n.grad.numel() == 0) continue;
      std::vector<const Tensor<S>*> in;
      in.reserve(n.inputs.size());
      for (int i : n.inputs) in.push_back(&nodes_[size_t(i)].value);
      std::vector<Tensor<S>> gs = backward_vjp(n.kind, in, n.grad, n.attrs);
      for (size_t k = 0; k < n.inputs.size(); ++k) {
        Node& src = nodes_[size_t(n.inputs[k])];
        if (src.requires_grad) accumulate(src, gs[k]);
      }
    }
  }

  // Backward from a scalar output with seed 1.
  void backward(int id) {
    if (nodes_[size_t(id)].value.numel() != 1) throw ShapeMismatch("backward: output not scalar");
    backward({{id, Tensor<S>::scalar(S(1))}});
  }

 private:
  struct Node {
    OpKind kind;
    OpAttrs attrs;
    std::vector<int> inputs;
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    bool is_leaf = true;
  };

  void accumulate(Node& n, const Tensor<S>& g) {
    if (n.grad.numel() == 0)
      n.grad = g;
    else
      n.grad.data += g.data;
  }

  std::vector<Node> nodes_;
};

// Central-difference check of an analytic gradient:
// max over coordinates of |analytic - central| / max(1, |analytic|).
inline double check_gradient(const std::function<double(const Tensor<double>&)>& f,
                             const std::function<Tensor<double>(const Tensor<double>&)>& grad_f,
                             const Tensor<double>& x, double eps = 1e-5) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw SchemaError("check_gradient eps out of (0, 1e-2]");
  Tensor<double> analytic = grad_f(x);
  if (!analytic.finite()) throw NonFiniteGradient("analytic gradient not finite");
  double max_rel = 0.0;
  Tensor<double> xp = x;
  for (Index i = 0; i < x.numel(); ++i) {
    const double orig = xp.data[i];
    xp.data[i] = orig + eps;
    const double fp = f(xp);
    xp.data[i] = orig - eps;
    const double fm = f(xp);
    xp.data[i] = orig;
    const double fd = (fp - fm) / (2.0 * eps);
    if (!std::isfinite(fd)) throw NonFiniteGradient("finite difference not finite");
    const double a = analytic.data[i];
    max_rel = std::max(max_rel, std::abs(a - fd) / std::max(1.0, std::abs(a)));
  }
  return max_rel;
}

}  // namespace granroute
