#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace granroute {

using Index = Eigen::Index;

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Error taxonomy shared by all modules.
struct ShapeMismatch : std::runtime_error {
  explicit ShapeMismatch(const std::string& msg) : std::runtime_error("ShapeMismatch: " + msg) {}
};
struct NumericOverflow : std::runtime_error {
  explicit NumericOverflow(const std::string& msg) : std::runtime_error("NumericOverflow: " + msg) {}
};
struct OddAxis : std::runtime_error {
  explicit OddAxis(const std::string& msg) : std::runtime_error("OddAxis: " + msg) {}
};
struct ZeroNormToken : std::runtime_error {
  explicit ZeroNormToken(const std::string& msg) : std::runtime_error("ZeroNormToken: " + msg) {}
};
struct VocabOverflow : std::runtime_error {
  explicit VocabOverflow(const std::string& msg) : std::runtime_error("VocabOverflow: " + msg) {}
};
struct NonFiniteGradient : std::runtime_error {
  explicit NonFiniteGradient(const std::string& msg) : std::runtime_error("NonFiniteGradient: " + msg) {}
};
struct EmptyList : std::runtime_error {
  explicit EmptyList(const std::string& msg) : std::runtime_error("EmptyList: " + msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("IoError: " + msg) {}
};
struct CorruptManifest : std::runtime_error {
  explicit CorruptManifest(const std::string& msg) : std::runtime_error("CorruptManifest: " + msg) {}
};
struct MissingCheckpoint : std::runtime_error {
  explicit MissingCheckpoint(const std::string& msg) : std::runtime_error("MissingCheckpoint: " + msg) {}
};
struct SchemaError : std::runtime_error {
  explicit SchemaError(const std::string& msg) : std::runtime_error("SchemaError: " + msg) {}
};

// Dense row-major tensor. Shapes are 1-D or 2-D; a 2-D tensor of shape
// {r, c} maps onto an r-by-c row-major matrix view.
template <typename S>
struct Tensor {
  std::vector<Index> shape;
  VectorX<S> data;  // flat, row-major
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<Index> shp, VectorX<S> d) : shape(std::move(shp)), data(std::move(d)) {
    if (numel() != data.size()) throw ShapeMismatch("tensor shape/data length disagree");
  }

  Index numel() const {
    Index n = 1;
    for (Index s : shape) n *= s;
    return shape.empty() ? 0 : n;
  }
  // Matrix view: last axis is the column axis.
  Index rows() const { return shape.size() < 2 ? 1 : numel() / shape.back(); }
  Index cols() const { return shape.empty() ? 0 : shape.back(); }

  Eigen::Map<MatrixX<S>> mat() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const MatrixX<S>> mat() const { return {data.data(), rows(), cols()}; }

  S& at(Index r, Index c) { return data[r * cols() + c]; }
  S at(Index r, Index c) const { return data[r * cols() + c]; }

  bool finite() const { return data.allFinite(); }

  static Tensor zeros(std::vector<Index> shp) {
    Tensor t;
    t.shape = std::move(shp);
    t.data = VectorX<S>::Zero(t.numel());
    return t;
  }
  static Tensor full(std::vector<Index> shp, S v) {
    Tensor t = zeros(std::move(shp));
    t.data.setConstant(v);
    return t;
  }
  static Tensor scalar(S v) { return Tensor({1}, VectorX<S>::Constant(1, v)); }
  static Tensor from_matrix(const MatrixX<S>& m) {
    Tensor t;
    t.shape = {m.rows(), m.cols()};
    t.data.resize(m.size());
    Eigen::Map<MatrixX<S>>(t.data.data(), m.rows(), m.cols()) = m;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data = data.template cast<T>();
    out.requires_grad = requires_grad;
    return out;
  }
};

template <typename S>
bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape == b.shape;
}

inline std::string shape_str(const std::vector<Index>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace granroute
