// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moqe/errors.hpp"

namespace moqe {

using Real = double;
using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using RowMatrixX = RowMatrix<Real>;
using VectorX = Vector<Real>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array. Matrices are the 2-D case; higher ranks are views over
// the same flat storage (the last extent is the fastest-varying one).
template <typename Scalar>
struct BasicTensor {
  Shape shape;
  Vector<Scalar> data;
  bool requires_grad = false;
  std::optional<Vector<Scalar>> grad;

  BasicTensor() = default;
  explicit BasicTensor(Shape s) : shape(std::move(s)), data(Vector<Scalar>::Zero(shape_numel(shape))) {
    for (Index e : shape)
      if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  BasicTensor(Shape s, Vector<Scalar> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                           " values");
  }

  static BasicTensor zeros(Shape s) { return BasicTensor(std::move(s)); }
  static BasicTensor matrix(const RowMatrix<Scalar>& m) {
    return BasicTensor({m.rows(), m.cols()}, Eigen::Map<const Vector<Scalar>>(m.data(), m.size()));
  }

  Index numel() const { return data.size(); }
  Index rows() const { return shape.size() == 1 ? 1 : shape.front(); }
  Index cols() const { return shape.size() == 1 ? shape.front() : numel() / shape.front(); }

  // 2-D view: first extent by the product of the rest.
  Eigen::Map<RowMatrix<Scalar>> mat() { return {data.data(), rows(), cols()}; }
  Eigen::Map<const RowMatrix<Scalar>> mat() const { return {data.data(), rows(), cols()}; }

  bool all_finite() const { return data.allFinite(); }
  void check_finite(const std::string& what) const {
    if (!all_finite()) throw DataError(what + ": tensor contains NaN or Inf");
  }

  void zero_grad() {
    if (requires_grad) grad = Vector<Scalar>::Zero(data.size());
  }
};

using Tensor = BasicTensor<Real>;

}  // namespace moqe
