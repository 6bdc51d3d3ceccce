#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cocktail {

/// Dense row-major matrix, templated on scalar.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense column vector, templated on scalar.
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Dense row vector, templated on scalar.
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;

using TokenId = std::int32_t;

/// Caller violated a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Operand shapes do not agree.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Row-wise log-softmax with max subtraction.
template <typename Derived>
MatrixX<typename Derived::Scalar> log_softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.cols() < 1) throw DimensionError("log_softmax_rows: need at least one column");
  MatrixX<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Scalar m = logits.row(r).maxCoeff();
    const Scalar lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

/// Softmax of a single row vector, max-stabilized.
template <typename Derived>
RowVectorX<typename Derived::Scalar> softmax_row(const Eigen::MatrixBase<Derived>& row) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = row.maxCoeff();
  RowVectorX<Scalar> e = (row.array() - m).exp();
  return e / e.sum();
}

}  // namespace cocktail
