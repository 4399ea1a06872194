// Shared vocabulary types and the error type used across the library.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace dsmpc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  kParse,         ///< malformed input document
  kDimension,     ///< inconsistent block sizes
  kNotPsd,        ///< covariance/weight not (semi)definite
  kPolytope,      ///< polytope without the origin in its interior
  kPrecondition,  ///< numerical precondition violated (e.g. spectral radius)
  kInfeasible,    ///< synthesis or tightening has no solution
  kSolver,        ///< iterative solver failed to converge
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Process exit code for an error kind: 1 usage/parse, 2 infeasible
/// synthesis or tightening, 3 solver failure.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse:
    case ErrorKind::kDimension:
    case ErrorKind::kNotPsd:
    case ErrorKind::kPolytope:
      return 1;
    case ErrorKind::kInfeasible:
      return 2;
    case ErrorKind::kPrecondition:
    case ErrorKind::kSolver:
      return 3;
  }
  return 3;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline Matrix symmetrize(const Matrix& m) {
  return 0.5 * (m + m.transpose());
}

/// Block-diagonal concatenation.
template <typename Range>
Matrix block_diagonal(const Range& blocks) {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  for (const auto& b : blocks) {
    rows += b.rows();
    cols += b.cols();
  }
  Matrix out = Matrix::Zero(rows, cols);
  Eigen::Index r = 0;
  Eigen::Index c = 0;
  for (const auto& b : blocks) {
    out.block(r, c, b.rows(), b.cols()) = b;
    r += b.rows();
    c += b.cols();
  }
  return out;
}

}  // namespace dsmpc
