#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace kmc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Raised when an argument violates a documented precondition
/// (shape mismatch, non-positive variance, empty batch, ...).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a numerical routine cannot produce a trustworthy result:
/// a factorization fails after jitter, an SVD does not converge, or a
/// training run produces a non-finite cost.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

inline std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace detail
}  // namespace kmc
