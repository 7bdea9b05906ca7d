#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <stdexcept>
#include <string>

namespace pmjdot {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Clamp applied to every logarithm of a probability.
inline constexpr double kLogEpsilon = 1e-12;
// Guard for the L2 normalization stage.
inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kUnitNormTolerance = 1e-6;

/// Raised when a transport plan carries no mass on the columns being extracted.
class DegenerateMassError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed corpus or checkpoint file.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Columns of `m` have unit L2 norm within `tol`.
template <typename Derived>
bool columns_unit_norm(const Eigen::MatrixBase<Derived>& m, double tol = kUnitNormTolerance) {
  if (m.cols() == 0) return true;
  return ((m.colwise().norm().array() - 1.0).abs() <= tol).all();
}

template <typename Derived>
Matrix normalize_columns(const Eigen::MatrixBase<Derived>& m) {
  Matrix out = m;
  for (Index j = 0; j < out.cols(); ++j) out.col(j) /= std::max(out.col(j).norm(), kNormEpsilon);
  return out;
}

}  // namespace pmjdot
