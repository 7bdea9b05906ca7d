// Entropy-regularized optimal transport with uniform marginals.
//
// Two entry points share one Sinkhorn core that works on a log-kernel:
//   sinkhorn_min:  min <P, C> - lambda * H(P)      log-kernel = -C / lambda
//   sinkhorn_max:  max <P, S> + eps * H(P)         log-kernel =  S / eps
// Marginals are fixed to 1/R on rows and 1/C on columns.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmjdot {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar = double>
struct SinkhornConfig {
  Scalar entropy_weight = Scalar(0.05);
  int max_iterations = 1000;
  // L1 violation of the row marginal after a column update.
  Scalar marginal_tolerance = Scalar(1e-8);
  bool log_domain = true;
  // Keep the dual objective after every iteration. It never decreases and
  // meets <P, C> - lambda H(P) at the optimum.
  bool record_objective = false;

  void validate() const {
    if (!(entropy_weight > 0) || !std::isfinite(entropy_weight))
      throw std::invalid_argument("sinkhorn: entropy_weight must be positive");
    if (!(marginal_tolerance > 0))
      throw std::invalid_argument("sinkhorn: marginal_tolerance must be positive");
    if (max_iterations < 1)
      throw std::invalid_argument("sinkhorn: max_iterations must be >= 1");
  }
};

template <typename Scalar = double>
struct TransportPlan {
  MatrixX<Scalar> mass;
  bool converged = false;
  int iterations = 0;
  // Max absolute deviation of row sums from 1/R and column sums from 1/C.
  Scalar row_violation = 0;
  Scalar col_violation = 0;
  std::vector<Scalar> dual_objective;

  Eigen::Index rows() const { return mass.rows(); }
  Eigen::Index cols() const { return mass.cols(); }
  Scalar max_violation() const { return std::max(row_violation, col_violation); }
};

namespace detail {

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (m.rows() < 1 || m.cols() < 1)
    throw std::invalid_argument(std::string(what) + ": matrix must be non-empty");
  if (!m.allFinite())
    throw std::invalid_argument(std::string(what) + ": matrix contains NaN or Inf");
}

// Row-wise log-sum-exp of (M + 1 * beta^T).
template <typename Scalar>
VectorX<Scalar> row_lse(const MatrixX<Scalar>& log_kernel, const VectorX<Scalar>& beta) {
  MatrixX<Scalar> t = log_kernel.rowwise() + beta.transpose();
  VectorX<Scalar> mx = t.rowwise().maxCoeff();
  return mx.array() + (t.colwise() - mx).array().exp().rowwise().sum().log();
}

template <typename Scalar>
VectorX<Scalar> col_lse(const MatrixX<Scalar>& log_kernel, const VectorX<Scalar>& alpha) {
  MatrixX<Scalar> t = log_kernel.colwise() + alpha;
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mx = t.colwise().maxCoeff();
  return (mx.array() + (t.rowwise() - mx).array().exp().colwise().sum().log()).transpose();
}

template <typename Scalar>
void measure(TransportPlan<Scalar>& out) {
  const Scalar a = Scalar(1) / Scalar(out.mass.rows());
  const Scalar b = Scalar(1) / Scalar(out.mass.cols());
  out.row_violation = (out.mass.rowwise().sum().array() - a).abs().maxCoeff();
  out.col_violation = (out.mass.colwise().sum().array() - b).abs().maxCoeff();
}

// Log-stabilized Sinkhorn: scaling updates on a kernel with the dual
// potentials absorbed, re-absorbing whenever a scaling leaves [e^-A, e^A].
// Equivalent to log-domain updates without an exp per entry per iteration.
template <typename Scalar>
TransportPlan<Scalar> sinkhorn_log(const MatrixX<Scalar>& log_kernel, const SinkhornConfig<Scalar>& config) {
  const Eigen::Index R = log_kernel.rows(), C = log_kernel.cols();
  const Scalar a = Scalar(1) / Scalar(R);
  const Scalar b = Scalar(1) / Scalar(C);
  const Scalar absorb_bound = Scalar(30);

  // One exact log-domain iteration puts every row and column of the
  // absorbed kernel on the scale of its marginal.
  VectorX<Scalar> alpha = std::log(a) - row_lse(log_kernel, VectorX<Scalar>(VectorX<Scalar>::Zero(C))).array();
  VectorX<Scalar> beta = std::log(b) - col_lse(log_kernel, alpha).array();
  auto absorbed = [&] { return MatrixX<Scalar>(((log_kernel.colwise() + alpha).rowwise() + beta.transpose()).array().exp()); };
  MatrixX<Scalar> kernel = absorbed();
  VectorX<Scalar> u = VectorX<Scalar>::Ones(R);
  VectorX<Scalar> v = VectorX<Scalar>::Ones(C);

  TransportPlan<Scalar> out;
  out.iterations = 1;
  auto record = [&] {
    if (!config.record_objective) return;
    // Total mass is exactly 1 after a column update, so the mass penalty vanishes.
    const Scalar dual = a * (alpha.sum() + u.array().log().sum()) + b * (beta.sum() + v.array().log().sum());
    out.dual_objective.push_back(config.entropy_weight * dual);
  };
  record();

  for (int it = 1; it < config.max_iterations; ++it) {
    VectorX<Scalar> kv = kernel * v;
    const Scalar violation = (u.cwiseProduct(kv).array() - a).abs().sum();
    if (violation < config.marginal_tolerance) {
      out.converged = true;
      break;
    }
    u = a / kv.array();
    v = b / (kernel.transpose() * u).array();
    ++out.iterations;
    const bool finite = u.allFinite() && v.allFinite() && (u.array() > 0).all() && (v.array() > 0).all();
    if (!finite) {
      // Fall back to an exact log-domain update from the last absorbed state.
      alpha = std::log(a) - row_lse(log_kernel, beta).array();
      beta = std::log(b) - col_lse(log_kernel, alpha).array();
      u.setOnes();
      v.setOnes();
      kernel = absorbed();
    } else if (u.array().log().abs().maxCoeff() > absorb_bound || v.array().log().abs().maxCoeff() > absorb_bound) {
      alpha += u.array().log().matrix();
      beta += v.array().log().matrix();
      u.setOnes();
      v.setOnes();
      kernel = absorbed();
    }
    record();
  }
  alpha += u.array().log().matrix();
  beta += v.array().log().matrix();
  out.mass = absorbed();
  measure(out);
  return out;
}

template <typename Scalar>
TransportPlan<Scalar> sinkhorn_scaling(const MatrixX<Scalar>& log_kernel, const SinkhornConfig<Scalar>& config) {
  const Eigen::Index R = log_kernel.rows(), C = log_kernel.cols();
  const Scalar a = Scalar(1) / Scalar(R);
  const Scalar b = Scalar(1) / Scalar(C);
  const MatrixX<Scalar> kernel = log_kernel.array().exp();

  VectorX<Scalar> u = VectorX<Scalar>::Ones(R);
  VectorX<Scalar> v = VectorX<Scalar>::Constant(C, b);
  TransportPlan<Scalar> out;

  for (int it = 0; it < config.max_iterations; ++it) {
    VectorX<Scalar> kv = kernel * v;
    if (it > 0) {
      Scalar violation = (u.cwiseProduct(kv).array() - a).abs().sum();
      if (!std::isfinite(violation)) break;
      if (violation < config.marginal_tolerance) {
        out.converged = true;
        break;
      }
    }
    u = a / kv.array();
    v = b / (kernel.transpose() * u).array();
    out.iterations = it + 1;
    if (config.record_objective) {
      Scalar mass = (u.asDiagonal() * kernel * v.asDiagonal()).sum();
      out.dual_objective.push_back(config.entropy_weight *
                                   (u.array().log().sum() * a + v.array().log().sum() * b - mass + Scalar(1)));
    }
  }
  out.mass = u.asDiagonal() * kernel * v.asDiagonal();
  if (!out.mass.allFinite()) {
    out.converged = false;
    out.row_violation = out.col_violation = std::numeric_limits<Scalar>::infinity();
    return out;
  }
  measure(out);
  return out;
}

template <typename Scalar>
TransportPlan<Scalar> sinkhorn(const MatrixX<Scalar>& log_kernel, const SinkhornConfig<Scalar>& config) {
  return config.log_domain ? sinkhorn_log(log_kernel, config) : sinkhorn_scaling(log_kernel, config);
}

}  // namespace detail

/// Solves min_P <P, cost> - lambda H(P) over plans with uniform marginals.
/// Non-convergence is reported through `converged`, not thrown.
template <typename Derived>
TransportPlan<typename Derived::Scalar> sinkhorn_min(
    const Eigen::MatrixBase<Derived>& cost, const SinkhornConfig<typename Derived::Scalar>& config) {
  using Scalar = typename Derived::Scalar;
  config.validate();
  detail::require_finite(cost, "sinkhorn_min");
  if ((cost.array() < Scalar(0)).any())
    throw std::invalid_argument("sinkhorn_min: cost entries must be non-negative");
  MatrixX<Scalar> log_kernel = -cost.derived().template cast<Scalar>() / config.entropy_weight;
  return detail::sinkhorn(log_kernel, config);
}

/// Solves max_P <P, score> + eps H(P) over plans with uniform marginals.
template <typename Derived>
TransportPlan<typename Derived::Scalar> sinkhorn_max(
    const Eigen::MatrixBase<Derived>& score, const SinkhornConfig<typename Derived::Scalar>& config) {
  using Scalar = typename Derived::Scalar;
  config.validate();
  detail::require_finite(score, "sinkhorn_max");
  MatrixX<Scalar> log_kernel = score.derived().template cast<Scalar>() / config.entropy_weight;
  return detail::sinkhorn(log_kernel, config);
}

/// H(P) = -sum P log P with 0 log 0 = 0.
template <typename Derived>
typename Derived::Scalar plan_entropy(const Eigen::MatrixBase<Derived>& plan) {
  using Scalar = typename Derived::Scalar;
  Scalar h = 0;
  for (Eigen::Index j = 0; j < plan.cols(); ++j)
    for (Eigen::Index i = 0; i < plan.rows(); ++i) {
      const Scalar p = plan(i, j);
      if (p > 0) h -= p * std::log(p);
    }
  return h;
}

template <typename Derived, typename OtherDerived>
typename Derived::Scalar transport_cost(const Eigen::MatrixBase<Derived>& plan,
                                        const Eigen::MatrixBase<OtherDerived>& cost) {
  return plan.cwiseProduct(cost).sum();
}

template <typename Scalar = double>
struct ExactPlan {
  MatrixX<Scalar> plan;
  Scalar objective = 0;
  std::vector<int> permutation;  // row i is matched to column permutation[i]
};

/// Exhaustive search over scaled permutation matrices, n <= 8. Ties resolve
/// to the lexicographically smallest permutation.
template <typename Derived>
ExactPlan<typename Derived::Scalar> exact_ot_oracle(const Eigen::MatrixBase<Derived>& cost) {
  using Scalar = typename Derived::Scalar;
  detail::require_finite(cost, "exact_ot_oracle");
  if (cost.rows() != cost.cols() || cost.rows() > 8)
    throw std::invalid_argument("exact_ot_oracle: unsupported size (square, n <= 8 required)");
  const int n = static_cast<int>(cost.rows());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);

  ExactPlan<Scalar> best;
  best.objective = std::numeric_limits<Scalar>::infinity();
  do {
    Scalar total = 0;
    for (int i = 0; i < n; ++i) total += cost(i, perm[i]);
    total /= Scalar(n);
    if (total < best.objective) {
      best.objective = total;
      best.permutation = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  best.plan = MatrixX<Scalar>::Zero(n, n);
  for (int i = 0; i < n; ++i) best.plan(i, best.permutation[i]) = Scalar(1) / Scalar(n);
  return best;
}

}  // namespace pmjdot
