#include "pmjdot/ot.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace pmjdot;
using Eigen::MatrixXd;

namespace {

MatrixXd random_matrix(int rows, int cols, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  MatrixXd m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = u(rng);
  return m;
}

SinkhornConfig<double> with_lambda(double lambda, bool log_domain = true) {
  SinkhornConfig<double> c;
  c.entropy_weight = lambda;
  c.log_domain = log_domain;
  return c;
}

// Heap's algorithm: every permutation of 0..n-1, in Heap order.
void heap_permutations(std::vector<int>& a, int k, std::vector<std::vector<int>>& out) {
  if (k == 1) {
    out.push_back(a);
    return;
  }
  heap_permutations(a, k - 1, out);
  for (int i = 0; i < k - 1; ++i) {
    std::swap(a[k % 2 == 0 ? i : 0], a[k - 1]);
    heap_permutations(a, k - 1, out);
  }
}

}  // namespace

TEST_CASE("zero cost gives the uniform plan") {
  for (double lambda : {0.01, 0.5, 3.0}) {
    auto p = sinkhorn_min(MatrixXd::Zero(2, 2), with_lambda(lambda));
    CHECK(p.converged);
    CHECK((p.mass.array() - 0.25).abs().maxCoeff() < 1e-12);
  }
  auto q = sinkhorn_max(MatrixXd::Zero(3, 3), with_lambda(0.05));
  CHECK((q.mass.array() - 1.0 / 9.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("symmetric 2x2 matches the closed-form fixed point") {
  MatrixXd cost(2, 2);
  cost << 0, 1, 1, 0;
  for (double lambda : {0.01, 0.1, 0.7}) {
    for (bool log_domain : {true, false}) {
      auto p = sinkhorn_min(cost, with_lambda(lambda, log_domain));
      const double diag = 0.5 / (1.0 + std::exp(-1.0 / lambda));
      CHECK(std::abs(p.mass(0, 0) - diag) < 1e-4);
      CHECK(std::abs(p.mass(1, 1) - diag) < 1e-4);
      CHECK(std::abs(p.mass(0, 1) - (0.5 - diag)) < 1e-4);
    }
  }
  MatrixXd score(2, 2);
  score << 10, 0, 0, 10;
  auto q = sinkhorn_max(score, with_lambda(0.05));
  CHECK(q.mass(0, 0) > 0.49);
  CHECK(q.mass(1, 1) > 0.49);
}

TEST_CASE("plans satisfy the marginals") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const int rows = 1 + int(seed % 7), cols = 3 + int(seed * 13 % 40);
    MatrixXd cost = random_matrix(rows, cols, seed);
    for (bool log_domain : {true, false}) {
      auto p = sinkhorn_min(cost, with_lambda(0.1, log_domain));
      REQUIRE(p.converged);
      CHECK(p.max_violation() <= 1e-6);
      CHECK(std::abs(p.mass.sum() - 1.0) <= 1e-6);
      CHECK((p.mass.array() >= 0).all());
      CHECK((p.mass.rowwise().sum().array() - 1.0 / rows).abs().sum() < 1e-8);
    }
  }
}

TEST_CASE("log and scaling domains agree where both are stable") {
  MatrixXd cost = random_matrix(5, 9, 3);
  auto a = sinkhorn_min(cost, with_lambda(0.2, true));
  auto b = sinkhorn_min(cost, with_lambda(0.2, false));
  CHECK((a.mass - b.mass).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("small entropy weight needs the log domain") {
  MatrixXd cost = random_matrix(4, 4, 5, 0.0, 10.0);
  auto a = sinkhorn_min(cost, with_lambda(1e-3, true));
  CHECK(a.mass.allFinite());
  CHECK(a.max_violation() < 1e-6);
  auto b = sinkhorn_min(cost, with_lambda(1e-3, false));
  CHECK_FALSE(b.converged);
}

TEST_CASE("dual objective never decreases") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MatrixXd cost = random_matrix(6, 11, 40 + seed);
    for (bool log_domain : {true, false}) {
      SinkhornConfig<double> c = with_lambda(0.05, log_domain);
      c.record_objective = true;
      auto p = sinkhorn_min(cost, c);
      REQUIRE(p.dual_objective.size() >= 2);
      for (std::size_t i = 1; i < p.dual_objective.size(); ++i)
        CHECK(p.dual_objective[i] >= p.dual_objective[i - 1] - 1e-12);
      // At convergence the dual meets the primal <P, C> - lambda H(P).
      const double primal = transport_cost(p.mass, cost) - c.entropy_weight * plan_entropy(p.mass);
      CHECK(std::abs(p.dual_objective.back() - primal) < 1e-7);
    }
  }
}

TEST_CASE("max form equals min form on the shifted negated score") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MatrixXd score = random_matrix(4 + int(seed % 3), 7, 100 + seed, -2.0, 2.0);
    auto a = sinkhorn_max(score, with_lambda(0.05));
    MatrixXd shifted = score.maxCoeff() - score.array();
    auto b = sinkhorn_min(shifted, with_lambda(0.05));
    CHECK((a.mass - b.mass).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("entropy grows with the regularization weight") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MatrixXd cost = random_matrix(5, 8, 200 + seed);
    double previous = -1;
    for (double lambda : {0.01, 0.1, 1.0}) {
      const double h = plan_entropy(sinkhorn_min(cost, with_lambda(lambda)).mass);
      CHECK(h >= 0);
      CHECK(h <= std::log(40.0) + 1e-12);
      CHECK(h >= previous - 1e-12);
      previous = h;
    }
  }
}

TEST_CASE("plan_entropy reference values") {
  CHECK(plan_entropy(MatrixXd::Constant(2, 2, 0.25)) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  MatrixXd perm(2, 2);
  perm << 0.5, 0, 0, 0.5;
  CHECK(plan_entropy(perm) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("invalid inputs are rejected") {
  MatrixXd bad = MatrixXd::Zero(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(sinkhorn_min(bad, with_lambda(0.1)), std::invalid_argument);
  bad(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(sinkhorn_max(bad, with_lambda(0.1)), std::invalid_argument);
  CHECK_THROWS_AS(sinkhorn_min(MatrixXd::Constant(2, 2, -1.0), with_lambda(0.1)), std::invalid_argument);
  CHECK_THROWS_AS(sinkhorn_min(MatrixXd::Zero(2, 2), with_lambda(0.0)), std::invalid_argument);
  CHECK_THROWS_AS(sinkhorn_min(MatrixXd(0, 3), with_lambda(0.1)), std::invalid_argument);
}

TEST_CASE("non-convergence is reported, not thrown") {
  SinkhornConfig<double> c = with_lambda(0.01);
  c.max_iterations = 2;
  auto p = sinkhorn_min(random_matrix(6, 6, 9), c);
  CHECK_FALSE(p.converged);
  CHECK(p.iterations == 2);
}

TEST_CASE("solver is deterministic") {
  MatrixXd cost = random_matrix(7, 13, 77);
  auto a = sinkhorn_min(cost, with_lambda(0.05));
  auto b = sinkhorn_min(cost, with_lambda(0.05));
  CHECK(a.mass == b.mass);
}

TEST_CASE("exact oracle reference cases") {
  MatrixXd cost(2, 2);
  cost << 0, 1, 1, 0;
  auto e = exact_ot_oracle(cost);
  CHECK(e.objective == 0.0);
  CHECK(e.plan(0, 0) == 0.5);
  CHECK(e.plan(0, 1) == 0.0);

  auto tie = exact_ot_oracle(MatrixXd::Ones(2, 2));
  CHECK(tie.objective == 1.0);
  CHECK(tie.permutation == std::vector<int>{0, 1});

  CHECK_THROWS_AS(exact_ot_oracle(MatrixXd::Zero(2, 3)), std::invalid_argument);
  CHECK_THROWS_AS(exact_ot_oracle(MatrixXd::Zero(9, 9)), std::invalid_argument);
}

TEST_CASE("exact oracle agrees with an independent enumeration") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int n = 2 + int(seed % 4);
    MatrixXd cost = random_matrix(n, n, 300 + seed);
    // Quantize to force ties on some instances.
    if (seed % 2) cost = (cost * 3).array().round();
    std::vector<int> base(n);
    std::iota(base.begin(), base.end(), 0);
    std::vector<std::vector<int>> perms;
    heap_permutations(base, n, perms);
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> best_perm;
    for (const auto& p : perms) {
      double total = 0;
      for (int i = 0; i < n; ++i) total += cost(i, p[i]);
      total /= n;
      if (total < best || (total == best && p < best_perm)) {
        best = total;
        best_perm = p;
      }
    }
    auto e = exact_ot_oracle(cost);
    CHECK(e.objective == doctest::Approx(best).epsilon(1e-14));
    CHECK(e.permutation == best_perm);
  }
}

TEST_CASE("small entropy weight approaches the exact optimum") {
  MatrixXd cost = random_matrix(3, 3, 11);
  auto p = sinkhorn_min(cost, with_lambda(1e-3));
  auto e = exact_ot_oracle(cost);
  CHECK(std::abs(transport_cost(p.mass, cost) - e.objective) <= 0.01 * e.objective);
}

TEST_CASE("single precision instantiation") {
  Eigen::MatrixXf cost = random_matrix(3, 5, 12).cast<float>();
  SinkhornConfig<float> c;
  c.marginal_tolerance = 1e-6f;
  auto p = sinkhorn_min(cost, c);
  CHECK(p.max_violation() < 1e-5f);
}
