#include "pmjdot/correspondence.hpp"

#include <doctest.h>

#include <cmath>
#include <deque>
#include <random>

using namespace pmjdot;

namespace {

Matrix random_unit_columns(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return normalize_columns(m);
}

}  // namespace

TEST_CASE("prototype bank invariants") {
  CHECK_NOTHROW(PrototypeBank(Matrix::Identity(3, 2)));
  CHECK_THROWS_AS(PrototypeBank(Matrix::Identity(3, 1)), std::invalid_argument);
  CHECK_THROWS_AS(PrototypeBank(Matrix::Constant(3, 2, 1.0)), std::invalid_argument);
  Matrix nan = Matrix::Identity(2, 2);
  nan(0, 0) = std::nan("");
  CHECK_THROWS_AS(PrototypeBank{nan}, std::invalid_argument);

  PrototypeBank b(Matrix::Identity(3, 3));
  b.mutable_vectors() *= 2.5;
  b.renormalize();
  CHECK(columns_unit_norm(b.vectors()));
}

TEST_CASE("cluster probabilities reference value") {
  // Dot products (0.5, -0.5) with tau = 0.1 give softmax(5, -5).
  Matrix u(2, 2);
  u << 0.5, -0.5, std::sqrt(0.75), std::sqrt(0.75);
  PrototypeBank protos(u);
  Vector x(2);
  x << 1, 0;
  Vector y = cluster_probabilities(x, protos, 0.1);
  const double expected0 = 1.0 / (1.0 + std::exp(-10.0));
  CHECK(y(0) == doctest::Approx(expected0).epsilon(1e-12));
  CHECK(y(1) == doctest::Approx(std::exp(-10.0) / (1.0 + std::exp(-10.0))).epsilon(1e-12));
  CHECK(y(0) == doctest::Approx(0.9999546).epsilon(1e-7));
  CHECK(y(1) == doctest::Approx(4.54e-5).epsilon(1e-3));
  CHECK_THROWS_AS(cluster_probabilities(x, protos, 0.0), std::invalid_argument);
}

TEST_CASE("cluster probabilities are distributions and stay finite at low temperature") {
  PrototypeBank protos(random_unit_columns(8, 5, 1));
  Matrix x = random_unit_columns(8, 20, 2);
  for (double tau : {1.0, 0.1, 1e-4}) {
    Matrix y = cluster_probabilities(x, protos, tau);
    CHECK(y.allFinite());
    CHECK(((y.colwise().sum().array() - 1.0).abs() < 1e-12).all());
  }
}

TEST_CASE("joint cost special cases") {
  PrototypeBank protos(Matrix::Identity(4, 4));
  Matrix x = protos.vectors().col(2);
  Matrix c = joint_cost(protos, x, {1.0, 0.0, 0.1});
  CHECK(c(2, 0) == doctest::Approx(0.0));
  CHECK(c(0, 0) == doctest::Approx(1.0));

  // Equidistant feature: every label cost is log K.
  Matrix mid = Matrix::Constant(4, 1, 0.5);
  Matrix l = joint_cost(protos, mid, {0.0, 1.0, 0.1});
  CHECK(((l.array() - std::log(4.0)).abs() < 1e-12).all());

  Matrix r = random_unit_columns(4, 9, 3);
  Matrix full = joint_cost(protos, r, {1.0, 1.0, 0.1});
  CHECK((full.array() >= 0).all());
  Matrix manual = (1.0 - (protos.vectors().transpose() * r).array()).matrix() -
                  cluster_log_probabilities(r, protos, 0.1);
  CHECK((full - manual).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(joint_cost(protos, r, {0.0, 0.0, 0.1}), std::invalid_argument);
  CHECK_THROWS_AS(joint_cost(protos, r, {1.0, 1.0, -1.0}), std::invalid_argument);
}

TEST_CASE("label cost is clamped at the log floor") {
  Matrix u(2, 2);
  u << 1, -1, 0, 0;
  PrototypeBank protos(u);
  Matrix x = protos.vectors().col(0);
  Matrix c = joint_cost(protos, x, {0.0, 1.0, 1e-3});
  CHECK(c(1, 0) == doctest::Approx(-std::log(kLogEpsilon)));
}

TEST_CASE("bank rejects bad shapes and capacities") {
  CHECK_THROWS_AS(FifoBank(4, 10, 4), std::invalid_argument);
  CHECK_THROWS_AS(FifoBank(4, 2, 4), std::invalid_argument);
  FifoBank b(3, 6, 2);
  CHECK(b.empty());
  CHECK_THROWS_AS(b.push(Matrix::Identity(3, 3)), std::invalid_argument);
  CHECK_THROWS_AS(b.push(Matrix::Constant(3, 2, 1.0)), std::invalid_argument);
}

TEST_CASE("bank is FIFO with the newest batch first") {
  const Index d = 3, a = 2, e = 6;
  FifoBank bank(d, e, a);
  std::deque<Matrix> replay;  // newest first
  for (int step = 0; step < 7; ++step) {
    Matrix batch = random_unit_columns(d, a, 50 + step);
    bank.push(batch);
    replay.push_front(batch);
    if (Index(replay.size()) * a > e) replay.pop_back();
    REQUIRE(bank.size() == Index(replay.size()) * a);
    for (std::size_t k = 0; k < replay.size(); ++k)
      CHECK(bank.contents().middleCols(Index(k) * a, a) == replay[k]);
  }
  CHECK(bank.size() == e);
  CHECK(bank.contents().leftCols(a) == replay.front());
}

TEST_CASE("bank restore round-trips contents") {
  FifoBank a(2, 4, 2);
  a.push(Matrix::Identity(2, 2));
  FifoBank b(2, 4, 2);
  b.restore(a.contents());
  CHECK(b.size() == 2);
  CHECK(b.contents() == a.contents());
  CHECK_THROWS_AS(b.restore(Matrix::Identity(2, 3)), std::invalid_argument);
}

TEST_CASE("correspondence recovers a permutation when the bank equals the prototypes") {
  const Index k = 5;
  PrototypeBank protos(random_unit_columns(6, k, 7));
  std::vector<Index> perm{3, 0, 4, 1, 2};
  Matrix permuted(6, k);
  for (Index j = 0; j < k; ++j) permuted.col(j) = protos.vectors().col(perm[j]);
  FifoBank bank(6, k, k);
  bank.push(permuted);
  SinkhornConfig<double> cfg;
  cfg.entropy_weight = 1e-3;
  auto plan = estimate_correspondence(protos, bank, {1.0, 1.0, 0.1}, cfg);
  for (Index j = 0; j < k; ++j)
    for (Index i = 0; i < k; ++i) {
      const double expected = i == perm[j] ? 1.0 / double(k) : 0.0;
      CHECK(std::abs(plan.mass(i, j) - expected) < 1e-3);
    }
}

TEST_CASE("identical bank entries receive identical plan columns") {
  PrototypeBank protos(random_unit_columns(4, 3, 8));
  Matrix batch = random_unit_columns(4, 4, 9);
  batch.col(2) = batch.col(0);
  FifoBank bank(4, 8, 4);
  bank.push(random_unit_columns(4, 4, 10));
  bank.push(batch);
  auto plan = estimate_correspondence(protos, bank, {1.0, 1.0, 0.1}, {});
  CHECK(plan.cols() == 8);
  CHECK((plan.mass.col(0) - plan.mass.col(2)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(plan.max_violation() < 1e-6);
}

TEST_CASE("correspondence needs a full batch in the bank") {
  PrototypeBank protos(Matrix::Identity(3, 3));
  FifoBank bank(3, 6, 3);
  CHECK_THROWS_AS(estimate_correspondence(protos, bank, {}, {}), std::invalid_argument);
}

TEST_CASE("batch plan extraction") {
  Matrix uniform = Matrix::Constant(2, 4, 1.0 / 8.0);
  Matrix batch = extract_batch_plan(uniform, 2);
  CHECK(batch.rows() == 2);
  CHECK(batch.cols() == 2);
  CHECK(((batch.array() - 0.25).abs() < 1e-15).all());

  Matrix skew = Matrix::Zero(3, 5);
  skew(0, 0) = 0.1;
  skew(2, 1) = 0.3;
  skew(1, 4) = 0.6;
  CHECK(extract_batch_plan(skew, 2).sum() == doctest::Approx(1.0).epsilon(1e-15));

  Matrix empty = Matrix::Zero(2, 4);
  empty(0, 3) = 1.0;
  CHECK_THROWS_AS(extract_batch_plan(empty, 2), DegenerateMassError);
  CHECK_THROWS_AS(extract_batch_plan(uniform, 5), std::invalid_argument);
}
