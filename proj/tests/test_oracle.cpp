#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace flowmatch;

namespace {

// Sum over all permutations, in linear space.
double permanent_by_enumeration(const Matrix& p) {
  std::vector<int> perm(static_cast<std::size_t>(p.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double total = 0.0;
  do {
    double prod = 1.0;
    for (std::size_t i = 0; i < perm.size(); ++i) prod *= p(static_cast<Eigen::Index>(i), perm[i]);
    total += prod;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return total;
}

Matrix marginals_by_enumeration(const Matrix& p) {
  const Eigen::Index n = p.rows();
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Matrix acc = Matrix::Zero(n, n);
  double total = 0.0;
  do {
    double prod = 1.0;
    for (Eigen::Index i = 0; i < n; ++i) prod *= p(i, perm[i]);
    for (Eigen::Index i = 0; i < n; ++i) acc(i, perm[i]) += prod;
    total += prod;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return acc / total;
}

}  // namespace

TEST(Oracle, IdentityPermanent) {
  const WeightMatrix w = WeightMatrix::from_linear(Matrix::Identity(3, 3));
  EXPECT_NEAR(log_permanent(w), 0.0, 1e-14);
}

TEST(Oracle, AllOnesPermanentIsFactorial) {
  for (std::size_t n = 1; n <= 12; ++n)
    EXPECT_NEAR(log_permanent(fixtures::ones(n)), log_factorial(n), 1e-12 * log_factorial(n) + 1e-14) << n;
}

TEST(Oracle, TwoByTwo) {
  Matrix p(2, 2);
  p << 1, 2, 3, 4;
  EXPECT_NEAR(std::exp(log_permanent(WeightMatrix::from_linear(p))), 10.0, 1e-12);
}

TEST(Oracle, RyserMatchesEnumeration) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const std::size_t n = 1 + seed % 7;
    const WeightMatrix w = fixtures::random_log_matrix(n, seed);
    const double expected = std::log(permanent_by_enumeration(w.entries()));
    EXPECT_NEAR(log_permanent(w), expected, 1e-10 * std::max(1.0, std::abs(expected))) << n;
    EXPECT_NEAR(log_permanent_bruteforce(w), expected, 1e-10 * std::max(1.0, std::abs(expected))) << n;
  }
}

TEST(Oracle, RyserHandlesExtremeScales) {
  // Entries below the double range in linear space.
  Matrix lw(3, 3);
  lw << -900, -1500, -2000, -1600, -800, -1900, -2100, -1700, -700;
  const WeightMatrix w = WeightMatrix::from_log(lw);
  // Every other permutation is smaller by a factor below e^-1000.
  EXPECT_NEAR(log_permanent(w), -2400.0, 1e-10 * 2400.0);
}

TEST(Oracle, RyserThreadCountIndependent) {
  const WeightMatrix w = fixtures::random_log_matrix(18, 4);
  const double one = log_permanent(w, 1);
  EXPECT_EQ(one, log_permanent(w, 2));
  EXPECT_EQ(one, log_permanent(w, 8));
}

TEST(Oracle, RyserSizeLimit) {
  EXPECT_THROW(log_permanent(fixtures::ones(25)), SizeError);
  EXPECT_THROW(marginals_exact(fixtures::ones(13)), SizeError);
  EXPECT_THROW(loop_series_exact(Matrix::Constant(5, 5, 0.2)), SizeError);
}

TEST(Oracle, ZeroPermanentIsInfeasible) {
  Matrix lw = Matrix::Zero(3, 3);
  lw.row(1).setConstant(kNegInf);
  EXPECT_THROW(log_permanent(WeightMatrix::from_log(lw)), InfeasibleError);
}

TEST(Oracle, MarginalsOfAllOnes) {
  const Matrix m = marginals_exact(fixtures::ones(2));
  EXPECT_TRUE(m.isApprox(Matrix::Constant(2, 2, 0.5), 1e-14));
}

TEST(Oracle, MarginalsMatchEnumeration) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const WeightMatrix w = fixtures::random_log_matrix(4, 50 + seed);
    const Matrix m = marginals_exact(w);
    const Matrix e = marginals_by_enumeration(w.entries());
    EXPECT_LT((m - e).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((m.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-10);
    EXPECT_LT((m.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-10);
  }
}

TEST(Oracle, MarginalsApproachIdentity) {
  double previous = 1.0;
  for (double off : {-2.0, -5.0, -10.0, -20.0}) {
    Matrix lw = Matrix::Constant(4, 4, off);
    lw.diagonal().setZero();
    const double worst = 1.0 - marginals_exact(WeightMatrix::from_log(lw)).diagonal().minCoeff();
    EXPECT_LT(worst, previous);
    previous = worst;
  }
  EXPECT_LT(previous, 1e-8);
}

TEST(Oracle, LoopSeriesAllOnesTwo) {
  const LoopSeries ls = loop_series_exact(Matrix::Constant(2, 2, 0.5));
  ASSERT_EQ(ls.terms.size(), 1u);
  EXPECT_NEAR(ls.terms[0].r, 1.0, 1e-14);
  EXPECT_NEAR(ls.z, 2.0, 1e-14);
}

TEST(Oracle, LoopSeriesAllOnesThree) {
  const LoopSeries ls = loop_series_exact(Matrix::Constant(3, 3, 1.0 / 3.0));
  const double z_bp = 27.0 * std::pow(2.0 / 3.0, 6);
  EXPECT_NEAR(ls.z, 6.0 / z_bp, 1e-12);
  EXPECT_NEAR(ls.z, 2.53125, 1e-12);
}

TEST(Oracle, GeneralizedLoopsHaveMinimumDegreeTwo) {
  const LoopSeries ls = loop_series_exact(Matrix::Constant(3, 3, 1.0 / 3.0));
  for (const auto& t : ls.terms) {
    for (std::size_t q : t.loop.row_degree) EXPECT_NE(q, 1u);
    for (std::size_t q : t.loop.col_degree) EXPECT_NE(q, 1u);
    EXPECT_GE(t.loop.edges.size(), 4u);
  }
}

TEST(Oracle, ResummationIdentityAtBpFixedPoints) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const std::size_t n = 2 + seed % 3;
    const WeightMatrix w = fixtures::random_interior_instance(n, 200 + seed);
    const BeliefState s = solve(w);
    const LoopSeries ls = loop_series_exact(s.beta);
    EXPECT_NEAR(s.log_z() + std::log(ls.z), log_permanent(w), 1e-8) << n;
    for (const auto& t : ls.terms) EXPECT_LE(std::abs(t.r), 1.0 + 1e-12);
  }
}

TEST(Oracle, NodeFactorBoundValues) {
  EXPECT_DOUBLE_EQ(node_factor_bound(2), 1.0);
  EXPECT_NEAR(node_factor_bound(3), std::pow(2.0, -0.5), 1e-15);
  EXPECT_NEAR(node_factor_bound(4), 1.0 / 3.0, 1e-15);
  // Degree-2 node with beliefs 1/2 reaches the bound exactly.
  const double half[2] = {0.5, 0.5};
  EXPECT_NEAR(std::abs(node_factor(half)), 1.0, 1e-15);
}

TEST(Oracle, NodeBoundHoldsAtFixedPoints) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const WeightMatrix w = fixtures::random_log_matrix(6 + seed, 300 + seed);
    const NodeBoundReport rep = node_bound_check(solve(w).beta, 1e-9);
    EXPECT_EQ(rep.violations, 0u) << rep.worst_ratio;
    EXPECT_GT(rep.checked, 0u);
  }
}

TEST(Oracle, NodeBoundDetectsNonFixedPoint) {
  // Rows of 0.45 are no fixed point; their degree-3 subsets exceed the bound.
  Matrix beta = Matrix::Constant(3, 3, 0.45);
  EXPECT_GT(node_bound_check(beta).violations, 0u);
}
