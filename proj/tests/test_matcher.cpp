#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace flowmatch;

namespace {

// Best log-weight and the lexicographically first permutation attaining it.
std::pair<double, std::vector<std::size_t>> brute_force(const WeightMatrix& w) {
  std::vector<std::size_t> perm(w.n());
  std::iota(perm.begin(), perm.end(), 0);
  double best = kNegInf;
  std::vector<std::size_t> arg;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) s += w.log_at(i, perm[i]);
    if (s > best + 1e-12) {
      best = s;
      arg = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {best, arg};
}

}  // namespace

TEST(Matcher, DiagonalDominant) {
  Matrix lw = Matrix::Constant(6, 6, -5.0);
  lw.diagonal().setZero();
  const Matching m = max_weight_matching(WeightMatrix::from_log(lw));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(m.perm[i], i);
  EXPECT_EQ(m.log_weight, 0.0);
}

TEST(Matcher, TwoByTwo) {
  Matrix p(2, 2);
  p << 2, 1, 1, 2;
  const Matching m = max_weight_matching(WeightMatrix::from_linear(p));
  EXPECT_EQ(m.perm, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(m.log_weight, std::log(4.0), 1e-15);
}

TEST(Matcher, MatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const std::size_t n = 1 + seed % 8;
    const WeightMatrix w = fixtures::random_log_matrix(n, 1100 + seed, -10.0, 0.0);
    const auto [best, arg] = brute_force(w);
    const Matching m = max_weight_matching(w);
    EXPECT_NEAR(m.log_weight, best, 1e-10) << n;
    EXPECT_EQ(m.perm, arg) << n;
  }
}

TEST(Matcher, TiesGoToLexicographicallySmallest) {
  // Every permutation has the same weight.
  const Matching m = max_weight_matching(fixtures::ones(5));
  EXPECT_EQ(m.perm, (std::vector<std::size_t>{0, 1, 2, 3, 4}));

  // Two optimal matchings, the identity is not one of them.
  Matrix lw(3, 3);
  lw << 0, 1, 1, 1, 0, 1, 1, 1, 0;
  const Matching t = max_weight_matching(WeightMatrix::from_log(lw));
  EXPECT_EQ(t.perm, (std::vector<std::size_t>{1, 2, 0}));
  EXPECT_EQ(brute_force(WeightMatrix::from_log(lw)).second, t.perm);
}

TEST(Matcher, TiesOnIntegerWeights) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const std::size_t n = 2 + seed % 6;
    Matrix lw = fixtures::random_log_matrix(n, 1200 + seed, 0.0, 3.0).log_entries();
    lw = lw.array().floor();  // many ties
    const WeightMatrix w = WeightMatrix::from_log(lw);
    EXPECT_EQ(max_weight_matching(w).perm, brute_force(w).second) << n;
  }
}

TEST(Matcher, RowScaleInvariance) {
  const WeightMatrix w = fixtures::random_log_matrix(7, 44);
  Matrix lw = w.log_entries();
  lw.row(3).array() += 12.5;
  lw.row(0).array() -= 3.0;
  const Matching a = max_weight_matching(w);
  const Matching b = max_weight_matching(WeightMatrix::from_log(lw));
  EXPECT_EQ(a.perm, b.perm);
  EXPECT_NEAR(b.log_weight - a.log_weight, 9.5, 1e-10);
}

TEST(Matcher, AvoidsZeroWeightEdges) {
  Matrix lw = Matrix::Constant(4, 4, kNegInf);
  lw(0, 3) = lw(1, 2) = lw(2, 1) = lw(3, 0) = -1.0;
  lw(0, 0) = 5.0;
  const Matching m = max_weight_matching(WeightMatrix::from_log(lw));
  EXPECT_EQ(m.perm, (std::vector<std::size_t>{3, 2, 1, 0}));
  EXPECT_NEAR(m.log_weight, -4.0, 1e-12);
}

TEST(Matcher, RecoversTruthAtLowDiffusivity) {
  FlowParams p;
  p.kappa = 1e-4;  // displacements ~0.01 against unit mean spacing
  p.S = -0.3;
  const SnapshotPair snap = generate_snapshots(200, p, 1.0, 5);
  const Matching m = max_weight_matching(build_weight_matrix(snap, p));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < 200; ++i) correct += m.perm[i] == (*snap.truth.perm)[i];
  EXPECT_GT(correct, 190u);
}
