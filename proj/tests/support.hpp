#pragma once

#include <cstdint>
#include <random>

#include "flowmatch/flowmatch.hpp"

namespace flowmatch::fixtures {

// Log-weights uniform in [lo, hi).
inline WeightMatrix random_log_matrix(std::size_t n, std::uint64_t seed, double lo = -3.0, double hi = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng);
  return WeightMatrix::from_log(std::move(m));
}

// Weights of a synthetic one-dimensional diffusive snapshot pair.
inline WeightMatrix diffusive_matrix(std::size_t n, std::uint64_t seed, double kappa = 1.0, double S = 0.0) {
  FlowParams p;
  p.kappa = kappa;
  p.S = S;
  return build_weight_matrix(generate_snapshots(n, p, 1.0, seed), p);
}

inline WeightMatrix ones(std::size_t n) {
  return WeightMatrix::from_log(Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
}

inline WeightMatrix permuted(const WeightMatrix& w, const std::vector<std::size_t>& rows,
                             const std::vector<std::size_t>& cols) {
  const auto n = static_cast<Eigen::Index>(w.n());
  Matrix m(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = w.log_at(rows[i], cols[j]);
  return WeightMatrix::from_log(std::move(m));
}

// Every belief strictly inside (0, 1).
inline bool interior(const Matrix& beta) {
  return (beta.array() > kFaceBelief).all() && ((1.0 - beta.array()) > kFaceBelief).all();
}

// Instance whose BP solution is an interior fixed point. A generic 2x2 matrix
// has none (the Bethe free energy is linear in its one free belief), so n = 2
// draws a random row and column scaling of all-ones. Larger sizes redraw
// log-uniform weights until the solution is interior; *redraws counts the
// rejected draws.
inline WeightMatrix random_interior_instance(std::size_t n, std::uint64_t seed, double lo = -2.0,
                                             std::size_t* redraws = nullptr) {
  if (n == 2) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, 0.0);
    const double a0 = u(rng), a1 = u(rng), b0 = u(rng), b1 = u(rng);
    Matrix m(2, 2);
    m << a0 + b0, a0 + b1, a1 + b0, a1 + b1;
    return WeightMatrix::from_log(std::move(m));
  }
  for (std::uint64_t k = 0;; ++k) {
    WeightMatrix w = random_log_matrix(n, seed * 1000 + k, lo, 0.0);
    if (interior(solve(w).beta)) return w;
    if (redraws) ++*redraws;
  }
}

}  // namespace flowmatch::fixtures
