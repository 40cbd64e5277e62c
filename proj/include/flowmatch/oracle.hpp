#pragma once

// Exact reference computations for small matchings: permanents, edge
// marginals, and brute-force enumeration of the loop series around a BP
// fixed point. Everything here is exponential in n and meant for validation.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "flowmatch/common.hpp"
#include "flowmatch/flow_model.hpp"

namespace flowmatch {

inline constexpr std::size_t kMaxRyserSize = 24;
inline constexpr std::size_t kMaxMarginalSize = 12;
inline constexpr std::size_t kMaxLoopEnumerationSize = 4;

namespace detail {

// Row/column log-scalings a, b such that exp(L + a_i + b_j) is close to
// doubly stochastic. per(exp L) = per(scaled) * exp(-sum a - sum b).
inline std::pair<Vector, Vector> log_balance(const Matrix& log_w, int sweeps = 60) {
  const Eigen::Index n = log_w.rows();
  Vector a = Vector::Zero(n), b = Vector::Zero(n);
  std::vector<double> buf(static_cast<std::size_t>(n));
  for (int s = 0; s < sweeps; ++s) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) buf[j] = log_w(i, j) + b(j);
      a(i) = -log_sum_exp(buf);
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) buf[i] = log_w(i, j) + a(i);
      b(j) = -log_sum_exp(buf);
    }
  }
  return {a, b};
}

inline void check_feasible(const Matrix& log_w) {
  for (Eigen::Index i = 0; i < log_w.rows(); ++i) {
    if (!std::isfinite(log_w.row(i).maxCoeff()))
      throw InfeasibleError("row " + std::to_string(i) + " has no positive weight");
    if (!std::isfinite(log_w.col(i).maxCoeff()))
      throw InfeasibleError("column " + std::to_string(i) + " has no positive weight");
  }
}

// Ryser's formula on a well-scaled matrix, Gray-code ordered. The subset
// range is cut into a fixed number of chunks so that the summation order is
// the same for every worker count.
inline long double ryser(const Matrix& m, int threads) {
  const auto n = static_cast<std::size_t>(m.rows());
  const std::uint64_t total = std::uint64_t{1} << n;
  const std::uint64_t chunks = std::min<std::uint64_t>(64, total);
  const std::uint64_t per_chunk = (total + chunks - 1) / chunks;
  std::vector<long double> partial(chunks, 0.0L);

  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::uint64_t begin = std::max<std::uint64_t>(1, c * per_chunk);
    const std::uint64_t end = std::min<std::uint64_t>(total, (c + 1) * per_chunk);
    if (begin >= end) return;
    std::vector<long double> row_sum(n, 0.0L);
    const std::uint64_t g0 = (begin - 1) ^ ((begin - 1) >> 1);
    for (std::size_t j = 0; j < n; ++j)
      if (g0 >> j & 1U)
        for (std::size_t i = 0; i < n; ++i) row_sum[i] += m(i, j);
    long double acc = 0.0L;
    for (std::uint64_t k = begin; k < end; ++k) {
      const auto j = static_cast<std::size_t>(std::countr_zero(k));
      const std::uint64_t g = k ^ (k >> 1);
      const long double sign = (g >> j & 1U) ? 1.0L : -1.0L;
      for (std::size_t i = 0; i < n; ++i) row_sum[i] += sign * m(i, j);
      long double prod = 1.0L;
      for (std::size_t i = 0; i < n; ++i) prod *= row_sum[i];
      acc += (std::popcount(g) & 1) ? -prod : prod;
    }
    partial[c] = acc;
  });

  long double sum = 0.0L;
  for (long double p : partial) sum += p;
  return (n & 1U) ? -sum : sum;
}

}  // namespace detail

// ln per(w) by Ryser's inclusion-exclusion after log-domain balancing.
inline double log_permanent(const WeightMatrix& w, int threads = 1) {
  const std::size_t n = w.n();
  if (n > kMaxRyserSize) throw SizeError("log_permanent: n > 24");
  if (n == 0) return 0.0;
  detail::check_feasible(w.log_entries());
  auto [a, b] = detail::log_balance(w.log_entries());
  Matrix scaled = (w.log_entries().colwise() + a).rowwise() + b.transpose();
  scaled = scaled.array().exp().matrix();
  const long double per = detail::ryser(scaled, threads);
  if (!(per > 0.0L)) throw Error("log_permanent: non-positive result after cancellation");
  return static_cast<double>(std::log(per)) - a.sum() - b.sum();
}

// ln per(w) by summing over all n! permutations; independent of Ryser.
inline double log_permanent_bruteforce(const WeightMatrix& w) {
  const std::size_t n = w.n();
  if (n > 10) throw SizeError("log_permanent_bruteforce: n > 10");
  if (n == 0) return 0.0;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<double> terms;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += w.log_at(i, perm[i]);
    terms.push_back(s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return log_sum_exp(terms);
}

namespace detail {
inline WeightMatrix minor_of(const WeightMatrix& w, std::size_t row, std::size_t col) {
  const std::size_t n = w.n();
  Matrix sub(n - 1, n - 1);
  for (std::size_t i = 0, r = 0; i < n; ++i) {
    if (i == row) continue;
    for (std::size_t j = 0, c = 0; j < n; ++j) {
      if (j == col) continue;
      sub(r, c++) = w.log_at(i, j);
    }
    ++r;
  }
  return WeightMatrix::from_log(std::move(sub));
}
}  // namespace detail

// Exact edge marginals P(i matched to j) = p_i^j per(minor_ij) / per(w).
inline Matrix marginals_exact(const WeightMatrix& w, int threads = 1) {
  const std::size_t n = w.n();
  if (n > kMaxMarginalSize) throw SizeError("marginals_exact: n > 12");
  if (n == 1) return Matrix::Ones(1, 1);
  const double log_z = log_permanent(w, threads);
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const WeightMatrix minor = detail::minor_of(w, i, j);
      const bool feasible = minor.log_entries().rowwise().maxCoeff().allFinite() &&
                            minor.log_entries().colwise().maxCoeff().allFinite();
      out(i, j) = (std::isfinite(w.log_at(i, j)) && feasible)
                      ? std::exp(w.log_at(i, j) + log_permanent(minor, threads) - log_z)
                      : 0.0;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Loop series

// Subgraph of K_{n,n} in which every touched vertex has degree >= 2.
struct GeneralizedLoop {
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::vector<std::size_t> row_degree;  // q_i, 0 for untouched rows
  std::vector<std::size_t> col_degree;  // q^j
};

struct LoopTerm {
  GeneralizedLoop loop;
  double r = 0.0;
};

struct LoopSeries {
  double z = 1.0;  // 1 + sum_C r_C
  std::vector<LoopTerm> terms;
};

// r_C = prod_i (1 - q_i) prod_j (1 - q^j) prod_{(i,j) in C} beta/(1 - beta).
inline double loop_contribution(const GeneralizedLoop& c, const Matrix& beta) {
  double r = 1.0;
  for (std::size_t q : c.row_degree)
    if (q) r *= 1.0 - static_cast<double>(q);
  for (std::size_t q : c.col_degree)
    if (q) r *= 1.0 - static_cast<double>(q);
  for (auto [i, j] : c.edges) {
    const double b = beta(i, j);
    r *= b / (1.0 - b);
  }
  return r;
}

// Enumerates all 2^{n^2} edge subsets and keeps the generalized loops.
inline LoopSeries loop_series_exact(const Matrix& beta) {
  const auto n = static_cast<std::size_t>(beta.rows());
  if (n > kMaxLoopEnumerationSize) throw SizeError("loop_series_exact: n > 4");
  LoopSeries out;
  const std::size_t m = n * n;
  const std::uint64_t total = std::uint64_t{1} << m;
  std::vector<std::size_t> rdeg(n), cdeg(n);
  for (std::uint64_t mask = 1; mask < total; ++mask) {
    std::fill(rdeg.begin(), rdeg.end(), 0);
    std::fill(cdeg.begin(), cdeg.end(), 0);
    for (std::size_t e = 0; e < m; ++e)
      if (mask >> e & 1U) {
        ++rdeg[e / n];
        ++cdeg[e % n];
      }
    const auto bad = [](std::size_t q) { return q == 1; };
    if (std::any_of(rdeg.begin(), rdeg.end(), bad) || std::any_of(cdeg.begin(), cdeg.end(), bad))
      continue;
    LoopTerm t;
    for (std::size_t e = 0; e < m; ++e)
      if (mask >> e & 1U) t.loop.edges.emplace_back(e / n, e % n);
    t.loop.row_degree = rdeg;
    t.loop.col_degree = cdeg;
    t.r = loop_contribution(t.loop, beta);
    out.z += t.r;
    out.terms.push_back(std::move(t));
  }
  return out;
}

// Node factor psi = (1 - q) prod sqrt(beta/(1 - beta)) over the node's loop edges.
inline double node_factor(std::span<const double> edge_beliefs) {
  double psi = 1.0 - static_cast<double>(edge_beliefs.size());
  for (double b : edge_beliefs) psi *= std::sqrt(b / (1.0 - b));
  return psi;
}

// (q - 1)^{1 - q/2}: the largest |psi| a degree-q node can reach at a fixed point.
inline double node_factor_bound(std::size_t q) {
  const double qd = static_cast<double>(q);
  return std::pow(qd - 1.0, 1.0 - qd / 2.0);
}

struct NodeBoundReport {
  std::size_t checked = 0;
  std::size_t violations = 0;
  double worst_ratio = 0.0;  // max |psi| / bound
};

// Checks the node-factor bound for every node and every subset of its edges
// of size >= 2. Since r_C factors into node terms, this covers the
// |r_C| <= 1 property for every generalized loop without enumerating loops.
inline NodeBoundReport node_bound_check(const Matrix& beta, double slack = 1e-12) {
  const auto n = static_cast<std::size_t>(beta.rows());
  if (n > 20) throw SizeError("node_bound_check: n > 20");
  NodeBoundReport rep;
  std::vector<double> picked;
  for (int side = 0; side < 2; ++side)
    for (std::size_t v = 0; v < n; ++v)
      for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        if (std::popcount(mask) < 2) continue;
        picked.clear();
        for (std::size_t k = 0; k < n; ++k)
          if (mask >> k & 1U) picked.push_back(side == 0 ? beta(v, k) : beta(k, v));
        const double ratio = std::abs(node_factor(picked)) / node_factor_bound(picked.size());
        ++rep.checked;
        rep.worst_ratio = std::max(rep.worst_ratio, ratio);
        if (ratio > 1.0 + slack) ++rep.violations;
      }
  return rep;
}

}  // namespace flowmatch
