#pragma once

// Maximum-likelihood matching: the permutation maximizing sum_i ln p_{i, pi(i)}.

#include <cmath>
#include <deque>
#include <limits>
#include <vector>

#include "flowmatch/common.hpp"
#include "flowmatch/flow_model.hpp"

namespace flowmatch {

struct Matching {
  std::vector<std::size_t> perm;  // perm[i] = column matched to row i
  double log_weight = 0.0;
};

namespace detail {

// Shortest augmenting path Hungarian method on a dense cost matrix (1-based
// potentials as in the classical O(n^3) formulation). Returns row -> column
// and the dual potentials u, v with cost(i, j) - u_i - v_j >= 0.
inline std::vector<std::size_t> hungarian(const Matrix& cost, std::vector<double>& u, std::vector<double>& v) {
  const auto n = static_cast<std::size_t>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  u.assign(n + 1, 0.0);
  v.assign(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

// Exact assignment by the Hungarian method, then the lexicographically
// smallest optimal permutation: every optimal matching uses only tight edges
// of the optimal duals, so rows are fixed in order to their smallest tight
// column that still admits a perfect matching of tight edges.
inline Matching max_weight_matching(const WeightMatrix& w) {
  const std::size_t n = w.n();
  if (n == 0) throw DomainError("max_weight_matching: empty matrix");
  const Matrix& lw = w.log_entries();
  double finite_span = 0.0;
  for (Eigen::Index k = 0; k < lw.size(); ++k)
    if (std::isfinite(lw.data()[k])) finite_span = std::max(finite_span, std::abs(lw.data()[k]));
  // Zero-weight edges get a cost no optimal finite matching would pay.
  const double forbidden = (finite_span + 1.0) * static_cast<double>(2 * n + 1);
  Matrix cost(lw.rows(), lw.cols());
  for (Eigen::Index k = 0; k < lw.size(); ++k)
    cost.data()[k] = std::isfinite(lw.data()[k]) ? -lw.data()[k] : forbidden;

  std::vector<double> u, v;
  std::vector<std::size_t> match = detail::hungarian(cost, u, v);
  std::vector<std::size_t> owner(n);
  for (std::size_t i = 0; i < n; ++i) owner[match[i]] = i;

  const double tight_tol = 1e-9 * (1.0 + finite_span);
  auto tight = [&](std::size_t i, std::size_t j) {
    return cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - u[i + 1] - v[j + 1] <= tight_tol;
  };

  // Rows < i are final. To give row i column j (currently owned by row r > i),
  // find a tight alternating path from r to match[i] through rows > i.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < match[i]; ++j) {
      if (!tight(i, j) || owner[j] < i) continue;
      const std::size_t r = owner[j];
      const std::size_t goal = match[i];
      std::vector<std::size_t> prev_col(n, n);  // column -> column it was reached from (n = from r)
      std::vector<bool> seen(n, false);
      std::deque<std::size_t> queue;  // rows to expand
      queue.push_back(r);
      seen[j] = true;
      std::vector<std::size_t> via(n, n);  // row -> column through which it was reached
      bool found = false;
      while (!queue.empty() && !found) {
        const std::size_t row = queue.front();
        queue.pop_front();
        for (std::size_t c = 0; c < n && !found; ++c) {
          if (seen[c] || !tight(row, c)) continue;
          seen[c] = true;
          prev_col[c] = via[row];
          if (c == goal) {
            found = true;
            break;
          }
          const std::size_t next = owner[c];
          if (next <= i) continue;
          via[next] = c;
          queue.push_back(next);
        }
      }
      if (!found) continue;
      // Shift along the path: each row on it takes the column it reached.
      std::size_t c = goal;
      while (true) {
        const std::size_t from = prev_col[c];
        const std::size_t row = from == n ? r : owner[from];
        match[row] = c;
        owner[c] = row;
        if (from == n) break;
        c = from;
      }
      match[i] = j;
      owner[j] = i;
      break;
    }
  }

  Matching out;
  out.perm = std::move(match);
  for (std::size_t i = 0; i < n; ++i) out.log_weight += w.log_at(i, out.perm[i]);
  return out;
}

}  // namespace flowmatch
