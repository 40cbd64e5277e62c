#pragma once

// Saddle-point evaluation of the loop-series factor z = Z / Z_BP.
//
// z is written as a contour integral over 2N auxiliary variables rho (one
// per row and per column). The exponent
//
//   G(rho) = sum_k 2 ln|rho_k| - sum_k rho_k - sum_ij softplus(t_ij - rho_i - rho^j),
//   t_ij = ln(beta_ij / (1 - beta_ij)),
//
// is concave inside every orthant. Its maximum rho* in the all-positive
// orthant gives z ~ exp(-G_sp - G4), with
//   G_sp = G(rho*) + N ln(2 pi) + 1/2 ln det Lambda,  Lambda = -Hess G(rho*).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "flowmatch/bp_solver.hpp"
#include "flowmatch/common.hpp"

namespace flowmatch {

// log_partition: fourth derivatives of the edge (softplus) part only,
//   G4 = -1/8 sum_edges f''''(x) (C_ii + 2 C_iJ + C_JJ)^2,  C = Lambda^{-1}.
// full_tensor: the fourth-derivative tensor of G itself, edge blocks plus the
//   -12/rho^4 pole terms, contracted with the same -1/8 prefactor.
enum class FourthOrderMode { log_partition, full_tensor };

struct SaddleConfig {
  double tol = 1e-10;
  double damping = 0.5;
  double switch_residual = 1e-3;
  std::size_t max_fixed_point = 500;
  std::size_t max_newton = 200;
  double unbounded_threshold = 1e8;
  FourthOrderMode g4_mode = FourthOrderMode::log_partition;

  void validate() const {
    if (!(tol > 0.0)) throw DomainError("SaddleConfig: tol must be > 0");
    if (!(damping >= 0.0 && damping < 1.0)) throw DomainError("SaddleConfig: damping must be in [0,1)");
  }
};

struct SaddleSolution {
  std::vector<int> signs;  // +1 / -1 per component; rows first, then columns
  Vector rho;
  double g_value = 0.0;
  double logdet_hessian = 0.0;
  double g_sp = 0.0;
  double g4 = 0.0;
  double ratio = 0.0;  // |G4 / G_sp|
  double residual = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
};

namespace detail {

// ln(beta / (1 - beta)) with beliefs pulled off the boundary.
inline Matrix belief_log_odds(const Matrix& beta) {
  Matrix lt(beta.rows(), beta.cols());
  for (Eigen::Index k = 0; k < beta.size(); ++k) {
    const double b = std::clamp(beta.data()[k], 1e-300, 1.0 - 1e-16);
    lt.data()[k] = std::log(b) - std::log1p(-b);
  }
  return lt;
}

inline void check_rho(const Vector& rho, Eigen::Index n) {
  if (rho.size() != 2 * n) throw DomainError("saddle: rho must have 2N components");
  for (Eigen::Index k = 0; k < rho.size(); ++k)
    if (!(rho(k) != 0.0) || !std::isfinite(rho(k)))
      throw DomainError("saddle: rho components must be finite and nonzero");
}

inline Matrix edge_sigmoids(const Vector& rho, const Matrix& lt) {
  const Eigen::Index n = lt.rows();
  Matrix s(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) s(i, j) = sigmoid(lt(i, j) - rho(i) - rho(n + j));
  return s;
}

inline double g_from_log_odds(const Vector& rho, const Matrix& lt) {
  const Eigen::Index n = lt.rows();
  double g = 0.0;
  for (Eigen::Index k = 0; k < rho.size(); ++k) g += 2.0 * std::log(std::abs(rho(k))) - rho(k);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) g -= softplus(lt(i, j) - rho(i) - rho(n + j));
  return g;
}

inline Vector gradient_from_sigmoids(const Vector& rho, const Matrix& s) {
  const Eigen::Index n = s.rows();
  Vector g(2 * n);
  g.head(n) = s.rowwise().sum();
  g.tail(n) = s.colwise().sum().transpose();
  g.array() += 2.0 / rho.array() - 1.0;
  return g;
}

inline Matrix lambda_from_sigmoids(const Vector& rho, const Matrix& s) {
  const Eigen::Index n = s.rows();
  const Matrix w = s.array() * (1.0 - s.array());
  Matrix lam = Matrix::Zero(2 * n, 2 * n);
  lam.topRightCorner(n, n) = w;
  lam.bottomLeftCorner(n, n) = w.transpose();
  lam.diagonal().head(n) = w.rowwise().sum();
  lam.diagonal().tail(n) = w.colwise().sum().transpose();
  lam.diagonal().array() += 2.0 / rho.array().square();
  return lam;
}

}  // namespace detail

// G(rho) for the beliefs beta; ln|rho| is used on negative components.
inline double g_function(const Vector& rho, const Matrix& beta) {
  detail::check_rho(rho, beta.rows());
  return detail::g_from_log_odds(rho, detail::belief_log_odds(beta));
}

inline Vector g_gradient(const Vector& rho, const Matrix& beta) {
  detail::check_rho(rho, beta.rows());
  return detail::gradient_from_sigmoids(rho, detail::edge_sigmoids(rho, detail::belief_log_odds(beta)));
}

// Lambda = -Hess G: diag(2/rho^2) plus the signless Laplacian of the edge
// weights s(1 - s). Positive definite for every rho.
inline Matrix g_lambda(const Vector& rho, const Matrix& beta) {
  detail::check_rho(rho, beta.rows());
  return detail::lambda_from_sigmoids(rho, detail::edge_sigmoids(rho, detail::belief_log_odds(beta)));
}

// G_sp = G + N ln(2 pi) + 1/2 ln det Lambda.
inline double gaussian_correction(const SaddleSolution& sol) {
  if (!sol.converged) throw DomainError("gaussian_correction: solution not converged");
  const double n = static_cast<double>(sol.rho.size()) / 2.0;
  const double g_sp = sol.g_value + n * std::log(2.0 * std::numbers::pi) + 0.5 * sol.logdet_hessian;
  if (!std::isfinite(g_sp)) throw SingularityError("gaussian_correction: non-finite value");
  return g_sp;
}

inline double fourth_order_correction(const Vector& rho, const Matrix& beta, const Matrix& cov,
                                      FourthOrderMode mode = FourthOrderMode::log_partition) {
  const Eigen::Index n = beta.rows();
  if (n == 0) return 0.0;
  const Matrix s = detail::edge_sigmoids(rho, detail::belief_log_odds(beta));
  double acc = 0.0;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      const double v = s(i, j);
      const double f4 = v * (1.0 - v) * (1.0 - 6.0 * v + 6.0 * v * v);
      const double blk = cov(i, i) + 2.0 * cov(i, n + j) + cov(n + j, n + j);
      // Upsilon = +f'''' as a derivative of ln Z(rho), -f'''' as one of G.
      acc += (mode == FourthOrderMode::log_partition ? f4 : -f4) * blk * blk;
    }
  if (mode == FourthOrderMode::full_tensor)
    for (Eigen::Index k = 0; k < 2 * n; ++k) acc += -12.0 / std::pow(rho(k), 4) * cov(k, k) * cov(k, k);
  return -acc / 8.0;
}

inline double fourth_order_correction(const SaddleSolution& sol, const Matrix& beta,
                                      FourthOrderMode mode = FourthOrderMode::log_partition) {
  if (!sol.converged) throw DomainError("fourth_order_correction: solution not converged");
  Eigen::LLT<Matrix> llt(g_lambda(sol.rho, beta));
  if (llt.info() != Eigen::Success) throw SingularityError("fourth_order_correction: Lambda not positive definite");
  const Matrix cov = llt.solve(Matrix::Identity(sol.rho.size(), sol.rho.size()));
  return fourth_order_correction(sol.rho, beta, cov, mode);
}

// Maximizes G in the orthant given by `signs`. Damped fixed-point sweeps of
// rho_k = 2 / (1 - sum of adjacent sigmoids) bring the residual under
// switch_residual; Newton ascent (rho += Lambda^{-1} grad) finishes. An
// orthant in which G grows without bound raises ConvergenceError.
inline SaddleSolution solve_saddle(const Matrix& beta, const std::vector<int>& signs,
                                   const SaddleConfig& cfg = {}) {
  cfg.validate();
  const Eigen::Index n = beta.rows();
  const Eigen::Index m = 2 * n;
  if (n == 0) throw DomainError("solve_saddle: empty problem");
  if (static_cast<Eigen::Index>(signs.size()) != m) throw DomainError("solve_saddle: need 2N signs");
  for (int sg : signs)
    if (sg != 1 && sg != -1) throw DomainError("solve_saddle: signs must be +1 or -1");
  for (Eigen::Index k = 0; k < beta.size(); ++k)
    if (!(beta.data()[k] >= 0.0 && beta.data()[k] <= 1.0))
      throw DomainError("solve_saddle: beliefs must lie in [0,1]");

  const Matrix lt = detail::belief_log_odds(beta);
  Vector sign(m);
  for (Eigen::Index k = 0; k < m; ++k) sign(k) = signs[static_cast<std::size_t>(k)];
  Vector rho = 2.0 * sign;

  SaddleSolution sol;
  sol.signs = signs;
  Matrix s = detail::edge_sigmoids(rho, lt);
  Vector grad = detail::gradient_from_sigmoids(rho, s);
  double resid = grad.cwiseAbs().maxCoeff();
  std::size_t iters = 0;

  auto unbounded = [&] {
    return rho.cwiseAbs().maxCoeff() > cfg.unbounded_threshold;
  };

  for (std::size_t it = 0; it < cfg.max_fixed_point && resid >= cfg.switch_residual; ++it, ++iters) {
    Vector adj(m);
    adj.head(n) = s.rowwise().sum();
    adj.tail(n) = s.colwise().sum().transpose();
    Vector next = rho;
    bool inside = true;
    for (Eigen::Index k = 0; k < m && inside; ++k) {
      const double target = 2.0 / (1.0 - adj(k));
      // A target outside the orthant means G still grows away from zero
      // along this component; leave that to the Newton phase.
      inside = std::isfinite(target) && target * sign(k) > 0.0;
      next(k) = cfg.damping * rho(k) + (1.0 - cfg.damping) * target;
    }
    if (!inside) break;
    rho = next;
    s = detail::edge_sigmoids(rho, lt);
    grad = detail::gradient_from_sigmoids(rho, s);
    resid = grad.cwiseAbs().maxCoeff();
  }

  double g_cur = detail::g_from_log_odds(rho, lt);
  for (std::size_t it = 0; it < cfg.max_newton && resid >= cfg.tol; ++it, ++iters) {
    const Matrix lam = detail::lambda_from_sigmoids(rho, s);
    Eigen::LLT<Matrix> llt(lam);
    if (llt.info() != Eigen::Success) throw SingularityError("solve_saddle: Lambda not positive definite");
    const Vector d = llt.solve(grad);
    double t = 1.0;
    for (Eigen::Index k = 0; k < m; ++k)
      if (d(k) * sign(k) < 0.0) t = std::min(t, 0.9 * std::abs(rho(k) / d(k)));
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
      const Vector trial = rho + t * d;
      const double g_new = detail::g_from_log_odds(trial, lt);
      if (g_new >= g_cur - 1e-13 * std::max(1.0, std::abs(g_cur))) {
        rho = trial;
        g_cur = g_new;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    if (unbounded()) throw ConvergenceError("solve_saddle: G unbounded in this orthant", resid);
    s = detail::edge_sigmoids(rho, lt);
    grad = detail::gradient_from_sigmoids(rho, s);
    resid = grad.cwiseAbs().maxCoeff();
  }
  sol.rho = rho;
  sol.residual = resid;
  sol.iterations = iters;
  if (!(resid < cfg.tol)) throw ConvergenceError("solve_saddle did not converge", resid);

  const Matrix lam = detail::lambda_from_sigmoids(rho, s);
  Eigen::LLT<Matrix> llt(lam);
  if (llt.info() != Eigen::Success) throw SingularityError("solve_saddle: Lambda not positive definite");
  sol.converged = true;
  sol.g_value = detail::g_from_log_odds(rho, lt);
  sol.logdet_hessian = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  if (!std::isfinite(sol.logdet_hessian)) throw SingularityError("solve_saddle: non-finite log det");
  sol.g_sp = gaussian_correction(sol);
  const Matrix cov = llt.solve(Matrix::Identity(m, m));
  sol.g4 = fourth_order_correction(rho, beta, cov, cfg.g4_mode);
  sol.ratio = sol.g_sp != 0.0 ? std::abs(sol.g4 / sol.g_sp) : 0.0;
  return sol;
}

inline SaddleSolution solve_saddle(const BeliefState& state, const std::vector<int>& signs,
                                   const SaddleConfig& cfg = {}) {
  return solve_saddle(state.beta, signs, cfg);
}

// ---------------------------------------------------------------------------
// Corrected estimate

inline constexpr std::size_t kMaxExhaustiveComponents = 12;

struct CorrectionConfig {
  BpConfig bp;
  SaddleConfig saddle;
  PruneConfig prune;
  bool exhaustive = false;
  int threads = 1;
};

struct OrthantSummary {
  // Indexed by sign mask: bit k set means component k is negative.
  std::vector<double> log_contribution;  // -G_sp per orthant, -inf when unbounded
  std::vector<SaddleSolution> solutions;  // converged orthants only
  std::size_t unbounded = 0;  // orthants without a usable maximum
  double ln_z_sum = 0.0;          // ln of the summed contributions
  double log_gap_rest = 0.0;      // all-+ term minus ln(sum of all other terms)
  double log_gap_all_minus = 0.0;  // all-+ term minus the all-- term
  bool all_plus_dominates = false;
};

struct CorrectedEstimate {
  double ln_z_bp = 0.0;
  double ln_z_sp = 0.0;
  double ln_z_sp4 = 0.0;
  double g_sp = 0.0;
  double g4 = 0.0;
  double ratio = 0.0;
  std::size_t reduced_size = 0;
  std::size_t committed = 0;
  std::optional<SaddleSolution> dominant;  // empty when the reduction is empty
  std::optional<OrthantSummary> orthants;
  std::vector<std::string> warnings;
};

inline std::vector<int> signs_from_mask(std::uint64_t mask, std::size_t components) {
  std::vector<int> s(components);
  for (std::size_t k = 0; k < components; ++k) s[k] = (mask >> k & 1U) ? -1 : 1;
  return s;
}

inline OrthantSummary solve_all_orthants(const Matrix& beta, const SaddleConfig& cfg, int threads) {
  const auto m = static_cast<std::size_t>(2 * beta.rows());
  if (m > kMaxExhaustiveComponents) throw SizeError("solve_all_orthants: 2N > 12");
  const std::uint64_t total = std::uint64_t{1} << m;
  std::vector<std::optional<SaddleSolution>> slots(total);
  parallel_for(total, threads, [&](std::size_t mask) {
    try {
      slots[mask] = solve_saddle(beta, signs_from_mask(mask, m), cfg);
    } catch (const ConvergenceError&) {
    } catch (const SingularityError&) {
      // Lambda degenerates only as |rho| runs off along an unbounded direction.
    }
  });
  OrthantSummary out;
  out.log_contribution.assign(total, kNegInf);
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    if (!slots[mask]) {
      ++out.unbounded;
      continue;
    }
    out.log_contribution[mask] = -slots[mask]->g_sp;
    out.solutions.push_back(std::move(*slots[mask]));
  }
  out.ln_z_sum = log_sum_exp(out.log_contribution);
  std::vector<double> rest(out.log_contribution.begin() + 1, out.log_contribution.end());
  out.log_gap_rest = out.log_contribution[0] - log_sum_exp(rest);
  out.log_gap_all_minus = out.log_contribution[0] - out.log_contribution[total - 1];
  out.all_plus_dominates = std::isfinite(out.log_contribution[0]) &&
                           std::all_of(rest.begin(), rest.end(),
                                       [&](double v) { return v < out.log_contribution[0]; });
  return out;
}

// BP estimate corrected by the dominant (all-+) saddle. Polarized edges are
// committed first; the saddle is evaluated on a BP fixed point of the
// reduced matrix. An empty or single-particle reduction leaves z = 1.
inline CorrectedEstimate corrected_estimate(const BeliefState& state, const WeightMatrix& w,
                                            const CorrectionConfig& cfg = {}) {
  CorrectedEstimate est;
  est.ln_z_bp = state.log_z();
  // Re-solving a reduced problem can polarize further edges (its optimum may
  // sit on a face again), so prune until the beliefs are free of them.
  PrunedProblem pruned = prune_polarized(state, w, cfg.prune);
  BeliefState reduced = state;
  est.committed = pruned.committed.size();
  while (!pruned.committed.empty() && pruned.reduced.n() > 1) {
    reduced = solve(pruned.reduced, cfg.bp);
    PrunedProblem next = prune_polarized(reduced, pruned.reduced, cfg.prune);
    est.committed += next.committed.size();
    pruned = std::move(next);
  }
  est.reduced_size = pruned.reduced.n();
  if (est.reduced_size <= 1) {
    est.ln_z_sp = est.ln_z_sp4 = est.ln_z_bp;
    return est;
  }
  const std::vector<int> plus(2 * est.reduced_size, 1);
  SaddleSolution sol = solve_saddle(reduced.beta, plus, cfg.saddle);
  est.g_sp = sol.g_sp;
  est.g4 = sol.g4;
  est.ratio = sol.ratio;
  est.ln_z_sp = est.ln_z_bp - est.g_sp;
  est.ln_z_sp4 = est.ln_z_sp - est.g4;
  if (sol.ratio >= 1.0)
    est.warnings.push_back("|G4/G_sp| >= 1: saddle-point expansion outside its validity range");
  est.dominant = std::move(sol);
  if (cfg.exhaustive && 2 * est.reduced_size <= kMaxExhaustiveComponents)
    est.orthants = solve_all_orthants(reduced.beta, cfg.saddle, cfg.threads);
  return est;
}

}  // namespace flowmatch
