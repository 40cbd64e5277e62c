#pragma once

// Belief propagation for the weighted perfect-matching model: locates an
// interior stationary point of the Bethe free energy
//
//   F(beta) = sum_ij [ beta ln(beta / p) - (1 - beta) ln(1 - beta) ]
//
// on the doubly stochastic polytope. At a fixed point
//   beta_ij (1 - beta_ij) = p_ij u_i v_j,  rows and columns of beta sum to 1,
// with u_i = e^{mu_i}, v_j = e^{nu_j}. Chemical potentials are stored in log form.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "flowmatch/common.hpp"
#include "flowmatch/flow_model.hpp"

namespace flowmatch {

enum class InitMode { convexified, sinkhorn };

struct BpConfig {
  double damping = 0.45;
  double tol = 1e-10;
  std::size_t max_iters = 100000;
  InitMode init = InitMode::convexified;
  // Newton refinement of the fixed-point equations once the damped iteration
  // is close (|d beta| < polish_switch) or every polish_after iterations.
  bool newton_polish = true;
  double polish_switch = 1e-5;
  std::size_t polish_after = 500;

  void validate() const {
    if (!(damping >= 0.0 && damping < 1.0)) throw DomainError("BpConfig: damping must be in [0,1)");
    if (!(tol > 0.0)) throw DomainError("BpConfig: tol must be > 0");
    if (max_iters == 0) throw DomainError("BpConfig: max_iters must be >= 1");
  }
};

struct BeliefState {
  Matrix beta;
  Vector mu_row;  // ln u_i
  Vector mu_col;  // ln v^j
  double f_bp = 0.0;
  double residual = 0.0;
  std::size_t iterations = 0;
  bool clamped = false;
  bool polished = false;

  std::size_t n() const { return static_cast<std::size_t>(beta.rows()); }
  double log_z() const { return -f_bp; }
  Vector u() const { return mu_row.array().exp().matrix(); }
  Vector v() const { return mu_col.array().exp().matrix(); }
};

struct BpTrace {
  std::vector<double> delta;  // max |beta(n+1) - beta(n)| per iteration
  std::vector<double> f_bp;   // Bethe free energy after each iteration
};

class BpConvergenceError : public ConvergenceError {
 public:
  BpConvergenceError(const std::string& what, BeliefState last, std::vector<double> trace)
      : ConvergenceError(what, last.residual), last_(std::move(last)), trace_(std::move(trace)) {}
  const BeliefState& last_state() const { return last_; }
  const std::vector<double>& residual_trace() const { return trace_; }

 private:
  BeliefState last_;
  std::vector<double> trace_;
};

inline constexpr double kBeliefClamp = 1e-15;
// Below this value of beta (1 - beta), or of 1 - beta in its row or column,
// an edge counts as lying on a face of the Birkhoff polytope.
inline constexpr double kFaceBelief = 1e-12;
// Candidates for the face beta = 1. The optimum of such an edge typically has
// 1 - beta far below double resolution; a commit is only kept if the free
// block it leaves solves to a fixed point.
inline constexpr double kSaturatedBelief = 1e-6;

// Bethe free energy with 0 ln 0 = 0 at boundary entries.
inline double bethe_free_energy(const Matrix& beta, const WeightMatrix& w) {
  if (static_cast<std::size_t>(beta.rows()) != w.n() || beta.rows() != beta.cols())
    throw DomainError("bethe_free_energy: shape mismatch");
  double f = 0.0;
  for (Eigen::Index j = 0; j < beta.cols(); ++j)
    for (Eigen::Index i = 0; i < beta.rows(); ++i) {
      const double b = beta(i, j);
      if (b > 0.0) f += b * (std::log(b) - w.log_entries()(i, j));
      if (b < 1.0) f -= (1.0 - b) * std::log1p(-b);
    }
  return f;
}

struct FixedPointResiduals {
  double row_sum = 0.0;       // max |sum_j beta_ij - 1|
  double col_sum = 0.0;       // max |sum_i beta_ij - 1|
  double stationarity = 0.0;  // max relative |beta(1-beta) - p u v|, absolute on faces
  double max() const { return std::max({row_sum, col_sum, stationarity}); }
};

inline FixedPointResiduals fixed_point_residuals(const Matrix& beta, const Vector& mu_row,
                                                 const Vector& mu_col, const WeightMatrix& w) {
  FixedPointResiduals r;
  const Eigen::Index n = beta.rows();
  r.row_sum = (beta.rowwise().sum().array() - 1.0).abs().maxCoeff();
  r.col_sum = (beta.colwise().sum().array() - 1.0).abs().maxCoeff();
  if (n == 1) return r;
  const Matrix& lw = w.log_entries();
  // A row or column holding an edge with beta ~ 1 is committed: its potential
  // is not pinned by stationarity, so all of its edges lie on a face.
  std::vector<bool> row_face(static_cast<std::size_t>(n), false), col_face(static_cast<std::size_t>(n), false);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      if (1.0 - beta(i, j) < kFaceBelief) row_face[i] = col_face[j] = true;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      const double b = beta(i, j);
      const double log_rhs = lw(i, j) + mu_row(i) + mu_col(j);
      double rel;
      if (b > 1e-300 && b * (1.0 - b) >= kFaceBelief && !row_face[i] && !col_face[j]) {
        // ln(1 - b) is only known to within the rounding of b itself.
        const double resolution = std::numeric_limits<double>::epsilon() / (1.0 - b);
        const double diff = std::abs(std::log(b) + std::log1p(-b) - log_rhs);
        rel = -std::expm1(-std::max(diff - resolution, 0.0));
      } else {
        // On a face of the polytope both sides vanish; compare absolutely.
        rel = std::abs(std::max(b * (1.0 - b), 0.0) - std::exp(log_rhs));
      }
      r.stationarity = std::max(r.stationarity, rel);
    }
  return r;
}

namespace detail {
// Solves sum_j sigmoid(r_j + t) = 1 for t. Entries equal to -inf are ignored.
inline double solve_unit_sum(const double* r, Eigen::Index n, Eigen::Index stride) {
  double m = kNegInf;
  int finite = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double v = r[k * stride];
    if (std::isfinite(v)) {
      m = std::max(m, v);
      ++finite;
    }
  }
  if (finite == 0) throw InfeasibleError("belief row/column has no positive weight");
  double lo = -m - std::log(static_cast<double>(n)) - 1.0;
  double hi = -m + 40.0;
  if (finite == 1) return hi;
  auto eval = [&](double t, double& deriv) {
    double s = 0.0, d = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      const double sg = sigmoid(r[k * stride] + t);
      s += sg;
      d += sg * (1.0 - sg);
    }
    deriv = d;
    return s - 1.0;
  };
  double t = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    double d;
    const double f = eval(t, d);
    if (std::abs(f) < 1e-15) break;
    if (f > 0.0) hi = t; else lo = t;
    double next = d > 0.0 ? t - f / d : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (hi - lo < 1e-15 * std::max(1.0, std::abs(t))) break;
    t = next;
  }
  return t;
}

inline double max_row_col_deviation(const Matrix& beta) {
  return std::max((beta.rowwise().sum().array() - 1.0).abs().maxCoeff(),
                  (beta.colwise().sum().array() - 1.0).abs().maxCoeff());
}

inline Matrix sigmoid_scaled(const Matrix& lw, const Vector& a, const Vector& b) {
  Matrix out(lw.rows(), lw.cols());
  for (Eigen::Index j = 0; j < lw.cols(); ++j)
    for (Eigen::Index i = 0; i < lw.rows(); ++i) out(i, j) = sigmoid(lw(i, j) + a(i) + b(j));
  return out;
}

// Newton's method on the convex dual of the convexified problem,
//   Phi(a, b) = sum_ij softplus(L_ij + a_i + b_j) - sum a - sum b,
// with b_{n-1} held fixed to remove the gauge freedom.
inline bool convexified_dual_newton(const Matrix& lw, Vector& a, Vector& b, double tol) {
  const Eigen::Index n = lw.rows();
  const Eigen::Index dim = 2 * n - 1;
  auto phi = [&](const Vector& aa, const Vector& bb) {
    double s = -aa.sum() - bb.sum();
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        if (std::isfinite(lw(i, j))) s += softplus(lw(i, j) + aa(i) + bb(j));
    return s;
  };
  for (int it = 0; it < 100; ++it) {
    const Matrix s = sigmoid_scaled(lw, a, b);
    Vector grad(dim);
    grad.head(n) = s.rowwise().sum().array() - 1.0;
    grad.tail(n - 1) = (s.colwise().sum().transpose().array() - 1.0).head(n - 1);
    if (grad.cwiseAbs().maxCoeff() < tol) return true;
    const Matrix wgt = s.array() * (1.0 - s.array());
    Matrix h = Matrix::Zero(dim, dim);
    h.diagonal().head(n) = wgt.rowwise().sum();
    h.diagonal().tail(n - 1) = wgt.colwise().sum().transpose().head(n - 1);
    h.block(0, n, n, n - 1) = wgt.leftCols(n - 1);
    h.block(n, 0, n - 1, n) = wgt.leftCols(n - 1).transpose();
    h.diagonal().array() += 1e-14 * (1.0 + h.diagonal().maxCoeff());
    Eigen::LDLT<Matrix> ldlt(h);
    if (ldlt.info() != Eigen::Success) return false;
    const Vector step = -ldlt.solve(grad);
    const double f0 = phi(a, b);
    const double slope = grad.dot(step);
    double t = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls, t *= 0.5) {
      Vector na = a + t * step.head(n);
      Vector nb = b;
      nb.head(n - 1) += t * step.tail(n - 1);
      if (phi(na, nb) <= f0 + 1e-4 * t * slope + 1e-14 * std::abs(f0)) {
        a = std::move(na);
        b = std::move(nb);
        accepted = true;
        break;
      }
    }
    if (!accepted) return grad.cwiseAbs().maxCoeff() < 1e3 * tol;
  }
  return false;
}

inline BeliefState single_edge_state(const WeightMatrix& w) {
  BeliefState s;
  s.beta = Matrix::Ones(1, 1);
  s.mu_row = Vector::Zero(1);
  s.mu_col = Vector::Zero(1);
  s.f_bp = -w.log_at(0, 0);
  return s;
}

}  // namespace detail

// Unique solution of beta/(1 - beta) = p u v with unit row and column sums,
// the fixed point of the convexified free energy (entropy sign of the
// (1 - beta) term reversed). Alternating row/column scaling, each 1-D
// equation solved by safeguarded Newton; a dual Newton step finishes the
// job when the alternating sweeps stall.
inline BeliefState init_convexified(const WeightMatrix& w, const BpConfig& cfg = {}) {
  cfg.validate();
  const Eigen::Index n = static_cast<Eigen::Index>(w.n());
  if (n == 0) throw DomainError("init_convexified: empty matrix");
  if (n == 1) return detail::single_edge_state(w);
  const Matrix& lw = w.log_entries();
  Vector a = Vector::Zero(n), b = Vector::Zero(n);
  std::vector<double> buf(static_cast<std::size_t>(n));
  double resid = 1.0;
  constexpr int kSweeps = 300;
  for (int sweep = 0; sweep < kSweeps; ++sweep) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) buf[j] = lw(i, j) + b(j);
      a(i) = detail::solve_unit_sum(buf.data(), n, 1);
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) buf[i] = lw(i, j) + a(i);
      b(j) = detail::solve_unit_sum(buf.data(), n, 1);
    }
    resid = detail::max_row_col_deviation(detail::sigmoid_scaled(lw, a, b));
    if (resid < cfg.tol) break;
  }
  if (resid >= cfg.tol) {
    detail::convexified_dual_newton(lw, a, b, 0.1 * cfg.tol);
    resid = detail::max_row_col_deviation(detail::sigmoid_scaled(lw, a, b));
  }
  if (!(resid < cfg.tol)) throw ConvergenceError("init_convexified did not converge", resid);

  BeliefState s;
  s.beta = detail::sigmoid_scaled(lw, a, b);
  s.mu_row = a;
  s.mu_col = b;
  s.f_bp = bethe_free_energy(s.beta, w);
  s.residual = resid;
  return s;
}

// Doubly stochastic scaling of p itself (Sinkhorn); fallback initializer.
inline BeliefState init_sinkhorn(const WeightMatrix& w, const BpConfig& cfg = {}) {
  cfg.validate();
  const Eigen::Index n = static_cast<Eigen::Index>(w.n());
  if (n == 0) throw DomainError("init_sinkhorn: empty matrix");
  if (n == 1) return detail::single_edge_state(w);
  const Matrix& lw = w.log_entries();
  Vector a = Vector::Zero(n), b = Vector::Zero(n);
  std::vector<double> buf(static_cast<std::size_t>(n));
  Matrix beta;
  double resid = 1.0;
  for (int sweep = 0; sweep < 10000 && resid >= cfg.tol; ++sweep) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) buf[j] = lw(i, j) + b(j);
      a(i) = -log_sum_exp(buf);
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < n; ++i) buf[i] = lw(i, j) + a(i);
      b(j) = -log_sum_exp(buf);
    }
    beta = ((lw.colwise() + a).rowwise() + b.transpose()).unaryExpr([](double x) { return std::exp(x); });
    resid = detail::max_row_col_deviation(beta);
  }
  // Interior start: pull away from the faces so that 1 - beta > 0.
  const double shrink = 1e-3;
  beta = (1.0 - shrink) * beta + Matrix::Constant(n, n, shrink / static_cast<double>(n));
  BeliefState s;
  s.beta = beta;
  s.mu_row = a;
  s.mu_col = b;
  s.f_bp = bethe_free_energy(beta, w);
  s.residual = resid;
  return s;
}

namespace detail {

// Newton's method on the fixed-point system
//   ln beta + ln(1 - beta) - l - mu_i - nu_j = 0,  row sums = 1, column sums = 1,
// with nu_{n-1} pinned. Both logs are carried, theta = ln beta and
// phi = ln(1 - beta), so the residual has no cancellation at either end.
// Edges with beta < 0.4 step in theta and are eliminated (positive diagonal),
// leaving a dense system in the large beliefs plus the 2n potentials. Large
// beliefs step in theta below 1/2 and in phi above, so that a belief close
// to 1 is not confined to steps shorter than 1 - beta.
inline bool newton_polish(const Matrix& lw, Matrix& beta, Vector& mu, Vector& nu, double target) {
  const Eigen::Index n = lw.rows();
  constexpr double kEliminateBelow = 0.4;

  Matrix theta(n, n), phi(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) {
      const double b = beta(i, j);
      if (!std::isfinite(lw(i, j))) {
        theta(i, j) = kNegInf;
        phi(i, j) = 0.0;
        continue;
      }
      if (b > 1e-280) theta(i, j) = std::log(b);
      else theta(i, j) = std::min(lw(i, j) + mu(i) + nu(j), std::log(0.25));
      if (!(theta(i, j) < 0.0) || !(b < 1.0)) return false;
      phi(i, j) = b > 0.5 ? std::log1p(-b) : std::log1p(-std::exp(theta(i, j)));
    }

  auto evaluate = [&](const Matrix& th, const Matrix& ph, const Vector& m, const Vector& v, Matrix& bt, Matrix& stat,
                      Vector& rows, Vector& cols) {
    bt = th.unaryExpr([](double x) { return std::exp(x); });
    stat.setZero(n, n);
    double merit = 0.0, worst = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!std::isfinite(lw(i, j))) continue;
        const double r = th(i, j) + ph(i, j) - lw(i, j) - m(i) - v(j);
        stat(i, j) = r;
        merit += r * r;
        worst = std::max(worst, std::abs(r));
      }
    rows = bt.rowwise().sum().array() - 1.0;
    cols = bt.colwise().sum().transpose().array() - 1.0;
    merit += rows.squaredNorm() + cols.head(n - 1).squaredNorm();
    worst = std::max({worst, rows.cwiseAbs().maxCoeff(), cols.head(n - 1).cwiseAbs().maxCoeff()});
    if (!std::isfinite(merit)) merit = worst = std::numeric_limits<double>::infinity();
    return std::pair{merit, worst};
  };

  Matrix bt, stat, tbt, tstat;
  Vector rows, cols, trows, tcols;
  auto [merit, worst] = evaluate(theta, phi, mu, nu, bt, stat, rows, cols);
  for (int step = 0; step < 60; ++step) {
    if (worst < target) {
      beta = bt;
      return true;
    }
    std::vector<std::pair<Eigen::Index, Eigen::Index>> kept;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        if (bt(i, j) >= kEliminateBelow) kept.emplace_back(i, j);

    // Unknowns: kept log beliefs (theta or phi), then mu (n), then nu (n);
    // the last column equation is replaced by d nu_{n-1} = 0.
    const auto nk = static_cast<Eigen::Index>(kept.size());
    const Eigen::Index dim = nk + 2 * n;
    const Eigen::Index r0 = nk, c0 = nk + n;
    Matrix jac = Matrix::Zero(dim, dim);
    Vector rhs = Vector::Zero(dim);
    rhs.segment(r0, n) = -rows;
    rhs.segment(c0, n) = -cols;
    std::vector<bool> upper(static_cast<std::size_t>(nk));
    for (Eigen::Index k = 0; k < nk; ++k) {
      const auto [i, j] = kept[k];
      const double b = bt(i, j);
      upper[k] = b > 0.5;
      // d beta = b d theta = -(1 - b) d phi
      const double diag = upper[k] ? (2.0 * b - 1.0) / b : (1.0 - 2.0 * b) / (1.0 - b);
      const double db = upper[k] ? -std::exp(phi(i, j)) : b;
      jac(k, k) = diag;
      jac(k, r0 + i) = -1.0;
      jac(k, c0 + j) = -1.0;
      rhs(k) = -stat(i, j);
      jac(r0 + i, k) += db;
      if (j < n - 1) jac(c0 + j, k) += db;
    }
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i) {
        const double b = bt(i, j);
        if (b >= kEliminateBelow || b == 0.0) continue;
        // d theta = (-F + d mu_i + d nu_j) / D, d beta = b d theta.
        const double g = b * (1.0 - b) / (1.0 - 2.0 * b);
        jac(r0 + i, r0 + i) += g;
        jac(r0 + i, c0 + j) += g;
        rhs(r0 + i) += stat(i, j) * g;
        if (j < n - 1) {
          jac(c0 + j, c0 + j) += g;
          jac(c0 + j, r0 + i) += g;
          rhs(c0 + j) += stat(i, j) * g;
        }
      }
    jac.row(dim - 1).setZero();
    jac(dim - 1, dim - 1) = 1.0;
    rhs(dim - 1) = 0.0;

    // Underflowed beliefs can split the support into blocks, each with its own
    // gauge freedom; full pivoting still returns a solution.
    const Vector sol = Eigen::FullPivLU<Matrix>(jac).solve(rhs);
    if (!sol.allFinite()) return false;
    Matrix dtheta = Matrix::Zero(n, n), dphi = Matrix::Zero(n, n);
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> in_phi =
        Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(n, n, false);
    for (Eigen::Index k = 0; k < nk; ++k) {
      const auto [i, j] = kept[k];
      if (upper[k]) {
        dphi(i, j) = sol(k);
        in_phi(i, j) = true;
      } else {
        dtheta(i, j) = sol(k);
      }
    }
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i) {
        const double b = bt(i, j);
        if (b >= kEliminateBelow || !std::isfinite(lw(i, j))) continue;
        dtheta(i, j) = (-stat(i, j) + sol(r0 + i) + sol(c0 + j)) * (1.0 - b) / (1.0 - 2.0 * b);
      }

    // Stay inside (0, 1): move at most 90% of the way to theta = 0 or phi = 0.
    double t = 1.0;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!std::isfinite(theta(i, j))) continue;
        if (in_phi(i, j)) {
          if (dphi(i, j) > 0.0) t = std::min(t, 0.9 * -phi(i, j) / dphi(i, j));
        } else if (dtheta(i, j) > 0.0) {
          t = std::min(t, 0.9 * -theta(i, j) / dtheta(i, j));
        }
      }
    bool accepted = false;
    Matrix nt(n, n), np(n, n);
    for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
      for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < n; ++i) {
          if (!std::isfinite(theta(i, j))) {
            nt(i, j) = theta(i, j);
            np(i, j) = 0.0;
          } else if (in_phi(i, j)) {
            np(i, j) = phi(i, j) + t * dphi(i, j);
            nt(i, j) = std::log1p(-std::exp(np(i, j)));
          } else {
            nt(i, j) = theta(i, j) + t * dtheta(i, j);
            np(i, j) = std::log1p(-std::exp(nt(i, j)));
          }
        }
      Vector nm = mu + t * sol.segment(r0, n);
      Vector nv = nu + t * sol.segment(c0, n);
      const auto [next_merit, next_worst] = evaluate(nt, np, nm, nv, tbt, tstat, trows, tcols);
      if (next_merit < merit) {
        theta.swap(nt);
        phi.swap(np);
        mu = std::move(nm);
        nu = std::move(nv);
        bt.swap(tbt);
        stat.swap(tstat);
        rows.swap(trows);
        cols.swap(tcols);
        merit = next_merit;
        worst = next_worst;
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      beta = bt;
      return worst < 100.0 * target;
    }
  }
  beta = bt;
  return worst < target;
}

}  // namespace detail

// Damped fixed-point iteration: belief update, row then column
// normalization, then the chemical-potential updates (v uses the fresh u).
inline BeliefState solve(const WeightMatrix& w, const BpConfig& cfg = {}, BpTrace* trace = nullptr) {
  cfg.validate();
  const Eigen::Index n = static_cast<Eigen::Index>(w.n());
  if (n == 0) throw DomainError("bp solve: empty matrix");
  if (n == 1) return detail::single_edge_state(w);

  BeliefState s;
  if (cfg.init == InitMode::convexified) {
    try {
      s = init_convexified(w, cfg);
    } catch (const ConvergenceError&) {
      s = init_sinkhorn(w, cfg);
    }
  } else {
    s = init_sinkhorn(w, cfg);
  }

  const Matrix& lw = w.log_entries();
  const double lambda = cfg.damping;
  Matrix beta = s.beta;
  Vector mu = s.mu_row, nu = s.mu_col;
  Matrix next(n, n);
  std::vector<double> buf(static_cast<std::size_t>(n));
  std::vector<double> delta_trace;
  bool converged = false;
  bool clamped = false;
  bool polished = false;
  std::size_t last_polish = 0;
  const double polish_target = std::max(5e-14, std::min(1e-12, 1e-2 * cfg.tol));
  std::size_t it = 0;

  auto update_potentials = [&](const Matrix& bt) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index k = 0; k < n; ++k) buf[k] = lw(i, k) + nu(k);
      const double spread = std::max(1.0 - bt.row(i).squaredNorm(), 1e-300);
      mu(i) = std::log(spread) - log_sum_exp(buf);
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index k = 0; k < n; ++k) buf[k] = lw(k, j) + mu(k);
      const double spread = std::max(1.0 - bt.col(j).squaredNorm(), 1e-300);
      nu(j) = std::log(spread) - log_sum_exp(buf);
    }
  };

  auto try_polish = [&]() {
    Matrix pb = beta;
    Vector pm = mu, pn = nu;
    if (detail::newton_polish(lw, pb, pm, pn, polish_target)) {
      const FixedPointResiduals r = fixed_point_residuals(pb, pm, pn, w);
      if (r.row_sum < cfg.tol && r.col_sum < cfg.tol && r.stationarity < cfg.tol) {
        beta = std::move(pb);
        mu = std::move(pm);
        nu = std::move(pn);
        return true;
      }
    }
    return false;
  };

  // Edges saturating at beta = 1 pin their row and column, and the iteration
  // approaches such a face only sublinearly. Commit them at exactly 1, solve
  // the free block on its own and accept the assembled state if it is a
  // fixed point. (The free energy of the unconverged iterate is no guide: it
  // still violates the row sums.)
  auto try_face = [&]() {
    std::vector<Eigen::Index> free_rows, free_cols;
    std::vector<bool> row_done(static_cast<std::size_t>(n), false), col_done(static_cast<std::size_t>(n), false);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        if (1.0 - beta(i, j) < kSaturatedBelief && !row_done[i] && !col_done[j]) row_done[i] = col_done[j] = true;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (!row_done[k]) free_rows.push_back(k);
      if (!col_done[k]) free_cols.push_back(k);
    }
    const auto m = static_cast<Eigen::Index>(free_rows.size());
    if (m == n || free_cols.size() != free_rows.size()) return false;

    Matrix fb = Matrix::Zero(n, n);
    Vector fm = Vector::Zero(n), fn = Vector::Zero(n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        if (row_done[i] && col_done[j] && 1.0 - beta(i, j) < kSaturatedBelief) fb(i, j) = 1.0;
    if (m > 0) {
      Matrix sub(m, m);
      for (Eigen::Index c = 0; c < m; ++c)
        for (Eigen::Index r = 0; r < m; ++r) sub(r, c) = lw(free_rows[r], free_cols[c]);
      BeliefState part;
      try {
        part = solve(WeightMatrix::from_log(std::move(sub)), cfg);
      } catch (const Error&) {
        return false;
      }
      for (Eigen::Index c = 0; c < m; ++c) {
        fn(free_cols[c]) = part.mu_col(c);
        for (Eigen::Index r = 0; r < m; ++r) fb(free_rows[r], free_cols[c]) = part.beta(r, c);
      }
      for (Eigen::Index r = 0; r < m; ++r) fm(free_rows[r]) = part.mu_row(r);
      clamped = clamped || part.clamped;
    }
    // Committed potentials take the saturated value of the potential update.
    for (Eigen::Index i = 0; i < n; ++i)
      if (row_done[i]) {
        for (Eigen::Index k = 0; k < n; ++k) buf[k] = lw(i, k) + fn(k);
        fm(i) = std::log(1e-300) - log_sum_exp(buf);
      }
    for (Eigen::Index j = 0; j < n; ++j)
      if (col_done[j]) {
        for (Eigen::Index k = 0; k < n; ++k) buf[k] = lw(k, j) + fm(k);
        fn(j) = std::log(1e-300) - log_sum_exp(buf);
      }
    const FixedPointResiduals r = fixed_point_residuals(fb, fm, fn, w);
    if (!(r.row_sum < cfg.tol && r.col_sum < cfg.tol && r.stationarity < cfg.tol)) return false;
    beta = std::move(fb);
    mu = std::move(fm);
    nu = std::move(fn);
    clamped = true;
    return true;
  };

  std::size_t polish_gap = 20, face_gap = 50, last_face = 0;
  for (it = 1; it <= cfg.max_iters; ++it) {
    const Vector rows = beta.rowwise().sum();
    const Vector cols = beta.colwise().sum().transpose();
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i) {
        const double spare = std::max(0.5 * cols(j) + 0.5 * rows(i) - beta(i, j), 1e-300);
        const double target = sigmoid(lw(i, j) + mu(i) + nu(j) - 2.0 * std::log(spare));
        next(i, j) = lambda * beta(i, j) + (1.0 - lambda) * target;
      }
    for (Eigen::Index i = 0; i < n; ++i) next.row(i) /= next.row(i).sum();
    for (Eigen::Index j = 0; j < n; ++j) next.col(j) /= next.col(j).sum();
    if (!next.allFinite()) throw BpConvergenceError("bp solve: non-finite beliefs", s, delta_trace);
    for (Eigen::Index k = 0; k < next.size(); ++k) {
      double& b = next.data()[k];
      if (b < 0.0 || b > 1.0 - kBeliefClamp) {
        b = std::clamp(b, kBeliefClamp, 1.0 - kBeliefClamp);
        clamped = true;
      }
    }
    update_potentials(next);
    const double delta = (next - beta).cwiseAbs().maxCoeff();
    beta.swap(next);
    delta_trace.push_back(delta);
    if (trace) {
      trace->delta.push_back(delta);
      trace->f_bp.push_back(bethe_free_energy(beta, w));
    }

    if (delta < cfg.tol) {
      const FixedPointResiduals r = fixed_point_residuals(beta, mu, nu, w);
      if (r.row_sum < cfg.tol && r.col_sum < cfg.tol && r.stationarity < 10.0 * cfg.tol) {
        converged = true;
        break;
      }
    }
    if (delta < cfg.polish_switch && it - last_face >= face_gap) {
      last_face = it;
      if (try_face()) {
        converged = true;
        break;
      }
      face_gap = std::min<std::size_t>(2 * face_gap, cfg.polish_after);
    }
    if (cfg.newton_polish && it - last_polish >= polish_gap &&
        (delta < cfg.polish_switch || it % cfg.polish_after == 0)) {
      last_polish = it;
      if (try_polish()) {
        converged = true;
        polished = true;
        break;
      }
      polish_gap = std::min<std::size_t>(2 * polish_gap, cfg.polish_after);
    }
  }

  s.beta = std::move(beta);
  s.mu_row = std::move(mu);
  s.mu_col = std::move(nu);
  s.f_bp = bethe_free_energy(s.beta, w);
  s.residual = fixed_point_residuals(s.beta, s.mu_row, s.mu_col, w).max();
  s.iterations = std::min(it, cfg.max_iters);
  s.clamped = clamped;
  s.polished = polished;
  if (!converged) throw BpConvergenceError("bp solve did not converge", s, std::move(delta_trace));
  return s;
}

// ---------------------------------------------------------------------------
// Polarized-edge pruning

// near_one: commit edges with beta > 1 - eps. literal: commit edges with
// beta > eps (greedily, largest belief first, one per row and column).
enum class PruneRule { near_one, literal };

struct PruneConfig {
  double eps = 0.01;
  PruneRule rule = PruneRule::near_one;
};

struct PrunedProblem {
  WeightMatrix reduced;             // size 0 when every particle is committed
  std::vector<std::size_t> rows;    // reduced row -> original row
  std::vector<std::size_t> cols;    // reduced col -> original col
  std::vector<std::pair<std::size_t, std::size_t>> committed;
  double committed_log_weight = 0.0;

  bool empty() const { return reduced.n() == 0; }
};

inline PrunedProblem prune_polarized(const BeliefState& state, const WeightMatrix& w,
                                     const PruneConfig& cfg = {}) {
  if (!(cfg.eps > 0.0 && cfg.eps < 0.5)) throw DomainError("prune_polarized: eps must be in (0, 0.5)");
  const std::size_t n = w.n();
  if (state.n() != n) throw DomainError("prune_polarized: shape mismatch");
  const double threshold = cfg.rule == PruneRule::near_one ? 1.0 - cfg.eps : cfg.eps;

  std::vector<std::pair<std::size_t, std::size_t>> candidates;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (state.beta(i, j) > threshold) candidates.emplace_back(i, j);
  std::stable_sort(candidates.begin(), candidates.end(), [&](auto l, auto r) {
    return state.beta(l.first, l.second) > state.beta(r.first, r.second);
  });

  PrunedProblem out;
  std::vector<bool> row_used(n, false), col_used(n, false);
  for (auto [i, j] : candidates) {
    if (row_used[i] || col_used[j]) continue;
    row_used[i] = col_used[j] = true;
    out.committed.emplace_back(i, j);
    out.committed_log_weight += w.log_at(i, j);
  }
  std::sort(out.committed.begin(), out.committed.end());
  for (std::size_t i = 0; i < n; ++i)
    if (!row_used[i]) out.rows.push_back(i);
  for (std::size_t j = 0; j < n; ++j)
    if (!col_used[j]) out.cols.push_back(j);
  const auto m = static_cast<Eigen::Index>(out.rows.size());
  Matrix sub(m, m);
  for (Eigen::Index r = 0; r < m; ++r)
    for (Eigen::Index c = 0; c < m; ++c) sub(r, c) = w.log_at(out.rows[r], out.cols[c]);
  out.reduced = WeightMatrix::from_log(std::move(sub));
  return out;
}

}  // namespace flowmatch
