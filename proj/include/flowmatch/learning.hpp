#pragma once

// Parameter learning: ln Z / N over a grid of kappa or S values for each
// estimator, and the refined maximizer per estimator.

#include <array>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "flowmatch/bp_solver.hpp"
#include "flowmatch/common.hpp"
#include "flowmatch/flow_model.hpp"
#include "flowmatch/mcmc.hpp"
#include "flowmatch/oracle.hpp"
#include "flowmatch/saddle.hpp"

namespace flowmatch {

enum class SweepParam { kappa, S };
enum class Method { bp = 0, bp_sp = 1, bp_sp4 = 2, mcmc = 3, exact = 4 };
inline constexpr std::size_t kMethodCount = 5;
inline constexpr std::array<const char*, kMethodCount> kMethodNames{"bp", "bp_sp", "bp_sp4", "mcmc", "exact"};

inline const char* method_name(Method m) { return kMethodNames[static_cast<std::size_t>(m)]; }

inline Method parse_method(const std::string& s) {
  for (std::size_t k = 0; k < kMethodCount; ++k)
    if (s == kMethodNames[k]) return static_cast<Method>(k);
  throw DomainError("unknown method '" + s + "'");
}

struct SweepSpec {
  SweepParam parameter = SweepParam::kappa;
  std::vector<double> grid;
  double fixed = 0.0;  // S for kappa sweeps, kappa for S sweeps
  std::vector<Method> methods{Method::bp, Method::bp_sp, Method::bp_sp4};
  CorrectionConfig correction;
  McmcConfig mcmc;
  int threads = 1;

  void validate() const {
    if (grid.empty()) throw DomainError("SweepSpec: empty grid");
    for (std::size_t k = 1; k < grid.size(); ++k)
      if (!(grid[k] > grid[k - 1])) throw DomainError("SweepSpec: grid must be strictly increasing");
    for (double g : grid)
      if (!std::isfinite(g)) throw DomainError("SweepSpec: non-finite grid value");
    if (parameter == SweepParam::kappa && !(grid.front() > 0.0))
      throw DomainError("SweepSpec: kappa grid must be > 0");
    if (parameter == SweepParam::S && !(fixed > 0.0)) throw DomainError("SweepSpec: fixed kappa must be > 0");
    if (methods.empty()) throw DomainError("SweepSpec: no methods");
  }

  bool wants(Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }
};

struct SweepRow {
  double param = 0.0;
  std::array<std::optional<double>, kMethodCount> ln_z_per_n;
  double ratio_g4 = std::numeric_limits<double>::quiet_NaN();
  double bp_residual = std::numeric_limits<double>::quiet_NaN();
  double mcmc_stderr = std::numeric_limits<double>::quiet_NaN();
  double seconds_bp = 0.0;
  double seconds_sp = 0.0;
  double seconds_mcmc = 0.0;
  double seconds_exact = 0.0;
  std::vector<std::string> errors;
};

struct Argmax {
  std::size_t grid_index = 0;
  double grid_value = 0.0;
  double refined = 0.0;
};

struct SweepResult {
  SweepParam parameter = SweepParam::kappa;
  std::vector<SweepRow> rows;
  std::array<std::optional<Argmax>, kMethodCount> argmax;
};

inline std::vector<double> geometric_grid(double lo, double hi, std::size_t points) {
  if (!(lo > 0.0 && hi > lo) || points < 2) throw DomainError("geometric_grid: need 0 < lo < hi, points >= 2");
  std::vector<double> g(points);
  for (std::size_t k = 0; k < points; ++k)
    g[k] = lo * std::pow(hi / lo, static_cast<double>(k) / static_cast<double>(points - 1));
  g.back() = hi;
  return g;
}

inline std::vector<double> linear_grid(double lo, double hi, std::size_t points) {
  if (!(hi > lo) || points < 2) throw DomainError("linear_grid: need lo < hi, points >= 2");
  std::vector<double> g(points);
  for (std::size_t k = 0; k < points; ++k)
    g[k] = lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(points - 1);
  g.back() = hi;
  return g;
}

inline std::vector<double> default_kappa_grid() { return geometric_grid(0.25, 4.0, 13); }
inline std::vector<double> default_s_grid() { return linear_grid(-2.0, 0.0, 21); }

// Vertex of the parabola through three points, clamped to [x0, x2].
inline double parabola_vertex(double x0, double y0, double x1, double y1, double x2, double y2) {
  const double d1 = (y1 - y0) / (x1 - x0);
  const double d2 = (y2 - y1) / (x2 - x1);
  const double curv = (d2 - d1) / (x2 - x0);
  if (!(curv < 0.0)) return x1;
  const double vertex = 0.5 * (x0 + x1) - d1 / (2.0 * curv);
  return std::clamp(vertex, x0, x2);
}

// Grid argmax with quadratic refinement through the neighbouring points.
// Kappa grids are refined in ln kappa. Missing values are skipped.
inline std::optional<Argmax> refined_argmax(const std::vector<double>& grid,
                                            const std::vector<std::optional<double>>& values,
                                            SweepParam parameter) {
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < grid.size(); ++k)
    if (values[k] && (!best || *values[k] > *values[*best])) best = k;
  if (!best) return std::nullopt;
  Argmax a;
  a.grid_index = *best;
  a.grid_value = grid[*best];
  a.refined = a.grid_value;
  const std::size_t k = *best;
  if (k == 0 || k + 1 >= grid.size() || !values[k - 1] || !values[k + 1]) return a;
  auto coord = [&](double g) { return parameter == SweepParam::kappa ? std::log(g) : g; };
  const double x = parabola_vertex(coord(grid[k - 1]), *values[k - 1], coord(grid[k]), *values[k],
                                   coord(grid[k + 1]), *values[k + 1]);
  a.refined = parameter == SweepParam::kappa ? std::exp(x) : x;
  return a;
}

inline FlowParams sweep_params(const SweepSpec& spec, double value, int dims) {
  FlowParams p;
  p.dims = dims;
  if (spec.parameter == SweepParam::kappa) {
    p.kappa = value;
    p.S = spec.fixed;
  } else {
    p.S = value;
    p.kappa = spec.fixed;
  }
  return p;
}

inline SweepRow evaluate_point(const SnapshotPair& snap, const SweepSpec& spec, double value) {
  using clock = std::chrono::steady_clock;
  auto seconds = [](clock::time_point a) { return std::chrono::duration<double>(clock::now() - a).count(); };
  SweepRow row;
  row.param = value;
  const double n = static_cast<double>(snap.size());
  const WeightMatrix w = build_weight_matrix(snap, sweep_params(spec, value, snap.dims()));

  const bool want_bp = spec.wants(Method::bp) || spec.wants(Method::bp_sp) || spec.wants(Method::bp_sp4);
  if (want_bp) {
    try {
      auto t0 = clock::now();
      const BeliefState state = solve(w, spec.correction.bp);
      row.seconds_bp = seconds(t0);
      row.bp_residual = state.residual;
      row.ln_z_per_n[0] = state.log_z() / n;
      if (spec.wants(Method::bp_sp) || spec.wants(Method::bp_sp4)) {
        t0 = clock::now();
        CorrectionConfig cc = spec.correction;
        cc.exhaustive = false;
        cc.threads = 1;
        const CorrectedEstimate est = corrected_estimate(state, w, cc);
        row.seconds_sp = seconds(t0);
        row.ln_z_per_n[1] = est.ln_z_sp / n;
        row.ln_z_per_n[2] = est.ln_z_sp4 / n;
        row.ratio_g4 = est.ratio;
      }
      if (!spec.wants(Method::bp)) row.ln_z_per_n[0].reset();
      if (!spec.wants(Method::bp_sp)) row.ln_z_per_n[1].reset();
      if (!spec.wants(Method::bp_sp4)) row.ln_z_per_n[2].reset();
    } catch (const Error& e) {
      row.errors.push_back(std::string("bp: ") + e.what());
    }
  }
  if (spec.wants(Method::mcmc)) {
    try {
      const auto t0 = clock::now();
      McmcConfig mc = spec.mcmc;
      mc.threads = 1;
      const McmcResult r = estimate(w, mc);
      row.seconds_mcmc = seconds(t0);
      row.ln_z_per_n[3] = r.ln_z_mean / n;
      row.mcmc_stderr = r.ln_z_stderr / n;
    } catch (const Error& e) {
      row.errors.push_back(std::string("mcmc: ") + e.what());
    }
  }
  if (spec.wants(Method::exact)) {
    try {
      const auto t0 = clock::now();
      row.ln_z_per_n[4] = log_permanent(w) / n;
      row.seconds_exact = seconds(t0);
    } catch (const Error& e) {
      row.errors.push_back(std::string("exact: ") + e.what());
    }
  }
  return row;
}

// Grid points are evaluated independently (in parallel when threads > 1)
// and reported in grid order.
inline SweepResult run_sweep(const SnapshotPair& snap, const SweepSpec& spec) {
  spec.validate();
  snap.validate();
  SweepResult res;
  res.parameter = spec.parameter;
  res.rows.resize(spec.grid.size());
  parallel_for(spec.grid.size(), spec.threads,
               [&](std::size_t k) { res.rows[k] = evaluate_point(snap, spec, spec.grid[k]); });

  bool any = false;
  for (std::size_t m = 0; m < kMethodCount; ++m) {
    std::vector<std::optional<double>> col;
    for (const auto& r : res.rows) col.push_back(r.ln_z_per_n[m]);
    res.argmax[m] = refined_argmax(spec.grid, col, spec.parameter);
    any = any || res.argmax[m].has_value();
  }
  if (!any) throw ConvergenceError("run_sweep: every grid point failed", 0.0);
  return res;
}

}  // namespace flowmatch
