#pragma once

// Annealed importance sampling over permutations. Each chain starts from an
// exact uniform draw (t = 0, Z_0 = N!) and is annealed through
// pi(sigma) ~ exp(t E(sigma)), E(sigma) = sum_i ln p_{i, sigma(i)}, with
// Metropolis moves at every rung. The log importance weight of a chain is
// sum_k (t_k - t_{k-1}) E(sigma_{k-1}).

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "flowmatch/common.hpp"
#include "flowmatch/flow_model.hpp"

namespace flowmatch {

enum class MoveKind { transposition, three_cycle };

struct McmcConfig {
  std::size_t n_temps = 100;
  std::size_t sweeps_per_temp = 50;
  std::size_t n_chains = 16;
  std::uint64_t seed = 0;
  MoveKind move = MoveKind::transposition;
  double t_min = 1e-4;  // first nonzero inverse temperature of the geometric ladder
  int threads = 1;

  void validate() const {
    if (n_temps < 1 || sweeps_per_temp < 1 || n_chains < 1)
      throw DomainError("McmcConfig: counts must be >= 1");
    if (!(t_min > 0.0 && t_min <= 1.0)) throw DomainError("McmcConfig: t_min must be in (0,1]");
  }
};

struct McmcResult {
  double ln_z_mean = 0.0;
  double ln_z_stderr = 0.0;
  std::vector<double> temperatures;      // t_0 = 0, ..., t_K = 1
  std::vector<double> acceptance_rates;  // one per temperature
  std::vector<double> chain_log_weights;
  double ess_estimate = 0.0;
};

// t_0 = 0 followed by n_temps values geometric from t_min to 1.
inline std::vector<double> annealing_ladder(std::size_t n_temps, double t_min) {
  std::vector<double> t{0.0};
  for (std::size_t k = 0; k < n_temps; ++k) {
    const double frac = n_temps == 1 ? 1.0 : static_cast<double>(k) / static_cast<double>(n_temps - 1);
    t.push_back(k + 1 == n_temps ? 1.0 : t_min * std::pow(1.0 / t_min, frac));
  }
  return t;
}

namespace detail {

struct ChainOutcome {
  double log_weight = 0.0;
  std::vector<std::uint64_t> accepted;
  std::vector<std::uint64_t> proposed;
};

inline ChainOutcome run_chain(const Matrix& lw, const std::vector<double>& ladder, const McmcConfig& cfg,
                              std::size_t chain) {
  const auto n = static_cast<std::size_t>(lw.rows());
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(chain), static_cast<std::uint32_t>(chain >> 32)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  double energy = 0.0;
  for (std::size_t i = 0; i < n; ++i) energy += lw(i, perm[i]);

  ChainOutcome out;
  out.accepted.assign(ladder.size(), 0);
  out.proposed.assign(ladder.size(), 0);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool cycles = cfg.move == MoveKind::three_cycle && n >= 3;

  for (std::size_t k = 0; k < ladder.size(); ++k) {
    const double t = ladder[k];
    if (k > 0) out.log_weight += (t - ladder[k - 1]) * energy;
    for (std::size_t sweep = 0; sweep < cfg.sweeps_per_temp; ++sweep)
      for (std::size_t step = 0; step < n; ++step) {
        std::size_t a = pick(rng), b = pick(rng);
        while (b == a) b = pick(rng);
        double delta;
        std::size_t c = 0;
        if (cycles) {
          c = pick(rng);
          while (c == a || c == b) c = pick(rng);
          // a takes b's column, b takes c's, c takes a's.
          delta = lw(a, perm[b]) + lw(b, perm[c]) + lw(c, perm[a]) - lw(a, perm[a]) - lw(b, perm[b]) -
                  lw(c, perm[c]);
        } else {
          delta = lw(a, perm[b]) + lw(b, perm[a]) - lw(a, perm[a]) - lw(b, perm[b]);
        }
        ++out.proposed[k];
        bool accept;
        if (t == 0.0) accept = true;
        else if (std::isnan(delta)) accept = false;
        else accept = delta >= 0.0 || unit(rng) < std::exp(t * delta);
        if (!accept) continue;
        ++out.accepted[k];
        if (cycles) {
          const std::size_t pa = perm[a];
          perm[a] = perm[b];
          perm[b] = perm[c];
          perm[c] = pa;
        } else {
          std::swap(perm[a], perm[b]);
        }
        if (std::isfinite(energy) && std::isfinite(delta)) {
          energy += delta;
        } else {
          energy = 0.0;
          for (std::size_t i = 0; i < n; ++i) energy += lw(i, perm[i]);
        }
      }
  }
  return out;
}

}  // namespace detail

inline McmcResult estimate(const WeightMatrix& w, const McmcConfig& cfg = {}) {
  cfg.validate();
  const std::size_t n = w.n();
  if (n < 2) throw DomainError("mcmc estimate: n must be >= 2");
  const Matrix& lw = w.log_entries();
  for (Eigen::Index i = 0; i < lw.rows(); ++i) {
    if (!std::isfinite(lw.row(i).maxCoeff())) throw InfeasibleError("mcmc: row with no positive weight");
    if (!std::isfinite(lw.col(i).maxCoeff())) throw InfeasibleError("mcmc: column with no positive weight");
  }

  McmcResult res;
  res.temperatures = annealing_ladder(cfg.n_temps, cfg.t_min);
  std::vector<detail::ChainOutcome> chains(cfg.n_chains);
  parallel_for(cfg.n_chains, cfg.threads,
               [&](std::size_t c) { chains[c] = detail::run_chain(lw, res.temperatures, cfg, c); });

  std::vector<std::uint64_t> acc(res.temperatures.size(), 0), prop(res.temperatures.size(), 0);
  for (const auto& ch : chains) {
    res.chain_log_weights.push_back(ch.log_weight);
    for (std::size_t k = 0; k < acc.size(); ++k) {
      acc[k] += ch.accepted[k];
      prop[k] += ch.proposed[k];
    }
  }
  for (std::size_t k = 0; k < acc.size(); ++k)
    res.acceptance_rates.push_back(prop[k] ? static_cast<double>(acc[k]) / static_cast<double>(prop[k]) : 0.0);

  // Normalized weights relative to the largest chain weight.
  const double top = *std::max_element(res.chain_log_weights.begin(), res.chain_log_weights.end());
  if (!std::isfinite(top)) throw InfeasibleError("mcmc: every chain ended with zero weight");
  const auto chains_d = static_cast<double>(cfg.n_chains);
  double sum = 0.0, sum_sq = 0.0;
  for (double lwc : res.chain_log_weights) {
    const double r = std::exp(lwc - top);
    sum += r;
    sum_sq += r * r;
  }
  const double mean = sum / chains_d;
  res.ln_z_mean = log_factorial(n) + top + std::log(mean);
  res.ess_estimate = sum * sum / sum_sq;
  if (cfg.n_chains > 1) {
    const double var = std::max(0.0, (sum_sq - chains_d * mean * mean) / (chains_d - 1.0));
    res.ln_z_stderr = std::sqrt(var / chains_d) / mean;
  }
  return res;
}

}  // namespace flowmatch
