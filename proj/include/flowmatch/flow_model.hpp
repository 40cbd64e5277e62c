#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "flowmatch/common.hpp"

namespace flowmatch {

// Linear shear flow with diffusion, observed over a unit time step:
//   dx/dt = S x + xi(t),  <xi(t1) xi(t2)> = kappa delta(t1 - t2)
// applied independently along each of `dims` axes. The mean flow is assumed
// subtracted upstream.
struct FlowParams {
  double S = 0.0;
  double kappa = 1.0;
  int dims = 1;

  void validate() const {
    if (!std::isfinite(S)) throw DomainError("FlowParams: S must be finite");
    if (!(kappa > 0.0) || !std::isfinite(kappa))
      throw DomainError("FlowParams: kappa must be finite and > 0");
    if (dims < 1 || dims > 3) throw DomainError("FlowParams: dims must be 1, 2 or 3");
  }
};

// Per-axis displacement variance after one time step, kappa (e^{2S} - 1) / (2S).
// Uses the Taylor series of (e^{2S} - 1)/(2S) below |S| = 1e-6.
inline double transition_variance(double S, double kappa) {
  double growth;
  if (std::abs(S) < 1e-6) {
    growth = 1.0 + S * (1.0 + S * (2.0 / 3.0 + S / 3.0));
  } else {
    growth = std::expm1(2.0 * S) / (2.0 * S);
  }
  return kappa * growth;
}

inline double transition_variance(const FlowParams& p) { return transition_variance(p.S, p.kappa); }

struct Weight {
  double value;
  double log_value;
};

// Gaussian transition density of moving from x to y in one step. The
// normalization is the full propagator's sqrt(2 pi sigma^2) per axis, so the
// weight carries the correct kappa dependence for parameter learning.
inline Weight pairwise_weight(std::span<const double> x, std::span<const double> y,
                              const FlowParams& params) {
  if (x.size() != y.size()) throw DomainError("pairwise_weight: dimension mismatch");
  params.validate();
  const double var = transition_variance(params);
  const double drift = std::exp(params.S);
  const double log_norm = -0.5 * std::log(2.0 * std::numbers::pi * var);
  double log_w = 0.0;
  for (std::size_t a = 0; a < x.size(); ++a) {
    if (!std::isfinite(x[a]) || !std::isfinite(y[a]))
      throw DomainError("pairwise_weight: non-finite coordinate");
    const double d = y[a] - drift * x[a];
    log_w += log_norm - d * d / (2.0 * var);
  }
  return {std::exp(log_w), log_w};
}

inline Weight pairwise_weight(double x, double y, const FlowParams& params) {
  return pairwise_weight(std::span<const double>(&x, 1), std::span<const double>(&y, 1), params);
}

// Positions are stored flat, `dims` coordinates per particle.
class PointSet {
 public:
  PointSet() = default;
  PointSet(int dims, std::vector<double> coords) : dims_(dims), coords_(std::move(coords)) {
    if (dims_ < 1) throw DomainError("PointSet: dims must be >= 1");
    if (coords_.size() % static_cast<std::size_t>(dims_) != 0)
      throw DomainError("PointSet: coordinate count not a multiple of dims");
  }

  std::size_t size() const { return coords_.size() / static_cast<std::size_t>(dims_); }
  int dims() const { return dims_; }
  std::span<const double> operator[](std::size_t i) const {
    return {coords_.data() + i * static_cast<std::size_t>(dims_), static_cast<std::size_t>(dims_)};
  }
  std::span<double> operator[](std::size_t i) {
    return {coords_.data() + i * static_cast<std::size_t>(dims_), static_cast<std::size_t>(dims_)};
  }
  const std::vector<double>& coords() const { return coords_; }

  bool operator==(const PointSet&) const = default;

 private:
  int dims_ = 1;
  std::vector<double> coords_;
};

struct SnapshotTruth {
  std::optional<FlowParams> params;
  // perm[i] is the index in the second frame of the image of particle i.
  std::optional<std::vector<std::size_t>> perm;
};

struct SnapshotPair {
  PointSet x;
  PointSet y;
  SnapshotTruth truth;

  std::size_t size() const { return x.size(); }
  int dims() const { return x.dims(); }

  void validate() const {
    if (x.size() == 0) throw DomainError("SnapshotPair: empty frame");
    if (x.size() != y.size()) throw DomainError("SnapshotPair: frames differ in particle count");
    if (x.dims() != y.dims()) throw DomainError("SnapshotPair: frames differ in dimension");
    for (double v : x.coords())
      if (!std::isfinite(v)) throw DomainError("SnapshotPair: non-finite coordinate");
    for (double v : y.coords())
      if (!std::isfinite(v)) throw DomainError("SnapshotPair: non-finite coordinate");
  }
};

// N x N matrix of matching weights p_i^j, held in both linear and log form.
// The log form is authoritative; linear entries may underflow to zero.
class WeightMatrix {
 public:
  WeightMatrix() = default;

  static WeightMatrix from_log(Matrix log_entries) {
    if (log_entries.rows() != log_entries.cols())
      throw DomainError("WeightMatrix: matrix must be square");
    for (Eigen::Index k = 0; k < log_entries.size(); ++k) {
      const double v = log_entries.data()[k];
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
        throw DomainError("WeightMatrix: log weight must be < +inf and not NaN");
    }
    WeightMatrix w;
    // std::exp, not Eigen's vectorized exp: the latter clamps large negative
    // arguments and returns a denormal instead of 0.
    w.entries_ = log_entries.unaryExpr([](double v) { return std::exp(v); });
    w.log_entries_ = std::move(log_entries);
    return w;
  }

  static WeightMatrix from_linear(const Matrix& entries) {
    Matrix logs(entries.rows(), entries.cols());
    for (Eigen::Index i = 0; i < entries.rows(); ++i)
      for (Eigen::Index j = 0; j < entries.cols(); ++j) {
        if (!(entries(i, j) >= 0.0)) throw DomainError("WeightMatrix: weights must be >= 0");
        logs(i, j) = std::log(entries(i, j));
      }
    return from_log(std::move(logs));
  }

  std::size_t n() const { return static_cast<std::size_t>(log_entries_.rows()); }
  const Matrix& entries() const { return entries_; }
  const Matrix& log_entries() const { return log_entries_; }
  double operator()(std::size_t i, std::size_t j) const {
    return entries_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  double log_at(std::size_t i, std::size_t j) const {
    return log_entries_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

  // True when every log weight is finite (strictly positive linear weight).
  bool strictly_positive() const { return log_entries_.allFinite(); }

 private:
  Matrix entries_;
  Matrix log_entries_;
};

inline WeightMatrix build_weight_matrix(const SnapshotPair& snap, const FlowParams& params) {
  params.validate();
  snap.validate();
  if (snap.dims() != params.dims) throw DomainError("build_weight_matrix: dimension mismatch");
  const auto n = static_cast<Eigen::Index>(snap.size());
  const double var = transition_variance(params);
  const double drift = std::exp(params.S);
  const double log_norm = -0.5 * params.dims * std::log(2.0 * std::numbers::pi * var);
  Matrix logs(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto xi = snap.x[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto yj = snap.y[static_cast<std::size_t>(j)];
      double sq = 0.0;
      for (int a = 0; a < params.dims; ++a) {
        const double d = yj[a] - drift * xi[a];
        sq += d * d;
      }
      logs(i, j) = log_norm - sq / (2.0 * var);
    }
  }
  return WeightMatrix::from_log(std::move(logs));
}

// Draws x uniformly in [0, box_scale * n^{1/d})^d, advects and diffuses each
// particle for one step, then shuffles the second frame. Deterministic in seed.
inline SnapshotPair generate_snapshots(std::size_t n, const FlowParams& params, double box_scale,
                                       std::uint64_t seed) {
  params.validate();
  if (n < 1) throw DomainError("generate_snapshots: n must be >= 1");
  if (!(box_scale > 0.0)) throw DomainError("generate_snapshots: box_scale must be > 0");

  std::mt19937_64 rng(seed);
  const int d = params.dims;
  const double side = box_scale * std::pow(static_cast<double>(n), 1.0 / d);
  std::uniform_real_distribution<double> uniform(0.0, side);
  std::normal_distribution<double> noise(0.0, std::sqrt(transition_variance(params)));
  const double drift = std::exp(params.S);

  std::vector<double> xs(n * static_cast<std::size_t>(d));
  for (double& v : xs) v = uniform(rng);
  std::vector<double> images(xs.size());
  for (std::size_t k = 0; k < xs.size(); ++k) images[k] = drift * xs[k] + noise(rng);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  // Slot j of the second frame holds the image of particle order[j].
  std::vector<double> ys(xs.size());
  std::vector<std::size_t> perm(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    for (int a = 0; a < d; ++a) ys[j * d + a] = images[src * d + a];
    perm[src] = j;
  }

  SnapshotPair snap{PointSet(d, std::move(xs)), PointSet(d, std::move(ys)), {}};
  snap.truth.params = params;
  snap.truth.perm = std::move(perm);
  return snap;
}

}  // namespace flowmatch
