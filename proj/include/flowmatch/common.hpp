#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace flowmatch {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid argument values (non-finite inputs, bad parameters).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Problem size outside what an exact routine supports.
class SizeError : public Error {
 public:
  using Error::Error;
};

// An iterative method stopped without meeting its tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what + " (residual " + std::to_string(residual) + ")"), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

// Hessian factorization failed or produced a non-finite determinant.
class SingularityError : public Error {
 public:
  using Error::Error;
};

// No perfect matching with positive weight exists.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& field,
             const std::string& msg)
      : Error(source + ":" + std::to_string(line) + ": field '" + field + "': " + msg),
        line_(line), field_(field) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

// ---------------------------------------------------------------------------
// Numerics helpers

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// ln(1 + e^x) without overflow.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Range>
double log_sum_exp(const Range& values) {
  double m = kNegInf;
  for (double v : values) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

// Lower root of b(1-b) = x for 0 <= x <= 1/4, stable for tiny x.
inline double lower_branch_belief(double x) {
  x = std::min(x, 0.25);
  return 2.0 * x / (1.0 + std::sqrt(1.0 - 4.0 * x));
}

inline double log_factorial(std::size_t n) { return std::lgamma(static_cast<double>(n) + 1.0); }

// ---------------------------------------------------------------------------
// Threading

// Worker count from FLOWMATCH_THREADS, else 1.
inline int default_threads() {
  if (const char* env = std::getenv("FLOWMATCH_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 1;
}

// Runs fn(i) for i in [0, count) on up to `threads` workers. Items are
// statically strided over workers; callers write results into per-item slots
// so the output never depends on the worker count.
template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace flowmatch
