#pragma once

// File formats: snapshot CSV, truth JSON, log-weight matrix files, and JSON
// views of solver results. Numbers in text files use 17 significant digits.

#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowmatch/bp_solver.hpp"
#include "flowmatch/common.hpp"
#include "flowmatch/flow_model.hpp"
#include "flowmatch/learning.hpp"
#include "flowmatch/matcher.hpp"
#include "flowmatch/mcmc.hpp"
#include "flowmatch/saddle.hpp"

namespace flowmatch::io {

using json = nlohmann::json;

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& text, const std::string& source, std::size_t line,
                           const std::string& field) {
  const std::string t = trim(text);
  if (t.empty()) throw ParseError(source, line, field, "empty value");
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size()) throw ParseError(source, line, field, "not a number: '" + t + "'");
  return v;
}

inline long long parse_int(const std::string& text, const std::string& source, std::size_t line,
                           const std::string& field) {
  const std::string t = trim(text);
  if (t.empty()) throw ParseError(source, line, field, "empty value");
  char* end = nullptr;
  const long long v = std::strtoll(t.c_str(), &end, 10);
  if (end != t.c_str() + t.size()) throw ParseError(source, line, field, "not an integer: '" + t + "'");
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Snapshot CSV: header frame,id,x0[,x1,x2]; frame 0 holds x, frame 1 holds y.

inline void write_snapshot_csv(std::ostream& out, const SnapshotPair& snap) {
  out << "frame,id";
  for (int a = 0; a < snap.dims(); ++a) out << ",x" << a;
  out << '\n';
  const PointSet* frames[2] = {&snap.x, &snap.y};
  for (int f = 0; f < 2; ++f)
    for (std::size_t i = 0; i < frames[f]->size(); ++i) {
      out << f << ',' << i;
      for (double c : (*frames[f])[i]) out << ',' << format_double(c);
      out << '\n';
    }
}

inline SnapshotPair read_snapshot_csv(std::istream& in, const std::string& source = "<snapshot>") {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError(source, 1, "header", "empty file");
  const auto header = detail::split(detail::trim(line), ',');
  if (header.size() < 3 || header.size() > 5 || detail::trim(header[0]) != "frame" ||
      detail::trim(header[1]) != "id")
    throw ParseError(source, 1, "header", "expected frame,id,x0[,x1,x2]");
  const int dims = static_cast<int>(header.size()) - 2;
  for (int a = 0; a < dims; ++a)
    if (detail::trim(header[static_cast<std::size_t>(a) + 2]) != "x" + std::to_string(a))
      throw ParseError(source, 1, "header", "expected column x" + std::to_string(a));

  std::vector<std::vector<std::pair<long long, std::vector<double>>>> frames(2);
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split(line, ',');
    if (cells.size() != header.size())
      throw ParseError(source, line_no, "row", "expected " + std::to_string(header.size()) + " fields");
    const long long frame = detail::parse_int(cells[0], source, line_no, "frame");
    if (frame != 0 && frame != 1) throw ParseError(source, line_no, "frame", "must be 0 or 1");
    const long long id = detail::parse_int(cells[1], source, line_no, "id");
    std::vector<double> coords;
    for (int a = 0; a < dims; ++a) {
      const std::string field = "x" + std::to_string(a);
      const double v = detail::parse_double(cells[static_cast<std::size_t>(a) + 2], source, line_no, field);
      if (!std::isfinite(v)) throw ParseError(source, line_no, field, "non-finite coordinate");
      coords.push_back(v);
    }
    frames[static_cast<std::size_t>(frame)].emplace_back(id, std::move(coords));
  }
  std::vector<double> flat[2];
  for (int f = 0; f < 2; ++f) {
    auto& rows = frames[static_cast<std::size_t>(f)];
    std::vector<const std::vector<double>*> by_id(rows.size(), nullptr);
    for (const auto& [id, coords] : rows) {
      if (id < 0 || static_cast<std::size_t>(id) >= rows.size() || by_id[static_cast<std::size_t>(id)])
        throw ParseError(source, 0, "id", "ids of frame " + std::to_string(f) + " must be 0..N-1 without repeats");
      by_id[static_cast<std::size_t>(id)] = &coords;
    }
    for (const auto* c : by_id) flat[f].insert(flat[f].end(), c->begin(), c->end());
  }
  if (frames[0].empty()) throw ParseError(source, line_no, "frame", "no particles");
  if (frames[0].size() != frames[1].size())
    throw ParseError(source, line_no, "frame", "frames 0 and 1 differ in particle count");
  return SnapshotPair{PointSet(dims, std::move(flat[0])), PointSet(dims, std::move(flat[1])), {}};
}

// ---------------------------------------------------------------------------
// Truth sidecar JSON: {"S": ..., "kappa": ..., "dims": ..., "perm": [...]}.

inline json truth_to_json(const SnapshotTruth& truth) {
  json j = json::object();
  if (truth.params) {
    j["S"] = truth.params->S;
    j["kappa"] = truth.params->kappa;
    j["dims"] = truth.params->dims;
  }
  if (truth.perm) j["perm"] = *truth.perm;
  return j;
}

inline SnapshotTruth truth_from_json(const json& j, const std::string& source = "<truth>") {
  SnapshotTruth t;
  try {
    if (j.contains("S") || j.contains("kappa")) {
      FlowParams p;
      p.S = j.at("S").get<double>();
      p.kappa = j.at("kappa").get<double>();
      p.dims = j.value("dims", 1);
      t.params = p;
    }
    if (j.contains("perm")) t.perm = j.at("perm").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw ParseError(source, 0, "truth", e.what());
  }
  return t;
}

// ---------------------------------------------------------------------------
// Matrix file: first line n, then n rows of n log-weights.

inline void write_matrix(std::ostream& out, const WeightMatrix& w) {
  out << w.n() << '\n';
  for (std::size_t i = 0; i < w.n(); ++i) {
    for (std::size_t j = 0; j < w.n(); ++j) out << (j ? " " : "") << format_double(w.log_at(i, j));
    out << '\n';
  }
}

inline WeightMatrix read_matrix(std::istream& in, const std::string& source = "<matrix>") {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() {
    while (std::getline(in, line)) {
      ++line_no;
      if (!detail::trim(line).empty()) return true;
    }
    return false;
  };
  if (!next_line()) throw ParseError(source, 1, "n", "empty file");
  const long long n = detail::parse_int(line, source, line_no, "n");
  if (n < 1) throw ParseError(source, line_no, "n", "must be >= 1");
  Matrix m(n, n);
  for (long long i = 0; i < n; ++i) {
    if (!next_line()) throw ParseError(source, line_no + 1, "row " + std::to_string(i), "missing row");
    std::istringstream row(line);
    std::string tok;
    long long j = 0;
    while (row >> tok) {
      const std::string field = "entry (" + std::to_string(i) + "," + std::to_string(j) + ")";
      if (j >= n) throw ParseError(source, line_no, field, "too many entries");
      const double v = detail::parse_double(tok, source, line_no, field);
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
        throw ParseError(source, line_no, field, "log weight must be < +inf");
      m(i, j++) = v;
    }
    if (j != n) throw ParseError(source, line_no, "row " + std::to_string(i), "expected " + std::to_string(n) + " entries");
  }
  return WeightMatrix::from_log(std::move(m));
}

// ---------------------------------------------------------------------------
// JSON views

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline json belief_to_json(const BeliefState& s) {
  return json{{"f_bp", s.f_bp},
              {"beta", matrix_to_json(s.beta)},
              {"residual", s.residual},
              {"iterations", s.iterations},
              {"log_u", vector_to_json(s.mu_row)},
              {"log_v", vector_to_json(s.mu_col)},
              {"clamped", s.clamped}};
}

inline BeliefState belief_from_json(const json& j, const std::string& source = "<beliefs>") {
  BeliefState s;
  try {
    s.f_bp = j.at("f_bp").get<double>();
    const auto rows = j.at("beta").get<std::vector<std::vector<double>>>();
    const auto n = static_cast<Eigen::Index>(rows.size());
    s.beta.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (static_cast<Eigen::Index>(rows[i].size()) != n)
        throw ParseError(source, 0, "beta", "matrix must be square");
      for (Eigen::Index k = 0; k < n; ++k) s.beta(i, k) = rows[i][k];
    }
    s.residual = j.value("residual", 0.0);
    s.iterations = j.value("iterations", std::size_t{0});
    s.clamped = j.value("clamped", false);
    auto vec = [&](const char* key) {
      Vector v = Vector::Zero(n);
      if (j.contains(key)) {
        const auto raw = j.at(key).get<std::vector<double>>();
        if (static_cast<Eigen::Index>(raw.size()) != n) throw ParseError(source, 0, key, "length must be n");
        for (Eigen::Index i = 0; i < n; ++i) v(i) = raw[i];
      }
      return v;
    };
    s.mu_row = vec("log_u");
    s.mu_col = vec("log_v");
  } catch (const json::exception& e) {
    throw ParseError(source, 0, "beliefs", e.what());
  }
  return s;
}

inline json saddle_to_json(const SaddleSolution& s) {
  return json{{"signs", s.signs},     {"rho", vector_to_json(s.rho)},
              {"g_value", s.g_value}, {"logdet_hessian", s.logdet_hessian},
              {"g_sp", s.g_sp},       {"g4", s.g4},
              {"ratio", s.ratio},     {"residual", s.residual},
              {"iterations", s.iterations}, {"converged", s.converged}};
}

inline json corrected_to_json(const CorrectedEstimate& e) {
  json j{{"ln_z_bp", e.ln_z_bp}, {"ln_z_sp", e.ln_z_sp}, {"ln_z_sp4", e.ln_z_sp4},
         {"g_sp", e.g_sp},       {"g4", e.g4},           {"ratio", e.ratio},
         {"reduced_size", e.reduced_size}, {"committed", e.committed}, {"warnings", e.warnings}};
  j["dominant"] = e.dominant ? saddle_to_json(*e.dominant) : json(nullptr);
  if (e.orthants) {
    json contrib = json::array();
    for (double v : e.orthants->log_contribution) contrib.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    j["orthants"] = json{{"ln_z_sum", e.orthants->ln_z_sum},
                         {"ln_z_exhaustive", e.ln_z_bp + e.orthants->ln_z_sum},
                         {"log_gap_rest", e.orthants->log_gap_rest},
                         {"log_gap_all_minus", e.orthants->log_gap_all_minus},
                         {"all_plus_dominates", e.orthants->all_plus_dominates},
                         {"unbounded", e.orthants->unbounded},
                         {"log_contribution", contrib}};
  }
  return j;
}

inline json mcmc_to_json(const McmcResult& r) {
  return json{{"ln_z_mean", r.ln_z_mean},
              {"ln_z_stderr", r.ln_z_stderr},
              {"ess_estimate", r.ess_estimate},
              {"temperatures", r.temperatures},
              {"acceptance_rates", r.acceptance_rates},
              {"chain_log_weights", r.chain_log_weights}};
}

inline json matching_to_json(const Matching& m) {
  return json{{"perm", m.perm}, {"log_weight", m.log_weight}};
}

// ---------------------------------------------------------------------------
// Sweep CSV

inline void write_sweep_csv(std::ostream& out, const SweepResult& r) {
  out << "param,lnZ_bp,lnZ_sp,lnZ_sp4,lnZ_mcmc,lnZ_exact,ratio_g4,"
         "seconds_bp,seconds_sp,seconds_mcmc,seconds_exact\n";
  auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& row : r.rows) {
    out << format_double(row.param);
    for (const auto& v : row.ln_z_per_n) out << ',' << cell(v);
    out << ',' << (std::isnan(row.ratio_g4) ? std::string() : format_double(row.ratio_g4));
    out << ',' << format_double(row.seconds_bp) << ',' << format_double(row.seconds_sp) << ','
        << format_double(row.seconds_mcmc) << ',' << format_double(row.seconds_exact) << '\n';
  }
}

inline json sweep_to_json(const SweepResult& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json j{{"param", row.param}};
    for (std::size_t m = 0; m < kMethodCount; ++m)
      j[std::string("lnZ_") + kMethodNames[m]] = row.ln_z_per_n[m] ? json(*row.ln_z_per_n[m]) : json(nullptr);
    j["ratio_g4"] = std::isnan(row.ratio_g4) ? json(nullptr) : json(row.ratio_g4);
    j["bp_residual"] = std::isnan(row.bp_residual) ? json(nullptr) : json(row.bp_residual);
    j["seconds"] = json{{"bp", row.seconds_bp}, {"sp", row.seconds_sp},
                        {"mcmc", row.seconds_mcmc}, {"exact", row.seconds_exact}};
    j["errors"] = row.errors;
    rows.push_back(std::move(j));
  }
  json argmax = json::object();
  for (std::size_t m = 0; m < kMethodCount; ++m)
    if (r.argmax[m])
      argmax[kMethodNames[m]] = json{{"grid_index", r.argmax[m]->grid_index},
                                     {"grid_value", r.argmax[m]->grid_value},
                                     {"refined", r.argmax[m]->refined}};
  return json{{"parameter", r.parameter == SweepParam::kappa ? "kappa" : "S"}, {"rows", rows}, {"argmax", argmax}};
}

}  // namespace flowmatch::io
