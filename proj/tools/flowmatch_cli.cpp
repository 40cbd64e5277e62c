// flowmatch: command-line front end for flow-parameter inference from two
// particle snapshots.
//
// Exit codes: 0 success, 1 usage or input error, 2 numerical failure.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowmatch/flowmatch.hpp"

namespace fm = flowmatch;
using json = nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  int threads = fm::default_threads();
  double tol = 1e-10;
  std::string format;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to `path`, or to stdout when path is empty or "-".
void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write '" + path + "'");
  out << text;
}

bool looks_like_snapshot(const std::string& text) { return text.rfind("frame", 0) == 0; }

fm::SnapshotPair load_snapshot(const std::string& path) {
  std::istringstream in(read_file(path));
  return fm::io::read_snapshot_csv(in, path);
}

struct ParamFlags {
  double kappa = 1.0;
  double S = 0.0;

  fm::FlowParams params(int dims) const {
    fm::FlowParams p;
    p.kappa = kappa;
    p.S = S;
    p.dims = dims;
    return p;
  }
};

// A matrix file, or a snapshot CSV turned into weights with the given parameters.
fm::WeightMatrix load_weights(const std::string& path, const ParamFlags& pf) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  if (looks_like_snapshot(text)) {
    const fm::SnapshotPair snap = fm::io::read_snapshot_csv(in, path);
    return fm::build_weight_matrix(snap, pf.params(snap.dims()));
  }
  return fm::io::read_matrix(in, path);
}

void add_param_flags(CLI::App* cmd, ParamFlags& pf, bool truth = false) {
  cmd->add_option("--kappa", pf.kappa, truth ? "True diffusivity" : "Diffusivity used to build weights from a snapshot")
      ->capture_default_str();
  cmd->add_option("--S", pf.S, truth ? "True velocity gradient" : "Velocity gradient used to build weights from a snapshot")
      ->capture_default_str();
}

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

// Flat key,value CSV of the scalar members of a JSON object.
std::string scalar_csv(const json& j) {
  std::ostringstream out;
  out << "key,value\n";
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it->is_number_float()) out << it.key() << ',' << fm::io::format_double(it->get<double>()) << '\n';
    else if (it->is_number() || it->is_boolean()) out << it.key() << ',' << it->dump() << '\n';
    else if (it->is_string()) out << it.key() << ',' << it->get<std::string>() << '\n';
  }
  return out.str();
}

std::string render(const json& j, const Globals& g) {
  if (g.format == "csv") return scalar_csv(j);
  return json_text(j);
}

fm::InitMode parse_init(const std::string& s) {
  if (s == "convexified") return fm::InitMode::convexified;
  if (s == "sinkhorn") return fm::InitMode::sinkhorn;
  throw UsageError("unknown init mode '" + s + "'");
}

fm::PruneRule parse_prune_rule(const std::string& s) {
  if (s == "near_one") return fm::PruneRule::near_one;
  if (s == "literal") return fm::PruneRule::literal;
  throw UsageError("unknown prune rule '" + s + "'");
}

fm::FourthOrderMode parse_g4_mode(const std::string& s) {
  if (s == "log_partition") return fm::FourthOrderMode::log_partition;
  if (s == "full_tensor") return fm::FourthOrderMode::full_tensor;
  throw UsageError("unknown G4 mode '" + s + "'");
}

fm::MoveKind parse_move(const std::string& s) {
  if (s == "transposition") return fm::MoveKind::transposition;
  if (s == "three-cycle" || s == "three_cycle") return fm::MoveKind::three_cycle;
  throw UsageError("unknown move '" + s + "'");
}

struct BpFlags {
  double damping = 0.45;
  std::size_t max_iters = 100000;
  std::string init = "convexified";

  fm::BpConfig config(const Globals& g) const {
    fm::BpConfig c;
    c.damping = damping;
    c.max_iters = max_iters;
    c.tol = g.tol;
    c.init = parse_init(init);
    return c;
  }
};

void add_bp_flags(CLI::App* cmd, BpFlags& f) {
  cmd->add_option("--damping", f.damping, "BP damping lambda in [0,1)")->capture_default_str();
  cmd->add_option("--max-iters", f.max_iters, "BP iteration cap")->capture_default_str();
  cmd->add_option("--init", f.init, "BP initialization: convexified | sinkhorn")->capture_default_str();
}

struct CorrectFlags {
  double eps = 0.01;
  std::string prune_rule = "near_one";
  std::string g4_mode = "log_partition";
  bool exhaustive = false;

  fm::CorrectionConfig config(const Globals& g, const fm::BpConfig& bp) const {
    fm::CorrectionConfig c;
    c.bp = bp;
    c.prune.eps = eps;
    c.prune.rule = parse_prune_rule(prune_rule);
    c.saddle.g4_mode = parse_g4_mode(g4_mode);
    c.exhaustive = exhaustive;
    c.threads = g.threads;
    return c;
  }
};

void add_correct_flags(CLI::App* cmd, CorrectFlags& f) {
  cmd->add_option("--eps", f.eps, "Polarization threshold")->capture_default_str();
  cmd->add_option("--prune-rule", f.prune_rule, "near_one (beta > 1-eps) | literal (beta > eps)")->capture_default_str();
  cmd->add_option("--g4-mode", f.g4_mode, "log_partition | full_tensor")->capture_default_str();
  cmd->add_flag("--exhaustive", f.exhaustive, "Also solve every orthant (2N <= 12)");
}

struct McmcFlags {
  std::size_t temps = 100;
  std::size_t sweeps = 50;
  std::size_t chains = 16;
  std::string move = "transposition";

  fm::McmcConfig config(const Globals& g) const {
    fm::McmcConfig c;
    c.n_temps = temps;
    c.sweeps_per_temp = sweeps;
    c.n_chains = chains;
    c.move = parse_move(move);
    c.seed = g.seed;
    c.threads = g.threads;
    return c;
  }
};

void add_mcmc_flags(CLI::App* cmd, McmcFlags& f) {
  cmd->add_option("--temps", f.temps, "Annealing temperatures")->capture_default_str();
  cmd->add_option("--sweeps", f.sweeps, "Sweeps per temperature")->capture_default_str();
  cmd->add_option("--chains", f.chains, "Independent chains")->capture_default_str();
  cmd->add_option("--move", f.move, "transposition | three-cycle")->capture_default_str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> parse_grid(const std::string& spec, fm::SweepParam param) {
  if (spec.empty()) return param == fm::SweepParam::kappa ? fm::default_kappa_grid() : fm::default_s_grid();
  // lo:hi:points, or a comma-separated list.
  if (spec.find(':') != std::string::npos) {
    double lo, hi;
    std::size_t pts;
    char c1, c2;
    std::istringstream in(spec);
    if (!(in >> lo >> c1 >> hi >> c2 >> pts) || c1 != ':' || c2 != ':')
      throw UsageError("grid must be lo:hi:points or a comma-separated list");
    return param == fm::SweepParam::kappa ? fm::geometric_grid(lo, hi, pts) : fm::linear_grid(lo, hi, pts);
  }
  std::vector<double> g;
  std::istringstream in(spec);
  std::string tok;
  while (std::getline(in, tok, ',')) g.push_back(std::stod(tok));
  return g;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow-parameter inference from two snapshots of indistinguishable particles"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (default FLOWMATCH_THREADS or 1)")->capture_default_str();
  app.add_option("--tol", g.tol, "Convergence tolerance")->capture_default_str();
  app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"csv", "json"}));

  // generate
  std::size_t gen_n = 10;
  int gen_dims = 1;
  double gen_box = 1.0;
  ParamFlags gen_pf;
  std::string gen_out, gen_truth;
  auto* generate = app.add_subcommand("generate", "Synthesize a snapshot pair");
  generate->add_option("-n", gen_n, "Particle count")->capture_default_str();
  generate->add_option("--dims", gen_dims, "Spatial dimension (1-3)")->capture_default_str();
  generate->add_option("--box", gen_box, "Box scale (mean spacing)")->capture_default_str();
  add_param_flags(generate, gen_pf, true);
  generate->add_option("-o,--out", gen_out, "Snapshot CSV (default stdout)");
  generate->add_option("--truth", gen_truth, "Truth JSON sidecar");

  // weights
  std::string in_path, out_path;
  ParamFlags pf;
  auto* weights = app.add_subcommand("weights", "Snapshot CSV to log-weight matrix file");
  weights->add_option("-i,--in", in_path, "Snapshot CSV")->required();
  weights->add_option("-o,--out", out_path, "Matrix file (default stdout)");
  add_param_flags(weights, pf);

  // bp
  BpFlags bpf;
  auto* bp = app.add_subcommand("bp", "Belief propagation fixed point");
  bp->add_option("-i,--in", in_path, "Matrix file or snapshot CSV")->required();
  bp->add_option("-o,--out", out_path, "BeliefState JSON (default stdout)");
  add_param_flags(bp, pf);
  add_bp_flags(bp, bpf);

  // correct
  std::string beliefs_path;
  CorrectFlags cf;
  auto* correct = app.add_subcommand("correct", "Loop-series saddle-point correction of a BP solution");
  correct->add_option("--beliefs", beliefs_path, "BeliefState JSON from `bp`")->required();
  correct->add_option("-i,--in", in_path, "Matrix file or snapshot CSV")->required();
  correct->add_option("-o,--out", out_path, "CorrectedEstimate JSON (default stdout)");
  add_param_flags(correct, pf);
  add_bp_flags(correct, bpf);
  add_correct_flags(correct, cf);

  // mcmc
  McmcFlags mf;
  auto* mcmc = app.add_subcommand("mcmc", "Annealed importance sampling estimate of ln Z");
  mcmc->add_option("-i,--in", in_path, "Matrix file or snapshot CSV")->required();
  mcmc->add_option("-o,--out", out_path, "Result JSON (default stdout)");
  add_param_flags(mcmc, pf);
  add_mcmc_flags(mcmc, mf);

  // exact
  bool with_marginals = false;
  auto* exact = app.add_subcommand("exact", "Exact ln per(w) by Ryser (n <= 24)");
  exact->add_option("-i,--in", in_path, "Matrix file or snapshot CSV")->required();
  exact->add_option("-o,--out", out_path, "Result JSON (default stdout)");
  exact->add_flag("--marginals", with_marginals, "Also output exact edge marginals (n <= 12)");
  add_param_flags(exact, pf);

  // match
  auto* match = app.add_subcommand("match", "Maximum-likelihood matching");
  match->add_option("-i,--in", in_path, "Snapshot CSV or matrix file")->required();
  match->add_option("-o,--out", out_path, "Result JSON (default stdout)");
  add_param_flags(match, pf);

  // sweep
  std::string sweep_param = "kappa", sweep_grid, sweep_methods = "bp,bp_sp,bp_sp4";
  double sweep_fixed = std::numeric_limits<double>::quiet_NaN();
  auto* sweep = app.add_subcommand("sweep", "ln Z / N over a parameter grid");
  sweep->add_option("-i,--in", in_path, "Snapshot CSV")->required();
  sweep->add_option("-o,--out", out_path, "Sweep CSV (default stdout)");
  sweep->add_option("--param", sweep_param, "kappa | S")->check(CLI::IsMember({"kappa", "S"}))->capture_default_str();
  sweep->add_option("--grid", sweep_grid, "lo:hi:points (geometric for kappa, linear for S) or a list");
  sweep->add_option("--fixed", sweep_fixed, "Value of the other parameter (default S=0 or kappa=1)");
  sweep->add_option("--methods", sweep_methods, "Comma list of bp,bp_sp,bp_sp4,mcmc,exact")->capture_default_str();
  add_bp_flags(sweep, bpf);
  add_correct_flags(sweep, cf);
  add_mcmc_flags(sweep, mf);

  // compare
  bool skip_mcmc = false;
  auto* compare = app.add_subcommand("compare", "Run every available estimator on one instance");
  compare->add_option("-i,--in", in_path, "Matrix file or snapshot CSV")->required();
  compare->add_option("-o,--out", out_path, "Table (default stdout)");
  compare->add_flag("--no-mcmc", skip_mcmc, "Skip the Monte Carlo estimate");
  add_param_flags(compare, pf);
  add_bp_flags(compare, bpf);
  add_correct_flags(compare, cf);
  add_mcmc_flags(compare, mf);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*generate) {
      const fm::FlowParams p = gen_pf.params(gen_dims);
      const fm::SnapshotPair snap = fm::generate_snapshots(gen_n, p, gen_box, g.seed);
      std::ostringstream csv;
      fm::io::write_snapshot_csv(csv, snap);
      emit(gen_out, csv.str());
      if (!gen_truth.empty()) emit(gen_truth, json_text(fm::io::truth_to_json(snap.truth)));
    } else if (*weights) {
      const fm::SnapshotPair snap = load_snapshot(in_path);
      std::ostringstream out;
      fm::io::write_matrix(out, fm::build_weight_matrix(snap, pf.params(snap.dims())));
      emit(out_path, out.str());
    } else if (*bp) {
      const fm::WeightMatrix w = load_weights(in_path, pf);
      const fm::BeliefState s = fm::solve(w, bpf.config(g));
      emit(out_path, render(fm::io::belief_to_json(s), g));
    } else if (*correct) {
      const fm::WeightMatrix w = load_weights(in_path, pf);
      const fm::BeliefState s = fm::io::belief_from_json(json::parse(read_file(beliefs_path)), beliefs_path);
      if (s.n() != w.n()) throw UsageError("beliefs and matrix differ in size");
      const fm::CorrectedEstimate e = fm::corrected_estimate(s, w, cf.config(g, bpf.config(g)));
      for (const auto& warn : e.warnings) std::cerr << "warning: " << warn << '\n';
      emit(out_path, render(fm::io::corrected_to_json(e), g));
    } else if (*mcmc) {
      const fm::WeightMatrix w = load_weights(in_path, pf);
      emit(out_path, render(fm::io::mcmc_to_json(fm::estimate(w, mf.config(g))), g));
    } else if (*exact) {
      const fm::WeightMatrix w = load_weights(in_path, pf);
      json j{{"n", w.n()}, {"ln_per", fm::log_permanent(w, g.threads)}};
      if (with_marginals && g.format != "csv") j["marginals"] = fm::io::matrix_to_json(fm::marginals_exact(w, g.threads));
      emit(out_path, render(j, g));
    } else if (*match) {
      const std::string text = read_file(in_path);
      json j;
      if (looks_like_snapshot(text)) {
        const fm::SnapshotPair snap = load_snapshot(in_path);
        const fm::Matching m = fm::max_weight_matching(fm::build_weight_matrix(snap, pf.params(snap.dims())));
        j = fm::io::matching_to_json(m);
        std::vector<double> dist;
        for (std::size_t i = 0; i < m.perm.size(); ++i) {
          double sq = 0.0;
          const auto xi = snap.x[i];
          const auto yj = snap.y[m.perm[i]];
          for (std::size_t a = 0; a < xi.size(); ++a) sq += (yj[a] - xi[a]) * (yj[a] - xi[a]);
          dist.push_back(std::sqrt(sq));
        }
        j["distances"] = dist;
      } else {
        std::istringstream in(text);
        j = fm::io::matching_to_json(fm::max_weight_matching(fm::io::read_matrix(in, in_path)));
      }
      emit(out_path, render(j, g));
    } else if (*sweep) {
      const fm::SnapshotPair snap = load_snapshot(in_path);
      fm::SweepSpec spec;
      spec.parameter = sweep_param == "kappa" ? fm::SweepParam::kappa : fm::SweepParam::S;
      spec.grid = parse_grid(sweep_grid, spec.parameter);
      spec.fixed = std::isnan(sweep_fixed) ? (spec.parameter == fm::SweepParam::kappa ? 0.0 : 1.0) : sweep_fixed;
      spec.methods.clear();
      for (const auto& m : split_list(sweep_methods)) spec.methods.push_back(fm::parse_method(m));
      spec.correction = cf.config(g, bpf.config(g));
      spec.mcmc = mf.config(g);
      spec.threads = g.threads;
      const fm::SweepResult r = fm::run_sweep(snap, spec);
      for (const auto& row : r.rows)
        for (const auto& err : row.errors) std::cerr << "warning: param " << row.param << ": " << err << '\n';
      if (g.format == "json") {
        emit(out_path, json_text(fm::io::sweep_to_json(r)));
      } else {
        std::ostringstream out;
        fm::io::write_sweep_csv(out, r);
        emit(out_path, out.str());
      }
    } else if (*compare) {
      const fm::WeightMatrix w = load_weights(in_path, pf);
      const std::size_t n = w.n();
      using clock = std::chrono::steady_clock;
      struct Line {
        std::string method;
        double ln_z;
        double stderr_;
        double seconds;
      };
      std::vector<Line> lines;
      json extra = json::object();
      auto t0 = clock::now();
      const fm::BeliefState s = fm::solve(w, bpf.config(g));
      lines.push_back({"bp", s.log_z(), 0.0, seconds_since(t0)});
      t0 = clock::now();
      const fm::CorrectedEstimate e = fm::corrected_estimate(s, w, cf.config(g, bpf.config(g)));
      const double t_sp = seconds_since(t0);
      lines.push_back({"bp_sp", e.ln_z_sp, 0.0, t_sp});
      lines.push_back({"bp_sp4", e.ln_z_sp4, 0.0, t_sp});
      extra["ratio_g4"] = e.ratio;
      if (!skip_mcmc && n >= 2) {
        t0 = clock::now();
        const fm::McmcResult r = fm::estimate(w, mf.config(g));
        lines.push_back({"mcmc", r.ln_z_mean, r.ln_z_stderr, seconds_since(t0)});
      }
      std::optional<double> exact_value;
      if (n <= fm::kMaxRyserSize) {
        t0 = clock::now();
        exact_value = fm::log_permanent(w, g.threads);
        lines.push_back({"exact", *exact_value, 0.0, seconds_since(t0)});
      }
      if (n <= 20) {
        const fm::NodeBoundReport rep = fm::node_bound_check(s.beta);
        extra["node_bound_checked"] = rep.checked;
        extra["node_bound_violations"] = rep.violations;
        extra["node_bound_worst_ratio"] = rep.worst_ratio;
      }
      if (n <= fm::kMaxLoopEnumerationSize) {
        const fm::LoopSeries ls = fm::loop_series_exact(s.beta);
        double worst = 0.0;
        for (const auto& t : ls.terms) worst = std::max(worst, std::abs(t.r));
        extra["loop_series_ln_z"] = s.log_z() + std::log(ls.z);
        extra["loop_max_abs_r"] = worst;
      }
      std::ostringstream out;
      if (g.format == "json") {
        json rows = json::array();
        for (const auto& l : lines) {
          json r{{"method", l.method}, {"ln_z", l.ln_z}, {"stderr", l.stderr_}, {"seconds", l.seconds}};
          if (exact_value) r["abs_error"] = std::abs(l.ln_z - *exact_value);
          rows.push_back(r);
        }
        out << json{{"n", n}, {"methods", rows}, {"diagnostics", extra}}.dump(2) << '\n';
      } else if (g.format == "csv") {
        out << "method,ln_z,stderr,abs_error,seconds\n";
        for (const auto& l : lines)
          out << l.method << ',' << fm::io::format_double(l.ln_z) << ',' << fm::io::format_double(l.stderr_) << ','
              << (exact_value ? fm::io::format_double(std::abs(l.ln_z - *exact_value)) : "") << ','
              << fm::io::format_double(l.seconds) << '\n';
      } else {
        out << "n = " << n << "\n";
        out << std::left << std::setw(10) << "method" << std::right << std::setw(22) << "ln Z" << std::setw(14)
            << "stderr" << std::setw(14) << "|err|" << std::setw(12) << "seconds" << '\n';
        for (const auto& l : lines) {
          out << std::left << std::setw(10) << l.method << std::right << std::setw(22) << std::setprecision(12)
              << l.ln_z << std::setw(14) << std::setprecision(4) << l.stderr_ << std::setw(14);
          if (exact_value) out << std::abs(l.ln_z - *exact_value);
          else out << "-";
          out << std::setw(12) << std::setprecision(4) << l.seconds << '\n';
        }
        for (auto it = extra.begin(); it != extra.end(); ++it) out << it.key() << " = " << it->dump() << '\n';
      }
      emit(out_path, out.str());
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const fm::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 1;
  } catch (const fm::DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const fm::SizeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const fm::Error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
