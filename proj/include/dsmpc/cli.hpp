#pragma once

// Pipeline commands behind the `dsmpc` executable: synth, prs, step,
// montecarlo, compare and bound. Each returns a process exit code.

#include <dsmpc/io.hpp>

#include <cstdlib>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

namespace dsmpc::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kInfeasible = 2, kSolverFailure = 3 };

/// Runs `body`, mapping library errors to exit codes and messages on `err`.
inline int guarded(const std::function<int()>& body, std::ostream& err = std::cerr) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

/// DSMPC_SEED, when set, overrides the seed given on the command line.
inline std::uint64_t effective_seed(std::uint64_t flag) {
  const char* env = std::getenv("DSMPC_SEED");
  if (env == nullptr || *env == '\0') return flag;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::kParse, std::string("DSMPC_SEED: not an unsigned integer: ") + env);
  }
}

inline Vector parse_vector(const std::string& text, int expected, const std::string& what) {
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      vals.push_back(std::stod(tok, &used));
      if (tok.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw Error(ErrorKind::kParse, what + ": cannot parse '" + tok + "'");
    }
  }
  if (static_cast<int>(vals.size()) != expected) {
    throw Error(ErrorKind::kDimension,
                what + ": expected " + std::to_string(expected) + " comma-separated values");
  }
  return Eigen::Map<Vector>(vals.data(), expected);
}

struct Loaded {
  std::string config_path;
  std::string config_text;
  SystemGraph graph;
};

inline Loaded load_config(const std::string& path) {
  std::string text = io::read_text(path);
  SystemGraph g = load_system(text);
  return {path, std::move(text), std::move(g)};
}

inline GainSet load_gains(const SystemGraph& g, const std::string& path) {
  return io::gains_from_json(g, io::parse_json(io::read_text(path), path));
}

inline io::RunManifest manifest_for(const Loaded& cfg, bool timestamps) {
  io::RunManifest m = io::make_manifest(cfg.config_path, cfg.config_text);
  if (timestamps) m.timestamp = io::utc_timestamp();
  return m;
}

inline void emit(const io::Json& j, const std::string& out) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    io::write_text(out, text);
  }
}

inline int horizon_for(const SystemGraph& g, std::optional<int> flag) {
  if (flag) return *flag;
  return g.scenario().horizon.value_or(15);
}

inline Vector state_for(const SystemGraph& g, const std::string& flag, const std::string& what) {
  if (!flag.empty()) return parse_vector(flag, g.n(), what);
  if (!g.scenario().x0) {
    throw Error(ErrorKind::kParse, what + ": not given and the config has no scenario.x0");
  }
  return *g.scenario().x0;
}

inline QuantileMode quantile_for(const SystemGraph& g, const std::string& flag) {
  return flag.empty() ? default_quantile_mode(g) : io::quantile_mode_from(flag);
}

/// Tightened sets from a PRS report when given, otherwise computed from the gains.
inline PrsSpec prs_for(const SystemGraph& g, const GainSet& gains, const std::string& prs_path,
                       const std::string& quantile) {
  if (!prs_path.empty()) return io::prs_from_json(g, io::parse_json(io::read_text(prs_path), prs_path));
  return build_prs_spec(g, error_covariance_for(g, gains), gains, quantile_for(g, quantile));
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config;
  std::string mode = "distributed";
  std::string out;
  bool timestamps = false;
};

inline int cmd_synth(const SynthArgs& a) {
  const Loaded cfg = load_config(a.config);
  GainSet gains;
  if (a.mode == "distributed") {
    gains = synth_distributed(cfg.graph);
  } else if (a.mode == "central") {
    gains = central_gains(cfg.graph);
  } else {
    throw Error(ErrorKind::kParse, "synth: unknown mode '" + a.mode + "'");
  }
  io::RunManifest m = manifest_for(cfg, a.timestamps);
  m.gains_provenance = to_string(gains.provenance);
  emit(io::gains_to_json(cfg.graph, gains, m), a.out);
  std::cerr << "synth: " << a.mode << " gains, rho(A+BK) = " << gains.rho_feedback
            << ", rho(A-LC) = " << gains.rho_observer << '\n';
  return kOk;
}

struct PrsArgs {
  std::string config;
  std::string gains;
  std::string compare_gains;
  std::string quantile;
  std::string out;
  bool timestamps = false;
};

inline int cmd_prs(const PrsArgs& a) {
  const Loaded cfg = load_config(a.config);
  const SystemGraph& g = cfg.graph;
  const GainSet gains = load_gains(g, a.gains);
  const QuantileMode mode = quantile_for(g, a.quantile);
  const Matrix sigma = error_covariance_for(g, gains);
  const PrsSpec spec = build_prs_spec(g, sigma, gains, mode);
  std::optional<io::VolumeComparison> cmp;
  if (!a.compare_gains.empty()) {
    const GainSet other = load_gains(g, a.compare_gains);
    const PrsSpec other_spec = build_prs_spec(g, error_covariance_for(g, other), other, mode);
    cmp = io::VolumeComparison{to_string(other.provenance), constrained_box_volume(g, other_spec),
                               volume_reduction(g, spec, other_spec)};
    std::cerr << "prs: volume reduction versus " << cmp->other_provenance << " gains = "
              << 100.0 * cmp->reduction << "%\n";
  }
  io::RunManifest m = manifest_for(cfg, a.timestamps);
  m.gains_provenance = to_string(gains.provenance);
  m.quantile_mode = dsmpc::to_string(mode);
  emit(io::prs_to_json(g, spec, sigma, cmp, m), a.out);
  return kOk;
}

struct StepArgs {
  std::string config;
  std::string gains;
  std::string prs;
  std::string quantile;
  std::string x_hat;
  std::optional<int> horizon;
  std::string solver = "admm";
  std::string out;
  bool timestamps = false;
};

inline sim::SolverKind solver_from(const std::string& s) {
  if (s == "admm") return sim::SolverKind::kAdmm;
  if (s == "central") return sim::SolverKind::kCentral;
  throw Error(ErrorKind::kParse, "unknown solver '" + s + "'");
}

inline int cmd_step(const StepArgs& a) {
  const Loaded cfg = load_config(a.config);
  const SystemGraph& g = cfg.graph;
  const GainSet gains = load_gains(g, a.gains);
  const PrsSpec spec = prs_for(g, gains, a.prs, a.quantile);
  const mpc::MpcProblem problem(g, gains, mpc::make_config(spec, gains, horizon_for(g, a.horizon)));
  const Vector x_hat = state_for(g, a.x_hat, "--x-hat");
  const sim::SolverKind solver = solver_from(a.solver);
  mpc::MpcSolution sol = solver == sim::SolverKind::kCentral ? problem.solve_central(x_hat)
                                                             : problem.solve_admm(x_hat, nullptr);
  Vector u = Vector::Zero(g.m());
  if (sol.ok()) u = mpc::control_input(g, gains, sol.V.col(0), x_hat, x_hat);
  io::RunManifest m = manifest_for(cfg, a.timestamps);
  m.gains_provenance = to_string(gains.provenance);
  m.solver = sim::to_string(solver);
  emit(io::solution_to_json(sol, u, m), a.out);
  if (sol.status == mpc::MpcStatus::kInfeasible) {
    std::cerr << "step: MPC problem infeasible at the given state\n";
    return kInfeasible;
  }
  if (sol.status == mpc::MpcStatus::kMaxIterations) {
    std::cerr << "step: ADMM reached the iteration limit\n";
    return kSolverFailure;
  }
  return kOk;
}

struct MonteCarloArgs {
  std::string config;
  std::string gains;
  std::string prs;
  std::string quantile;
  std::string x0;
  std::optional<int> horizon;
  int runs = 2000;
  int steps = 10;
  std::uint64_t seed = 1;
  std::string solver = "admm";
  int threads = 0;  ///< 0: hardware concurrency
  std::string out = "stats.json";
  std::string traj;
  bool timestamps = false;
};

inline int cmd_montecarlo(const MonteCarloArgs& a) {
  const Loaded cfg = load_config(a.config);
  const SystemGraph& g = cfg.graph;
  const GainSet gains = load_gains(g, a.gains);
  const PrsSpec spec = prs_for(g, gains, a.prs, a.quantile);
  const mpc::MpcProblem problem(g, gains, mpc::make_config(spec, gains, horizon_for(g, a.horizon)));
  sim::McOptions o;
  o.runs = a.runs;
  o.steps = a.steps;
  o.seed = effective_seed(a.seed);
  o.threads = a.threads > 0 ? a.threads
                            : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  o.sim.solver = solver_from(a.solver);
  std::vector<sim::RunRecord> records;
  const sim::McStats stats =
      sim::monte_carlo(problem, state_for(g, a.x0, "--x0"), o, a.traj.empty() ? nullptr : &records);
  io::RunManifest m = manifest_for(cfg, a.timestamps);
  m.gains_provenance = to_string(gains.provenance);
  m.quantile_mode = dsmpc::to_string(spec.mode);
  m.seed = o.seed;
  m.solver = sim::to_string(o.sim.solver);
  emit(io::stats_to_json(stats, m), a.out);
  if (!a.traj.empty()) io::write_text(a.traj, io::trajectories_csv(g, records));
  std::cerr << "montecarlo: av[J*] = " << stats.av_J << ", C_vio = " << stats.c_vio
            << ", min p_hat = " << stats.min_p_hat() << '\n';
  if (stats.solver_failures > 0) {
    std::cerr << "montecarlo: warning: " << stats.solver_failures
              << " steps hit the ADMM iteration limit\n";
  }
  return kOk;
}

struct CompareArgs {
  std::string a;
  std::string b;
  std::string out;
};

struct CompareRow {
  std::string metric;
  double a = 0.0;
  double b = 0.0;
  double delta() const { return b - a; }
};

inline std::vector<CompareRow> compare_rows(const sim::McStats& a, const sim::McStats& b) {
  std::vector<CompareRow> rows = {
      {"av[J*]", a.av_J, b.av_J},
      {"C_vio", static_cast<double>(a.c_vio), static_cast<double>(b.c_vio)},
      {"min p_hat", a.min_p_hat(), b.min_p_hat()},
      {"mean p_hat", a.mean_p_hat(), b.mean_p_hat()},
      {"mode1 fraction", a.mode1_fraction, b.mode1_fraction},
      {"av stage cost", a.av_stage_cost, b.av_stage_cost},
  };
  const std::size_t steps = std::min(a.p_hat.empty() ? 0 : a.p_hat[0].size(),
                                     b.p_hat.empty() ? 0 : b.p_hat[0].size());
  const std::size_t subs = std::min(a.p_hat.size(), b.p_hat.size());
  for (std::size_t i = 0; i < subs; ++i)
    for (std::size_t k = 0; k < steps; ++k)
      rows.push_back({"p_hat_" + std::to_string(i + 1) + "(" + std::to_string(k + 1) + ")",
                      a.p_hat[i][k], b.p_hat[i][k]});
  return rows;
}

inline int cmd_compare(const CompareArgs& args) {
  const io::Json ja = io::parse_json(io::read_text(args.a), args.a);
  const io::Json jb = io::parse_json(io::read_text(args.b), args.b);
  const auto label = [](const io::Json& j, const std::string& fallback) {
    if (j.contains("manifest") && j["manifest"].contains("gains_provenance")) {
      return j["manifest"]["gains_provenance"].get<std::string>();
    }
    return fallback;
  };
  const std::string la = label(ja, "A");
  const std::string lb = label(jb, "B");
  const std::vector<CompareRow> rows = compare_rows(io::stats_from_json(ja), io::stats_from_json(jb));
  std::cout << std::left << std::setw(16) << "metric" << std::right << std::setw(14) << la
            << std::setw(14) << lb << std::setw(14) << "delta" << '\n';
  io::Json out = io::Json::array();
  for (const CompareRow& r : rows) {
    std::cout << std::left << std::setw(16) << r.metric << std::right << std::setprecision(6)
              << std::setw(14) << r.a << std::setw(14) << r.b << std::setw(14) << r.delta()
              << '\n';
    out.push_back({{"metric", r.metric}, {la == lb ? "a" : la, r.a}, {la == lb ? "b" : lb, r.b},
                   {"delta", r.delta()}});
  }
  if (!args.out.empty()) emit(out, args.out);
  return kOk;
}

struct BoundArgs {
  std::string config;
  std::string gains;
  std::string prs;
  std::string quantile;
  std::optional<int> horizon;
  int samples = 10000;
  std::uint64_t seed = 1;
  std::optional<double> half_width;
  std::string out;
  bool timestamps = false;
};

inline int cmd_bound(const BoundArgs& a) {
  const Loaded cfg = load_config(a.config);
  const SystemGraph& g = cfg.graph;
  const GainSet gains = load_gains(g, a.gains);
  const PrsSpec spec = prs_for(g, gains, a.prs, a.quantile);
  const mpc::MpcProblem problem(g, gains, mpc::make_config(spec, gains, horizon_for(g, a.horizon)));
  double hw = 1.0;
  if (a.half_width) {
    hw = *a.half_width;
  } else if (g.scenario().x0 && !g.scenario().x0->isZero(0.0)) {
    hw = g.scenario().x0->cwiseAbs().maxCoeff();
  }
  const Vector half = Vector::Constant(g.n(), hw);
  const std::uint64_t seed = effective_seed(a.seed);
  const sim::LipschitzEstimate lip = sim::estimate_lipschitz(problem, half, a.samples, seed);
  const sim::CostBound b = sim::cost_bound(build_augmented_dynamics(g, gains), lip.beta_hat);
  io::RunManifest m = manifest_for(cfg, a.timestamps);
  m.gains_provenance = to_string(gains.provenance);
  m.quantile_mode = dsmpc::to_string(spec.mode);
  m.seed = seed;
  emit(io::bound_to_json(b, lip, half, m), a.out);
  return kOk;
}

}  // namespace dsmpc::cli
