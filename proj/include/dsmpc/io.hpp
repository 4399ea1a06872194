#pragma once

// JSON and CSV artifacts: gains files, PRS reports, MPC solutions,
// Monte-Carlo statistics and the run manifest embedded in each of them.

#include <dsmpc/mpc.hpp>
#include <dsmpc/sim.hpp>
#include <dsmpc/synthesis.hpp>
#include <dsmpc/uncertainty.hpp>

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace dsmpc::io {

using Json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kParse, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kParse, "cannot write '" + path + "'");
  out << text;
}

inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, what + ": " + e.what());
  }
}

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

// ---------------------------------------------------------------------------
// Primitive conversions
// ---------------------------------------------------------------------------

inline Json to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json to_json(const Vector& v) {
  Json out = Json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) out.push_back(v(k));
  return out;
}

inline Json to_json(const Polytope& p) { return Json{{"H", to_json(p.H)}, {"h", to_json(p.h)}}; }

inline const Json& field(const Json& j, const char* key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) {
    throw Error(ErrorKind::kParse, path + ": missing field '" + key + "'");
  }
  return j[key];
}

inline double number(const Json& j, const std::string& path) {
  if (!j.is_number()) throw Error(ErrorKind::kParse, path + ": expected number");
  return j.get<double>();
}

inline Matrix matrix_from(const Json& j, const std::string& path, Eigen::Index rows,
                          Eigen::Index cols) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw Error(ErrorKind::kParse, path + ": expected " + std::to_string(rows) + " rows");
  }
  Matrix out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw Error(ErrorKind::kParse, path + ": expected " + std::to_string(cols) + " columns");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      out(r, c) = number(row[static_cast<std::size_t>(c)], path);
    }
  }
  return out;
}

inline Vector vector_from(const Json& j, const std::string& path, Eigen::Index size) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != size) {
    throw Error(ErrorKind::kParse, path + ": expected " + std::to_string(size) + " entries");
  }
  Vector out(size);
  for (Eigen::Index k = 0; k < size; ++k) out(k) = number(j[static_cast<std::size_t>(k)], path);
  return out;
}

inline Polytope polytope_from(const Json& j, const std::string& path, int dim) {
  const Json& jh = field(j, "h", path);
  if (!jh.is_array()) throw Error(ErrorKind::kParse, path + ".h: expected array");
  Polytope p;
  p.h = vector_from(jh, path + ".h", static_cast<Eigen::Index>(jh.size()));
  p.H = matrix_from(field(j, "H", path), path + ".H", p.h.size(), dim);
  return p;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string config_path;
  std::string config_hash;
  std::optional<std::string> gains_provenance;
  std::optional<std::string> quantile_mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> solver;
  std::string tool_version = kToolVersion;
  std::optional<std::string> timestamp;  ///< opt-in, keeps reruns byte-identical
};

inline RunManifest make_manifest(const std::string& config_path, const std::string& config_text) {
  RunManifest m;
  m.config_path = config_path;
  m.config_hash = fnv1a_hex(config_text);
  return m;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

inline Json to_json(const RunManifest& m) {
  Json j;
  j["config_path"] = m.config_path;
  j["config_hash"] = m.config_hash;
  if (m.gains_provenance) j["gains_provenance"] = *m.gains_provenance;
  if (m.quantile_mode) j["quantile_mode"] = *m.quantile_mode;
  if (m.seed) j["seed"] = *m.seed;
  if (m.solver) j["solver"] = *m.solver;
  j["tool_version"] = m.tool_version;
  if (m.timestamp) j["timestamp"] = *m.timestamp;
  return j;
}

// ---------------------------------------------------------------------------
// Gains
// ---------------------------------------------------------------------------

inline const char* to_string(Terminal::Kind k) {
  return k == Terminal::Kind::kPoint ? "point" : "level_set";
}

inline Json gains_to_json(const SystemGraph& g, const GainSet& gains, const RunManifest& m) {
  Json j;
  j["manifest"] = to_json(m);
  j["provenance"] = to_string(gains.provenance);
  j["rho_feedback"] = gains.rho_feedback;
  j["rho_observer"] = gains.rho_observer;
  j["terminal"] = {{"kind", to_string(gains.terminal.kind)}, {"alpha", gains.terminal.alpha}};
  j["K"] = to_json(gains.K);
  j["L"] = to_json(gains.L);
  j["P"] = to_json(gains.P);
  Json blocks = Json::array();
  for (int i = 0; i < g.size(); ++i) {
    Json b;
    b["subsystem"] = i + 1;
    b["K"] = to_json(gains.K_block(g, i));
    b["L"] = to_json(gains.L_block(g, i));
    b["P"] = to_json(gains.P_block(g, i));
    blocks.push_back(std::move(b));
  }
  j["blocks"] = std::move(blocks);
  return j;
}

inline GainSet gains_from_json(const SystemGraph& g, const Json& j) {
  const std::string path = "gains";
  GainSet gains;
  const std::string prov = field(j, "provenance", path).get<std::string>();
  if (prov == "distributed") {
    gains.provenance = Provenance::kDistributed;
  } else if (prov == "central") {
    gains.provenance = Provenance::kCentral;
  } else {
    throw Error(ErrorKind::kParse, path + ".provenance: unknown value '" + prov + "'");
  }
  gains.K = matrix_from(field(j, "K", path), path + ".K", g.m(), g.n());
  gains.L = matrix_from(field(j, "L", path), path + ".L", g.n(), g.p());
  gains.P = matrix_from(field(j, "P", path), path + ".P", g.n(), g.n());
  const Json& t = field(j, "terminal", path);
  const std::string kind = field(t, "kind", path + ".terminal").get<std::string>();
  if (kind == "point") {
    gains.terminal.kind = Terminal::Kind::kPoint;
  } else if (kind == "level_set") {
    gains.terminal.kind = Terminal::Kind::kLevelSet;
  } else {
    throw Error(ErrorKind::kParse, path + ".terminal.kind: unknown value '" + kind + "'");
  }
  gains.terminal.alpha = number(field(t, "alpha", path + ".terminal"), path + ".terminal.alpha");
  const GlobalModel gm = assemble_global(g);
  gains.rho_feedback = conic::spectral_radius(gm.A + gm.B * gains.K);
  gains.rho_observer = conic::spectral_radius(gm.A - gains.L * gm.C);
  return gains;
}

// ---------------------------------------------------------------------------
// PRS report
// ---------------------------------------------------------------------------

inline QuantileMode quantile_mode_from(const std::string& s) {
  if (s == "gaussian") return QuantileMode::kGaussian;
  if (s == "chebyshev") return QuantileMode::kChebyshev;
  throw Error(ErrorKind::kParse, "unknown quantile mode '" + s + "'");
}

struct VolumeComparison {
  std::string other_provenance;
  double volume_other = 0.0;
  double reduction = 0.0;  ///< 1 − vol(this)/vol(other)
};

inline Json prs_to_json(const SystemGraph& g, const PrsSpec& spec, const Matrix& sigma_global,
                        const std::optional<VolumeComparison>& cmp, const RunManifest& m) {
  const int n = g.n();
  Json j;
  j["manifest"] = to_json(m);
  j["quantile_mode"] = to_string(spec.mode);
  j["volume"] = constrained_box_volume(g, spec);
  if (cmp) {
    j["comparison"] = {{"other_provenance", cmp->other_provenance},
                       {"volume_other", cmp->volume_other},
                       {"volume_reduction", cmp->reduction}};
  }
  Json subs = Json::array();
  for (int i = 0; i < g.size(); ++i) {
    const int o = g.x_offset(i);
    const int ni = g[i].n;
    Json s;
    s["subsystem"] = i + 1;
    s["Sigma_state_error"] = to_json(Matrix(sigma_global.block(o, o, ni, ni)));
    s["Sigma_tracking_error"] = to_json(Matrix(sigma_global.block(n + o, n + o, ni, ni)));
    s["Sigma_X"] = to_json(spec.sigma_x[i]);
    s["px_tilde"] = spec.px_tilde[i];
    s["r_x"] = to_json(spec.r_x[i]);
    s["Z"] = to_json(spec.Z[i]);
    if (spec.pu_tilde[i]) {
      s["Sigma_U"] = to_json(spec.sigma_u[i]);
      s["pu_tilde"] = *spec.pu_tilde[i];
      s["r_u"] = to_json(spec.r_u[i]);
    }
    if (spec.V[i]) s["V"] = to_json(*spec.V[i]);
    subs.push_back(std::move(s));
  }
  j["subsystems"] = std::move(subs);
  return j;
}

/// Reads back the tightened sets of a PRS report.
inline PrsSpec prs_from_json(const SystemGraph& g, const Json& j) {
  const std::string path = "prs";
  PrsSpec spec;
  spec.mode = quantile_mode_from(field(j, "quantile_mode", path).get<std::string>());
  const Json& subs = field(j, "subsystems", path);
  if (!subs.is_array() || static_cast<int>(subs.size()) != g.size()) {
    throw Error(ErrorKind::kParse, path + ".subsystems: expected " + std::to_string(g.size()) +
                                       " entries");
  }
  for (int i = 0; i < g.size(); ++i) {
    const Json& s = subs[static_cast<std::size_t>(i)];
    const std::string p = path + ".subsystems[" + std::to_string(i) + "]";
    const int ni = g[i].n;
    const int mi = g[i].m;
    spec.sigma_x.push_back(matrix_from(field(s, "Sigma_X", p), p + ".Sigma_X", ni, ni));
    spec.px_tilde.push_back(number(field(s, "px_tilde", p), p + ".px_tilde"));
    spec.r_x.push_back(vector_from(field(s, "r_x", p), p + ".r_x", ni));
    spec.Z.push_back(polytope_from(field(s, "Z", p), p + ".Z", ni));
    if (s.contains("pu_tilde")) {
      spec.pu_tilde.push_back(number(s["pu_tilde"], p + ".pu_tilde"));
      spec.sigma_u.push_back(matrix_from(field(s, "Sigma_U", p), p + ".Sigma_U", mi, mi));
      spec.r_u.push_back(vector_from(field(s, "r_u", p), p + ".r_u", mi));
    } else {
      spec.pu_tilde.push_back(std::nullopt);
      spec.sigma_u.push_back(Matrix::Zero(mi, mi));
      spec.r_u.push_back(Vector());
    }
    if (s.contains("V")) {
      spec.V.push_back(polytope_from(s["V"], p + ".V", mi));
    } else {
      spec.V.push_back(std::nullopt);
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// MPC solution
// ---------------------------------------------------------------------------

inline Json solution_to_json(const mpc::MpcSolution& sol, const Vector& u,
                             const RunManifest& m) {
  Json j;
  j["manifest"] = to_json(m);
  j["status"] = mpc::to_string(sol.status);
  j["mode"] = sol.mode;
  j["cost"] = sol.cost;
  j["u"] = to_json(u);
  j["Z"] = to_json(Matrix(sol.Z.transpose()));
  j["V"] = to_json(Matrix(sol.V.transpose()));
  j["terminal_multiplier"] = sol.terminal_multiplier;
  j["kkt"] = {{"stationarity", sol.kkt.stationarity},
              {"primal", sol.kkt.primal},
              {"dual", sol.kkt.dual},
              {"complementarity", sol.kkt.complementarity}};
  if (sol.admm) {
    j["admm"] = {{"iterations", sol.admm->iterations},
                 {"primal_residual", sol.admm->primal_residual},
                 {"dual_residual", sol.admm->dual_residual},
                 {"rho", sol.admm->rho},
                 {"converged", sol.admm->converged}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Monte-Carlo statistics
// ---------------------------------------------------------------------------

inline Json stats_to_json(const sim::McStats& s, const RunManifest& m) {
  Json j;
  j["manifest"] = to_json(m);
  j["runs"] = s.runs;
  j["steps"] = s.steps;
  j["seed"] = s.seed;
  j["solver"] = sim::to_string(s.solver);
  j["av_J"] = s.av_J;
  j["av_J_definition"] = "mean over runs of the per-run mean of J* over solved steps";
  j["C_vio"] = s.c_vio;
  j["min_p_hat"] = s.min_p_hat();
  j["mean_p_hat"] = s.mean_p_hat();
  j["mode1_fraction"] = s.mode1_fraction;
  j["av_stage_cost"] = s.av_stage_cost;
  j["infeasible_steps"] = s.infeasible_steps;
  j["solver_failures"] = s.solver_failures;
  j["max_admm_iterations"] = s.max_admm_iterations;
  j["mean_admm_iterations"] = s.mean_admm_iterations;
  Json p = Json::array();
  for (const auto& row : s.p_hat) p.push_back(row);
  j["p_hat"] = std::move(p);  // p_hat[i][k-1]
  return j;
}

inline sim::McStats stats_from_json(const Json& j) {
  const std::string path = "stats";
  sim::McStats s;
  s.runs = field(j, "runs", path).get<int>();
  s.steps = field(j, "steps", path).get<int>();
  s.seed = field(j, "seed", path).get<std::uint64_t>();
  const std::string solver = field(j, "solver", path).get<std::string>();
  s.solver = solver == "central" ? sim::SolverKind::kCentral : sim::SolverKind::kAdmm;
  s.av_J = number(field(j, "av_J", path), path + ".av_J");
  s.c_vio = field(j, "C_vio", path).get<long>();
  s.mode1_fraction = number(field(j, "mode1_fraction", path), path + ".mode1_fraction");
  s.av_stage_cost = number(field(j, "av_stage_cost", path), path + ".av_stage_cost");
  s.infeasible_steps = field(j, "infeasible_steps", path).get<long>();
  s.solver_failures = field(j, "solver_failures", path).get<long>();
  for (const Json& row : field(j, "p_hat", path)) s.p_hat.push_back(row.get<std::vector<double>>());
  return s;
}

/// One row per (run, k, subsystem); state and input columns are padded to
/// the largest subsystem.
inline std::string trajectories_csv(const SystemGraph& g,
                                    const std::vector<sim::RunRecord>& records) {
  int max_n = 0;
  int max_m = 0;
  for (const Subsystem& s : g.subsystems()) {
    max_n = std::max(max_n, s.n);
    max_m = std::max(max_m, s.m);
  }
  std::ostringstream out;
  out << std::setprecision(17);
  out << "run,k,i,mode";
  for (int c = 0; c < max_n; ++c) out << ",x" << c + 1;
  for (int c = 0; c < max_m; ++c) out << ",u" << c + 1;
  out << '\n';
  for (std::size_t r = 0; r < records.size(); ++r) {
    const sim::RunRecord& run = records[r];
    const int steps = static_cast<int>(run.steps.size());
    for (int k = 0; k <= steps; ++k) {
      const Vector& x = k < steps ? run.steps[k].x : run.x_final;
      for (int i = 0; i < g.size(); ++i) {
        out << r << ',' << k << ',' << i + 1 << ',';
        if (k < steps) out << run.steps[k].mode;
        for (int c = 0; c < max_n; ++c) {
          out << ',';
          if (c < g[i].n) out << x(g.x_offset(i) + c);
        }
        for (int c = 0; c < max_m; ++c) {
          out << ',';
          if (k < steps && c < g[i].m) out << run.steps[k].u(g.u_offset(i) + c);
        }
        out << '\n';
      }
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Cost bound
// ---------------------------------------------------------------------------

inline Json bound_to_json(const sim::CostBound& b, const sim::LipschitzEstimate& lip,
                          const Vector& half_width, const RunManifest& m) {
  Json j;
  j["manifest"] = to_json(m);
  j["c"] = b.c;
  j["beta_hat"] = b.beta_hat;
  j["gamma"] = b.gamma;
  j["epsilon"] = b.epsilon;
  j["lipschitz_samples"] = lip.samples;
  j["lipschitz_attempts"] = lip.attempts;
  j["sample_half_width"] = to_json(half_width);
  j["note"] = "diagnostic: beta_hat is a sampled lower estimate of the Lipschitz constant";
  return j;
}

}  // namespace dsmpc::io
