// Closed-loop simulation of the distributed output-feedback controller:
// plant and observer stepping, seeded noise, Monte-Carlo batches with
// chance-constraint statistics, and the asymptotic average-cost diagnostic.
#pragma once

#include <dsmpc/conic.hpp>
#include <dsmpc/model.hpp>
#include <dsmpc/mpc.hpp>
#include <dsmpc/synthesis.hpp>
#include <dsmpc/uncertainty.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <optional>
#include <random>
#include <thread>
#include <vector>

namespace dsmpc::sim {

using Rng = std::mt19937_64;

/// SplitMix64 finaliser; derives independent per-run seeds from a master seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t run_seed(std::uint64_t master, std::uint64_t run) {
  return splitmix64(master ^ splitmix64(run + 1));
}

/// Zero-mean Gaussian sampler with a fixed covariance, using the symmetric
/// square root so that singular covariances are handled.
class GaussianSampler {
 public:
  GaussianSampler() = default;
  explicit GaussianSampler(const Matrix& cov) {
    if (!all_finite(cov) || cov.rows() != cov.cols()) {
      throw Error(ErrorKind::kNotPsd, "sample_noise: covariance must be square and finite");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(cov));
    if (es.eigenvalues().size() > 0 &&
        es.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff())) {
      throw Error(ErrorKind::kNotPsd, "sample_noise: covariance is not PSD");
    }
    root_ = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
            es.eigenvectors().transpose();
  }

  Vector operator()(Rng& rng) const {
    std::normal_distribution<double> nd;
    Vector z(root_.rows());
    for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = nd(rng);
    return root_ * z;
  }

  int dim() const { return static_cast<int>(root_.rows()); }

 private:
  Matrix root_;
};

inline Vector sample_noise(const Matrix& cov, Rng& rng) { return GaussianSampler(cov)(rng); }

/// x⁺ = A x + B u + w.
inline Vector plant_step(const GlobalModel& gm, const Vector& x, const Vector& u,
                         const Vector& w) {
  return gm.A * x + gm.B * u + w;
}

/// y = C x + d.
inline Vector observe(const GlobalModel& gm, const Vector& x, const Vector& d) {
  return gm.C * x + d;
}

/// Per-subsystem Luenberger update
/// x̂_i⁺ = A_{N_i} x̂_{N_i} + B_i u_i + L_i (y_i − C_{N_i} x̂_{N_i}).
inline Vector observer_step(const SystemGraph& g, const GainSet& gains, const Vector& x_hat,
                            const Vector& u, const Vector& y) {
  Vector out(g.n());
  for (int i = 0; i < g.size(); ++i) {
    const Vector xn = g.selector(i) * x_hat;
    const Vector yi = y.segment(g.y_offset(i), g[i].p);
    const Vector ui = u.segment(g.u_offset(i), g[i].m);
    out.segment(g.x_offset(i), g[i].n) = g.neighborhood_A(i) * xn + g[i].B * ui +
                                         gains.L_block(g, i) * (yi - g.neighborhood_C(i) * xn);
  }
  return out;
}

enum class SolverKind { kCentral, kAdmm };

inline const char* to_string(SolverKind s) {
  return s == SolverKind::kCentral ? "central" : "admm";
}

struct SimOptions {
  SolverKind solver = SolverKind::kAdmm;
  bool noise = true;
};

struct StepRecord {
  int k = 0;
  Vector x, x_hat, z0, u;
  int mode = 1;
  double cost = 0.0;        ///< J* of the solved problem
  double stage_cost = 0.0;  ///< xᵀQx + uᵀRu applied at step k
  bool infeasible = false;
  bool solver_failure = false;
  int admm_iterations = 0;
};

struct RunRecord {
  std::vector<StepRecord> steps;  ///< k = 0..T−1
  Vector x_final;                 ///< x(T)
  /// satisfied[k−1][i]: x_i(k) ∈ X_i for k = 1..T
  std::vector<std::vector<char>> satisfied;
  int infeasible_steps = 0;
  int solver_failures = 0;
  int mode2_steps = 0;
  double mean_cost = 0.0;
  double mean_stage_cost = 0.0;
};

/// One closed-loop run from x(0) = x̂(0) = x0 over T steps.
inline RunRecord closed_loop_run(const mpc::MpcProblem& problem, const Vector& x0, int steps,
                                 std::uint64_t seed, const SimOptions& opts = {}) {
  const SystemGraph& g = problem.graph();
  const GainSet& gains = problem.gains();
  const GlobalModel gm = assemble_global(g);
  Rng rng(seed);
  const GaussianSampler w_sampler(gm.Sigma_W);
  const GaussianSampler d_sampler(gm.Sigma_D);

  RunRecord rec;
  Vector x = x0;
  Vector x_hat = x0;
  std::optional<mpc::MpcSolution> prev;
  for (int k = 0; k < steps; ++k) {
    StepRecord st;
    st.k = k;
    st.x = x;
    st.x_hat = x_hat;
    mpc::MpcSolution sol;
    // Throws at k = 0 when Mode 1 is infeasible.
    auto [z0, mode] = mpc::select_initial_state(problem, x_hat, prev ? &*prev : nullptr);
    if (opts.solver == SolverKind::kCentral) {
      sol = problem.solve_central(z0);
    } else {
      sol = problem.solve_admm(z0, prev ? &*prev : nullptr);
      st.admm_iterations = sol.admm ? sol.admm->iterations : 0;
    }
    sol.mode = mode;
    if (sol.status == mpc::MpcStatus::kInfeasible) {
      if (k == 0) throw Error(ErrorKind::kInfeasible, "MPC infeasible at the initial state");
      // Keep the shifted previous plan; counted as an infeasible step.
      st.infeasible = true;
      ++rec.infeasible_steps;
      auto [zs, vs] = problem.shifted_candidate(*prev);
      sol.Z = zs;
      sol.V = vs;
      sol.cost = problem.cost(zs, vs);
      z0 = zs.col(0);
    } else if (sol.status == mpc::MpcStatus::kMaxIterations) {
      st.solver_failure = true;
      ++rec.solver_failures;
    }
    if (mode == 2) ++rec.mode2_steps;
    const Vector u = mpc::control_input(g, gains, sol.V.col(0), x_hat, z0);
    st.z0 = z0;
    st.u = u;
    st.mode = mode;
    st.cost = sol.cost;
    st.stage_cost = x.dot(gm.Q * x) + u.dot(gm.R * u);

    Vector w = Vector::Zero(g.n());
    Vector d = Vector::Zero(g.p());
    if (opts.noise) {
      w = w_sampler(rng);
      d = d_sampler(rng);
    }
    const Vector y = observe(gm, x, d);
    x = plant_step(gm, x, u, w);
    x_hat = observer_step(g, gains, x_hat, u, y);

    // Round-off tolerance: noise-free plans may sit exactly on a facet.
    std::vector<char> sat(g.size());
    for (int i = 0; i < g.size(); ++i)
      sat[i] = g[i].X.contains(local_part(g, i, x), 1e-9) ? 1 : 0;
    rec.satisfied.push_back(std::move(sat));
    rec.mean_cost += st.cost / steps;
    rec.mean_stage_cost += st.stage_cost / steps;
    prev = std::move(sol);
    rec.steps.push_back(std::move(st));
  }
  rec.x_final = x;
  return rec;
}

struct McStats {
  int runs = 0;
  int steps = 0;
  std::uint64_t seed = 0;
  SolverKind solver = SolverKind::kAdmm;
  /// p_hat[i][k−1]: fraction of runs with x_i(k) ∈ X_i, k = 1..T
  std::vector<std::vector<double>> p_hat;
  long c_vio = 0;
  double av_J = 0.0;  ///< mean over runs of the per-run mean J*
  double mode1_fraction = 0.0;
  double av_stage_cost = 0.0;
  long infeasible_steps = 0;
  long solver_failures = 0;
  int max_admm_iterations = 0;
  double mean_admm_iterations = 0.0;

  double min_p_hat() const {
    double m = 1.0;
    for (const auto& row : p_hat)
      for (double v : row) m = std::min(m, v);
    return m;
  }
  double mean_p_hat() const {
    double s = 0.0;
    int c = 0;
    for (const auto& row : p_hat)
      for (double v : row) {
        s += v;
        ++c;
      }
    return c ? s / c : 1.0;
  }
};

struct McOptions {
  int runs = 2000;
  int steps = 10;
  std::uint64_t seed = 1;
  int threads = 1;
  SimOptions sim;
};

/// K independent closed-loop runs; results are aggregated in run order so
/// the statistics do not depend on the thread count.
inline McStats monte_carlo(const mpc::MpcProblem& problem, const Vector& x0,
                           const McOptions& opts, std::vector<RunRecord>* records = nullptr) {
  if (opts.runs < 1 || opts.steps < 1) {
    throw Error(ErrorKind::kPrecondition, "monte_carlo: runs and steps must be positive");
  }
  std::vector<RunRecord> runs(opts.runs);
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(opts.runs);
  auto worker = [&]() {
    for (int r = next++; r < opts.runs; r = next++) {
      try {
        runs[r] = closed_loop_run(problem, x0, opts.steps, run_seed(opts.seed, r), opts.sim);
      } catch (...) {
        errors[r] = std::current_exception();
      }
    }
  };
  const int nthreads = std::max(1, std::min(opts.threads, opts.runs));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  const SystemGraph& g = problem.graph();
  McStats s;
  s.runs = opts.runs;
  s.steps = opts.steps;
  s.seed = opts.seed;
  s.solver = opts.sim.solver;
  std::vector<std::vector<long>> hits(g.size(), std::vector<long>(opts.steps, 0));
  long mode1 = 0;
  long admm_total = 0;
  for (const RunRecord& r : runs) {
    for (int k = 0; k < opts.steps; ++k)
      for (int i = 0; i < g.size(); ++i) hits[i][k] += r.satisfied[k][i];
    for (const StepRecord& st : r.steps) {
      mode1 += st.mode == 1;
      admm_total += st.admm_iterations;
      s.max_admm_iterations = std::max(s.max_admm_iterations, st.admm_iterations);
    }
    s.av_J += r.mean_cost / opts.runs;
    s.av_stage_cost += r.mean_stage_cost / opts.runs;
    s.infeasible_steps += r.infeasible_steps;
    s.solver_failures += r.solver_failures;
  }
  s.p_hat.assign(g.size(), std::vector<double>(opts.steps));
  for (int i = 0; i < g.size(); ++i)
    for (int k = 0; k < opts.steps; ++k) {
      s.p_hat[i][k] = static_cast<double>(hits[i][k]) / opts.runs;
      s.c_vio += opts.runs - hits[i][k];
    }
  const double total_steps = static_cast<double>(opts.runs) * opts.steps;
  s.mode1_fraction = mode1 / total_steps;
  s.mean_admm_iterations = admm_total / total_steps;
  if (records) *records = std::move(runs);
  return s;
}

/// Long-run samples of the true coupled error recursion ξ⁺ = Ψξ + Γω,
/// returning the sample covariance of ξ after a burn-in.
inline Matrix simulate_error_covariance(const AugmentedDynamics& dyn, int samples,
                                        std::uint64_t seed, int burn_in = 1000) {
  Rng rng(seed);
  const GaussianSampler omega(dyn.Omega);
  const int d = static_cast<int>(dyn.Psi.rows());
  Vector xi = Vector::Zero(d);
  Matrix acc = Matrix::Zero(d, d);
  Vector mean = Vector::Zero(d);
  for (int k = 0; k < burn_in + samples; ++k) {
    xi = dyn.Psi * xi + dyn.Gamma * omega(rng);
    if (k >= burn_in) {
      acc += xi * xi.transpose();
      mean += xi;
    }
  }
  mean /= samples;
  return symmetrize(acc / samples - mean * mean.transpose());
}

struct CostBound {
  Matrix P_sigma;
  double epsilon = 0.0;
  double beta_hat = 0.0;
  double gamma = 0.0;
  double c = 0.0;
};

/// c = γ √tr(ΓᵀP_ΣΓΩ), γ = √2 β̂ / √λ_min(P_Σ), ΨᵀP_ΣΨ − P_Σ = −εI.
inline CostBound cost_bound(const AugmentedDynamics& dyn, double beta_hat) {
  if (!(beta_hat > 0.0)) throw Error(ErrorKind::kPrecondition, "cost_bound: beta must be > 0");
  if (conic::spectral_radius(dyn.Psi) >= 1.0) {
    throw Error(ErrorKind::kPrecondition, "cost_bound: Psi is not Schur stable");
  }
  CostBound b;
  const double fro = dyn.noise_covariance().norm();
  b.epsilon = fro > 0.0 ? 1e-6 * fro : 1e-6;
  const int d = static_cast<int>(dyn.Psi.rows());
  b.P_sigma = conic::solve_discrete_lyapunov(dyn.Psi, b.epsilon * Matrix::Identity(d, d));
  b.beta_hat = beta_hat;
  b.gamma = std::sqrt(2.0) * beta_hat / std::sqrt(conic::min_eigenvalue(b.P_sigma));
  const double tr = (dyn.Gamma.transpose() * b.P_sigma * dyn.Gamma * dyn.Omega).trace();
  b.c = b.gamma * std::sqrt(std::max(0.0, tr));
  return b;
}

struct LipschitzEstimate {
  double beta_hat = 0.0;
  int samples = 0;   ///< feasible pairs evaluated
  int attempts = 0;  ///< pairs drawn
};

/// Sampled lower estimate of the Lipschitz constant of J* over feasible
/// states in the box |z_j| ≤ half_width_j; step lengths are log-uniform in
/// [1e-3, 1e-1].
inline LipschitzEstimate estimate_lipschitz(const mpc::MpcProblem& problem,
                                            const Vector& half_width, int samples,
                                            std::uint64_t seed, int min_samples = 10) {
  const int n = problem.graph().n();
  if (half_width.size() != n) {
    throw Error(ErrorKind::kDimension, "estimate_lipschitz: box dimension mismatch");
  }
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> logstep(std::log(1e-3), std::log(1e-1));
  std::normal_distribution<double> nd;
  LipschitzEstimate est;
  const int max_attempts = 20 * samples;
  while (est.samples < samples && est.attempts < max_attempts) {
    ++est.attempts;
    Vector z(n);
    for (int j = 0; j < n; ++j) z(j) = half_width(j) * unit(rng);
    Vector dir(n);
    for (int j = 0; j < n; ++j) dir(j) = nd(rng);
    const Vector delta = std::exp(logstep(rng)) * dir / dir.norm();
    if (!problem.check_feasibility(z) || !problem.check_feasibility(z + delta)) continue;
    const mpc::MpcSolution a = problem.solve_central(z);
    const mpc::MpcSolution b = problem.solve_central(z + delta);
    if (!a.ok() || !b.ok()) continue;
    ++est.samples;
    est.beta_hat = std::max(est.beta_hat, std::abs(b.cost - a.cost) / delta.norm());
  }
  if (est.samples < min_samples) {
    throw Error(ErrorKind::kInfeasible,
                "estimate_lipschitz: only " + std::to_string(est.samples) +
                    " feasible samples in " + std::to_string(est.attempts) + " attempts");
  }
  return est;
}

}  // namespace dsmpc::sim
