#include <dsmpc/sim.hpp>

#include <gtest/gtest.h>

#include "test_systems.hpp"

namespace dsmpc::sim {
namespace {

using testing::nominal_config;
using testing::riccati_gains;

GainSet reference_central_gains(const SystemGraph& g) {
  GainSet gains = riccati_gains(g);
  const GlobalModel gm = assemble_global(g);
  gains.L = conic::dual_observer_gain(gm.A, gm.C, gm.Sigma_W, gm.Sigma_D);
  return gains;
}

TEST(SimTest, ZeroCovarianceGivesZeroNoise) {
  Rng rng(1);
  EXPECT_TRUE(sample_noise(Matrix::Zero(3, 3), rng).isZero(0.0));
}

TEST(SimTest, SampleCovarianceMatches) {
  Rng rng(2);
  Matrix cov(2, 2);
  cov << 1.0, 0.3, 0.3, 0.5;
  const GaussianSampler s(cov);
  Matrix acc = Matrix::Zero(2, 2);
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const Vector w = s(rng);
    acc += w * w.transpose();
  }
  EXPECT_LE((acc / n - cov).norm(), 0.05);
  EXPECT_THROW(GaussianSampler(-Matrix::Identity(2, 2)), Error);
}

TEST(SimTest, SamplerIsDeterministic) {
  Rng a(42), b(42);
  const GaussianSampler s(Matrix::Identity(3, 3));
  for (int k = 0; k < 10; ++k) EXPECT_EQ(s(a), s(b));
  EXPECT_NE(run_seed(1, 0), run_seed(1, 1));
  EXPECT_NE(run_seed(1, 0), run_seed(2, 0));
}

TEST(SimTest, PlantAndOutput) {
  const SystemGraph g = testing::reference_system();
  const GlobalModel gm = assemble_global(g);
  const Vector x = testing::reference_x0();
  const Vector u0 = Vector::Zero(3);
  EXPECT_EQ(plant_step(gm, x, u0, Vector::Zero(6)), gm.A * x);
  EXPECT_EQ(observe(gm, x, Vector::Zero(3)), gm.C * x);
  const Vector u1 = Vector::Constant(3, 0.5);
  const Vector u2 = Vector::LinSpaced(3, -1.0, 1.0);
  const Vector lhs = plant_step(gm, x, u1 + u2, Vector::Zero(6));
  const Vector rhs = plant_step(gm, x, u1, Vector::Zero(6)) + gm.B * u2;
  EXPECT_TRUE(lhs.isApprox(rhs, 1e-14));
}

TEST(SimTest, ObserverMatchesGlobalForm) {
  const SystemGraph g = testing::reference_system();
  const GlobalModel gm = assemble_global(g);
  GainSet gains = reference_central_gains(g);
  gains.L = gains.L.cwiseProduct(lmi::observer_mask(g));  // local injections only
  const Vector xh = testing::reference_x0();
  const Vector u = Vector::Constant(3, 0.2);
  const Vector y = Vector::LinSpaced(3, -1.0, 1.0);
  const Vector global = gm.A * xh + gm.B * u + gains.L * (y - gm.C * xh);
  EXPECT_TRUE(observer_step(g, gains, xh, u, y).isApprox(global, 1e-13));
  EXPECT_TRUE(observer_step(g, gains, xh, u, gm.C * xh).isApprox(gm.A * xh + gm.B * u, 1e-13));
  gains.L.setZero();
  EXPECT_TRUE(observer_step(g, gains, xh, u, y).isApprox(gm.A * xh + gm.B * u, 1e-13));
}

TEST(SimTest, NoiseFreeLoopKeepsEstimateExact) {
  const SystemGraph g = testing::reference_system();
  const GainSet gains = reference_central_gains(g);
  mpc::MpcProblem prob(g, gains, nominal_config(g, 15));
  SimOptions opts;
  opts.noise = false;
  opts.solver = SolverKind::kCentral;
  const RunRecord r = closed_loop_run(prob, testing::reference_x0(), 10, 7, opts);
  for (const StepRecord& st : r.steps) {
    EXPECT_LE((st.x - st.x_hat).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(st.mode, 1);
  }
  EXPECT_EQ(r.infeasible_steps, 0);
}

TEST(SimTest, ZeroStateStaysAtOrigin) {
  const SystemGraph g = testing::reference_system();
  mpc::MpcProblem prob(g, reference_central_gains(g), nominal_config(g, 15));
  SimOptions opts;
  opts.noise = false;
  const RunRecord r = closed_loop_run(prob, Vector::Zero(6), 5, 1, opts);
  EXPECT_TRUE(r.x_final.isZero(0.0));
  EXPECT_EQ(r.mean_cost, 0.0);
}

TEST(SimTest, RunsAreReproducible) {
  const SystemGraph g = testing::reference_system();
  mpc::MpcProblem prob(g, reference_central_gains(g), nominal_config(g, 15));
  SimOptions opts;
  opts.solver = SolverKind::kAdmm;
  const RunRecord a = closed_loop_run(prob, testing::reference_x0(), 4, 99, opts);
  const RunRecord b = closed_loop_run(prob, testing::reference_x0(), 4, 99, opts);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t k = 0; k < a.steps.size(); ++k) {
    EXPECT_EQ(a.steps[k].x, b.steps[k].x);
    EXPECT_EQ(a.steps[k].u, b.steps[k].u);
    EXPECT_EQ(a.steps[k].cost, b.steps[k].cost);
  }
}

TEST(SimTest, MonteCarloNoiseFreeSatisfiesEverything) {
  const SystemGraph g = testing::reference_system();
  mpc::MpcProblem prob(g, reference_central_gains(g), nominal_config(g, 15));
  McOptions o;
  o.runs = 4;
  o.steps = 5;
  o.sim.noise = false;
  o.sim.solver = SolverKind::kCentral;
  const McStats s = monte_carlo(prob, testing::reference_x0(), o);
  EXPECT_EQ(s.c_vio, 0);
  EXPECT_EQ(s.min_p_hat(), 1.0);
  EXPECT_EQ(s.mode1_fraction, 1.0);
}

TEST(SimTest, MonteCarloIndependentOfThreadCount) {
  const SystemGraph g = testing::reference_system();
  mpc::MpcProblem prob(g, reference_central_gains(g), nominal_config(g, 15));
  McOptions o;
  o.runs = 12;
  o.steps = 4;
  o.seed = 5;
  o.sim.solver = SolverKind::kCentral;
  const McStats one = monte_carlo(prob, testing::reference_x0(), o);
  o.threads = 3;
  const McStats three = monte_carlo(prob, testing::reference_x0(), o);
  EXPECT_EQ(one.av_J, three.av_J);
  EXPECT_EQ(one.p_hat, three.p_hat);
  EXPECT_EQ(one.c_vio, three.c_vio);
  // C_vio is consistent with the per-step satisfaction fractions.
  double expected = 0.0;
  for (const auto& row : one.p_hat)
    for (double p : row) expected += o.runs * (1.0 - p);
  EXPECT_NEAR(static_cast<double>(one.c_vio), expected, 1e-9);
}

TEST(SimTest, ErrorCovarianceMatchesLyapunov) {
  const SystemGraph g = testing::reference_system();
  const AugmentedDynamics dyn = build_augmented_dynamics(g, reference_central_gains(g));
  const Matrix exact = stationary_covariance_central(dyn);
  const Matrix sample = simulate_error_covariance(dyn, 100000, 3);
  const Matrix margin = 0.05 * exact.trace() * Matrix::Identity(exact.rows(), exact.cols());
  EXPECT_GE(conic::min_eigenvalue(exact + margin - sample), 0.0);
  EXPECT_LE((sample - exact).norm(), 0.1 * exact.norm());
}

TEST(SimTest, CostBoundScalar) {
  // ψ = 0.5, Γ = 1, Ω = ω: P_Σ = ε/(1 − ψ²) and c = √2 β √ω.
  AugmentedDynamics dyn;
  dyn.Psi = Matrix::Constant(1, 1, 0.5);
  dyn.Gamma = Matrix::Constant(1, 1, 1.0);
  dyn.Omega = Matrix::Constant(1, 1, 0.09);
  const CostBound b = cost_bound(dyn, 2.0);
  EXPECT_NEAR(b.P_sigma(0, 0), b.epsilon / 0.75, 1e-15);
  EXPECT_NEAR(b.c, std::sqrt(2.0) * 2.0 * 0.3, 1e-12);
  const Matrix lhs = dyn.Psi.transpose() * b.P_sigma * dyn.Psi;
  EXPECT_LE(lhs(0, 0), b.P_sigma(0, 0) - b.epsilon + 1e-18);

  dyn.Gamma.setZero();
  EXPECT_EQ(cost_bound(dyn, 2.0).c, 0.0);
  EXPECT_THROW(cost_bound(dyn, 0.0), Error);
  dyn.Psi(0, 0) = 1.5;
  EXPECT_THROW(cost_bound(dyn, 1.0), Error);
}

SystemGraph unconstrained_plant() {
  Subsystem s;
  s.n = 2;
  s.m = s.p = 1;
  s.A[0] = (Matrix(2, 2) << 1.0, 0.5, 0.0, 0.9).finished();
  s.B = (Matrix(2, 1) << 0.1, 1.0).finished();
  s.C[0] = (Matrix(1, 2) << 1.0, 0.0).finished();
  s.Sigma_W = 0.01 * Matrix::Identity(2, 2);
  s.Sigma_D = 0.01 * Matrix::Identity(1, 1);
  s.X = testing::box(Vector::Constant(2, 1e6));
  s.p_x = 0.9;
  s.Q = Matrix::Identity(2, 2);
  s.R = Matrix::Identity(1, 1);
  return SystemGraph({s});
}

TEST(SimTest, LipschitzOfQuadraticValue) {
  // With the Riccati terminal cost the unconstrained value is zᵀPz.
  const SystemGraph g = unconstrained_plant();
  const GainSet gains = riccati_gains(g);
  mpc::MpcProblem prob(g, gains, nominal_config(g, 3, {Terminal::Kind::kLevelSet, 1e12}));
  const Vector half = Vector::Constant(2, 1.0);
  const LipschitzEstimate est = estimate_lipschitz(prob, half, 3000, 9);
  double sup = 0.0;
  for (double a : {-1.0, 1.0})
    for (double b : {-1.0, 1.0}) sup = std::max(sup, (2.0 * gains.P * Vector{{a, b}}).norm());
  EXPECT_LE(est.beta_hat, sup * 1.01);
  EXPECT_GE(est.beta_hat, sup * 0.9);
  EXPECT_EQ(est.samples, 3000);
}

TEST(SimTest, LipschitzIsMonotoneInSamples) {
  const SystemGraph g = unconstrained_plant();
  mpc::MpcProblem prob(g, riccati_gains(g), nominal_config(g, 3, {Terminal::Kind::kLevelSet, 1e12}));
  const Vector half = Vector::Constant(2, 1.0);
  double last = 0.0;
  for (int s : {50, 100, 200, 400}) {
    const double b = estimate_lipschitz(prob, half, s, 4).beta_hat;
    EXPECT_GE(b, last);
    last = b;
  }
}

TEST(SimTest, LipschitzNeedsFeasibleSamples) {
  std::mt19937_64 rng(3);
  const SystemGraph g = testing::random_system(rng, 2, true);
  mpc::MpcProblem prob(g, riccati_gains(g), nominal_config(g, 3));
  EXPECT_THROW(estimate_lipschitz(prob, Vector::Constant(g.n(), 1e6), 20, 1), Error);
}

}  // namespace
}  // namespace dsmpc::sim
