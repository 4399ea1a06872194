#include <dsmpc/mpc.hpp>

#include <gtest/gtest.h>

#include "test_systems.hpp"

namespace dsmpc::mpc {
namespace {

using testing::nominal_config;
using testing::random_state;
using testing::random_system;
using testing::riccati_gains;

SystemGraph scalar_system(double a, double b, double bound) {
  Subsystem s;
  s.n = s.m = s.p = 1;
  s.A[0] = Matrix::Constant(1, 1, a);
  s.B = Matrix::Constant(1, 1, b);
  s.C[0] = Matrix::Identity(1, 1);
  s.Sigma_W = s.Sigma_D = Matrix::Identity(1, 1);
  s.X = testing::box(Vector::Constant(1, bound));
  s.U = testing::box(Vector::Constant(1, bound));
  s.p_x = 0.9;
  s.Q = s.R = Matrix::Identity(1, 1);
  return SystemGraph({s});
}

GainSet scalar_gains(double p) {
  GainSet gains;
  gains.K = Matrix::Zero(1, 1);
  gains.L = Matrix::Zero(1, 1);
  gains.P = Matrix::Constant(1, 1, p);
  return gains;
}

TEST(MpcTest, UnconstrainedOneStep) {
  // z(1) = z0 + v, J = z0² + v² + z(1)² → v = −z0/2.
  const SystemGraph g = scalar_system(1.0, 1.0, 1e6);
  MpcProblem prob(g, scalar_gains(1.0), nominal_config(g, 1, {Terminal::Kind::kLevelSet, 1e12}));
  const Vector z0 = Vector::Constant(1, 3.0);
  const MpcSolution sol = prob.solve_central(z0);
  ASSERT_TRUE(sol.ok());
  EXPECT_NEAR(sol.V(0, 0), -1.5, 1e-12);
  EXPECT_NEAR(sol.cost, 9.0 + 2.25 + 2.25, 1e-10);
  EXPECT_LE(sol.kkt.max(), 1e-10);
}

TEST(MpcTest, PointTerminalOneStep) {
  const SystemGraph g = scalar_system(1.0, 1.0, 1e6);
  MpcProblem prob(g, scalar_gains(1.0), nominal_config(g, 1));
  const MpcSolution sol = prob.solve_central(Vector::Constant(1, 2.0));
  ASSERT_TRUE(sol.ok());
  EXPECT_NEAR(sol.V(0, 0), -2.0, 1e-12);
  EXPECT_NEAR(sol.Z(0, 1), 0.0, 1e-12);
}

TEST(MpcTest, ZeroStateGivesZeroSolution) {
  const SystemGraph g = testing::reference_system();
  const GainSet gains = riccati_gains(g);
  MpcProblem prob(g, gains, nominal_config(g, 15));
  const Vector z0 = Vector::Zero(g.n());
  EXPECT_TRUE(prob.check_feasibility(z0));
  const MpcSolution c = prob.solve_central(z0);
  ASSERT_TRUE(c.ok());
  EXPECT_EQ(c.cost, 0.0);
  EXPECT_TRUE(c.Z.isZero(0.0));
  const MpcSolution a = prob.solve_admm(z0);
  ASSERT_TRUE(a.ok());
  EXPECT_EQ(a.admm->iterations, 1);
  EXPECT_TRUE(a.V.isZero(0.0));
}

TEST(MpcTest, CondensedProblemLayout) {
  const SystemGraph g = testing::reference_system();
  MpcProblem prob(g, riccati_gains(g), nominal_config(g, 15));
  const CondensedQp qp = prob.build_qp(testing::reference_x0());
  EXPECT_EQ(qp.H.rows(), 15 * 3);
  EXPECT_EQ(qp.Aeq.rows(), 6);              // z(N) = 0
  EXPECT_EQ(qp.Ain.rows(), 14 * 3 * 2);     // t = 1..N−1, two facets each
  EXPECT_TRUE(qp.H.isApprox(qp.H.transpose()));
}

TEST(MpcTest, ReferenceInitialStateFeasible) {
  const SystemGraph g = testing::reference_system();
  MpcProblem prob(g, riccati_gains(g), nominal_config(g, 15));
  const Vector x0 = testing::reference_x0();
  ASSERT_TRUE(prob.check_feasibility(x0));
  const MpcSolution c = prob.solve_central(x0);
  ASSERT_TRUE(c.ok());
  EXPECT_LE(c.kkt.max(), 1e-8);
  const MpcSolution a = prob.solve_admm(x0);
  ASSERT_TRUE(a.ok());
  EXPECT_LE(a.admm->primal_residual, 1e-6);
  EXPECT_LE(a.admm->dual_residual, 1e-6);
  EXPECT_LE(prob.dynamics_residual(a.Z, a.V), 1e-6);
  EXPECT_LE(prob.constraint_violation(a.Z, a.V), 1e-6);
  EXPECT_LE((a.V - c.V).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(MpcTest, UnreachableStatesAreInfeasible) {
  std::mt19937_64 rng(3);
  const SystemGraph g = random_system(rng, 2, true);
  MpcProblem prob(g, riccati_gains(g), nominal_config(g, 15));
  EXPECT_FALSE(prob.check_feasibility(Vector::Constant(g.n(), 1e6)));
  EXPECT_EQ(prob.solve_central(Vector::Constant(g.n(), 1e6)).status, MpcStatus::kInfeasible);
  // A velocity far beyond the bound cannot be brought back within one step.
  Vector z0 = Vector::Zero(g.n());
  z0(1) = 50.0;
  EXPECT_FALSE(prob.check_feasibility(z0));
}

TEST(MpcTest, FeasibilityAgreesWithCentralSolver) {
  std::mt19937_64 rng(11);
  int feasible = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const SystemGraph g = random_system(rng, 2 + trial % 2, true);
    MpcProblem prob(g, riccati_gains(g), nominal_config(g, trial % 2 ? 3 : 15));
    const Vector z0 = random_state(rng, g, 1.0);
    const bool f = prob.check_feasibility(z0);
    const MpcSolution sol = prob.solve_central(z0);
    EXPECT_EQ(f, sol.ok()) << "trial " << trial;
    feasible += f;
  }
  EXPECT_GT(feasible, 20);
  EXPECT_LT(feasible, 100);
}

TEST(MpcTest, AdmmMatchesCentralOnRandomInstances) {
  std::mt19937_64 rng(5);
  int checked = 0;
  while (checked < 20) {
    const int horizon = checked % 2 ? 3 : 15;
    const SystemGraph g = random_system(rng, 2 + checked % 2, checked % 3 != 0);
    MpcProblem prob(g, riccati_gains(g), nominal_config(g, horizon));
    const Vector z0 = random_state(rng, g, 0.8);
    if (!prob.check_feasibility(z0)) continue;
    const MpcSolution c = prob.solve_central(z0);
    const MpcSolution a = prob.solve_admm(z0);
    ASSERT_TRUE(c.ok());
    EXPECT_LE(c.kkt.max(), 1e-8);
    if (!a.ok()) continue;
    const double gap = std::max((a.Z - c.Z).cwiseAbs().maxCoeff(),
                                (a.V - c.V).cwiseAbs().maxCoeff());
    EXPECT_LE(gap, 1e-4) << "instance " << checked;
    ++checked;
  }
}

TEST(MpcTest, DecoupledSystemConvergesQuickly) {
  std::mt19937_64 rng(2);
  SystemGraph coupled = random_system(rng, 2, false);
  std::vector<Subsystem> subs = coupled.subsystems();
  for (int i = 0; i < 2; ++i) {
    const Matrix aii = subs[i].A.at(i);
    subs[i].A.clear();
    subs[i].A[i] = aii;
  }
  const SystemGraph g(subs);
  MpcProblem prob(g, riccati_gains(g), nominal_config(g, 15));
  Vector z0 = random_state(rng, g, 0.3);
  ASSERT_TRUE(prob.check_feasibility(z0));
  const MpcSolution a = prob.solve_admm(z0);
  const MpcSolution c = prob.solve_central(z0);
  ASSERT_TRUE(a.ok());
  EXPECT_LE(a.admm->iterations, 500);
  EXPECT_LE((a.V - c.V).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(MpcTest, LevelSetTerminalIsActiveOrSatisfied) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const SystemGraph g = random_system(rng, 2, true);
    const GainSet gains = riccati_gains(g);
    const double alpha = testing::level_set_alpha(g, gains);
    MpcProblem prob(g, gains, nominal_config(g, 3, {Terminal::Kind::kLevelSet, alpha}));
    const Vector z0 = random_state(rng, g, 0.7);
    if (!prob.check_feasibility(z0)) continue;
    const MpcSolution c = prob.solve_central(z0);
    ASSERT_TRUE(c.ok());
    const Vector zn = c.Z.col(3);
    EXPECT_LE(zn.dot(gains.P * zn), alpha * (1.0 + 1e-9));
    EXPECT_GE(c.terminal_multiplier, 0.0);
    EXPECT_LE(c.kkt.max(), 1e-8);
  }
}

void expect_shift_feasible(const MpcProblem& prob, const MpcSolution& sol) {
  auto [z, v] = prob.shifted_candidate(sol);
  EXPECT_LE(prob.dynamics_residual(z, v), 1e-9);
  EXPECT_LE(prob.constraint_violation(z, v), 1e-7);
  EXPECT_TRUE(prob.check_feasibility(sol.Z.col(1)));
}

TEST(MpcTest, ShiftedSolutionStaysFeasible) {
  std::mt19937_64 rng(23);
  int point = 0;
  int level = 0;
  while (point + level < 100) {
    const bool use_level = (point + level) % 2 == 1;
    const SystemGraph g = random_system(rng, 2 + (point + level) % 2, true);
    const GainSet gains = riccati_gains(g);
    Terminal term;
    if (use_level) term = {Terminal::Kind::kLevelSet, testing::level_set_alpha(g, gains)};
    MpcProblem prob(g, gains, nominal_config(g, use_level ? 5 : 15, term));
    const Vector z0 = random_state(rng, g, 0.8);
    if (!prob.check_feasibility(z0)) continue;
    const MpcSolution sol = prob.solve_central(z0);
    ASSERT_TRUE(sol.ok());
    expect_shift_feasible(prob, sol);
    (use_level ? level : point) += 1;
  }
}

TEST(MpcTest, NominalCostDecreasesAlongModeTwoChain) {
  const SystemGraph g = testing::reference_system();
  const GainSet gains = riccati_gains(g);
  MpcProblem prob(g, gains, nominal_config(g, 15));
  const GlobalModel gm = assemble_global(g);
  Vector z0 = testing::reference_x0();
  MpcSolution sol = prob.solve_central(z0);
  ASSERT_TRUE(sol.ok());
  for (int k = 0; k < 10; ++k) {
    const Vector z = sol.Z.col(0);
    const Vector v = sol.V.col(0);
    const double stage = z.dot(gm.Q * z) + v.dot(gm.R * v);
    const MpcSolution next = prob.solve_central(sol.Z.col(1));
    ASSERT_TRUE(next.ok());
    EXPECT_LE(next.cost, sol.cost - stage + 1e-6) << "k " << k;
    sol = next;
  }
}

TEST(MpcTest, ModeSelection) {
  const SystemGraph g = testing::reference_system();
  MpcProblem prob(g, riccati_gains(g), nominal_config(g, 15));
  const Vector x0 = testing::reference_x0();
  auto [z0, mode] = select_initial_state(prob, x0, nullptr);
  EXPECT_EQ(mode, 1);
  EXPECT_EQ(z0, x0);
  const MpcSolution sol = prob.solve_central(x0);

  // Velocity far outside the bound: fall back to the shifted plan.
  Vector bad = x0;
  bad(1) = 40.0;
  auto [z2, mode2] = select_initial_state(prob, bad, &sol);
  EXPECT_EQ(mode2, 2);
  EXPECT_EQ(z2, sol.Z.col(1));

  // Estimate equal to the predicted state: Mode 1 wins the tie.
  auto [z3, mode3] = select_initial_state(prob, sol.Z.col(1), &sol);
  EXPECT_EQ(mode3, 1);
  EXPECT_EQ(z3, sol.Z.col(1));

  EXPECT_THROW(select_initial_state(prob, bad, nullptr), Error);
}

TEST(MpcTest, ControlLaw) {
  const Matrix k = Matrix::Identity(2, 2);
  const Vector v0 = Vector::Zero(2);
  Vector d(2);
  d << 0.3, -0.2;
  EXPECT_EQ(control_input(k, v0, d, Vector::Zero(2)), d);
  Vector v(2);
  v << 1.0, 2.0;
  EXPECT_EQ(control_input(k, v, d, d), v);
  EXPECT_THROW(control_input(k, v, d, Vector::Zero(3)), Error);

  const SystemGraph g = testing::reference_system();
  const GainSet gains = riccati_gains(g);
  const Vector x = testing::reference_x0();
  const Vector v3 = Vector::Constant(3, 0.5);
  EXPECT_EQ(control_input(g, gains, v3, x, x), v3);
  const Vector dx = Vector::LinSpaced(6, 0.1, 0.6);
  EXPECT_TRUE(control_input(g, gains, v3, x + dx, x).isApprox(v3 + gains.K * dx));

  // Structured K: the stacked law equals the local laws.
  GainSet structured = gains;
  structured.K = gains.K.cwiseProduct(lmi::feedback_mask(g));
  const Vector u = control_input(g, structured, v3, x + dx, x);
  for (int i = 0; i < g.size(); ++i) {
    const Matrix sel = g.selector(i);
    const Vector ui = control_input(structured.K_block(g, i), v3.segment(i, 1), sel * (x + dx),
                                    sel * x);
    EXPECT_NEAR((u.segment(i, 1) - ui).norm(), 0.0, 1e-14);
  }
}

TEST(MpcTest, RejectsBadConfig) {
  const SystemGraph g = testing::reference_system();
  const GainSet gains = riccati_gains(g);
  MpcConfig cfg = nominal_config(g, 0);
  EXPECT_THROW(MpcProblem(g, gains, cfg), Error);
  cfg = nominal_config(g, 5);
  cfg.Z.pop_back();
  EXPECT_THROW(MpcProblem(g, gains, cfg), Error);
  cfg = nominal_config(g, 5, {Terminal::Kind::kLevelSet, 0.0});
  EXPECT_THROW(MpcProblem(g, gains, cfg), Error);
  MpcProblem prob(g, gains, nominal_config(g, 5));
  EXPECT_THROW(prob.solve_central(Vector::Zero(4)), Error);
}

}  // namespace
}  // namespace dsmpc::mpc
