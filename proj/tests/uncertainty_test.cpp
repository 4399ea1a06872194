#include <dsmpc/sim.hpp>
#include <dsmpc/uncertainty.hpp>

#include <gtest/gtest.h>

#include "test_systems.hpp"

namespace dsmpc {
namespace {

Subsystem scalar(double a, double sw) {
  Subsystem s;
  s.n = s.m = s.p = 1;
  s.A[0] = Matrix::Constant(1, 1, a);
  s.B = Matrix::Constant(1, 1, 1.0);
  s.C[0] = Matrix::Constant(1, 1, 1.0);
  s.Sigma_W = Matrix::Constant(1, 1, sw);
  s.Sigma_D = Matrix::Constant(1, 1, 0.0);
  s.X = testing::box(Vector::Constant(1, 1.0));
  s.p_x = 0.6;
  s.Q = s.R = Matrix::Identity(1, 1);
  return s;
}

GainSet zero_gains(const SystemGraph& g) {
  GainSet gains;
  gains.K = Matrix::Zero(g.m(), g.n());
  gains.L = Matrix::Zero(g.n(), g.p());
  gains.P = Matrix::Identity(g.n(), g.n());
  return gains;
}

TEST(UncertaintyTest, AugmentedDynamicsWithZeroGains) {
  const SystemGraph g({scalar(0.5, 0.75), scalar(0.3, 0.1)});
  const AugmentedDynamics d = build_augmented_dynamics(g, zero_gains(g));
  const GlobalModel gm = assemble_global(g);
  Matrix expected = Matrix::Zero(4, 4);
  expected.topLeftCorner(2, 2) = gm.A;
  expected.bottomRightCorner(2, 2) = gm.A;
  EXPECT_EQ(d.Psi, expected);
  Matrix gamma = Matrix::Zero(4, 4);
  gamma.topLeftCorner(2, 2).setIdentity();
  EXPECT_EQ(d.Gamma, gamma);
}

TEST(UncertaintyTest, AugmentedDynamicsStructure) {
  const SystemGraph g = testing::reference_system();
  const GainSet gains = central_gains(g);
  const AugmentedDynamics d = build_augmented_dynamics(g, gains);
  EXPECT_TRUE(d.Psi.topRightCorner(6, 6).isZero(0.0));
  EXPECT_LT(conic::spectral_radius(d.Psi), 1.0);
  EXPECT_EQ(d.Gamma.topRightCorner(6, 3), -gains.L);
  EXPECT_EQ(d.Gamma.bottomRightCorner(6, 3), gains.L);
  EXPECT_TRUE(d.Gamma.bottomLeftCorner(6, 6).isZero(0.0));

  SystemGraph unstable({scalar(2.0, 1.0)});
  EXPECT_THROW(build_augmented_dynamics(unstable, zero_gains(unstable)), Error);
}

TEST(UncertaintyTest, PropagateScalarChain) {
  AugmentedDynamics d;
  d.Psi = Matrix::Constant(1, 1, 0.5);
  d.Gamma = Matrix::Constant(1, 1, 1.0);
  d.Omega = Matrix::Constant(1, 1, 0.75);
  ErrorCovariance s;
  s.blocks = {Matrix::Constant(1, 1, 1.0)};
  EXPECT_NEAR(propagate_covariance(s, d).blocks[0](0, 0), 1.0, 1e-15);
}

TEST(UncertaintyTest, PropagateDominatesDenseUpdate) {
  const SystemGraph g = testing::reference_system();
  const AugmentedDynamics d = build_augmented_dynamics(g, central_gains(g));
  ErrorCovariance s = ErrorCovariance::from_dense(Matrix::Identity(12, 12) * 0.1, d.dims);
  const ErrorCovariance next = propagate_covariance(s, d);
  const Matrix dense = d.Psi * s.assembled() * d.Psi.transpose() + d.noise_covariance();
  EXPECT_GE(conic::min_eigenvalue(next.assembled() - dense), -1e-12);

  // Ω = 0, Σ = 0 stays at zero.
  AugmentedDynamics quiet = d;
  quiet.Omega.setZero();
  const ErrorCovariance zero = ErrorCovariance::from_dense(Matrix::Zero(12, 12), d.dims);
  EXPECT_TRUE(propagate_covariance(zero, quiet).assembled().isZero(0.0));
}

TEST(UncertaintyTest, CentralCovarianceScalar) {
  AugmentedDynamics d;
  d.Psi = Matrix::Constant(1, 1, 0.5);
  d.Gamma = Matrix::Constant(1, 1, 1.0);
  d.Omega = Matrix::Constant(1, 1, 0.75);
  EXPECT_NEAR(stationary_covariance_central(d)(0, 0), 1.0, 1e-12);
  d.Psi.setZero();
  EXPECT_NEAR(stationary_covariance_central(d)(0, 0), 0.75, 1e-15);
}

TEST(UncertaintyTest, DistributedCovarianceScalar) {
  // x̃⁺ = 0.5 x̃ + w with var(w) = 0.75 → σ = 1; e receives no noise.
  const SystemGraph g({scalar(0.5, 0.75)});
  const StationaryCovariance sc = stationary_covariance_distributed(g, zero_gains(g));
  EXPECT_NEAR(sc.sigma.state_error(0)(0, 0), 1.0, 1e-3);
  EXPECT_GE(sc.sigma.state_error(0)(0, 0), 1.0 - 1e-6);
  EXPECT_LE(sc.sigma.tracking_error(0)(0, 0), 1e-3);
}

TEST(UncertaintyTest, DistributedCovarianceCertificate) {
  const SystemGraph g = testing::reference_system();
  const GainSet gains = central_gains(g);
  const AugmentedDynamics d = build_augmented_dynamics(g, gains);
  const StationaryCovariance sc = stationary_covariance_distributed(g, gains);
  const Matrix s = sc.sigma.assembled();
  const Matrix gap = s - d.Psi * s * d.Psi.transpose() - d.noise_covariance();
  EXPECT_GE(conic::min_eigenvalue(gap), -1e-6);
  // The certified bound dominates the exact stationary covariance.
  const Matrix exact = stationary_covariance_central(d);
  EXPECT_GE(conic::min_eigenvalue(s - exact), -1e-6);
}

TEST(UncertaintyTest, StateAndInputErrorCovariance) {
  Matrix s(2, 2);
  s << 2.0, 0.5, 0.5, 1.0;
  Matrix local = Matrix::Zero(4, 4);
  local.topLeftCorner(2, 2) = s;
  local.bottomRightCorner(2, 2) = s;
  EXPECT_TRUE(state_error_covariance(local).isApprox(2.0 * s));
  Matrix scalar_blocks(2, 2);
  scalar_blocks << 0.3, 0.0, 0.0, 0.7;
  EXPECT_NEAR(state_error_covariance(scalar_blocks)(0, 0), 1.0, 1e-15);
  EXPECT_TRUE(input_error_covariance(local, Matrix::Zero(1, 2)).isZero(0.0));
  EXPECT_THROW(state_error_covariance(Matrix::Identity(3, 3)), Error);
}

TEST(UncertaintyTest, Quantiles) {
  EXPECT_NEAR(prs_quantile(0.6, 2, QuantileMode::kChebyshev), 5.0, 1e-12);
  EXPECT_NEAR(prs_quantile(0.5, 1, QuantileMode::kChebyshev), 2.0, 1e-12);
  EXPECT_NEAR(prs_quantile(0.6, 2, QuantileMode::kGaussian), -2.0 * std::log(0.4), 1e-6);
  EXPECT_NEAR(prs_quantile(0.6, 2, QuantileMode::kGaussian), 1.83258, 1e-4);
  EXPECT_THROW(prs_quantile(1.0, 2, QuantileMode::kGaussian), Error);
  EXPECT_THROW(prs_quantile(0.0, 2, QuantileMode::kChebyshev), Error);
}

TEST(UncertaintyTest, MarginalBox) {
  Matrix s = Matrix::Zero(2, 2);
  s(1, 1) = 0.04;
  EXPECT_NEAR(marginal_box(s, 5.0)(1), 0.44721, 1e-5);
  EXPECT_TRUE(marginal_box(Matrix::Zero(3, 3), 7.0).isZero(0.0));
  EXPECT_TRUE(marginal_box(Matrix::Identity(3, 3), 4.0).isApprox(Vector::Constant(3, 2.0)));
}

TEST(UncertaintyTest, HalfWidthsAreMonotone) {
  Matrix s(2, 2);
  s << 0.5, 0.1, 0.1, 0.2;
  const Vector r0 = marginal_box(s, 3.0);
  s(0, 0) += 0.3;
  const Vector r1 = marginal_box(s, 3.0);
  EXPECT_GE(r1(0), r0(0));
  EXPECT_GE(r1(1), r0(1));
}

TEST(UncertaintyTest, TightenReferenceFacets) {
  Polytope p;
  p.H = (Matrix(2, 2) << 0.0, 1.0, 0.0, -1.0).finished();
  p.h = (Vector(2) << 0.5, 1.0).finished();
  const TightenedPolytope t = tighten_polytope(p, (Vector(2) << 9.0, 0.2).finished());
  EXPECT_NEAR(t.set.h(0), 0.3, 1e-15);
  EXPECT_NEAR(t.set.h(1), 0.8, 1e-15);
  EXPECT_FALSE(t.empty);
  EXPECT_EQ(tighten_polytope(p, Vector::Zero(2)).set.h, p.h);

  const TightenedPolytope unit = tighten_polytope(testing::box(Vector::Ones(2)), Vector::Ones(2));
  EXPECT_TRUE(unit.set.h.isZero(0.0));
  EXPECT_FALSE(unit.empty);
  EXPECT_TRUE(tighten_polytope(testing::box(Vector::Ones(2)), Vector::Constant(2, 1.5)).empty);
}

TEST(UncertaintyTest, TighteningMatchesVertexEnumeration) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int d = 1 + trial % 3;
    const int rows = d + 2 + trial % 4;
    Polytope p;
    p.H = Matrix(rows, d);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < d; ++c) p.H(r, c) = nd(rng);
    p.h = Vector(rows);
    for (int r = 0; r < rows; ++r) p.h(r) = 0.5 + ud(rng);
    Vector half(d);
    for (int c = 0; c < d; ++c) half(c) = 0.3 * ud(rng);
    const TightenedPolytope t = tighten_polytope(p, half);
    // x ∈ P ⊖ B iff x + v ∈ P for every vertex v of the box B.
    for (int s = 0; s < 200; ++s) {
      Vector x(d);
      for (int c = 0; c < d; ++c) x(c) = 2.0 * nd(rng) * 0.5;
      double brute = -std::numeric_limits<double>::infinity();
      for (int mask = 0; mask < (1 << d); ++mask) {
        Vector v(d);
        for (int c = 0; c < d; ++c) v(c) = (mask >> c & 1) ? half(c) : -half(c);
        brute = std::max(brute, (p.H * (x + v) - p.h).maxCoeff());
      }
      const double closed = (t.set.H * x - t.set.h).maxCoeff();
      EXPECT_NEAR(brute, closed, 1e-9);
    }
  }
}

TEST(UncertaintyTest, ZeroNoiseLeavesSetsUnchanged) {
  std::vector<Subsystem> subs = testing::reference_system().subsystems();
  for (auto& s : subs) {
    s.Sigma_W.setZero();
    s.Sigma_D.setZero();
  }
  const SystemGraph g(subs);
  const GainSet gains = central_gains(testing::reference_system());
  const Matrix sigma = stationary_covariance_central(build_augmented_dynamics(g, gains));
  const PrsSpec spec = build_prs_spec(g, sigma, gains, QuantileMode::kGaussian);
  for (int i = 0; i < g.size(); ++i) EXPECT_LE((spec.Z[i].h - g[i].X.h).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(UncertaintyTest, ReferenceCentralVersusDistributedVolume) {
  const SystemGraph g = testing::reference_system();
  const GainSet gains = central_gains(g);
  const AugmentedDynamics d = build_augmented_dynamics(g, gains);
  const PrsSpec exact = build_prs_spec(g, stationary_covariance_central(d), gains,
                                       default_quantile_mode(g));
  const PrsSpec bound = build_prs_spec(
      g, stationary_covariance_distributed(g, gains).sigma.assembled(), gains,
      default_quantile_mode(g));
  EXPECT_LT(constrained_box_volume(g, exact), constrained_box_volume(g, bound));
  EXPECT_GT(volume_reduction(g, exact, bound), 0.0);
  for (int i = 0; i < g.size(); ++i) {
    EXPECT_LT(exact.Z[i].h(0), 0.5);
    EXPECT_LT(exact.Z[i].h(1), 1.0);
  }
}

TEST(UncertaintyTest, EmptyTighteningNamesFacet) {
  std::vector<Subsystem> subs = testing::reference_system().subsystems();
  for (auto& s : subs) s.Sigma_W *= 100.0;
  const SystemGraph g(subs);
  const GainSet gains = central_gains(g);
  const Matrix sigma = stationary_covariance_central(build_augmented_dynamics(g, gains));
  try {
    build_prs_spec(g, sigma, gains, QuantileMode::kGaussian);
    FAIL() << "expected an infeasible tightening";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInfeasible);
    EXPECT_NE(std::string(e.what()).find("facet"), std::string::npos);
  }
}

TEST(UncertaintyTest, EmpiricalBoxCoverage) {
  const SystemGraph g = testing::reference_system();
  const GainSet gains = central_gains(g);
  const AugmentedDynamics d = build_augmented_dynamics(g, gains);
  const PrsSpec spec = build_prs_spec(g, stationary_covariance_central(d), gains,
                                      QuantileMode::kGaussian);
  sim::Rng rng(12);
  const sim::GaussianSampler omega(d.Omega);
  Vector xi = Vector::Zero(12);
  const int steps = 100000;
  std::vector<int> inside(3, 0);
  for (int k = 0; k < 1000 + steps; ++k) {
    xi = d.Psi * xi + d.Gamma * omega(rng);
    if (k < 1000) continue;
    const Vector dx = xi.head(6) + xi.tail(6);
    for (int i = 0; i < 3; ++i) {
      const Vector di = dx.segment(2 * i, 2);
      inside[i] += (di.cwiseAbs().array() <= spec.r_x[i].array()).all();
    }
  }
  for (int i = 0; i < 3; ++i) {
    const double p = g[i].p_x;
    const double sd = std::sqrt(p * (1 - p) / steps);
    EXPECT_GE(static_cast<double>(inside[i]) / steps, p - 3 * sd) << "subsystem " << i + 1;
  }
}

}  // namespace
}  // namespace dsmpc
