// Augmented error dynamics, stationary error covariances, probabilistic
// reachable sets and constraint tightening.
//
// Error ordering: ξ = col(x̃, e) with x̃ = x − x̂ (estimation error) and
// e = x̂ − z (deviation of the estimate from the nominal prediction).
#pragma once

#include <dsmpc/conic.hpp>
#include <dsmpc/lmi.hpp>
#include <dsmpc/model.hpp>
#include <dsmpc/synthesis.hpp>

#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace dsmpc {

/// ξ⁺ = Ψ ξ + Γ ω with ω = col(w, d) ~ (0, Ω).
struct AugmentedDynamics {
  Matrix Psi;    ///< 2n x 2n, [[A − LC, 0], [LC, A + BK]]
  Matrix Gamma;  ///< 2n x (n + p), [[I, −L], [0, L]]
  Matrix Omega;  ///< (n + p) x (n + p), diag(Σ_W, Σ_D)
  std::vector<int> dims;  ///< subsystem state dimensions

  int n() const { return static_cast<int>(Psi.rows()) / 2; }
  Matrix noise_covariance() const {
    return symmetrize(Gamma * Omega * Gamma.transpose());
  }
};

inline AugmentedDynamics build_augmented_dynamics(const SystemGraph& g,
                                                  const GainSet& gains) {
  const GlobalModel gm = assemble_global(g);
  const int n = g.n(), p = g.p();
  AugmentedDynamics d;
  d.Psi = Matrix::Zero(2 * n, 2 * n);
  d.Psi.topLeftCorner(n, n) = gm.A - gains.L * gm.C;
  d.Psi.bottomLeftCorner(n, n) = gains.L * gm.C;
  d.Psi.bottomRightCorner(n, n) = gm.A + gm.B * gains.K;
  d.Gamma = Matrix::Zero(2 * n, n + p);
  d.Gamma.topLeftCorner(n, n).setIdentity();
  d.Gamma.topRightCorner(n, p) = -gains.L;
  d.Gamma.bottomRightCorner(n, p) = gains.L;
  d.Omega = Matrix::Zero(n + p, n + p);
  d.Omega.topLeftCorner(n, n) = gm.Sigma_W;
  d.Omega.bottomRightCorner(p, p) = gm.Sigma_D;
  d.dims = lmi::state_dims(g);
  if (conic::spectral_radius(d.Psi) >= 1.0) {
    throw Error(ErrorKind::kPrecondition,
                "augmented error dynamics are not stable (check the gains)");
  }
  return d;
}

/// Global index list of ξ_i = col(x̃_i, e_i).
inline std::vector<int> local_error_indices(const SystemGraph& g, int i) {
  std::vector<int> idx;
  for (int k = 0; k < g[i].n; ++k) idx.push_back(g.x_offset(i) + k);
  for (int k = 0; k < g[i].n; ++k) idx.push_back(g.n() + g.x_offset(i) + k);
  return idx;
}

inline Matrix principal_submatrix(const Matrix& m, const std::vector<int>& idx) {
  Matrix out(idx.size(), idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < idx.size(); ++c) out(r, c) = m(idx[r], idx[c]);
  return out;
}

/// Block-diagonal error covariance: blocks[0..M) are Σ^x̃_i, blocks[M..2M)
/// are Σ^e_i, in the ξ = col(x̃, e) ordering.
struct ErrorCovariance {
  std::vector<Matrix> blocks;

  int subsystems() const { return static_cast<int>(blocks.size()) / 2; }
  const Matrix& state_error(int i) const { return blocks.at(i); }
  const Matrix& tracking_error(int i) const { return blocks.at(subsystems() + i); }

  Matrix assembled() const { return block_diagonal(blocks); }

  /// Σ_i = diag(Σ^x̃_i, Σ^e_i).
  Matrix local(int i) const {
    return block_diagonal(std::vector<Matrix>{state_error(i), tracking_error(i)});
  }

  static ErrorCovariance from_dense(const Matrix& sigma, const std::vector<int>& dims) {
    ErrorCovariance out;
    const int n = static_cast<int>(sigma.rows()) / 2;
    for (int half = 0; half < 2; ++half) {
      int off = half * n;
      for (int d : dims) {
        out.blocks.push_back(sigma.block(off, off, d, d));
        off += d;
      }
    }
    return out;
  }
};

/// One covariance step Σ⁺ = ΨΣΨᵀ + ΓΩΓᵀ followed by the block-diagonal
/// over-approximation: each coupling block M_ab is dominated by adding
/// ‖M_ab‖₂·I to both diagonal blocks a and b.
inline ErrorCovariance propagate_covariance(const ErrorCovariance& sigma,
                                            const AugmentedDynamics& dyn) {
  const Matrix s = sigma.assembled();
  if (s.rows() != dyn.Psi.rows()) {
    throw Error(ErrorKind::kDimension, "propagate_covariance: size mismatch");
  }
  const Matrix dense = symmetrize(dyn.Psi * s * dyn.Psi.transpose() + dyn.noise_covariance());
  std::vector<int> offs, dims;
  int off = 0;
  for (const Matrix& b : sigma.blocks) {
    offs.push_back(off);
    dims.push_back(static_cast<int>(b.rows()));
    off += static_cast<int>(b.rows());
  }
  ErrorCovariance out;
  const std::size_t count = sigma.blocks.size();
  for (std::size_t a = 0; a < count; ++a) {
    Matrix blk = dense.block(offs[a], offs[a], dims[a], dims[a]);
    double margin = 0.0;
    for (std::size_t b = 0; b < count; ++b) {
      if (a == b) continue;
      const Matrix mab = dense.block(offs[a], offs[b], dims[a], dims[b]);
      if (mab.size() == 0) continue;
      margin += Eigen::JacobiSVD<Matrix>(mab).singularValues()(0);
    }
    blk.diagonal().array() += margin;
    out.blocks.push_back(blk);
  }
  return out;
}

struct StationaryCovariance {
  ErrorCovariance sigma;
  conic::SolveReport report;
};

/// Certified block-diagonal bound Σ_f ⪰ ΨΣ_fΨᵀ + ΓΩΓᵀ from the Schur-form
/// LMI, minimising the variance seen by the state constraints.
inline StationaryCovariance stationary_covariance_distributed(
    const SystemGraph& g, const GainSet& gains, const conic::SdpOptions& opts = {}) {
  const GlobalModel gm = assemble_global(g);
  build_augmented_dynamics(g, gains);  // stability precondition
  lmi::CovarianceInputs in;
  in.A = gm.A;
  in.B = gm.B;
  in.C = gm.C;
  in.Sigma_W = gm.Sigma_W;
  in.Sigma_D = gm.Sigma_D;
  in.K = gains.K;
  in.L = gains.L;
  in.weight = lmi::tightening_weight(g);
  in.dims = lmi::state_dims(g);
  const lmi::CovarianceResult res =
      lmi::solve_covariance_program(in, lmi::CovarianceMode::kFixedGains, opts);
  StationaryCovariance out;
  out.report = res.report;
  Matrix full = Matrix::Zero(2 * g.n(), 2 * g.n());
  full.topLeftCorner(g.n(), g.n()) = res.state_error;
  full.bottomRightCorner(g.n(), g.n()) = res.tracking_error;
  out.sigma = ErrorCovariance::from_dense(full, in.dims);
  return out;
}

/// Exact stationary covariance Σ = ΨΣΨᵀ + ΓΩΓᵀ (dense).
inline Matrix stationary_covariance_central(const AugmentedDynamics& dyn) {
  return conic::solve_discrete_lyapunov(dyn.Psi.transpose(), dyn.noise_covariance());
}

/// Σ^X = [I I] Σ [I I]ᵀ for Σ = cov(x̃, e) of size 2k.
inline Matrix state_error_covariance(const Matrix& sigma_local) {
  if (sigma_local.rows() % 2 != 0 || sigma_local.rows() != sigma_local.cols()) {
    throw Error(ErrorKind::kDimension, "state_error_covariance: expected 2k x 2k");
  }
  const Eigen::Index k = sigma_local.rows() / 2;
  Matrix t(k, 2 * k);
  t << Matrix::Identity(k, k), Matrix::Identity(k, k);
  return symmetrize(t * sigma_local * t.transpose());
}

/// Σ^U = [0 K] Σ [0 K]ᵀ.
inline Matrix input_error_covariance(const Matrix& sigma_neigh, const Matrix& k) {
  if (sigma_neigh.rows() != 2 * k.cols() || sigma_neigh.cols() != sigma_neigh.rows()) {
    throw Error(ErrorKind::kDimension, "input_error_covariance: size mismatch");
  }
  Matrix t = Matrix::Zero(k.rows(), 2 * k.cols());
  t.rightCols(k.cols()) = k;
  return symmetrize(t * sigma_neigh * t.transpose());
}

enum class QuantileMode { kChebyshev, kGaussian };

inline const char* to_string(QuantileMode m) {
  return m == QuantileMode::kChebyshev ? "chebyshev" : "gaussian";
}

/// Radius p̃ of the ellipsoidal PRS {δ : δᵀΣ⁻¹δ ≤ p̃} for probability p in
/// dimension n: n/(1−p) (Chebyshev) or the χ²_n quantile (Gaussian).
inline double prs_quantile(double p, int n, QuantileMode mode) {
  if (!(p > 0.0 && p < 1.0) || n < 1) {
    throw Error(ErrorKind::kPrecondition, "prs_quantile: need p in (0,1), n >= 1");
  }
  if (mode == QuantileMode::kChebyshev) return n / (1.0 - p);
  return 2.0 * boost::math::gamma_p_inv(0.5 * n, p);
}

/// r_j = sqrt(p̃ Σ_jj); tiny negative diagonals from round-off clamp to 0.
inline Vector marginal_box(const Matrix& sigma, double p_tilde) {
  Vector r(sigma.rows());
  for (Eigen::Index j = 0; j < sigma.rows(); ++j) {
    double v = sigma(j, j);
    if (v < 0.0) {
      if (v < -1e-9) {
        std::cerr << "warning: marginal_box clamped negative variance " << v << "\n";
      }
      v = 0.0;
    }
    r(j) = std::sqrt(p_tilde * v);
  }
  return r;
}

struct TightenedPolytope {
  Polytope set;
  bool empty = false;
  int offending_facet = -1;  ///< first facet with negative offset
};

/// Pontryagin difference of {Hx ≤ h} and the box |x_j| ≤ r_j:
/// h_r − Σ_j |H_rj| r_j.
inline TightenedPolytope tighten_polytope(const Polytope& poly, const Vector& r) {
  if (r.size() != poly.H.cols()) {
    throw Error(ErrorKind::kDimension, "tighten_polytope: half-width size mismatch");
  }
  TightenedPolytope out;
  out.set.H = poly.H;
  out.set.h = poly.h - poly.H.cwiseAbs() * r;
  for (Eigen::Index k = 0; k < out.set.h.size(); ++k) {
    if (out.set.h(k) < 0.0) {
      out.empty = true;
      out.offending_facet = static_cast<int>(k);
      break;
    }
  }
  return out;
}

/// Gaussian quantiles when every subsystem declares Gaussian noise.
inline QuantileMode default_quantile_mode(const SystemGraph& g) {
  for (const auto& s : g.subsystems())
    if (s.noise != NoiseFamily::kGaussian) return QuantileMode::kChebyshev;
  return QuantileMode::kGaussian;
}

struct PrsSpec {
  QuantileMode mode = QuantileMode::kGaussian;
  std::vector<double> px_tilde;
  std::vector<std::optional<double>> pu_tilde;
  std::vector<Matrix> sigma_x;  ///< Σ^X_i
  std::vector<Matrix> sigma_u;  ///< Σ^U_i
  std::vector<Vector> r_x;
  std::vector<Vector> r_u;      ///< empty when no input chance constraint
  std::vector<Polytope> Z;
  std::vector<std::optional<Polytope>> V;
};

/// Full tightening pipeline from a global 2n x 2n error covariance (either
/// the assembled block-diagonal bound or the exact dense matrix).
inline PrsSpec build_prs_spec(const SystemGraph& g, const Matrix& sigma_global,
                              const GainSet& gains, QuantileMode mode) {
  const int n = g.n();
  if (sigma_global.rows() != 2 * n || sigma_global.cols() != 2 * n) {
    throw Error(ErrorKind::kDimension, "build_prs_spec: covariance must be 2n x 2n");
  }
  PrsSpec spec;
  spec.mode = mode;
  const Matrix sigma_e = sigma_global.bottomRightCorner(n, n);
  for (int i = 0; i < g.size(); ++i) {
    const Subsystem& s = g[i];
    const Matrix sx = state_error_covariance(
        principal_submatrix(sigma_global, local_error_indices(g, i)));
    const Matrix ki = gains.K.middleRows(g.u_offset(i), s.m);
    const Matrix su = symmetrize(ki * sigma_e * ki.transpose());
    spec.sigma_x.push_back(sx);
    spec.sigma_u.push_back(su);
    const double px = prs_quantile(s.p_x, s.n, mode);
    spec.px_tilde.push_back(px);
    spec.r_x.push_back(marginal_box(sx, px));
    const TightenedPolytope z = tighten_polytope(s.X, spec.r_x.back());
    if (z.empty) {
      throw Error(ErrorKind::kInfeasible,
                  "tightened state set of subsystem " + std::to_string(i + 1) +
                      " is empty (facet " + std::to_string(z.offending_facet + 1) + ")");
    }
    spec.Z.push_back(z.set);
    if (s.p_u && s.U) {
      const double pu = prs_quantile(*s.p_u, s.m, mode);
      spec.pu_tilde.push_back(pu);
      spec.r_u.push_back(marginal_box(su, pu));
      const TightenedPolytope v = tighten_polytope(*s.U, spec.r_u.back());
      if (v.empty) {
        throw Error(ErrorKind::kInfeasible,
                    "tightened input set of subsystem " + std::to_string(i + 1) +
                        " is empty (facet " + std::to_string(v.offending_facet + 1) + ")");
      }
      spec.V.push_back(v.set);
    } else {
      spec.pu_tilde.push_back(std::nullopt);
      spec.r_u.push_back(Vector());
      spec.V.push_back(std::nullopt);
    }
  }
  return spec;
}

/// Product of state half-widths over the coordinates that appear in some
/// facet normal, across all subsystems.
inline double constrained_box_volume(const SystemGraph& g, const PrsSpec& spec) {
  double vol = 1.0;
  for (int i = 0; i < g.size(); ++i) {
    const Matrix& h = g[i].X.H;
    for (Eigen::Index j = 0; j < h.cols(); ++j)
      if (!h.col(j).isZero(0.0)) vol *= spec.r_x[i](j);
  }
  return vol;
}

/// 1 − vol(reference)/vol(other); positive when `reference` is smaller.
inline double volume_reduction(const SystemGraph& g, const PrsSpec& reference,
                               const PrsSpec& other) {
  const double vo = constrained_box_volume(g, other);
  if (!(vo > 0.0)) return 0.0;
  return 1.0 - constrained_box_volume(g, reference) / vo;
}

/// Error covariance used for tightening: the certified block-diagonal bound
/// for distributed gains, the exact stationary covariance for central gains.
inline Matrix error_covariance_for(const SystemGraph& g, const GainSet& gains,
                                   const conic::SdpOptions& opts = {}) {
  if (gains.provenance == Provenance::kCentral) {
    return stationary_covariance_central(build_augmented_dynamics(g, gains));
  }
  return stationary_covariance_distributed(g, gains, opts).sigma.assembled();
}

}  // namespace dsmpc
