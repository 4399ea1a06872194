// Offline controller ingredients: structured feedback and observer gains,
// block-diagonal terminal cost, α-level terminal set, and the dense
// Riccati-based central baseline.
#pragma once

#include <dsmpc/conic.hpp>
#include <dsmpc/lmi.hpp>
#include <dsmpc/model.hpp>

#include <limits>
#include <string>
#include <vector>

namespace dsmpc {

enum class Provenance { kDistributed, kCentral };

inline const char* to_string(Provenance p) {
  return p == Provenance::kDistributed ? "distributed" : "central";
}

struct Terminal {
  enum class Kind { kPoint, kLevelSet };
  Kind kind = Kind::kPoint;
  double alpha = 0.0;  ///< level of {z : zᵀPz ≤ α} for kLevelSet
};

/// Global gain matrices. K is m x n with the structured sparsity of the
/// neighbor graph (distributed) or dense (central); L is n x p, block
/// diagonal for distributed gains.
struct GainSet {
  Provenance provenance = Provenance::kDistributed;
  Matrix K;
  Matrix L;
  Matrix P;
  Terminal terminal;
  double rho_feedback = 0.0;  ///< ρ(A + BK)
  double rho_observer = 0.0;  ///< ρ(A − LC)

  /// K_{N_i}: rows of u_i, columns of x_{N_i}.
  Matrix K_block(const SystemGraph& g, int i) const {
    return K.middleRows(g.u_offset(i), g[i].m) * g.selector(i).transpose();
  }
  Matrix L_block(const SystemGraph& g, int i) const {
    return L.block(g.x_offset(i), g.y_offset(i), g[i].n, g[i].p);
  }
  Matrix P_block(const SystemGraph& g, int i) const {
    return P.block(g.x_offset(i), g.x_offset(i), g[i].n, g[i].n);
  }
  bool P_block_diagonal(const SystemGraph& g) const {
    for (int i = 0; i < g.size(); ++i)
      for (int j = 0; j < g.size(); ++j)
        if (i != j &&
            !P.block(g.x_offset(i), g.x_offset(j), g[i].n, g[j].n).isZero(0.0))
          return false;
    return true;
  }
};

/// True when K vanishes outside neighborhoods and L is block diagonal.
inline bool respects_structure(const SystemGraph& g, const GainSet& gains) {
  const Matrix km = lmi::feedback_mask(g);
  const Matrix lm = lmi::observer_mask(g);
  return (gains.K.array() * (1.0 - km.array())).isZero(0.0) &&
         (gains.L.array() * (1.0 - lm.array())).isZero(0.0);
}

struct SynthesisOptions {
  conic::SdpOptions sdp;
  int refinement_rounds = 6;  ///< alternating K/L covariance refinement
};

namespace detail {

inline Matrix psd_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(m));
  return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
         eig.eigenvectors().transpose();
}

inline void zero_outside(Matrix& m, const Matrix& mask) {
  m = (m.array() * mask.array()).matrix();
}

/// Structured LQR-type gain: minimise Σ‖X_i‖² subject to
///   [[E, (AE+BY)ᵀ, E Q½, Yᵀ R½], [AE+BY, E, 0, 0], [Q½ E, 0, I, 0], [R½ Y, 0, 0, I]] ⪰ εI,
///   [[X_i, I], [I, E_i]] ⪰ 0,
/// with E block diagonal (blocks `dims`) and Y restricted to `mask`.
/// Returns K = Y E⁻¹, so that (E⁻¹) bounds the closed-loop cost-to-go.
inline Matrix structured_lqr_gain(const Matrix& a, const Matrix& b, const Matrix& q,
                                  const Matrix& r, const Matrix& mask,
                                  const std::vector<int>& dims,
                                  const conic::SdpOptions& opts, const char* what) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(b.cols());
  const double s = std::max({q.norm(), r.norm(), 1e-12});
  const Matrix qh = psd_sqrt(q / s + 1e-6 * Matrix::Identity(n, n));
  const Matrix rh = psd_sqrt(r / s);
  const Matrix I = Matrix::Identity(n, n);

  conic::SdpProblem prob;
  const lmi::BlockDiagVar e = lmi::add_block_diagonal(prob, dims, 0.0);
  const auto y = prob.add_matrix(m, n, 0.0, mask);
  const double eps = 1e-8 * (1.0 + a.norm());
  auto con = prob.add_lmi(3 * n + m, eps);
  lmi::add_var(prob, con, 0, 0, e);
  lmi::add_term(prob, con, n, 0, a, e, I);
  prob.add_term(con, n, 0, b, y, I);
  lmi::add_var(prob, con, n, n, e);
  lmi::add_term(prob, con, 2 * n, 0, qh, e, I);
  prob.add_constant(con, 2 * n, 2 * n, I);
  if (m > 0) {
    prob.add_term(con, 3 * n, 0, rh, y, I);
    prob.add_constant(con, 3 * n, 3 * n, Matrix::Identity(m, m));
  }
  for (std::size_t k = 0; k < dims.size(); ++k) {
    const auto x = prob.add_symmetric(dims[k], 1.0);
    auto c = prob.add_lmi(2 * dims[k]);
    prob.add_var(c, 0, 0, x);
    prob.add_constant(c, 0, dims[k], Matrix::Identity(dims[k], dims[k]));
    prob.add_var(c, dims[k], dims[k], e.blocks[k]);
  }
  const conic::SdpSolution sol = conic::solve_sdp(prob, opts);
  if (sol.report.min_constraint_eig < -1e-6) {
    throw Error(ErrorKind::kInfeasible,
                std::string(what) + ": structured LMI infeasible (status " +
                    conic::to_string(sol.report.status) + ")");
  }
  const Matrix ev = lmi::value(sol, e);
  Matrix k = sol[y] * ev.inverse();
  zero_outside(k, mask);
  return k;
}

}  // namespace detail

/// Structured state feedback K (m x n) with ρ(A + BK) < 1.
inline Matrix synth_structured_feedback(const SystemGraph& g,
                                        const SynthesisOptions& opts = {}) {
  const GlobalModel gm = assemble_global(g);
  Matrix k = detail::structured_lqr_gain(gm.A, gm.B, gm.Q, gm.R, lmi::feedback_mask(g),
                                         lmi::state_dims(g), opts.sdp,
                                         "structured feedback");
  if (conic::spectral_radius(gm.A + gm.B * k) >= 1.0) {
    throw Error(ErrorKind::kInfeasible,
                "structured feedback: no stabilizing structured gain found");
  }
  return k;
}

/// Block-diagonal injection gain L (n x p) with ρ(A − LC) < 1, obtained from
/// the feedback synthesis on the transposed data (Aᵀ, Cᵀ).
inline Matrix synth_structured_observer(const SystemGraph& g,
                                        const SynthesisOptions& opts = {}) {
  const GlobalModel gm = assemble_global(g);
  const int n = g.n();
  const int p = g.p();
  const double reg_w = 1e-6 * std::max(1.0, gm.Sigma_W.norm());
  const double reg_d = 1e-6 * std::max(1.0, gm.Sigma_D.norm());
  const Matrix w = gm.Sigma_W + reg_w * Matrix::Identity(n, n);
  const Matrix v = gm.Sigma_D + reg_d * Matrix::Identity(p, p);
  const Matrix mask = lmi::observer_mask(g).transpose();
  const Matrix kd = detail::structured_lqr_gain(gm.A.transpose(), gm.C.transpose(), w, v,
                                                mask, lmi::state_dims(g), opts.sdp,
                                                "structured observer");
  Matrix l = -kd.transpose();
  if (conic::spectral_radius(gm.A - l * gm.C) >= 1.0) {
    throw Error(ErrorKind::kInfeasible,
                "structured observer: no stabilizing block-diagonal injection gain");
  }
  return l;
}

/// Block-diagonal P with (A+BK)ᵀP(A+BK) − P ⪯ −(Q + KᵀRK), minimal Σ‖P_i‖².
inline Matrix synth_terminal_cost(const SystemGraph& g, const Matrix& k,
                                  const SynthesisOptions& opts = {}) {
  const GlobalModel gm = assemble_global(g);
  const Matrix ak = gm.A + gm.B * k;
  if (conic::spectral_radius(ak) >= 1.0) {
    throw Error(ErrorKind::kPrecondition, "terminal cost: A + BK is not Schur stable");
  }
  const Matrix qk = gm.Q + k.transpose() * gm.R * k;
  const double s = std::max(qk.norm(), 1e-12);
  conic::SdpProblem prob;
  const lmi::BlockDiagVar pv = lmi::add_block_diagonal(prob, lmi::state_dims(g), 1.0);
  auto con = prob.add_lmi(g.n(), 1e-9);
  lmi::add_var(prob, con, 0, 0, pv);
  lmi::add_term(prob, con, 0, 0, -ak.transpose(), pv, ak);
  prob.add_constant(con, 0, 0, -qk / s);
  for (std::size_t b = 0; b < pv.blocks.size(); ++b) {
    auto c = prob.add_lmi(pv.dims[b], 1e-9);
    prob.add_var(c, 0, 0, pv.blocks[b]);
  }
  const conic::SdpSolution sol = conic::solve_sdp(prob, opts.sdp);
  const Matrix p = s * lmi::value(sol, pv);
  const double resid = conic::min_eigenvalue(p - ak.transpose() * p * ak - qk);
  if (resid < -1e-6) {
    throw Error(ErrorKind::kInfeasible,
                "terminal cost: no block-diagonal P for the given K (residual " +
                    std::to_string(resid) + ")");
  }
  return p;
}

/// Largest α with {z : zᵀPz ≤ α} inside every facet row of (H, h):
/// α = min_r h_r² / (H_r P⁻¹ H_rᵀ).
inline double terminal_alpha(const Matrix& p, const Matrix& h_rows, const Vector& h) {
  if (h_rows.cols() != p.rows() || h_rows.rows() != h.size()) {
    throw Error(ErrorKind::kDimension, "terminal_alpha: size mismatch");
  }
  const Matrix pinv = p.ldlt().solve(Matrix::Identity(p.rows(), p.cols()));
  double alpha = std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < h_rows.rows(); ++r) {
    const double q = h_rows.row(r) * pinv * h_rows.row(r).transpose();
    if (!(q > 0.0)) {
      throw Error(ErrorKind::kPolytope, "terminal_alpha: degenerate facet");
    }
    alpha = std::min(alpha, h(r) * h(r) / q);
  }
  return alpha;
}

/// α-level terminal set inside the tightened state sets Z_i and, through the
/// feedback, inside the tightened input sets V_i (when given).
inline double synth_terminal_set(const SystemGraph& g, const GainSet& gains,
                                 const std::vector<Polytope>& z,
                                 const std::vector<std::optional<Polytope>>& v) {
  std::vector<Vector> rows;
  std::vector<double> offs;
  for (int i = 0; i < g.size(); ++i) {
    for (Eigen::Index r = 0; r < z[i].H.rows(); ++r) {
      Vector row = Vector::Zero(g.n());
      row.segment(g.x_offset(i), g[i].n) = z[i].H.row(r).transpose();
      rows.push_back(row);
      offs.push_back(z[i].h(r));
    }
    if (i < static_cast<int>(v.size()) && v[i]) {
      const Matrix ki = gains.K.middleRows(g.u_offset(i), g[i].m);
      for (Eigen::Index r = 0; r < v[i]->H.rows(); ++r) {
        rows.push_back((v[i]->H.row(r) * ki).transpose());
        offs.push_back(v[i]->h(r));
      }
    }
  }
  Matrix h_rows(static_cast<Eigen::Index>(rows.size()), g.n());
  Vector h(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    h_rows.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
    h(static_cast<Eigen::Index>(r)) = offs[r];
  }
  if (h_rows.rows() == 0) return std::numeric_limits<double>::infinity();
  return terminal_alpha(gains.P, h_rows, h);
}

/// Alternating convex refinement of (K, L) that reduces the certified
/// block-diagonal error covariance in the constrained directions.
/// K-step: L fixed, variables (Σ^x̃, Σ^e, Y = KΣ^e). L-step: Σ^x̃ fixed,
/// variables (Σ^e, Y, L). A step is kept only if both loops stay stable.
inline void refine_gains_for_covariance(const SystemGraph& g, Matrix& k, Matrix& l,
                                        const SynthesisOptions& opts = {}) {
  const GlobalModel gm = assemble_global(g);
  if ((gm.Sigma_W.isZero(0.0) && gm.Sigma_D.isZero(0.0)) || opts.refinement_rounds <= 0) {
    return;
  }
  lmi::CovarianceInputs in;
  in.A = gm.A;
  in.B = gm.B;
  in.C = gm.C;
  in.Sigma_W = gm.Sigma_W;
  in.Sigma_D = gm.Sigma_D;
  in.weight = lmi::tightening_weight(g);
  in.feedback_mask = lmi::feedback_mask(g);
  in.observer_mask = lmi::observer_mask(g);
  in.dims = lmi::state_dims(g);
  const bool observer_step = conic::min_eigenvalue(gm.Sigma_D) > 0.0;
  // Intermediate steps only propose gains; the covariance bound used later is
  // re-solved with the final gains, so a loose feasibility check suffices.
  constexpr double kStepTolerance = 1e-4;

  auto stable = [&](const Matrix& kk, const Matrix& ll) {
    return kk.allFinite() && ll.allFinite() &&
           conic::spectral_radius(gm.A + gm.B * kk) < 1.0 &&
           conic::spectral_radius(gm.A - ll * gm.C) < 1.0;
  };

  auto feedback_step = [&](const Matrix& ll, lmi::CovarianceResult& res) -> bool {
    in.L = ll;
    res = lmi::solve_covariance_program(in, lmi::CovarianceMode::kFreeFeedback, opts.sdp);
    detail::zero_outside(res.K, in.feedback_mask);
    return res.report.min_constraint_eig > -kStepTolerance && stable(res.K, ll);
  };

  lmi::CovarianceResult res;
  if (!feedback_step(l, res)) return;
  k = res.K;
  for (int round = 0; round < opts.refinement_rounds && observer_step; ++round) {
    in.fixed_state_error = res.state_error;
    lmi::CovarianceResult obs =
        lmi::solve_covariance_program(in, lmi::CovarianceMode::kFreeObserver, opts.sdp);
    Matrix l_new = obs.L;
    detail::zero_outside(l_new, in.observer_mask);
    if (obs.report.min_constraint_eig < -kStepTolerance || !stable(k, l_new)) break;
    lmi::CovarianceResult next;
    if (!feedback_step(l_new, next)) break;
    const bool improved = next.objective <= res.objective + 1e-9 * std::abs(res.objective);
    l = l_new;
    k = next.K;
    res = next;
    if (!improved) break;
  }
}

/// Full distributed pipeline: structured observer and feedback, covariance
/// refinement, block-diagonal terminal cost, point terminal set.
inline GainSet synth_distributed(const SystemGraph& g, const SynthesisOptions& opts = {}) {
  const GlobalModel gm = assemble_global(g);
  GainSet out;
  out.provenance = Provenance::kDistributed;
  out.L = synth_structured_observer(g, opts);
  out.K = synth_structured_feedback(g, opts);
  refine_gains_for_covariance(g, out.K, out.L, opts);
  out.P = synth_terminal_cost(g, out.K, opts);
  out.rho_feedback = conic::spectral_radius(gm.A + gm.B * out.K);
  out.rho_observer = conic::spectral_radius(gm.A - out.L * gm.C);
  return out;
}

/// Dense Riccati gains. The terminal cost is block diagonal when such a P
/// exists for K_c (needed by the distributed solver), else the Riccati P.
inline GainSet central_gains(const SystemGraph& g, const SynthesisOptions& opts = {}) {
  const GlobalModel gm = assemble_global(g);
  GainSet out;
  out.provenance = Provenance::kCentral;
  const conic::DareSolution ctrl = conic::solve_dare(gm.A, gm.B, gm.Q, gm.R);
  out.K = ctrl.k;
  // A vanishing regulariser keeps the dual Riccati problem well posed when
  // a noise covariance is singular.
  const double reg = 1e-12 * std::max(1.0, gm.Sigma_W.norm() + gm.Sigma_D.norm());
  out.L = conic::dual_observer_gain(
      gm.A, gm.C, gm.Sigma_W + reg * Matrix::Identity(g.n(), g.n()),
      gm.Sigma_D + reg * Matrix::Identity(g.p(), g.p()));
  try {
    out.P = synth_terminal_cost(g, out.K, opts);
  } catch (const Error&) {
    out.P = ctrl.p;
  }
  out.rho_feedback = conic::spectral_radius(gm.A + gm.B * out.K);
  out.rho_observer = conic::spectral_radius(gm.A - out.L * gm.C);
  if (out.rho_feedback >= 1.0 || out.rho_observer >= 1.0) {
    throw Error(ErrorKind::kSolver, "central gains: Riccati solution is not stabilizing");
  }
  return out;
}

}  // namespace dsmpc
