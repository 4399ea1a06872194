// Structured LMI building blocks shared by gain synthesis and covariance
// bounds: block-diagonal variables, sparsity masks, and the stationary
// error-covariance inequality in Schur form.
#pragma once

#include <dsmpc/conic.hpp>
#include <dsmpc/model.hpp>

#include <optional>
#include <vector>

namespace dsmpc::lmi {

using conic::SdpProblem;

/// Block-diagonal symmetric variable made of independent blocks.
struct BlockDiagVar {
  std::vector<SdpProblem::VarId> blocks;
  std::vector<int> offsets;
  std::vector<int> dims;
  int dim = 0;
};

inline BlockDiagVar add_block_diagonal(SdpProblem& prob, const std::vector<int>& dims,
                                       double weight) {
  BlockDiagVar out;
  for (int d : dims) {
    out.blocks.push_back(prob.add_symmetric(d, weight));
    out.offsets.push_back(out.dim);
    out.dims.push_back(d);
    out.dim += d;
  }
  return out;
}

/// Adds left · blockdiag(X) · right at (r0, c0).
inline void add_term(SdpProblem& prob, SdpProblem::ConstraintId con, int r0, int c0,
                     const Matrix& left, const BlockDiagVar& x, const Matrix& right) {
  for (std::size_t k = 0; k < x.blocks.size(); ++k) {
    prob.add_term(con, r0, c0, left.middleCols(x.offsets[k], x.dims[k]), x.blocks[k],
                  right.middleRows(x.offsets[k], x.dims[k]));
  }
}

inline void add_var(SdpProblem& prob, SdpProblem::ConstraintId con, int r0, int c0,
                    const BlockDiagVar& x) {
  for (std::size_t k = 0; k < x.blocks.size(); ++k) {
    prob.add_var(con, r0 + x.offsets[k], c0 + x.offsets[k], x.blocks[k]);
  }
}

inline Matrix value(const conic::SdpSolution& sol, const BlockDiagVar& x) {
  Matrix out = Matrix::Zero(x.dim, x.dim);
  for (std::size_t k = 0; k < x.blocks.size(); ++k) {
    out.block(x.offsets[k], x.offsets[k], x.dims[k], x.dims[k]) = sol[x.blocks[k]];
  }
  return symmetrize(out);
}

inline std::vector<int> state_dims(const SystemGraph& g) {
  std::vector<int> d;
  for (const auto& s : g.subsystems()) d.push_back(s.n);
  return d;
}

/// 1 where a structured feedback may act: rows of u_i, columns of x_{N_i}.
inline Matrix feedback_mask(const SystemGraph& g) {
  Matrix mask = Matrix::Zero(g.m(), g.n());
  for (int i = 0; i < g.size(); ++i)
    for (int j : g.neighbors(i))
      mask.block(g.u_offset(i), g.x_offset(j), g[i].m, g[j].n).setOnes();
  return mask;
}

/// 1 where an injection gain may act: L_i maps y_i into x_i only.
inline Matrix observer_mask(const SystemGraph& g) {
  Matrix mask = Matrix::Zero(g.n(), g.p());
  for (int i = 0; i < g.size(); ++i)
    mask.block(g.x_offset(i), g.y_offset(i), g[i].n, g[i].p).setOnes();
  return mask;
}

/// Normalised sum of facet-normal outer products per subsystem, assembled
/// block-diagonally. Weighting the covariance with it targets the variances
/// that enter the constraint tightening.
inline Matrix tightening_weight(const SystemGraph& g) {
  Matrix w = Matrix::Zero(g.n(), g.n());
  for (int i = 0; i < g.size(); ++i) {
    const Polytope& x = g[i].X;
    Matrix wi = Matrix::Zero(g[i].n, g[i].n);
    for (Eigen::Index r = 0; r < x.H.rows(); ++r) {
      const Vector h = x.H.row(r).transpose();
      wi += h * h.transpose() / h.squaredNorm();
    }
    if (wi.trace() > 0) wi /= wi.trace();
    w.block(g.x_offset(i), g.x_offset(i), g[i].n, g[i].n) = wi;
  }
  return w;
}

/// Which quantities the covariance program treats as decision variables.
enum class CovarianceMode {
  kFixedGains,    ///< K, L given; variables Σ^x̃, Σ^e
  kFreeFeedback,  ///< L given; variables Σ^x̃, Σ^e, Y = K Σ^e
  kFreeObserver,  ///< Σ^x̃ given; variables Σ^e, Y, L
};

struct CovarianceInputs {
  Matrix A, B, C;
  Matrix Sigma_W, Sigma_D;
  Matrix K;                  ///< used in kFixedGains
  Matrix L;                  ///< used in kFixedGains and kFreeFeedback
  Matrix fixed_state_error;  ///< Σ^x̃ for kFreeObserver
  Matrix weight;             ///< linear objective weight (n x n) on Σ^x̃ and Σ^e
  Matrix feedback_mask;
  Matrix observer_mask;
  std::vector<int> dims;
  double regularization = 1e-3;  ///< Frobenius weight in normalised units
};

struct CovarianceResult {
  Matrix state_error;    ///< Σ^x̃ (block diagonal)
  Matrix tracking_error; ///< Σ^e (block diagonal)
  Matrix K;              ///< recovered feedback (kFreeFeedback / kFreeObserver)
  Matrix L;              ///< recovered injection gain (kFreeObserver)
  conic::SolveReport report;
  double objective = 0.0;
};

/// Minimises ⟨W, Σ^x̃ + Σ^e⟩ + δ‖Σ‖² over block-diagonal Σ = diag(Σ^x̃, Σ^e)
/// subject to [[Σ − ΓΩΓᵀ, ΨΣ], [ΣΨᵀ, Σ]] ⪰ 0 with
/// Ψ = [[A − LC, 0], [LC, A + BK]], Γ = [[I, −L], [0, L]], Ω = diag(Σ_W, Σ_D).
/// The problem is solved in units normalised by ‖ΓΩΓᵀ‖ (or ‖Σ_W‖ when L is
/// free) and mapped back.
inline CovarianceResult solve_covariance_program(const CovarianceInputs& in,
                                                 CovarianceMode mode,
                                                 const conic::SdpOptions& opts = {}) {
  const int n = static_cast<int>(in.A.rows());
  const int p = static_cast<int>(in.C.rows());
  const Matrix I = Matrix::Identity(n, n);

  double scale = 0.0;
  if (mode == CovarianceMode::kFreeObserver) {
    scale = in.Sigma_W.norm() + in.fixed_state_error.norm();
  } else {
    const Matrix lsl = in.L * in.Sigma_D * in.L.transpose();
    scale = (in.Sigma_W + lsl).norm() + 2.0 * lsl.norm();
  }
  if (!(scale > 0.0)) scale = 1.0;

  SdpProblem prob;
  const double reg = in.regularization;
  BlockDiagVar sx;
  if (mode != CovarianceMode::kFreeObserver) sx = add_block_diagonal(prob, in.dims, reg);
  BlockDiagVar se = add_block_diagonal(prob, in.dims, reg);
  for (std::size_t k = 0; k < in.dims.size(); ++k) {
    const Matrix wk = in.weight.block(se.offsets[k], se.offsets[k], in.dims[k], in.dims[k]);
    if (mode != CovarianceMode::kFreeObserver) prob.set_linear(sx.blocks[k], wk);
    prob.set_linear(se.blocks[k], wk);
  }

  std::optional<SdpProblem::VarId> y;
  std::optional<SdpProblem::VarId> lvar;
  if (mode != CovarianceMode::kFixedGains) {
    y = prob.add_matrix(static_cast<int>(in.B.cols()), n, 0.0, in.feedback_mask);
  }
  if (mode == CovarianceMode::kFreeObserver) {
    lvar = prob.add_matrix(n, p, 0.0, in.observer_mask);
  }

  const int dim = mode == CovarianceMode::kFreeObserver ? 4 * n + p : 4 * n;
  // Fixed-gain solves produce certificates; keep a small interior margin so
  // the approximate ADMM solution still satisfies the inequality.
  auto con = prob.add_lmi(dim, mode == CovarianceMode::kFixedGains ? 1e-6 : 0.0);
  const Matrix sw = in.Sigma_W / scale;

  if (mode == CovarianceMode::kFreeObserver) {
    const Matrix sxf = in.fixed_state_error / scale;
    prob.add_constant(con, 0, 0, sxf - sw);
    add_var(prob, con, n, n, se);
    // ΨΣ, first block row: (A − LC)Σ^x̃
    prob.add_constant(con, 0, 2 * n, in.A * sxf);
    prob.add_term(con, 0, 2 * n, -I, *lvar, in.C * sxf);
    prob.add_term(con, n, 2 * n, I, *lvar, in.C * sxf);
    add_term(prob, con, n, 3 * n, in.A, se, I);
    prob.add_term(con, n, 3 * n, in.B, *y, I);
    prob.add_constant(con, 2 * n, 2 * n, sxf);
    add_var(prob, con, 3 * n, 3 * n, se);
    // Schur complement of L Σ_D Lᵀ through [−L; L].
    prob.add_term(con, 0, 4 * n, -I, *lvar, Matrix::Identity(p, p));
    prob.add_term(con, n, 4 * n, I, *lvar, Matrix::Identity(p, p));
    prob.add_constant(con, 4 * n, 4 * n, scale * in.Sigma_D.inverse());
  } else {
    const Matrix lsl = in.L * in.Sigma_D * in.L.transpose() / scale;
    const Matrix al = in.A - in.L * in.C;
    add_var(prob, con, 0, 0, sx);
    prob.add_constant(con, 0, 0, -(sw + lsl));
    add_var(prob, con, n, n, se);
    prob.add_constant(con, n, n, -lsl);
    prob.add_constant(con, 0, n, lsl);
    add_term(prob, con, 0, 2 * n, al, sx, I);
    add_term(prob, con, n, 2 * n, in.L * in.C, sx, I);
    if (mode == CovarianceMode::kFixedGains) {
      add_term(prob, con, n, 3 * n, in.A + in.B * in.K, se, I);
    } else {
      add_term(prob, con, n, 3 * n, in.A, se, I);
      prob.add_term(con, n, 3 * n, in.B, *y, I);
    }
    add_var(prob, con, 2 * n, 2 * n, sx);
    add_var(prob, con, 3 * n, 3 * n, se);
  }

  const conic::SdpSolution sol = conic::solve_sdp(prob, opts);
  CovarianceResult out;
  out.report = sol.report;
  out.objective = sol.objective;
  out.tracking_error = scale * value(sol, se);
  out.state_error = mode == CovarianceMode::kFreeObserver ? in.fixed_state_error
                                                          : Matrix(scale * value(sol, sx));
  if (y) {
    const Matrix se_scaled = value(sol, se);
    out.K = sol[*y] * se_scaled.inverse();
  }
  if (lvar) out.L = sol[*lvar];
  return out;
}

}  // namespace dsmpc::lmi
