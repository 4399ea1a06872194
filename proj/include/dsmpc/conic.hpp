// Small dense numerical kernels: PSD projection, an ADMM semidefinite
// program solver, discrete Lyapunov / Riccati solves and spectral quantities.
//
// Everything here is sized for the controller-synthesis problems of a few
// coupled subsystems (matrices up to a few dozen rows).
#pragma once

#include <dsmpc/common.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dsmpc::conic {

inline void require_finite(const Matrix& m, const char* what) {
  if (!all_finite(m)) {
    throw Error(ErrorKind::kPrecondition,
                std::string(what) + ": non-finite matrix entries");
  }
}

/// Frobenius-nearest positive semidefinite matrix (eigenvalue clamping).
inline Matrix project_psd(const Matrix& s) {
  require_finite(s, "project_psd");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(s));
  if (eig.info() != Eigen::Success) {
    throw Error(ErrorKind::kSolver, "project_psd: eigendecomposition failed");
  }
  const Vector clamped = eig.eigenvalues().cwiseMax(0.0);
  Matrix out = eig.eigenvectors() * clamped.asDiagonal() *
               eig.eigenvectors().transpose();
  return symmetrize(out);
}

inline double min_eigenvalue(const Matrix& s) {
  if (s.size() == 0) return std::numeric_limits<double>::infinity();
  require_finite(s, "min_eigenvalue");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(s),
                                            Eigen::EigenvaluesOnly);
  return eig.eigenvalues()(0);
}

inline double spectral_radius(const Matrix& a) {
  if (a.rows() != a.cols()) {
    throw Error(ErrorKind::kDimension, "spectral_radius: matrix not square");
  }
  if (a.size() == 0) return 0.0;
  require_finite(a, "spectral_radius");
  Eigen::EigenSolver<Matrix> eig(a, false);
  if (eig.info() != Eigen::Success) {
    throw Error(ErrorKind::kSolver, "spectral_radius: eigenvalues failed");
  }
  return eig.eigenvalues().cwiseAbs().maxCoeff();
}

/// Solves Ψᵀ P Ψ − P = −Q for P. Requires ρ(Ψ) < 1.
inline Matrix solve_discrete_lyapunov(const Matrix& psi, const Matrix& q) {
  const Eigen::Index n = psi.rows();
  if (psi.cols() != n || q.rows() != n || q.cols() != n) {
    throw Error(ErrorKind::kDimension, "solve_discrete_lyapunov: size mismatch");
  }
  if (n == 0) return Matrix(0, 0);
  if (spectral_radius(psi) >= 1.0) {
    throw Error(ErrorKind::kPrecondition,
                "solve_discrete_lyapunov: spectral radius of Psi >= 1");
  }
  Matrix p;
  if (n <= 40) {
    // (I − Ψᵀ⊗Ψᵀ) vec(P) = vec(Q)
    const Eigen::Index nn = n * n;
    Matrix kron(nn, nn);
    const Matrix pt = psi.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        kron.block(i * n, j * n, n, n) = -pt(i, j) * pt;
      }
    }
    kron.diagonal().array() += 1.0;
    const Vector x = kron.partialPivLu().solve(
        Eigen::Map<const Vector>(q.data(), nn));
    p = Eigen::Map<const Matrix>(x.data(), n, n);
  } else {
    // Squared Smith iteration: P = Σ_k (Ψᵀ)^k Q Ψ^k.
    p = q;
    Matrix a = psi;
    for (int it = 0; it < 64; ++it) {
      const Matrix step = a.transpose() * p * a;
      p += step;
      a = a * a;
      if (step.norm() <= 1e-17 * p.norm()) break;
    }
  }
  return symmetrize(p);
}

struct DareOptions {
  double tolerance = 1e-12;  ///< relative Frobenius change between iterates
  long max_iterations = 1000000;
};

struct DareSolution {
  Matrix p;
  Matrix k;  ///< K = −(R + BᵀPB)⁻¹ BᵀPA, so A + BK is the closed loop
  long iterations = 0;
};

/// Stabilizing solution of the discrete algebraic Riccati equation by
/// fixed-point (value) iteration started at P = Q.
inline DareSolution solve_dare(const Matrix& a, const Matrix& b,
                               const Matrix& q, const Matrix& r,
                               const DareOptions& opts = {}) {
  const Eigen::Index n = a.rows();
  const Eigen::Index m = b.cols();
  if (a.cols() != n || b.rows() != n || q.rows() != n || q.cols() != n ||
      r.rows() != m || r.cols() != m) {
    throw Error(ErrorKind::kDimension, "solve_dare: size mismatch");
  }
  DareSolution sol;
  Matrix p = symmetrize(q);
  auto gain = [&](const Matrix& pm) -> Matrix {
    const Matrix s = r + b.transpose() * pm * b;
    return -s.ldlt().solve(b.transpose() * pm * a);
  };
  for (long it = 1; it <= opts.max_iterations; ++it) {
    const Matrix k = gain(p);
    Matrix next = q + a.transpose() * p * a + a.transpose() * p * b * k;
    next = symmetrize(next);
    if (!all_finite(next)) break;
    const double change = (next - p).norm();
    p = std::move(next);
    sol.iterations = it;
    if (change <= opts.tolerance * std::max(1.0, p.norm())) {
      sol.p = p;
      sol.k = gain(p);
      if (spectral_radius(a + b * sol.k) >= 1.0) {
        throw Error(ErrorKind::kSolver,
                    "solve_dare: converged solution is not stabilizing");
      }
      return sol;
    }
  }
  throw Error(ErrorKind::kSolver, "solve_dare: Riccati iteration did not converge");
}

/// Predictor-form estimator gain L with ρ(A − LC) < 1 from the dual Riccati
/// equation on (Aᵀ, Cᵀ, W, V).
inline Matrix dual_observer_gain(const Matrix& a, const Matrix& c,
                                 const Matrix& w, const Matrix& v,
                                 const DareOptions& opts = {}) {
  const DareSolution dual = solve_dare(a.transpose(), c.transpose(), w, v, opts);
  return -dual.k.transpose();
}

// ---------------------------------------------------------------------------
// Semidefinite programs
// ---------------------------------------------------------------------------

enum class SolveStatus { kOptimal, kMaxIterations, kInfeasibleSuspected };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::kOptimal:
      return "optimal";
    case SolveStatus::kMaxIterations:
      return "max-iterations";
    case SolveStatus::kInfeasibleSuspected:
      return "infeasible-suspected";
  }
  return "unknown";
}

struct SolveReport {
  SolveStatus status = SolveStatus::kMaxIterations;
  int iterations = 0;
  double primal_residual = 0.0;  ///< ‖S(θ) − Z‖_F over all constraints
  double dual_residual = 0.0;    ///< ρ‖𝒜ᵀ(Z − Z_prev)‖
  double min_constraint_eig = 0.0;  ///< min eigenvalue of (expression − margin·I)
};

struct SdpOptions {
  double rho = 1.0;
  double tolerance = 1e-7;
  int max_iterations = 20000;
  bool residual_balancing = true;
  int balance_interval = 25;
  double relaxation = 1.6;  ///< over-relaxation factor in (0, 2)
};

/// A semidefinite program over symmetric and (optionally sparse) rectangular
/// matrix variables:
///
///   minimize   Σ_b w_b ‖X_b‖²_F + ⟨C_b, X_b⟩
///   subject to F_c(X) ⪰ margin_c · I   for every constraint c,
///
/// where each F_c is assembled blockwise from terms L·X_b·R and constants and
/// is symmetric by construction (off-diagonal blocks are mirrored, diagonal
/// blocks symmetrized). Entries can be pinned to values or tied together.
class SdpProblem {
 public:
  struct VarId {
    int index = -1;
  };
  struct ConstraintId {
    int index = -1;
  };

  VarId add_symmetric(int dim, double weight = 0.0) {
    vars_.push_back(Variable{dim, dim, true, weight, Matrix()});
    return VarId{static_cast<int>(vars_.size()) - 1};
  }

  /// Rectangular variable; entries where `mask` is zero are pinned to zero.
  VarId add_matrix(int rows, int cols, double weight = 0.0,
                   std::optional<Matrix> mask = std::nullopt) {
    Variable v{rows, cols, false, weight, Matrix()};
    vars_.push_back(v);
    VarId id{static_cast<int>(vars_.size()) - 1};
    if (mask) {
      if (mask->rows() != rows || mask->cols() != cols) {
        throw Error(ErrorKind::kDimension, "SdpProblem: mask size mismatch");
      }
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          if ((*mask)(r, c) == 0.0) pin(id, r, c, 0.0);
    }
    return id;
  }

  void set_weight(VarId v, double w) { var(v).weight = w; }

  void set_linear(VarId v, const Matrix& c) {
    Variable& x = var(v);
    if (c.rows() != x.rows || c.cols() != x.cols) {
      throw Error(ErrorKind::kDimension, "SdpProblem: linear cost size mismatch");
    }
    x.linear = c;
  }

  /// Pins entry (r, c); for symmetric variables (c, r) follows.
  void pin(VarId v, int r, int c, double value) {
    check_entry(v, r, c);
    pins_.push_back(Pin{v.index, r, c, value});
  }

  /// Forces X_a(ra, ca) == X_b(rb, cb).
  void tie(VarId a, int ra, int ca, VarId b, int rb, int cb) {
    check_entry(a, ra, ca);
    check_entry(b, rb, cb);
    ties_.push_back(Tie{a.index, ra, ca, b.index, rb, cb});
  }

  ConstraintId add_lmi(int dim, double margin = 0.0) {
    constraints_.push_back(Constraint{dim, margin, {}, {}});
    return ConstraintId{static_cast<int>(constraints_.size()) - 1};
  }

  /// Adds left · X · right into block (r0, c0) of constraint `c`. When the
  /// block is off the diagonal its transpose is added at (c0, r0).
  void add_term(ConstraintId c, int r0, int c0, const Matrix& left, VarId v,
                const Matrix& right) {
    const Variable& x = var(v);
    if (left.cols() != x.rows || right.rows() != x.cols) {
      throw Error(ErrorKind::kDimension, "SdpProblem: term factor size mismatch");
    }
    Constraint& con = constraint(c);
    check_block(con, r0, c0, left.rows(), right.cols());
    con.terms.push_back(Term{r0, c0, left, v.index, right});
  }

  /// Adds X into block (r0, c0) (identity factors).
  void add_var(ConstraintId c, int r0, int c0, VarId v) {
    const Variable& x = var(v);
    add_term(c, r0, c0, Matrix::Identity(x.rows, x.rows), v,
             Matrix::Identity(x.cols, x.cols));
  }

  void add_constant(ConstraintId c, int r0, int c0, const Matrix& m) {
    Constraint& con = constraint(c);
    check_block(con, r0, c0, m.rows(), m.cols());
    con.constants.push_back(Constant{r0, c0, m});
  }

  int num_variables() const { return static_cast<int>(vars_.size()); }
  int num_constraints() const { return static_cast<int>(constraints_.size()); }

 private:

  struct Variable {
    int rows;
    int cols;
    bool symmetric;
    double weight;
    Matrix linear;
  };
  struct Pin {
    int var, r, c;
    double value;
  };
  struct Tie {
    int va, ra, ca, vb, rb, cb;
  };
  struct Term {
    int r0, c0;
    Matrix left;
    int var;
    Matrix right;
  };
  struct Constant {
    int r0, c0;
    Matrix value;
  };
  struct Constraint {
    int dim;
    double margin;
    std::vector<Term> terms;
    std::vector<Constant> constants;
  };

  Variable& var(VarId v) {
    if (v.index < 0 || v.index >= static_cast<int>(vars_.size())) {
      throw Error(ErrorKind::kDimension, "SdpProblem: unknown variable");
    }
    return vars_[v.index];
  }
  const Variable& var(VarId v) const {
    return const_cast<SdpProblem*>(this)->var(v);
  }
  Constraint& constraint(ConstraintId c) {
    if (c.index < 0 || c.index >= static_cast<int>(constraints_.size())) {
      throw Error(ErrorKind::kDimension, "SdpProblem: unknown constraint");
    }
    return constraints_[c.index];
  }
  void check_entry(VarId v, int r, int c) const {
    const Variable& x = var(v);
    if (r < 0 || c < 0 || r >= x.rows || c >= x.cols) {
      throw Error(ErrorKind::kDimension, "SdpProblem: entry out of range");
    }
  }
  static void check_block(const Constraint& con, int r0, int c0,
                          Eigen::Index rows, Eigen::Index cols) {
    if (r0 < 0 || c0 < 0 || r0 + rows > con.dim || c0 + cols > con.dim) {
      throw Error(ErrorKind::kDimension, "SdpProblem: block outside constraint");
    }
    if (r0 == c0 && rows != cols) {
      throw Error(ErrorKind::kDimension,
                  "SdpProblem: diagonal block must be square");
    }
  }

 public:
  // Read-only views used by the solver.
  const std::vector<Variable>& variables() const { return vars_; }
  const std::vector<Constraint>& constraints() const { return constraints_; }
  const std::vector<Pin>& pins() const { return pins_; }
  const std::vector<Tie>& ties() const { return ties_; }

 private:
  std::vector<Variable> vars_;
  std::vector<Constraint> constraints_;
  std::vector<Pin> pins_;
  std::vector<Tie> ties_;
};

struct SdpSolution {
  std::vector<Matrix> values;
  SolveReport report;
  double objective = 0.0;

  const Matrix& operator[](SdpProblem::VarId v) const { return values.at(v.index); }
};

namespace detail {

// Each variable entry is either a free parameter or a constant.
struct EntryMap {
  std::vector<int> param;      // -1 when constant
  std::vector<double> value;   // constant value when param == -1
};

struct Compiled {
  int num_params = 0;
  std::vector<EntryMap> entries;       // per variable, column-major entries
  std::vector<int> offsets;            // constraint offsets into stacked vec
  Matrix a;                            // stacked affine map (Σ d²) × p
  Vector a0;                           // constant part, margin folded in
  Vector quad;                         // diagonal quadratic weights (per param)
  Vector lin;                          // linear cost per param
  double obj_const = 0.0;
};

inline int find_root(std::vector<int>& parent, int x) {
  while (parent[x] != x) {
    parent[x] = parent[parent[x]];
    x = parent[x];
  }
  return x;
}

inline Compiled compile(const SdpProblem& prob) {
  Compiled out;
  const auto& vars = prob.variables();
  // Raw entry slots: one slot per independent entry (upper triangle for
  // symmetric variables).
  std::vector<std::vector<int>> slot(vars.size());
  int nslots = 0;
  for (std::size_t v = 0; v < vars.size(); ++v) {
    const auto& x = vars[v];
    slot[v].assign(static_cast<std::size_t>(x.rows) * x.cols, -1);
    for (int c = 0; c < x.cols; ++c)
      for (int r = 0; r < x.rows; ++r)
        if (!x.symmetric || r <= c) slot[v][r + c * x.rows] = nslots++;
    if (x.symmetric) {
      for (int c = 0; c < x.cols; ++c)
        for (int r = c + 1; r < x.rows; ++r)
          slot[v][r + c * x.rows] = slot[v][c + r * x.rows];
    }
  }
  std::vector<int> parent(nslots);
  std::iota(parent.begin(), parent.end(), 0);
  for (const auto& t : prob.ties()) {
    const int a = find_root(parent, slot[t.va][t.ra + t.ca * vars[t.va].rows]);
    const int b = find_root(parent, slot[t.vb][t.rb + t.cb * vars[t.vb].rows]);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
  std::vector<std::optional<double>> pinned(nslots);
  for (const auto& p : prob.pins()) {
    const int root = find_root(parent, slot[p.var][p.r + p.c * vars[p.var].rows]);
    pinned[root] = p.value;
  }
  std::vector<int> param_of_root(nslots, -1);
  for (int s = 0; s < nslots; ++s) {
    const int root = find_root(parent, s);
    if (!pinned[root] && param_of_root[root] < 0) {
      param_of_root[root] = out.num_params++;
    }
  }
  out.entries.resize(vars.size());
  for (std::size_t v = 0; v < vars.size(); ++v) {
    auto& e = out.entries[v];
    e.param.resize(slot[v].size());
    e.value.assign(slot[v].size(), 0.0);
    for (std::size_t k = 0; k < slot[v].size(); ++k) {
      const int root = find_root(parent, slot[v][k]);
      if (pinned[root]) {
        e.param[k] = -1;
        e.value[k] = *pinned[root];
      } else {
        e.param[k] = param_of_root[root];
      }
    }
  }

  const int p = out.num_params;
  out.quad = Vector::Zero(p);
  out.lin = Vector::Zero(p);
  for (std::size_t v = 0; v < vars.size(); ++v) {
    const auto& x = vars[v];
    const auto& e = out.entries[v];
    for (int c = 0; c < x.cols; ++c) {
      for (int r = 0; r < x.rows; ++r) {
        const std::size_t k = static_cast<std::size_t>(r + c * x.rows);
        const double lc = x.linear.size() ? x.linear(r, c) : 0.0;
        if (e.param[k] >= 0) {
          out.quad(e.param[k]) += x.weight;
          out.lin(e.param[k]) += lc;
        } else {
          out.obj_const += x.weight * e.value[k] * e.value[k] + lc * e.value[k];
        }
      }
    }
  }

  const auto& cons = prob.constraints();
  int total = 0;
  for (const auto& con : cons) {
    out.offsets.push_back(total);
    total += con.dim * con.dim;
  }
  out.offsets.push_back(total);
  out.a = Matrix::Zero(total, p);
  out.a0 = Vector::Zero(total);

  for (std::size_t ci = 0; ci < cons.size(); ++ci) {
    const auto& con = cons[ci];
    const int d = con.dim;
    const int off = out.offsets[ci];
    // Scatter a dense block contribution into column `col` (or a0 if col<0).
    auto scatter = [&](int r0, int c0, const Matrix& blk, int col) {
      auto put = [&](int r, int c, double val) {
        const int idx = off + r + c * d;
        if (col >= 0) {
          out.a(idx, col) += val;
        } else {
          out.a0(idx) += val;
        }
      };
      if (r0 == c0) {
        for (int c = 0; c < blk.cols(); ++c)
          for (int r = 0; r < blk.rows(); ++r)
            put(r0 + r, c0 + c, 0.5 * (blk(r, c) + blk(c, r)));
      } else {
        for (int c = 0; c < blk.cols(); ++c) {
          for (int r = 0; r < blk.rows(); ++r) {
            put(r0 + r, c0 + c, blk(r, c));
            put(c0 + c, r0 + r, blk(r, c));
          }
        }
      }
    };
    for (const auto& t : con.terms) {
      const auto& x = vars[t.var];
      const auto& e = out.entries[t.var];
      // Group entries by parameter so each parameter's block is built once.
      std::vector<std::pair<int, Matrix>> per_param;
      Matrix constant_part = Matrix::Zero(t.left.rows(), t.right.cols());
      bool has_constant = false;
      std::vector<int> seen(p, -1);
      for (int c = 0; c < x.cols; ++c) {
        for (int r = 0; r < x.rows; ++r) {
          const std::size_t k = static_cast<std::size_t>(r + c * x.rows);
          const Matrix outer = t.left.col(r) * t.right.row(c);
          if (e.param[k] >= 0) {
            const int pk = e.param[k];
            if (seen[pk] < 0) {
              seen[pk] = static_cast<int>(per_param.size());
              per_param.emplace_back(pk, outer);
            } else {
              per_param[seen[pk]].second += outer;
            }
          } else if (e.value[k] != 0.0) {
            constant_part += e.value[k] * outer;
            has_constant = true;
          }
        }
      }
      for (const auto& [pk, blk] : per_param) scatter(t.r0, t.c0, blk, pk);
      if (has_constant) scatter(t.r0, t.c0, constant_part, -1);
    }
    for (const auto& k : con.constants) scatter(k.r0, k.c0, k.value, -1);
    for (int i = 0; i < d; ++i) out.a0(off + i + i * d) -= con.margin;
  }
  return out;
}

inline std::vector<Matrix> unpack(const SdpProblem& prob, const Compiled& comp,
                                  const Vector& theta) {
  std::vector<Matrix> values;
  const auto& vars = prob.variables();
  for (std::size_t v = 0; v < vars.size(); ++v) {
    const auto& x = vars[v];
    const auto& e = comp.entries[v];
    Matrix m(x.rows, x.cols);
    for (int c = 0; c < x.cols; ++c)
      for (int r = 0; r < x.rows; ++r) {
        const std::size_t k = static_cast<std::size_t>(r + c * x.rows);
        m(r, c) = e.param[k] >= 0 ? theta(e.param[k]) : e.value[k];
      }
    values.push_back(std::move(m));
  }
  return values;
}

}  // namespace detail

/// Two-block ADMM on  min θᵀWθ + cᵀθ  s.t.  𝒜θ + a₀ = Z, Z ∈ PSD cones.
/// Parameters are rescaled so every column of 𝒜 has unit norm, and the
/// affine iterate is over-relaxed. Stops when max(primal, dual residual) ≤
/// tolerance. Residual balancing doubles/halves ρ when one residual exceeds
/// the other by more than 10× (checked every `balance_interval` iterations).
inline SdpSolution solve_sdp(const SdpProblem& prob, const SdpOptions& opts = {}) {
  const detail::Compiled comp = detail::compile(prob);
  const int p = comp.num_params;
  const auto& cons = prob.constraints();
  const int ncon = static_cast<int>(cons.size());

  // θ = D θ̃ with unit-norm columns of 𝒜D.
  Vector dscale = Vector::Ones(p);
  for (int k = 0; k < p; ++k) {
    const double nk = comp.a.col(k).norm();
    if (nk > 0.0) dscale(k) = 1.0 / nk;
  }
  const Matrix a_s = comp.a * dscale.asDiagonal();
  const Vector quad_s = comp.quad.cwiseProduct(dscale.cwiseAbs2());
  const Vector lin_s = comp.lin.cwiseProduct(dscale);

  const Matrix gram = a_s.transpose() * a_s;
  double rho = opts.rho;
  Eigen::LDLT<Matrix> factor;
  auto refactor = [&]() {
    Matrix h = rho * gram;
    h.diagonal() += 2.0 * quad_s;
    h.diagonal().array() += 1e-12 * (1.0 + h.diagonal().cwiseAbs().maxCoeff());
    factor.compute(h);
  };
  refactor();

  const int total = static_cast<int>(comp.a0.size());
  Vector theta_s = Vector::Zero(p);
  Vector z = Vector::Zero(total);
  Vector u = Vector::Zero(total);
  Vector affine(total);
  Vector relaxed(total);
  Vector z_new(total);

  SdpSolution sol;
  SolveReport& rep = sol.report;
  double primal = std::numeric_limits<double>::infinity();
  double dual = std::numeric_limits<double>::infinity();
  double primal_at_half = std::numeric_limits<double>::infinity();
  const double alpha = opts.relaxation;

  int it = 0;
  for (it = 1; it <= opts.max_iterations; ++it) {
    const Vector rhs = -lin_s - rho * a_s.transpose() * (comp.a0 - z + u);
    theta_s = factor.solve(rhs);
    affine.noalias() = a_s * theta_s;
    affine += comp.a0;
    relaxed = alpha * affine + (1.0 - alpha) * z;

    for (int ci = 0; ci < ncon; ++ci) {
      const int d = cons[ci].dim;
      const int off = comp.offsets[ci];
      Eigen::Map<const Matrix> s(relaxed.data() + off, d, d);
      Eigen::Map<const Matrix> uu(u.data() + off, d, d);
      Eigen::Map<Matrix>(z_new.data() + off, d, d) = project_psd(s + uu);
    }
    const Vector dz = z_new - z;
    z = z_new;
    u += relaxed - z;

    primal = (affine - z).norm();
    dual = rho * (comp.a.transpose() * dz).norm();
    if (it == opts.max_iterations / 2) primal_at_half = primal;

    if (std::max(primal, dual) <= opts.tolerance) break;

    if (opts.residual_balancing && it % opts.balance_interval == 0) {
      if (primal > 10.0 * dual && rho < 1e8) {
        rho *= 2.0;
        u /= 2.0;
        refactor();
      } else if (dual > 10.0 * primal && rho > 1e-8) {
        rho /= 2.0;
        u *= 2.0;
        refactor();
      }
    }
  }
  rep.iterations = std::min(it, opts.max_iterations);
  rep.primal_residual = primal;
  rep.dual_residual = dual;
  if (std::max(primal, dual) <= opts.tolerance) {
    rep.status = SolveStatus::kOptimal;
  } else if (primal > 1e3 * opts.tolerance && primal > 0.5 * primal_at_half) {
    rep.status = SolveStatus::kInfeasibleSuspected;
  } else {
    rep.status = SolveStatus::kMaxIterations;
  }

  const Vector theta = dscale.cwiseProduct(theta_s);
  affine.noalias() = comp.a * theta;
  affine += comp.a0;
  double min_eig = std::numeric_limits<double>::infinity();
  for (int ci = 0; ci < ncon; ++ci) {
    const int d = cons[ci].dim;
    Eigen::Map<const Matrix> s(affine.data() + comp.offsets[ci], d, d);
    min_eig = std::min(min_eig, min_eigenvalue(Matrix(s)));
  }
  rep.min_constraint_eig = min_eig;
  sol.values = detail::unpack(prob, comp, theta);
  sol.objective = theta.dot(comp.quad.asDiagonal() * theta) +
                  comp.lin.dot(theta) + comp.obj_const;
  return sol;
}

}  // namespace dsmpc::conic
