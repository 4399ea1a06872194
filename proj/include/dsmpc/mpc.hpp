// Nominal finite-horizon MPC: the QP over (z, v), an exact central solver on
// the condensed problem, a consensus-ADMM solver over per-subsystem agents,
// the phase-1 feasibility test behind the Mode-1/Mode-2 rule, and the
// applied control law.
#pragma once

#include <dsmpc/model.hpp>
#include <dsmpc/qp.hpp>
#include <dsmpc/synthesis.hpp>
#include <dsmpc/uncertainty.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dsmpc::mpc {

struct AdmmOptions {
  double rho = 1.0;
  int max_iterations = 5000;
  double eps_primal = 1e-6;
  double eps_dual = 1e-6;
  bool residual_balancing = true;
  int balance_interval = 25;
  double relaxation = 1.0;
};

struct MpcConfig {
  int horizon = 15;
  std::vector<Polytope> Z;                 ///< tightened state sets
  std::vector<std::optional<Polytope>> V;  ///< tightened input sets
  Terminal terminal;
  AdmmOptions admm;
};

/// Configuration from a PRS report and the terminal specification of `gains`.
inline MpcConfig make_config(const PrsSpec& prs, const GainSet& gains, int horizon) {
  MpcConfig cfg;
  cfg.horizon = horizon;
  cfg.Z = prs.Z;
  cfg.V = prs.V;
  cfg.terminal = gains.terminal;
  return cfg;
}

enum class MpcStatus { kOptimal, kInfeasible, kMaxIterations };

inline const char* to_string(MpcStatus s) {
  switch (s) {
    case MpcStatus::kOptimal: return "optimal";
    case MpcStatus::kInfeasible: return "infeasible";
    case MpcStatus::kMaxIterations: return "max_iterations";
  }
  return "unknown";
}

struct AdmmReport {
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  double rho = 0.0;
  bool converged = false;
};

struct MpcSolution {
  MpcStatus status = MpcStatus::kInfeasible;
  int mode = 1;
  Matrix Z;  ///< n x (N+1), column t is z(t)
  Matrix V;  ///< m x N, column t is v(t)
  double cost = 0.0;
  qp::KktResiduals kkt;  ///< central solver, condensed problem
  double terminal_multiplier = 0.0;
  std::optional<AdmmReport> admm;
  std::vector<Vector> admm_duals;  ///< scaled duals per agent, for warm starts

  bool ok() const { return status == MpcStatus::kOptimal; }
};

/// Condensed QP in the prestabilized inputs c(t) = v(t) − K z(t):
/// ½ cᵀHc + fᵀc + constant, Aeq c = beq, Ain c ≤ bin.
struct CondensedQp {
  Matrix H;
  Vector f;
  double constant = 0.0;
  Matrix Aeq;
  Vector beq;
  Matrix Ain;
  Vector bin;
};

namespace detail {

/// Euclidean projection onto {x : Hx ≤ h}; axis-aligned facets are clamped.
class PolytopeProjector {
 public:
  PolytopeProjector() = default;
  explicit PolytopeProjector(const Polytope& p) : poly_(p) {
    const int d = static_cast<int>(p.H.cols());
    lo_ = Vector::Constant(d, -std::numeric_limits<double>::infinity());
    hi_ = Vector::Constant(d, std::numeric_limits<double>::infinity());
    for (Eigen::Index r = 0; r < p.H.rows(); ++r) {
      int nz = 0;
      Eigen::Index col = 0;
      for (Eigen::Index c = 0; c < p.H.cols(); ++c)
        if (p.H(r, c) != 0.0) {
          ++nz;
          col = c;
        }
      if (nz != 1) {
        axis_ = false;
        continue;
      }
      const double bound = p.h(r) / p.H(r, col);
      if (p.H(r, col) > 0) {
        hi_(col) = std::min(hi_(col), bound);
      } else {
        lo_(col) = std::max(lo_(col), bound);
      }
    }
  }

  void project(Eigen::Ref<Vector> x) const {
    if (axis_) {
      x = x.cwiseMax(lo_).cwiseMin(hi_);
      return;
    }
    if (((poly_.H * x - poly_.h).array() <= 0.0).all()) return;
    const int d = static_cast<int>(x.size());
    const qp::QpResult r = qp::solve_qp(Matrix::Identity(d, d), -Vector(x), Matrix(0, d),
                                        Vector(0), poly_.H, poly_.h);
    if (r.status == qp::QpStatus::kOptimal) x = r.x;
  }

 private:
  Polytope poly_;
  bool axis_ = true;
  Vector lo_, hi_;
};

/// Euclidean projection onto {x : xᵀPx ≤ α} by bisection on the multiplier.
class EllipsoidProjector {
 public:
  EllipsoidProjector() = default;
  EllipsoidProjector(const Matrix& p, double alpha) : alpha_(alpha) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(p));
    u_ = es.eigenvectors();
    mu_ = es.eigenvalues().cwiseMax(0.0);
  }

  void project(Eigen::Ref<Vector> x) const {
    const Vector b = u_.transpose() * x;
    auto level = [&](double lam) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < b.size(); ++k) {
        const double zk = b(k) / (1.0 + lam * mu_(k));
        s += mu_(k) * zk * zk;
      }
      return s;
    };
    if (level(0.0) <= alpha_) return;
    double lo = 0.0;
    double hi = 1.0;
    while (level(hi) > alpha_ && hi < 1e300) hi *= 2.0;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      (level(mid) > alpha_ ? lo : hi) = mid;
    }
    Vector z(b.size());
    for (Eigen::Index k = 0; k < b.size(); ++k) z(k) = b(k) / (1.0 + hi * mu_(k));
    x = u_ * z;
  }

 private:
  Matrix u_;
  Vector mu_;
  double alpha_ = 0.0;
};

}  // namespace detail

class MpcProblem {
 public:
  MpcProblem(const SystemGraph& graph, const GainSet& gains, MpcConfig config)
      : graph_(graph), gains_(gains), cfg_(std::move(config)) {
    validate();
    gm_ = assemble_global(graph_);
    build_condensed();
    build_agents();
  }

  const SystemGraph& graph() const { return graph_; }
  const GainSet& gains() const { return gains_; }
  const MpcConfig& config() const { return cfg_; }
  int horizon() const { return cfg_.horizon; }

  /// Condensed QP at z(0) = z0 with terminal weight scaled by (1 + μ).
  CondensedQp build_qp(const Vector& z0, double terminal_mu = 0.0) const {
    check_state(z0);
    CondensedQp qp;
    qp.H = h0_ + (1.0 + terminal_mu) * hp_;
    qp.f = (f0_ + (1.0 + terminal_mu) * fp_) * z0;
    qp.constant = z0.dot((c0_ + (1.0 + terminal_mu) * cp_) * z0);
    qp.Ain = ain_;
    qp.bin = bin_ - ein_ * z0;
    if (cfg_.terminal.kind == Terminal::Kind::kPoint) {
      qp.Aeq = sz_.bottomRows(n_);
      qp.beq = -tz_.bottomRows(n_) * z0;
    } else {
      qp.Aeq = Matrix(0, qp.H.cols());
      qp.beq = Vector(0);
    }
    return qp;
  }

  /// Phase-1 test: does some input sequence satisfy every constraint?
  bool check_feasibility(const Vector& z0) const {
    CondensedQp qp = build_qp(z0);
    const int nc = static_cast<int>(qp.H.cols());
    Matrix g = Matrix::Identity(nc, nc);
    Vector lin = Vector::Zero(nc);
    double offset = 0.0;
    if (cfg_.terminal.kind == Terminal::Kind::kLevelSet) {
      // Minimise the terminal level over the polyhedral constraints.
      const Matrix szn = sz_.bottomRows(n_);
      const Vector zn0 = tz_.bottomRows(n_) * z0;
      g = 2.0 * szn.transpose() * gains_.P * szn + 1e-10 * g;
      lin = 2.0 * szn.transpose() * gains_.P * zn0;
      offset = zn0.dot(gains_.P * zn0);
    }
    const qp::QpResult r = qp::solve_qp(g, lin, qp.Aeq, qp.beq, qp.Ain, qp.bin, phase1_opts());
    if (r.status != qp::QpStatus::kOptimal) return false;
    if (qp.Ain.rows() > 0 && (qp.Ain * r.x - qp.bin).maxCoeff() > 1e-7) return false;
    if (qp.Aeq.rows() > 0 && (qp.Aeq * r.x - qp.beq).cwiseAbs().maxCoeff() > 1e-7) return false;
    if (cfg_.terminal.kind == Terminal::Kind::kLevelSet) {
      const double level = 0.5 * r.x.dot(g * r.x) + lin.dot(r.x) + offset;
      return level <= cfg_.terminal.alpha + 1e-7;
    }
    return true;
  }

  MpcSolution solve_central(const Vector& z0) const {
    auto solve_mu = [&](double mu, CondensedQp& qp) {
      qp = build_qp(z0, mu);
      return qp::solve_qp(qp.H, qp.f, qp.Aeq, qp.beq, qp.Ain, qp.bin);
    };
    CondensedQp qp;
    qp::QpResult r = solve_mu(0.0, qp);
    MpcSolution sol;
    if (r.status != qp::QpStatus::kOptimal) return sol;
    double mu = 0.0;
    if (cfg_.terminal.kind == Terminal::Kind::kLevelSet) {
      const double alpha = cfg_.terminal.alpha;
      const double tol = 1e-10 * (1.0 + alpha);
      auto excess = [&](const qp::QpResult& res) {
        const Vector zn = tz_.bottomRows(n_) * z0 + sz_.bottomRows(n_) * res.x;
        return zn.dot(gains_.P * zn) - alpha;
      };
      if (excess(r) > tol) {
        double lo = 0.0;
        double hi = 1.0;
        CondensedQp qhi;
        qp::QpResult rhi = solve_mu(hi, qhi);
        while (excess(rhi) > tol) {
          lo = hi;
          hi *= 4.0;
          if (hi > 1e12) return sol;  // terminal level set unreachable
          rhi = solve_mu(hi, qhi);
        }
        for (int it = 0; it < 200 && hi - lo > 1e-14 * (1.0 + hi); ++it) {
          const double mid = 0.5 * (lo + hi);
          CondensedQp qm;
          qp::QpResult rm = solve_mu(mid, qm);
          if (excess(rm) > tol) {
            lo = mid;
          } else {
            hi = mid;
            rhi = rm;
            qhi = qm;
            if (excess(rm) > -tol) break;
          }
        }
        r = rhi;
        qp = qhi;
        mu = hi;
      }
    }
    sol.status = MpcStatus::kOptimal;
    sol.kkt = qp::kkt_residuals(qp.H, qp.f, qp.Aeq, qp.beq, qp.Ain, qp.bin, r);
    sol.terminal_multiplier = mu;
    expand(z0, r.x, sol);
    return sol;
  }

  /// Consensus ADMM over the per-subsystem agents. `warm` supplies the
  /// previous solution; its trajectories and duals are shifted by one step.
  MpcSolution solve_admm(const Vector& z0, const MpcSolution* warm = nullptr) const {
    check_state(z0);
    if (!gains_.P_block_diagonal(graph_) && cfg_.terminal.kind != Terminal::Kind::kPoint) {
      throw Error(ErrorKind::kPrecondition, "solve_admm: terminal cost is not separable");
    }
    const AdmmOptions& o = cfg_.admm;
    const int na = static_cast<int>(agents_.size());
    double rho = o.rho;

    Vector zeta = Vector::Zero(nglob_);
    std::vector<Vector> u(na), x(na), rhs_e(na);
    for (int i = 0; i < na; ++i) {
      u[i] = Vector::Zero(agents_[i].dim);
      rhs_e[i] = agents_[i].D * z0;
    }
    if (warm && warm->Z.cols() == N_ + 1 && warm->V.cols() == N_) {
      for (int t = 1; t < N_; ++t) zeta.segment(zoff(t), n_) = warm->Z.col(t + 1);
      zeta.segment(zoff(N_), n_) = gm_.A * warm->Z.col(N_) + gm_.B * gains_.K * warm->Z.col(N_);
      for (int t = 0; t + 1 < N_; ++t) zeta.segment(voff(t), m_) = warm->V.col(t + 1);
      zeta.segment(voff(N_ - 1), m_) = gains_.K * warm->Z.col(N_);
      project(zeta);
      if (static_cast<int>(warm->admm_duals.size()) == na) {
        for (int i = 0; i < na; ++i) {
          const Agent& a = agents_[i];
          for (int k = 0; k < a.dim; ++k) u[i](k) = warm->admm_duals[i](a.shift[k]);
        }
      }
      if (warm->admm) rho = warm->admm->rho;
    }

    std::vector<Eigen::PartialPivLU<Matrix>> lu(na);
    auto factor = [&]() {
      for (int i = 0; i < na; ++i) {
        const Agent& a = agents_[i];
        Matrix kkt = Matrix::Zero(a.dim + a.neq, a.dim + a.neq);
        kkt.topLeftCorner(a.dim, a.dim) = a.G + rho * Matrix::Identity(a.dim, a.dim);
        kkt.topRightCorner(a.dim, a.neq) = a.E.transpose();
        kkt.bottomLeftCorner(a.neq, a.dim) = a.E;
        lu[i].compute(kkt);
      }
    };
    factor();

    AdmmReport rep;
    Vector zeta_old(nglob_);
    Vector acc(nglob_);
    for (int it = 1; it <= o.max_iterations; ++it) {
      for (int i = 0; i < na; ++i) {
        const Agent& a = agents_[i];
        Vector rhs(a.dim + a.neq);
        for (int k = 0; k < a.dim; ++k) rhs(k) = rho * (zeta(a.idx[k]) - u[i](k));
        rhs.tail(a.neq) = rhs_e[i];
        x[i] = lu[i].solve(rhs).head(a.dim);
      }
      zeta_old = zeta;
      acc.setZero();
      std::vector<Vector> xr(na);
      for (int i = 0; i < na; ++i) {
        const Agent& a = agents_[i];
        xr[i] = x[i];
        if (o.relaxation != 1.0) {
          for (int k = 0; k < a.dim; ++k)
            xr[i](k) = o.relaxation * x[i](k) + (1.0 - o.relaxation) * zeta_old(a.idx[k]);
        }
        for (int k = 0; k < a.dim; ++k) acc(a.idx[k]) += xr[i](k) + u[i](k);
      }
      zeta = acc.cwiseQuotient(count_);
      project(zeta);
      double rp = 0.0;
      double rd = 0.0;
      for (int i = 0; i < na; ++i) {
        const Agent& a = agents_[i];
        for (int k = 0; k < a.dim; ++k) {
          const double zk = zeta(a.idx[k]);
          u[i](k) += xr[i](k) - zk;
          rp += (x[i](k) - zk) * (x[i](k) - zk);
          const double dz = zk - zeta_old(a.idx[k]);
          rd += dz * dz;
        }
      }
      rep.iterations = it;
      rep.primal_residual = std::sqrt(rp);
      rep.dual_residual = rho * std::sqrt(rd);
      if (rep.primal_residual <= o.eps_primal && rep.dual_residual <= o.eps_dual) {
        rep.converged = true;
        break;
      }
      if (o.residual_balancing && it % o.balance_interval == 0) {
        double scale = 1.0;
        if (rep.primal_residual > 10.0 * rep.dual_residual && rho < 1e8) scale = 2.0;
        if (rep.dual_residual > 10.0 * rep.primal_residual && rho > 1e-8) scale = 0.5;
        if (scale != 1.0) {
          rho *= scale;
          for (auto& ui : u) ui /= scale;
          factor();
        }
      }
    }
    rep.rho = rho;

    MpcSolution sol;
    sol.status = rep.converged ? MpcStatus::kOptimal : MpcStatus::kMaxIterations;
    sol.Z = Matrix::Zero(n_, N_ + 1);
    sol.V = Matrix::Zero(m_, N_);
    sol.Z.col(0) = z0;
    for (int i = 0; i < na; ++i) {
      const Agent& a = agents_[i];
      const int ni = graph_[i].n;
      const int mi = graph_[i].m;
      for (int t = 1; t <= N_; ++t)
        sol.Z.col(t).segment(graph_.x_offset(i), ni) = x[i].segment(a.own_z + (t - 1) * ni, ni);
      for (int t = 0; t < N_; ++t)
        sol.V.col(t).segment(graph_.u_offset(i), mi) = x[i].segment(a.own_v + t * mi, mi);
    }
    sol.cost = cost(sol.Z, sol.V);
    sol.admm = rep;
    sol.admm_duals = std::move(u);
    return sol;
  }

  /// J = Σ_{t<N} z(t)ᵀQz(t) + v(t)ᵀRv(t) + z(N)ᵀPz(N).
  double cost(const Matrix& Z, const Matrix& V) const {
    double j = 0.0;
    for (int t = 0; t < N_; ++t) {
      j += Z.col(t).dot(gm_.Q * Z.col(t)) + V.col(t).dot(gm_.R * V.col(t));
    }
    return j + Z.col(N_).dot(gains_.P * Z.col(N_));
  }

  /// max_t ‖z(t+1) − A z(t) − B v(t)‖∞
  double dynamics_residual(const Matrix& Z, const Matrix& V) const {
    double r = 0.0;
    for (int t = 0; t < N_; ++t) {
      r = std::max(r, (Z.col(t + 1) - gm_.A * Z.col(t) - gm_.B * V.col(t))
                          .cwiseAbs()
                          .maxCoeff());
    }
    return r;
  }

  /// Largest violation of the state, input and terminal constraints.
  double constraint_violation(const Matrix& Z, const Matrix& V) const {
    double viol = 0.0;
    for (int t = 1; t < N_; ++t) {
      for (int i = 0; i < graph_.size(); ++i) {
        const Vector zi = Z.col(t).segment(graph_.x_offset(i), graph_[i].n);
        viol = std::max(viol, (cfg_.Z[i].H * zi - cfg_.Z[i].h).maxCoeff());
        if (cfg_.V[i]) {
          const Vector vi = V.col(t).segment(graph_.u_offset(i), graph_[i].m);
          viol = std::max(viol, (cfg_.V[i]->H * vi - cfg_.V[i]->h).maxCoeff());
        }
      }
    }
    const Vector zn = Z.col(N_);
    if (cfg_.terminal.kind == Terminal::Kind::kPoint) {
      viol = std::max(viol, zn.cwiseAbs().maxCoeff());
    } else {
      viol = std::max(viol, zn.dot(gains_.P * zn) - cfg_.terminal.alpha);
    }
    return viol;
  }

  /// Candidate for step k+1 built from an optimal solution at k: shift by
  /// one and append the terminal feedback.
  std::pair<Matrix, Matrix> shifted_candidate(const MpcSolution& sol) const {
    Matrix z(n_, N_ + 1);
    Matrix v(m_, N_);
    z.leftCols(N_) = sol.Z.rightCols(N_);
    v.leftCols(N_ - 1) = sol.V.rightCols(N_ - 1);
    v.col(N_ - 1) = gains_.K * sol.Z.col(N_);
    z.col(N_) = gm_.A * sol.Z.col(N_) + gm_.B * v.col(N_ - 1);
    return {z, v};
  }

 private:
  struct Agent {
    int dim = 0;
    int neq = 0;
    int own_z = 0;
    int own_v = 0;
    std::vector<int> idx;    ///< local entry → global ζ index
    std::vector<int> shift;  ///< local entry → local entry one step later
    Matrix G;                ///< local Hessian (cost = ½ xᵀGx)
    Matrix E;                ///< local dynamics rows
    Matrix D;                ///< rhs = D z0
  };

  static qp::QpOptions phase1_opts() { return {}; }

  void validate() const {
    if (cfg_.horizon < 1) throw Error(ErrorKind::kPrecondition, "MPC horizon must be >= 1");
    if (static_cast<int>(cfg_.Z.size()) != graph_.size() ||
        static_cast<int>(cfg_.V.size()) != graph_.size()) {
      throw Error(ErrorKind::kDimension, "MPC config: one Z_i and V_i per subsystem");
    }
    for (int i = 0; i < graph_.size(); ++i) {
      if (cfg_.Z[i].H.cols() != graph_[i].n ||
          (cfg_.V[i] && cfg_.V[i]->H.cols() != graph_[i].m)) {
        throw Error(ErrorKind::kDimension, "MPC config: constraint set dimension mismatch");
      }
    }
    if (gains_.K.rows() != graph_.m() || gains_.K.cols() != graph_.n() ||
        gains_.P.rows() != graph_.n()) {
      throw Error(ErrorKind::kDimension, "MPC config: gains do not match the system");
    }
    if (cfg_.terminal.kind == Terminal::Kind::kLevelSet && !(cfg_.terminal.alpha > 0.0)) {
      throw Error(ErrorKind::kPrecondition, "MPC config: level-set terminal needs alpha > 0");
    }
  }

  void check_state(const Vector& z0) const {
    if (z0.size() != n_) throw Error(ErrorKind::kDimension, "MPC: initial state size mismatch");
    if (!z0.allFinite()) throw Error(ErrorKind::kPrecondition, "MPC: non-finite initial state");
  }

  int zoff(int t) const { return (t - 1) * n_; }
  int voff(int t) const { return N_ * n_ + t * m_; }

  void build_condensed() {
    N_ = cfg_.horizon;
    n_ = graph_.n();
    m_ = graph_.m();
    const Matrix& K = gains_.K;
    const Matrix acl = gm_.A + gm_.B * K;
    // z(t) = Tz_t z0 + Sz_t c, v(t) = K z(t) + c(t).
    tz_ = Matrix::Zero(n_ * (N_ + 1), n_);
    sz_ = Matrix::Zero(n_ * (N_ + 1), m_ * N_);
    tz_.topRows(n_).setIdentity();
    for (int t = 0; t < N_; ++t) {
      tz_.middleRows((t + 1) * n_, n_) = acl * tz_.middleRows(t * n_, n_);
      sz_.middleRows((t + 1) * n_, n_) = acl * sz_.middleRows(t * n_, n_);
      sz_.block((t + 1) * n_, t * m_, n_, m_) += gm_.B;
    }
    Matrix tv(m_ * N_, n_), sv(m_ * N_, m_ * N_);
    for (int t = 0; t < N_; ++t) {
      tv.middleRows(t * m_, m_) = K * tz_.middleRows(t * n_, n_);
      sv.middleRows(t * m_, m_) = K * sz_.middleRows(t * n_, n_);
    }
    sv += Matrix::Identity(m_ * N_, m_ * N_);

    const Matrix szs = sz_.topRows(n_ * N_);
    const Matrix tzs = tz_.topRows(n_ * N_);
    Matrix qbar = Matrix::Zero(n_ * N_, n_ * N_);
    Matrix rbar = Matrix::Zero(m_ * N_, m_ * N_);
    for (int t = 0; t < N_; ++t) {
      qbar.block(t * n_, t * n_, n_, n_) = gm_.Q;
      rbar.block(t * m_, t * m_, m_, m_) = gm_.R;
    }
    h0_ = symmetrize(2.0 * (szs.transpose() * qbar * szs + sv.transpose() * rbar * sv));
    f0_ = 2.0 * (szs.transpose() * qbar * tzs + sv.transpose() * rbar * tv);
    c0_ = symmetrize(tzs.transpose() * qbar * tzs + tv.transpose() * rbar * tv);
    const Matrix szn = sz_.bottomRows(n_);
    const Matrix tzn = tz_.bottomRows(n_);
    hp_ = symmetrize(2.0 * szn.transpose() * gains_.P * szn);
    fp_ = 2.0 * szn.transpose() * gains_.P * tzn;
    cp_ = symmetrize(tzn.transpose() * gains_.P * tzn);

    // Rows ordered by time step, then subsystem, then facet; states first.
    std::vector<Matrix> rows;
    std::vector<Matrix> shifts;
    std::vector<Vector> rhs;
    for (int t = 1; t < N_; ++t) {
      for (int i = 0; i < graph_.size(); ++i) {
        const Polytope& z = cfg_.Z[i];
        Matrix xsel = Matrix::Zero(graph_[i].n, n_);
        xsel.middleCols(graph_.x_offset(i), graph_[i].n).setIdentity();
        const Matrix zsel = z.H * xsel;
        rows.push_back(zsel * sz_.middleRows(t * n_, n_));
        shifts.push_back(zsel * tz_.middleRows(t * n_, n_));
        rhs.push_back(z.h);
        if (cfg_.V[i]) {
          const Polytope& v = *cfg_.V[i];
          Matrix usel = Matrix::Zero(graph_[i].m, m_);
          usel.middleCols(graph_.u_offset(i), graph_[i].m).setIdentity();
          const Matrix vsel = v.H * usel;
          rows.push_back(vsel * sv.middleRows(t * m_, m_));
          shifts.push_back(vsel * tv.middleRows(t * m_, m_));
          rhs.push_back(v.h);
        }
      }
    }
    int total = 0;
    for (const auto& r : rows) total += static_cast<int>(r.rows());
    ain_ = Matrix(total, m_ * N_);
    ein_ = Matrix(total, n_);
    bin_ = Vector(total);
    int at = 0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const int h = static_cast<int>(rows[k].rows());
      ain_.middleRows(at, h) = rows[k];
      ein_.middleRows(at, h) = shifts[k];
      bin_.segment(at, h) = rhs[k];
      at += h;
    }
  }

  void build_agents() {
    nglob_ = N_ * (n_ + m_);
    count_ = Vector::Zero(nglob_);
    for (int i = 0; i < graph_.size(); ++i) {
      const Subsystem& s = graph_[i];
      Agent a;
      // Layout: own z_i(1..N), own v_i(0..N−1), copies z_j(1..N−1).
      std::vector<int> copy_base(graph_.size(), -1);
      a.own_z = 0;
      a.own_v = s.n * N_;
      a.dim = s.n * N_ + s.m * N_;
      for (int j : graph_.neighbors(i)) {
        if (j == i) continue;
        copy_base[j] = a.dim;
        a.dim += graph_[j].n * (N_ - 1);
      }
      auto local_z = [&](int j, int t) {
        if (j == i) return a.own_z + (t - 1) * s.n;
        return copy_base[j] + (t - 1) * graph_[j].n;
      };
      a.idx.assign(a.dim, -1);
      a.shift.assign(a.dim, -1);
      for (int t = 1; t <= N_; ++t)
        for (int r = 0; r < s.n; ++r) {
          const int k = local_z(i, t) + r;
          a.idx[k] = zoff(t) + graph_.x_offset(i) + r;
          a.shift[k] = t < N_ ? local_z(i, t + 1) + r : k;
        }
      for (int t = 0; t < N_; ++t)
        for (int r = 0; r < s.m; ++r) {
          const int k = a.own_v + t * s.m + r;
          a.idx[k] = voff(t) + graph_.u_offset(i) + r;
          a.shift[k] = t + 1 < N_ ? k + s.m : k;
        }
      for (int j : graph_.neighbors(i)) {
        if (j == i) continue;
        for (int t = 1; t < N_; ++t)
          for (int r = 0; r < graph_[j].n; ++r) {
            const int k = local_z(j, t) + r;
            a.idx[k] = zoff(t) + graph_.x_offset(j) + r;
            a.shift[k] = t + 1 < N_ ? local_z(j, t + 1) + r : k;
          }
      }
      for (int k : a.idx) count_(k) += 1.0;

      a.G = Matrix::Zero(a.dim, a.dim);
      for (int t = 1; t <= N_; ++t) {
        const Matrix& w = t < N_ ? s.Q : Matrix(gains_.P_block(graph_, i));
        a.G.block(local_z(i, t), local_z(i, t), s.n, s.n) = 2.0 * w;
      }
      for (int t = 0; t < N_; ++t)
        a.G.block(a.own_v + t * s.m, a.own_v + t * s.m, s.m, s.m) = 2.0 * s.R;

      a.neq = s.n * N_;
      a.E = Matrix::Zero(a.neq, a.dim);
      a.D = Matrix::Zero(a.neq, n_);
      for (int t = 0; t < N_; ++t) {
        const int row = t * s.n;
        a.E.block(row, local_z(i, t + 1), s.n, s.n) = Matrix::Identity(s.n, s.n);
        a.E.block(row, a.own_v + t * s.m, s.n, s.m) = -s.B;
        for (int j : graph_.neighbors(i)) {
          const Matrix& aij = s.A.at(j);
          if (t == 0) {
            a.D.block(row, graph_.x_offset(j), s.n, graph_[j].n) = aij;
          } else {
            a.E.block(row, local_z(j, t), s.n, graph_[j].n) -= aij;
          }
        }
      }
      agents_.push_back(std::move(a));
    }

    projectors_z_.clear();
    projectors_v_.clear();
    for (int i = 0; i < graph_.size(); ++i) {
      projectors_z_.emplace_back(cfg_.Z[i]);
      projectors_v_.push_back(cfg_.V[i] ? std::optional<detail::PolytopeProjector>(
                                              detail::PolytopeProjector(*cfg_.V[i]))
                                        : std::nullopt);
    }
    if (cfg_.terminal.kind == Terminal::Kind::kLevelSet) {
      ellipsoid_ = detail::EllipsoidProjector(gains_.P, cfg_.terminal.alpha);
    }
  }

  void project(Vector& zeta) const {
    for (int t = 1; t < N_; ++t)
      for (int i = 0; i < graph_.size(); ++i)
        projectors_z_[i].project(zeta.segment(zoff(t) + graph_.x_offset(i), graph_[i].n));
    if (cfg_.terminal.kind == Terminal::Kind::kPoint) {
      zeta.segment(zoff(N_), n_).setZero();
    } else {
      ellipsoid_.project(zeta.segment(zoff(N_), n_));
    }
    for (int t = 1; t < N_; ++t)
      for (int i = 0; i < graph_.size(); ++i)
        if (projectors_v_[i])
          projectors_v_[i]->project(zeta.segment(voff(t) + graph_.u_offset(i), graph_[i].m));
  }

  void expand(const Vector& z0, const Vector& c, MpcSolution& sol) const {
    const Vector zs = tz_ * z0 + sz_ * c;
    sol.Z = Eigen::Map<const Matrix>(zs.data(), n_, N_ + 1);
    sol.V = Matrix(m_, N_);
    for (int t = 0; t < N_; ++t)
      sol.V.col(t) = gains_.K * sol.Z.col(t) + c.segment(t * m_, m_);
    sol.cost = cost(sol.Z, sol.V);
  }

  SystemGraph graph_;
  GainSet gains_;
  MpcConfig cfg_;
  GlobalModel gm_;
  int N_ = 0, n_ = 0, m_ = 0;
  Matrix tz_, sz_;
  Matrix h0_, f0_, c0_, hp_, fp_, cp_;
  Matrix ain_, ein_;
  Vector bin_;
  int nglob_ = 0;
  Vector count_;
  std::vector<Agent> agents_;
  std::vector<detail::PolytopeProjector> projectors_z_;
  std::vector<std::optional<detail::PolytopeProjector>> projectors_v_;
  detail::EllipsoidProjector ellipsoid_;
};

/// Mode 1 at x̂ when feasible; otherwise Mode 2 at z*(1|k−1).
inline std::pair<Vector, int> select_initial_state(const MpcProblem& problem,
                                                   const Vector& x_hat,
                                                   const MpcSolution* prev) {
  if (problem.check_feasibility(x_hat)) return {x_hat, 1};
  if (!prev || prev->Z.cols() < 2) {
    throw Error(ErrorKind::kInfeasible, "MPC infeasible at the initial state");
  }
  return {prev->Z.col(1), 2};
}

/// u_i = v_i(0) + K_{N_i}(x̂_{N_i} − z0_{N_i}).
inline Vector control_input(const Matrix& k_block, const Vector& v0_i, const Vector& x_hat_ni,
                            const Vector& z0_ni) {
  if (k_block.rows() != v0_i.size() || k_block.cols() != x_hat_ni.size() ||
      x_hat_ni.size() != z0_ni.size()) {
    throw Error(ErrorKind::kDimension, "control_input: size mismatch");
  }
  return v0_i + k_block * (x_hat_ni - z0_ni);
}

/// Stacked control law u = v(0) + K(x̂ − z(0)); for structured K each row
/// block reduces to the local law above, a dense central K is kept whole.
inline Vector control_input(const SystemGraph& g, const GainSet& gains, const Vector& v0,
                            const Vector& x_hat, const Vector& z0) {
  if (v0.size() != g.m() || x_hat.size() != g.n() || z0.size() != g.n()) {
    throw Error(ErrorKind::kDimension, "control_input: size mismatch");
  }
  return v0 + gains.K * (x_hat - z0);
}

}  // namespace dsmpc::mpc
