// Dense strictly convex QP by the Goldfarb–Idnani dual active-set method:
//
//   minimize ½ xᵀGx + gᵀx   subject to   A_eq x = b_eq,   A_in x ≤ b_in.
//
// G must be positive definite. Equality rows enter the active set first and
// are never dropped; violated inequalities are added lowest index first.
#pragma once

#include <dsmpc/common.hpp>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace dsmpc::qp {

enum class QpStatus { kOptimal, kInfeasible };

struct QpResult {
  QpStatus status = QpStatus::kInfeasible;
  Vector x;
  Vector lambda_eq;  ///< G x + g + A_eqᵀ λ_eq + A_inᵀ λ_in = 0
  Vector lambda_in;  ///< ≥ 0, zero on inactive rows
  double objective = 0.0;
  int iterations = 0;
};

struct QpOptions {
  double feasibility_tol = 1e-10;  ///< scaled by (1 + |b|) per row
  int max_iterations = 10000;
  bool polish = true;  ///< re-solve the final active set's KKT system directly
};

struct KktResiduals {
  double stationarity = 0.0;
  double primal = 0.0;           ///< max equality error / inequality excess
  double dual = 0.0;             ///< max(−λ_in)
  double complementarity = 0.0;  ///< max |λ_in,i · slack_i|
  double max() const { return std::max({stationarity, primal, dual, complementarity}); }
};

inline KktResiduals kkt_residuals(const Matrix& G, const Vector& g, const Matrix& Aeq,
                                  const Vector& beq, const Matrix& Ain, const Vector& bin,
                                  const QpResult& r) {
  KktResiduals k;
  Vector grad = G * r.x + g;
  if (Aeq.rows() > 0) grad += Aeq.transpose() * r.lambda_eq;
  if (Ain.rows() > 0) grad += Ain.transpose() * r.lambda_in;
  k.stationarity = grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0;
  if (Aeq.rows() > 0) k.primal = (Aeq * r.x - beq).cwiseAbs().maxCoeff();
  if (Ain.rows() > 0) {
    const Vector slack = bin - Ain * r.x;
    k.primal = std::max(k.primal, std::max(0.0, -slack.minCoeff()));
    k.dual = std::max(0.0, -r.lambda_in.minCoeff());
    k.complementarity = r.lambda_in.cwiseProduct(slack).cwiseAbs().maxCoeff();
  }
  return k;
}

namespace detail {

/// Working state of the dual method (notation after Goldfarb & Idnani).
/// Constraints are kept in the form nᵀx + c0 ≥ 0 (equalities = 0).
class GoldfarbIdnani {
 public:
  GoldfarbIdnani(const Matrix& G, const Vector& g) : n_(static_cast<int>(G.rows())) {
    Eigen::LLT<Matrix> llt(G);
    if (llt.info() != Eigen::Success) {
      throw Error(ErrorKind::kPrecondition, "solve_qp: Hessian is not positive definite");
    }
    const Matrix lower = llt.matrixL();
    // J = L⁻ᵀ so that Jᵀ G J = I.
    J_ = lower.transpose().triangularView<Eigen::Upper>().solve(Matrix::Identity(n_, n_));
    R_ = Matrix::Zero(n_, n_);
    x_ = -llt.solve(g);
    d_ = Vector::Zero(n_);
    z_ = Vector::Zero(n_);
    r_ = Vector::Zero(n_ + 1);
  }

  int n_;
  Matrix J_, R_;
  Vector x_, d_, z_, r_;
  int iq_ = 0;
  double r_norm_ = 1.0;

  void step_directions(const Vector& np) {
    d_ = J_.transpose() * np;
    z_ = J_.rightCols(n_ - iq_) * d_.tail(n_ - iq_);
    if (iq_ > 0) {
      r_.head(iq_) = R_.topLeftCorner(iq_, iq_)
                         .triangularView<Eigen::Upper>()
                         .solve(d_.head(iq_));
    }
  }

  bool add_constraint() {
    for (int j = n_ - 1; j >= iq_ + 1; --j) {
      double cc = d_(j - 1);
      double ss = d_(j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      d_(j) = 0.0;
      ss /= h;
      cc /= h;
      if (cc < 0.0) {
        cc = -cc;
        ss = -ss;
        d_(j - 1) = -h;
      } else {
        d_(j - 1) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = 0; k < n_; ++k) {
        const double t1 = J_(k, j - 1);
        const double t2 = J_(k, j);
        J_(k, j - 1) = t1 * cc + t2 * ss;
        J_(k, j) = xny * (t1 + J_(k, j - 1)) - t2;
      }
    }
    ++iq_;
    R_.col(iq_ - 1).head(iq_) = d_.head(iq_);
    if (std::abs(d_(iq_ - 1)) <= std::numeric_limits<double>::epsilon() * r_norm_) {
      return false;  // linearly dependent on the active set
    }
    r_norm_ = std::max(r_norm_, std::abs(d_(iq_ - 1)));
    return true;
  }

  /// Removes active position `pos` and retriangularises R.
  void delete_position(int pos) {
    for (int i = pos; i < iq_ - 1; ++i) R_.col(i) = R_.col(i + 1);
    R_.col(iq_ - 1).setZero();
    --iq_;
    for (int j = pos; j < iq_; ++j) {
      double cc = R_(j, j);
      double ss = R_(j + 1, j);
      const double h = std::hypot(cc, ss);
      if (h == 0.0) continue;
      cc /= h;
      ss /= h;
      R_(j + 1, j) = 0.0;
      if (cc < 0.0) {
        R_(j, j) = -h;
        cc = -cc;
        ss = -ss;
      } else {
        R_(j, j) = h;
      }
      const double xny = ss / (1.0 + cc);
      for (int k = j + 1; k < iq_; ++k) {
        const double t1 = R_(j, k);
        const double t2 = R_(j + 1, k);
        R_(j, k) = t1 * cc + t2 * ss;
        R_(j + 1, k) = xny * (t1 + R_(j, k)) - t2;
      }
      for (int k = 0; k < n_; ++k) {
        const double t1 = J_(k, j);
        const double t2 = J_(k, j + 1);
        J_(k, j) = t1 * cc + t2 * ss;
        J_(k, j + 1) = xny * (J_(k, j) + t1) - t2;
      }
    }
  }
};

}  // namespace detail

inline QpResult solve_qp(const Matrix& G, const Vector& g, const Matrix& Aeq,
                         const Vector& beq, const Matrix& Ain, const Vector& bin,
                         const QpOptions& opts = {}) {
  const int n = static_cast<int>(G.rows());
  const int me = static_cast<int>(Aeq.rows());
  const int mi = static_cast<int>(Ain.rows());
  if (G.cols() != n || g.size() != n || (me > 0 && Aeq.cols() != n) ||
      (mi > 0 && Ain.cols() != n) || beq.size() != me || bin.size() != mi) {
    throw Error(ErrorKind::kDimension, "solve_qp: inconsistent sizes");
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const double eps = std::numeric_limits<double>::epsilon();

  detail::GoldfarbIdnani gi(G, g);
  QpResult res;
  res.lambda_eq = Vector::Zero(me);
  res.lambda_in = Vector::Zero(mi);

  // Active set: entries < 0 encode equality −(k+1), ≥ 0 inequality k.
  std::vector<int> active;
  std::vector<double> u;  // multipliers of the active set (nᵀx + c0 ≥ 0 form)

  auto normal = [&](int code) -> Vector {
    return code < 0 ? Vector(Aeq.row(-code - 1).transpose())
                    : Vector(-Ain.row(code).transpose());
  };
  auto ineq_slack = [&](int i) { return bin(i) - Ain.row(i).dot(gi.x_); };
  auto ineq_tol = [&](int i) { return opts.feasibility_tol * (1.0 + std::abs(bin(i))); };

  for (int i = 0; i < me; ++i) {
    const Vector np = Aeq.row(i).transpose();
    gi.step_directions(np);
    const double ztn = gi.z_.dot(np);
    double t2 = 0.0;
    if (std::abs(ztn) > eps) t2 = (beq(i) - np.dot(gi.x_)) / ztn;
    gi.x_ += t2 * gi.z_;
    for (int k = 0; k < gi.iq_; ++k) u[k] -= t2 * gi.r_(k);
    u.push_back(t2);
    active.push_back(-i - 1);
    if (!gi.add_constraint()) {
      throw Error(ErrorKind::kPrecondition,
                  "solve_qp: equality constraints are linearly dependent");
    }
  }

  std::vector<char> in_active(mi, 0);
  std::vector<char> excluded(mi, 0);
  int iter = 0;
  bool infeasible = false;

  while (true) {
    if (++iter > opts.max_iterations) {
      throw Error(ErrorKind::kSolver, "solve_qp: iteration limit reached");
    }
    // Lowest-index violated inequality not yet active.
    int ip = -1;
    for (int i = 0; i < mi; ++i) {
      if (in_active[i] || excluded[i]) continue;
      if (ineq_slack(i) < -ineq_tol(i)) {
        ip = i;
        break;
      }
    }
    if (ip < 0) break;

    const std::vector<int> active_old = active;
    const std::vector<double> u_old = u;
    const Vector x_old = gi.x_;
    const Vector np = normal(ip);
    double u_new = 0.0;

    bool restart = false;
    while (true) {
      gi.step_directions(np);
      // Dual step length: first active inequality whose multiplier hits zero.
      double t1 = kInf;
      int drop = -1;
      for (int k = me; k < gi.iq_; ++k) {
        if (gi.r_(k) > 0.0 && u[k] / gi.r_(k) < t1) {
          t1 = u[k] / gi.r_(k);
          drop = k;
        }
      }
      const double ztn = gi.z_.dot(np);
      double t2 = kInf;
      if (gi.z_.squaredNorm() > eps * eps * (1.0 + gi.x_.squaredNorm()) &&
          std::abs(ztn) > eps) {
        t2 = -ineq_slack(ip) / ztn;
        if (t2 < 0.0) t2 = kInf;
      }
      const double t = std::min(t1, t2);
      if (t == kInf) {
        infeasible = true;
        break;
      }
      if (t2 == kInf) {
        // Dual step only: drop a blocking constraint and continue.
        for (int k = 0; k < gi.iq_; ++k) u[k] -= t * gi.r_(k);
        u_new += t;
        in_active[active[drop]] = 0;
        active.erase(active.begin() + drop);
        u.erase(u.begin() + drop);
        gi.delete_position(drop);
        continue;
      }
      gi.x_ += t * gi.z_;
      for (int k = 0; k < gi.iq_; ++k) u[k] -= t * gi.r_(k);
      u_new += t;
      if (t == t2) {
        if (!gi.add_constraint()) {
          // Degenerate: restore and skip this constraint for now.
          gi.delete_position(gi.iq_ - 1);
          excluded[ip] = 1;
          active = active_old;
          u = u_old;
          gi.x_ = x_old;
          restart = true;
        } else {
          active.push_back(ip);
          u.push_back(u_new);
          in_active[ip] = 1;
          std::fill(excluded.begin(), excluded.end(), 0);
        }
        break;
      }
      // Partial step: drop the blocking constraint.
      in_active[active[drop]] = 0;
      active.erase(active.begin() + drop);
      u.erase(u.begin() + drop);
      gi.delete_position(drop);
    }
    if (infeasible) break;
    if (restart) {
      // Rebuild factorisation for the restored active set.
      gi = detail::GoldfarbIdnani(G, g);
      gi.x_ = x_old;
      for (int code : active) {
        gi.step_directions(normal(code));
        if (!gi.add_constraint()) {
          throw Error(ErrorKind::kSolver, "solve_qp: degenerate active set");
        }
      }
      std::fill(in_active.begin(), in_active.end(), 0);
      for (int code : active)
        if (code >= 0) in_active[code] = 1;
    }
  }
  res.iterations = iter;
  for (int i = 0; i < mi && !infeasible; ++i) {
    if (excluded[i] && ineq_slack(i) < -ineq_tol(i)) infeasible = true;
  }

  if (infeasible) {
    res.status = QpStatus::kInfeasible;
    res.x = gi.x_;
    return res;
  }

  res.status = QpStatus::kOptimal;
  res.x = gi.x_;
  for (std::size_t k = 0; k < active.size(); ++k) {
    const int code = active[k];
    if (code < 0) {
      res.lambda_eq(-code - 1) = -u[k];
    } else {
      res.lambda_in(code) = u[k];
    }
  }

  if (opts.polish && !active.empty()) {
    const int na = static_cast<int>(active.size());
    Matrix kkt = Matrix::Zero(n + na, n + na);
    Vector rhs(n + na);
    kkt.topLeftCorner(n, n) = G;
    rhs.head(n) = -g;
    for (int k = 0; k < na; ++k) {
      const int code = active[k];
      const Vector row = code < 0 ? Vector(Aeq.row(-code - 1).transpose())
                                  : Vector(Ain.row(code).transpose());
      kkt.block(0, n + k, n, 1) = row;
      kkt.block(n + k, 0, 1, n) = row.transpose();
      rhs(n + k) = code < 0 ? beq(-code - 1) : bin(code);
    }
    const Vector sol = kkt.fullPivLu().solve(rhs);
    if (sol.allFinite()) {
      QpResult polished = res;
      polished.x = sol.head(n);
      polished.lambda_eq.setZero();
      polished.lambda_in.setZero();
      for (int k = 0; k < na; ++k) {
        const int code = active[k];
        if (code < 0) {
          polished.lambda_eq(-code - 1) = sol(n + k);
        } else {
          polished.lambda_in(code) = sol(n + k);
        }
      }
      const KktResiduals before = kkt_residuals(G, g, Aeq, beq, Ain, bin, res);
      const KktResiduals after = kkt_residuals(G, g, Aeq, beq, Ain, bin, polished);
      if (after.max() <= before.max()) res = polished;
    }
  }
  res.objective = 0.5 * res.x.dot(G * res.x) + g.dot(res.x);
  return res;
}

}  // namespace dsmpc::qp
