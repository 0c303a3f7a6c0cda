#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>

#include "deeplcc/core.hpp"

namespace deeplcc {

/// Convex quadratic program
///   minimize 0.5 x'Px + q'x  subject to  lower <= Ax <= upper.
/// Equality constraints are rows with lower == upper.
struct QpProblem {
  MatrixXd P;
  VectorXd q;
  MatrixXd A;
  VectorXd lower;
  VectorXd upper;

  Eigen::Index vars() const { return P.rows(); }
  Eigen::Index constraints() const { return A.rows(); }

  void validate() const {
    if (P.rows() != P.cols() || q.size() != P.rows())
      throw std::invalid_argument("qp: P/q dimension mismatch");
    if (A.size() > 0 && A.cols() != P.rows())
      throw std::invalid_argument("qp: A column count mismatch");
    if (lower.size() != A.rows() || upper.size() != A.rows())
      throw std::invalid_argument("qp: bound length mismatch");
  }
};

enum class QpStatus { kSolved, kMaxIterations, kPrimalInfeasible, kDualInfeasible };

struct QpSettings {
  double eps_abs = 1e-6;        ///< absolute tolerance on scaled residuals
  double eps_rel = 0.0;
  double eps_infeasible = 1e-8;
  int max_iterations = 20000;
  int check_interval = 25;
  double rho = 0.1;
  double rho_eq_scale = 1e3;    ///< stiffer dual step on equality rows
  double sigma = 1e-6;
  double alpha = 1.6;
  bool scale = true;
  int scaling_iterations = 6;
  bool polish = true;
  double polish_delta = 1e-7;
  int polish_refine_steps = 4;
};

struct QpSolution {
  VectorXd x;
  VectorXd z;          ///< constraint values Ax at the solution (projected)
  VectorXd dual;       ///< multipliers for lower <= Ax <= upper
  QpStatus status = QpStatus::kMaxIterations;
  int iterations = 0;
  double objective = 0.0;
  double primal_residual = 0.0;  ///< unscaled
  double dual_residual = 0.0;    ///< unscaled
  bool polished = false;
};

/// Operator-splitting solver with a cached Cholesky factorization of
/// P + sigma I + A' diag(rho) A. Bounds and linear cost can be updated
/// between solves without refactorizing, and solves warm-start from the
/// previous iterates, so receding-horizon reuse costs only the iterations.
class QpSolver {
 public:
  explicit QpSolver(QpProblem problem, QpSettings settings = {})
      : problem_(std::move(problem)), settings_(settings) {
    problem_.validate();
    setup();
  }

  void update_bounds(const VectorXd& lower, const VectorXd& upper) {
    if (lower.size() != m_ || upper.size() != m_)
      throw std::invalid_argument("qp: update_bounds length mismatch");
    problem_.lower = lower;
    problem_.upper = upper;
    l_ = e_.cwiseProduct(lower);
    u_ = e_.cwiseProduct(upper);
  }

  void update_linear_cost(const VectorXd& q) {
    if (q.size() != n_) throw std::invalid_argument("qp: update_linear_cost length mismatch");
    problem_.q = q;
    q_ = cost_scale_ * d_.cwiseProduct(q);
  }

  void warm_start(const VectorXd& x, const VectorXd& dual) {
    if (x.size() != n_ || dual.size() != m_)
      throw std::invalid_argument("qp: warm_start length mismatch");
    x_ = d_.cwiseInverse().cwiseProduct(x);
    y_ = cost_scale_ * e_.cwiseInverse().cwiseProduct(dual);
    z_ = (m_ > 0) ? VectorXd(As_ * x_) : VectorXd(0);
    clamp_z();
    warm_ = true;
  }

  void reset_warm_start() { warm_ = false; }

  const QpSolution& solve() {
    if (!warm_) {
      x_.setZero(n_);
      y_.setZero(m_);
      z_ = (m_ > 0) ? VectorXd(As_ * x_) : VectorXd(0);
      clamp_z();
    }
    solution_.status = QpStatus::kMaxIterations;
    solution_.polished = false;

    for (Eigen::Index i = 0; i < m_; ++i) {
      if (problem_.lower(i) > problem_.upper(i)) {
        solution_.status = QpStatus::kPrimalInfeasible;
        finalize(0);
        return solution_;
      }
    }

    VectorXd x_prev(n_), y_prev(m_), xt(n_), zt(m_), z_tmp(m_);
    int iter = 0;
    for (; iter < settings_.max_iterations; ++iter) {
      x_prev = x_;
      y_prev = y_;

      VectorXd rhs = settings_.sigma * x_ - q_;
      if (m_ > 0) rhs.noalias() += As_.transpose() * (rho_.cwiseProduct(z_) - y_);
      xt = llt_.solve(rhs);
      if (m_ > 0) zt.noalias() = As_ * xt;

      x_ = settings_.alpha * xt + (1.0 - settings_.alpha) * x_;
      if (m_ > 0) {
        z_tmp = settings_.alpha * zt + (1.0 - settings_.alpha) * z_ + rho_inv_.cwiseProduct(y_);
        z_ = z_tmp.cwiseMax(l_).cwiseMin(u_);
        y_.noalias() += rho_.cwiseProduct(z_tmp - z_);
      }

      if ((iter + 1) % settings_.check_interval == 0) {
        if (converged()) {
          solution_.status = QpStatus::kSolved;
          ++iter;
          break;
        }
        if (m_ > 0 && infeasibility_detected(x_ - x_prev, y_ - y_prev)) {
          finalize(iter + 1);
          return solution_;
        }
      }
    }

    if (solution_.status == QpStatus::kSolved && settings_.polish && m_ > 0) polish();
    finalize(iter);
    return solution_;
  }

  const QpSolution& solution() const { return solution_; }
  const QpProblem& problem() const { return problem_; }

 private:
  void setup() {
    n_ = problem_.vars();
    m_ = problem_.constraints();
    d_ = VectorXd::Ones(n_);
    e_ = VectorXd::Ones(m_);
    cost_scale_ = 1.0;
    Ps_ = problem_.P;
    As_ = problem_.A;
    q_ = problem_.q;
    l_ = problem_.lower;
    u_ = problem_.upper;

    if (settings_.scale) ruiz_equilibrate();

    rho_.resize(m_);
    for (Eigen::Index i = 0; i < m_; ++i) {
      const bool loose = !std::isfinite(l_(i)) && !std::isfinite(u_(i));
      const bool eq = std::isfinite(l_(i)) && std::isfinite(u_(i)) &&
                      (u_(i) - l_(i)) < 1e-12 * (1.0 + std::abs(u_(i)));
      rho_(i) = loose ? 1e-6 : (eq ? settings_.rho * settings_.rho_eq_scale : settings_.rho);
    }
    rho_inv_ = rho_.cwiseInverse();

    MatrixXd M = Ps_;
    M.diagonal().array() += settings_.sigma;
    if (m_ > 0) M.noalias() += As_.transpose() * rho_.asDiagonal() * As_;
    llt_.compute(M);
    if (llt_.info() != Eigen::Success)
      throw std::runtime_error("qp: factorization failed (P not positive semidefinite?)");
    warm_ = false;
  }

  void ruiz_equilibrate() {
    for (int it = 0; it < settings_.scaling_iterations; ++it) {
      VectorXd dv(n_), ev(m_);
      for (Eigen::Index j = 0; j < n_; ++j) {
        double nrm = Ps_.col(j).lpNorm<Eigen::Infinity>();
        if (m_ > 0) nrm = std::max(nrm, As_.col(j).lpNorm<Eigen::Infinity>());
        dv(j) = nrm > 1e-12 ? 1.0 / std::sqrt(nrm) : 1.0;
      }
      for (Eigen::Index i = 0; i < m_; ++i) {
        const double nrm = As_.row(i).lpNorm<Eigen::Infinity>();
        ev(i) = nrm > 1e-12 ? 1.0 / std::sqrt(nrm) : 1.0;
      }
      Ps_ = dv.asDiagonal() * Ps_ * dv.asDiagonal();
      q_ = dv.cwiseProduct(q_);
      if (m_ > 0) {
        As_ = ev.asDiagonal() * As_ * dv.asDiagonal();
        l_ = ev.cwiseProduct(l_);
        u_ = ev.cwiseProduct(u_);
      }
      d_ = d_.cwiseProduct(dv);
      e_ = e_.cwiseProduct(ev);
    }
    double col_mean = 0.0;
    for (Eigen::Index j = 0; j < n_; ++j) col_mean += Ps_.col(j).lpNorm<Eigen::Infinity>();
    col_mean /= std::max<Eigen::Index>(n_, 1);
    const double c = std::max(col_mean, q_.lpNorm<Eigen::Infinity>());
    if (c > 1e-12) {
      cost_scale_ = 1.0 / c;
      Ps_ *= cost_scale_;
      q_ *= cost_scale_;
    }
  }

  void clamp_z() {
    for (Eigen::Index i = 0; i < m_; ++i) z_(i) = std::min(std::max(z_(i), l_(i)), u_(i));
  }

  bool converged() const {
    const double ea = settings_.eps_abs;
    const double er = settings_.eps_rel;
    double rp = 0.0, rp_ref = 0.0;
    if (m_ > 0) {
      VectorXd Ax = As_ * x_;
      rp = (Ax - z_).lpNorm<Eigen::Infinity>();
      rp_ref = std::max(Ax.lpNorm<Eigen::Infinity>(), z_.lpNorm<Eigen::Infinity>());
    }
    VectorXd grad = Ps_ * x_ + q_;
    if (m_ > 0) grad.noalias() += As_.transpose() * y_;
    const double rd = grad.lpNorm<Eigen::Infinity>();
    double rd_ref = std::max((Ps_ * x_).lpNorm<Eigen::Infinity>(), q_.lpNorm<Eigen::Infinity>());
    if (m_ > 0) rd_ref = std::max(rd_ref, (As_.transpose() * y_).lpNorm<Eigen::Infinity>());
    return rp <= ea + er * rp_ref && rd <= ea + er * rd_ref;
  }

  bool infeasibility_detected(const VectorXd& dx, const VectorXd& dy) {
    const double eps = settings_.eps_infeasible;
    const double inf = std::numeric_limits<double>::infinity();
    const double dy_norm = dy.lpNorm<Eigen::Infinity>();
    if (dy_norm > 1e-14) {
      const double atdy = (As_.transpose() * dy).lpNorm<Eigen::Infinity>();
      double support = 0.0;
      bool bounded = true;
      for (Eigen::Index i = 0; i < m_; ++i) {
        if (dy(i) > 0) {
          if (u_(i) == inf) { bounded = false; break; }
          support += u_(i) * dy(i);
        } else if (dy(i) < 0) {
          if (l_(i) == -inf) { bounded = false; break; }
          support += l_(i) * dy(i);
        }
      }
      if (bounded && atdy <= eps * dy_norm && support <= -eps * dy_norm) {
        solution_.status = QpStatus::kPrimalInfeasible;
        return true;
      }
    }
    const double dx_norm = dx.lpNorm<Eigen::Infinity>();
    if (dx_norm > 1e-14) {
      const double pdx = (Ps_ * dx).lpNorm<Eigen::Infinity>();
      const double qdx = q_.dot(dx);
      bool cone_ok = true;
      if (m_ > 0) {
        VectorXd Adx = As_ * dx;
        for (Eigen::Index i = 0; i < m_ && cone_ok; ++i) {
          if (u_(i) != inf && Adx(i) > eps * dx_norm) cone_ok = false;
          if (l_(i) != -inf && Adx(i) < -eps * dx_norm) cone_ok = false;
        }
      }
      if (cone_ok && pdx <= eps * dx_norm && qdx <= -eps * dx_norm) {
        solution_.status = QpStatus::kDualInfeasible;
        return true;
      }
    }
    return false;
  }

  /// Equality-KKT refinement on the detected active set; accepted only when
  /// it does not worsen feasibility.
  void polish() {
    const double thr = 1e-8;
    std::vector<Eigen::Index> lo, hi;
    for (Eigen::Index i = 0; i < m_; ++i) {
      if (y_(i) < -thr && std::isfinite(l_(i))) lo.push_back(i);
      else if (y_(i) > thr && std::isfinite(u_(i))) hi.push_back(i);
    }
    const Eigen::Index na = static_cast<Eigen::Index>(lo.size() + hi.size());
    if (na == 0) return;
    MatrixXd K = MatrixXd::Zero(n_ + na, n_ + na);
    K.topLeftCorner(n_, n_) = Ps_;
    VectorXd rhs(n_ + na);
    rhs.head(n_) = -q_;
    Eigen::Index r = 0;
    for (Eigen::Index i : lo) {
      K.block(n_ + r, 0, 1, n_) = As_.row(i);
      K.block(0, n_ + r, n_, 1) = As_.row(i).transpose();
      rhs(n_ + r) = l_(i);
      ++r;
    }
    for (Eigen::Index i : hi) {
      K.block(n_ + r, 0, 1, n_) = As_.row(i);
      K.block(0, n_ + r, n_, 1) = As_.row(i).transpose();
      rhs(n_ + r) = u_(i);
      ++r;
    }
    MatrixXd Kp = K;
    Kp.topLeftCorner(n_, n_).diagonal().array() += settings_.polish_delta;
    Kp.bottomRightCorner(na, na).diagonal().array() -= settings_.polish_delta;
    Eigen::PartialPivLU<MatrixXd> lu(Kp);
    VectorXd t = VectorXd::Zero(n_ + na);
    for (int i = 0; i < settings_.polish_refine_steps; ++i)
      t += lu.solve(rhs - K * t);

    VectorXd x_new = t.head(n_);
    VectorXd y_new = VectorXd::Zero(m_);
    r = 0;
    for (Eigen::Index i : lo) y_new(i) = t(n_ + r), ++r;
    for (Eigen::Index i : hi) y_new(i) = t(n_ + r), ++r;

    VectorXd Ax = As_ * x_new;
    const double rp_new = ((Ax - Ax.cwiseMax(l_).cwiseMin(u_))).lpNorm<Eigen::Infinity>();
    VectorXd grad = Ps_ * x_new + q_ + As_.transpose() * y_new;
    const double rd_new = grad.lpNorm<Eigen::Infinity>();
    bool sign_ok = true;
    for (Eigen::Index i : lo)
      if (y_new(i) > thr) sign_ok = false;
    for (Eigen::Index i : hi)
      if (y_new(i) < -thr) sign_ok = false;
    if (!sign_ok || !std::isfinite(rp_new) || !std::isfinite(rd_new)) return;
    if (rp_new <= settings_.eps_abs && rd_new <= settings_.eps_abs) {
      x_ = x_new;
      y_ = y_new;
      z_ = Ax.cwiseMax(l_).cwiseMin(u_);
      solution_.polished = true;
    }
  }

  void finalize(int iterations) {
    solution_.iterations = iterations;
    solution_.x = d_.cwiseProduct(x_);
    if (m_ > 0) {
      solution_.z = e_.cwiseInverse().cwiseProduct(z_);
      solution_.dual = e_.cwiseProduct(y_) / cost_scale_;
      VectorXd Ax = problem_.A * solution_.x;
      solution_.primal_residual =
          (Ax - Ax.cwiseMax(problem_.lower).cwiseMin(problem_.upper)).lpNorm<Eigen::Infinity>();
      solution_.dual_residual = (problem_.P * solution_.x + problem_.q +
                                 problem_.A.transpose() * solution_.dual)
                                    .lpNorm<Eigen::Infinity>();
    } else {
      solution_.z.resize(0);
      solution_.dual.resize(0);
      solution_.primal_residual = 0.0;
      solution_.dual_residual =
          (problem_.P * solution_.x + problem_.q).lpNorm<Eigen::Infinity>();
    }
    solution_.objective = 0.5 * solution_.x.dot(problem_.P * solution_.x) +
                          problem_.q.dot(solution_.x);
    warm_ = true;  // subsequent solves continue from the current iterates
  }

  QpProblem problem_;
  QpSettings settings_;
  Eigen::Index n_ = 0, m_ = 0;

  MatrixXd Ps_, As_;
  VectorXd q_, l_, u_;
  VectorXd d_, e_;
  double cost_scale_ = 1.0;
  VectorXd rho_, rho_inv_;
  Eigen::LLT<MatrixXd> llt_;

  VectorXd x_, z_, y_;
  bool warm_ = false;
  QpSolution solution_;
};

inline QpSolution solve_qp(const QpProblem& problem, const QpSettings& settings = {}) {
  QpSolver solver(problem, settings);
  return solver.solve();
}

}  // namespace deeplcc
