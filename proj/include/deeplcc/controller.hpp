#pragma once

#include <Eigen/Dense>
#include <Eigen/QR>

#include <chrono>
#include <deque>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "deeplcc/core.hpp"
#include "deeplcc/hankel.hpp"
#include "deeplcc/hdv.hpp"
#include "deeplcc/qp.hpp"

namespace deeplcc {

struct DeepLccConfig {
  int T_ini = 20;
  int N = 50;
  int N_c = 10;
  double w_v = 5.0;
  double w_s = 40.0;
  double w_u = 2.0;
  double lambda_g = 10.0;
  double lambda_y = 1e5;
  double s_tilde_min = -0.4;
  double s_tilde_max = 1.2;
  double a_min = -0.4;
  double a_max = 0.4;

  void validate() const {
    if (T_ini < 1 || N < 1 || N_c < 1 || N_c > N)
      throw std::invalid_argument("controller: need T_ini >= 1 and 1 <= N_c <= N");
    if (w_v <= 0 || w_s <= 0 || w_u <= 0 || lambda_g <= 0 || lambda_y <= 0)
      throw std::invalid_argument("controller: weights and regularizers must be > 0");
    if (s_tilde_min >= s_tilde_max) throw std::invalid_argument("controller: spacing box empty");
    if (a_min >= a_max) throw std::invalid_argument("controller: acceleration box empty");
  }

  /// Reference parameter set; the spacing and input weights are divided by
  /// the CAV count.
  static DeepLccConfig reference_defaults(int cav_count) {
    DeepLccConfig cfg;
    if (cav_count > 1) {
      cfg.w_s /= cav_count;
      cfg.w_u /= cav_count;
    }
    return cfg;
  }
};

/// Rolling window of the last T_ini samples of applied input, head-vehicle
/// velocity, and raw output seen by the controller.
class PastBuffer {
 public:
  PastBuffer(int t_ini, int n, int m) : t_ini_(t_ini), n_(n), m_(m) {
    if (t_ini < 1) throw std::invalid_argument("past buffer: T_ini must be >= 1");
  }

  void push(const VectorXd& u, double v0, const VectorXd& y_raw) {
    if (u.size() != m_ || y_raw.size() != n_ + m_)
      throw std::invalid_argument("past buffer: sample dimension mismatch");
    u_.push_back(u);
    v0_.push_back(v0);
    y_raw_.push_back(y_raw);
    while (static_cast<int>(u_.size()) > t_ini_) {
      u_.pop_front();
      v0_.pop_front();
      y_raw_.pop_front();
    }
  }

  bool warmed_up() const { return static_cast<int>(u_.size()) == t_ini_; }
  int t_ini() const { return t_ini_; }
  int n() const { return n_; }
  int m() const { return m_; }

  VectorXd u_ini() const {
    require_warm();
    VectorXd out(m_ * t_ini_);
    for (int k = 0; k < t_ini_; ++k) out.segment(k * m_, m_) = u_[k];
    return out;
  }

  VectorXd v0_history() const {
    require_warm();
    VectorXd out(t_ini_);
    for (int k = 0; k < t_ini_; ++k) out(k) = v0_[k];
    return out;
  }

  MatrixXd y_raw_history() const {
    require_warm();
    MatrixXd out(n_ + m_, t_ini_);
    for (int k = 0; k < t_ini_; ++k) out.col(k) = y_raw_[k];
    return out;
  }

  const VectorXd& latest_y_raw() const {
    if (y_raw_.empty()) throw std::logic_error("past buffer: empty");
    return y_raw_.back();
  }
  double latest_v0() const {
    if (v0_.empty()) throw std::logic_error("past buffer: empty");
    return v0_.back();
  }

 private:
  void require_warm() const {
    if (!warmed_up()) throw std::logic_error("past buffer: not warmed up");
  }

  int t_ini_, n_, m_;
  std::deque<VectorXd> u_;
  std::deque<double> v0_;
  std::deque<VectorXd> y_raw_;
};

/// Mean of the stored head-vehicle velocities.
inline double estimate_equilibrium_velocity(const PastBuffer& buffer) {
  return buffer.v0_history().mean();
}

inline double design_equilibrium_spacing(double v_star, const OvmParams& p) {
  return equilibrium_spacing_inverse(v_star, p);
}

/// One control step's QP in the stacked variable [g; u; y; sigma_y].
struct DeepLccProblem {
  QpProblem qp;
  EquilibriumState equilibrium;
  int n = 0, m = 0, T_ini = 0, N = 0, L = 0;
  int g_offset = 0, u_offset = 0, y_offset = 0, sigma_offset = 0;

  MatrixXd inputs(const VectorXd& x) const {
    MatrixXd out(m, N);
    for (int k = 0; k < N; ++k) out.col(k) = x.segment(u_offset + k * m, m);
    return out;
  }
  MatrixXd outputs(const VectorXd& x) const {
    MatrixXd out(n + m, N);
    for (int k = 0; k < N; ++k) out.col(k) = x.segment(y_offset + k * (n + m), n + m);
    return out;
  }
  VectorXd g(const VectorXd& x) const { return x.segment(g_offset, L); }
  VectorXd sigma(const VectorXd& x) const {
    return x.segment(sigma_offset, (n + m) * T_ini);
  }
};

namespace detail {

/// Equality rows tying [g; u; y; sigma] to the data blocks and the past
/// window. Row layout: U_p, E_p, Y_p (with -I on sigma), U_f (-I on u),
/// E_f, Y_f (-I on y). Only the right-hand sides of the first three groups
/// change between control steps.
inline void fill_equalities(const HankelBlocks& blocks, const MatrixXd& g_basis,
                            MatrixXd& A, int u_off, int y_off, int sig_off) {
  const HankelDims& d = blocks.dims;
  const int nm = d.n + d.m;
  const int r = static_cast<int>(g_basis.cols());
  int row = 0;
  A.block(row, 0, d.m * d.T_ini, r) = blocks.U_p * g_basis;
  row += d.m * d.T_ini;
  A.block(row, 0, d.T_ini, r) = blocks.E_p * g_basis;
  row += d.T_ini;
  A.block(row, 0, nm * d.T_ini, r) = blocks.Y_p * g_basis;
  A.block(row, sig_off, nm * d.T_ini, nm * d.T_ini) =
      -MatrixXd::Identity(nm * d.T_ini, nm * d.T_ini);
  row += nm * d.T_ini;
  A.block(row, 0, d.m * d.N, r) = blocks.U_f * g_basis;
  A.block(row, u_off, d.m * d.N, d.m * d.N) = -MatrixXd::Identity(d.m * d.N, d.m * d.N);
  row += d.m * d.N;
  A.block(row, 0, d.N, r) = blocks.E_f * g_basis;
  row += d.N;
  A.block(row, 0, nm * d.N, r) = blocks.Y_f * g_basis;
  A.block(row, y_off, nm * d.N, nm * d.N) = -MatrixXd::Identity(nm * d.N, nm * d.N);
}

inline DeepLccProblem assemble_impl(const HankelBlocks& blocks, const VectorXd& u_ini,
                                    const VectorXd& eps_ini, const VectorXd& y_ini,
                                    const EquilibriumState& eq, const DeepLccConfig& cfg,
                                    const MatrixXd* g_basis) {
  const HankelDims& d = blocks.dims;
  const int nm = d.n + d.m;
  const int L = d.cols();
  const int r = g_basis ? static_cast<int>(g_basis->cols()) : L;
  MatrixXd basis = g_basis ? *g_basis : MatrixXd::Identity(L, L);

  DeepLccProblem p;
  p.equilibrium = eq;
  p.n = d.n;
  p.m = d.m;
  p.T_ini = d.T_ini;
  p.N = d.N;
  p.L = r;
  p.g_offset = 0;
  p.u_offset = r;
  p.y_offset = r + d.m * d.N;
  p.sigma_offset = p.y_offset + nm * d.N;
  const int nvar = p.sigma_offset + nm * d.T_ini;

  p.qp.P = MatrixXd::Zero(nvar, nvar);
  p.qp.P.diagonal().segment(0, r).setConstant(2.0 * cfg.lambda_g);
  for (int k = 0; k < d.N; ++k) {
    p.qp.P.diagonal().segment(p.u_offset + k * d.m, d.m).setConstant(2.0 * cfg.w_u);
    p.qp.P.diagonal().segment(p.y_offset + k * nm, d.n).setConstant(2.0 * cfg.w_v);
    p.qp.P.diagonal().segment(p.y_offset + k * nm + d.n, d.m).setConstant(2.0 * cfg.w_s);
  }
  p.qp.P.diagonal().segment(p.sigma_offset, nm * d.T_ini).setConstant(2.0 * cfg.lambda_y);
  p.qp.q = VectorXd::Zero(nvar);

  const int n_eq = (d.m + 1 + nm) * d.T_ini + (d.m + 1 + nm) * d.N;
  const int n_box = d.m * d.N + d.m * d.N;  // inputs and spacing rows of y
  p.qp.A = MatrixXd::Zero(n_eq + n_box, nvar);
  p.qp.lower = VectorXd::Zero(n_eq + n_box);
  p.qp.upper = VectorXd::Zero(n_eq + n_box);
  fill_equalities(blocks, basis, p.qp.A, p.u_offset, p.y_offset, p.sigma_offset);

  VectorXd rhs = VectorXd::Zero(n_eq);
  rhs.segment(0, d.m * d.T_ini) = u_ini;
  rhs.segment(d.m * d.T_ini, d.T_ini) = eps_ini;
  rhs.segment((d.m + 1) * d.T_ini, nm * d.T_ini) = y_ini;
  p.qp.lower.head(n_eq) = rhs;
  p.qp.upper.head(n_eq) = rhs;

  int row = n_eq;
  for (int k = 0; k < d.N; ++k) {
    for (int j = 0; j < d.m; ++j, ++row) {
      p.qp.A(row, p.u_offset + k * d.m + j) = 1.0;
      p.qp.lower(row) = cfg.a_min;
      p.qp.upper(row) = cfg.a_max;
    }
  }
  for (int k = 0; k < d.N; ++k) {
    for (int j = 0; j < d.m; ++j, ++row) {
      p.qp.A(row, p.y_offset + k * nm + d.n + j) = 1.0;
      p.qp.lower(row) = cfg.s_tilde_min;
      p.qp.upper(row) = cfg.s_tilde_max;
    }
  }
  return p;
}

}  // namespace detail

/// Builds the control QP from the data blocks and the live past window.
/// eps_ini and y_ini are centered with the supplied equilibrium; u_ini is the
/// applied-input history as-is.
inline DeepLccProblem assemble_problem(const HankelBlocks& blocks, const PastBuffer& buffer,
                                       const EquilibriumState& eq, const DeepLccConfig& cfg) {
  cfg.validate();
  const HankelDims& d = blocks.dims;
  if (buffer.n() != d.n || buffer.m() != d.m || buffer.t_ini() != d.T_ini ||
      cfg.T_ini != d.T_ini || cfg.N != d.N)
    throw std::invalid_argument("assemble_problem: dimension mismatch between blocks, buffer, config");
  if (!buffer.warmed_up()) throw std::logic_error("assemble_problem: buffer not warmed up");

  VectorXd eps_ini = buffer.v0_history().array() - eq.v_star;
  MatrixXd yh = buffer.y_raw_history();
  VectorXd y_ini((d.n + d.m) * d.T_ini);
  for (int k = 0; k < d.T_ini; ++k)
    y_ini.segment(k * (d.n + d.m), d.n + d.m) =
        raw_to_error_output(yh.col(k), eq, d.n, d.m);
  return detail::assemble_impl(blocks, buffer.u_ini(), eps_ini, y_ini, eq, cfg, nullptr);
}

struct ControlPlan {
  MatrixXd inputs;             ///< m x N commanded accelerations
  MatrixXd predicted_outputs;  ///< (n+m) x N error outputs
  VectorXd g;
  VectorXd sigma;
  ControlDiagnostics diagnostics;
};

/// Receding-horizon DeeP-LCC controller. The data blocks, cost, box bounds,
/// and the QP factorization are fixed at construction; each control step only
/// updates the equality right-hand sides, warm-starts from the shifted
/// previous solution, and re-solves.
///
/// Internally the g variable is expressed in an orthonormal basis of the row
/// space of the stacked data matrix. Any g splits into a row-space component
/// and a null-space component that affects neither the constraints nor the
/// predictions, and the g-regularizer strictly prefers dropping the latter,
/// so the optimum is unchanged while the QP shrinks from L to rank(H)
/// coordinates.
class DeepLccController {
 public:
  DeepLccController(HankelBlocks blocks, DeepLccConfig cfg, OvmParams ovm,
                    QpSettings qp_settings = controller_qp_settings())
      : blocks_(std::move(blocks)), cfg_(cfg), ovm_(ovm) {
    cfg_.validate();
    ovm_.validate();
    build_basis();
    const HankelDims& d = blocks_.dims;
    VectorXd zeros_u = VectorXd::Zero(d.m * d.T_ini);
    VectorXd zeros_e = VectorXd::Zero(d.T_ini);
    VectorXd zeros_y = VectorXd::Zero((d.n + d.m) * d.T_ini);
    problem_ = detail::assemble_impl(blocks_, zeros_u, zeros_e, zeros_y,
                                     EquilibriumState{}, cfg_, &basis_);
    solver_ = std::make_unique<QpSolver>(problem_.qp, qp_settings);
  }

  static QpSettings controller_qp_settings() {
    QpSettings s;
    s.eps_abs = 1e-6;
    s.max_iterations = 20000;
    s.polish = false;
    return s;
  }

  const DeepLccConfig& config() const { return cfg_; }
  const HankelBlocks& blocks() const { return blocks_; }
  int basis_rank() const { return static_cast<int>(basis_.cols()); }

  /// Algorithm steps 4-6: estimate the equilibrium, assemble, solve, and
  /// return the full-horizon plan. Falls back to the remaining previous plan
  /// (or the OVM input) when the solve fails.
  ControlPlan plan(const PastBuffer& buffer) {
    const auto t0 = std::chrono::steady_clock::now();
    double v_star = estimate_equilibrium_velocity(buffer);
    v_star = std::min(std::max(v_star, 0.0), ovm_.v_max);
    const double s_star = design_equilibrium_spacing(v_star, ovm_);
    const EquilibriumState eq{v_star, s_star};
    const HankelDims& d = blocks_.dims;

    VectorXd eps_ini = buffer.v0_history().array() - v_star;
    MatrixXd yh = buffer.y_raw_history();
    VectorXd y_ini((d.n + d.m) * d.T_ini);
    for (int k = 0; k < d.T_ini; ++k)
      y_ini.segment(k * (d.n + d.m), d.n + d.m) =
          raw_to_error_output(yh.col(k), eq, d.n, d.m);

    const int n_eq = (d.m + 1 + d.n + d.m) * (d.T_ini + d.N);
    VectorXd lower = problem_.qp.lower;
    VectorXd upper = problem_.qp.upper;
    lower.segment(0, d.m * d.T_ini) = buffer.u_ini();
    lower.segment(d.m * d.T_ini, d.T_ini) = eps_ini;
    lower.segment((d.m + 1) * d.T_ini, (d.n + d.m) * d.T_ini) = y_ini;
    upper.head(n_eq) = lower.head(n_eq);
    solver_->update_bounds(lower, upper);
    if (have_previous_) warm_start_shifted();

    const QpSolution& sol = solver_->solve();
    const auto t1 = std::chrono::steady_clock::now();

    ControlPlan out;
    out.diagnostics.v_star = v_star;
    out.diagnostics.s_star = s_star;
    out.diagnostics.iterations = sol.iterations;
    out.diagnostics.solve_seconds = std::chrono::duration<double>(t1 - t0).count();

    if (sol.status == QpStatus::kSolved) {
      out.inputs = problem_.inputs(sol.x);
      out.predicted_outputs = problem_.outputs(sol.x);
      out.g = basis_ * problem_.g(sol.x);
      out.sigma = problem_.sigma(sol.x);
      out.diagnostics.objective = sol.objective;
      out.diagnostics.sigma_norm = out.sigma.norm();
      out.diagnostics.outcome = SolveOutcome::kConverged;
      previous_plan_ = out.inputs;
      previous_consumed_ = 0;
      have_previous_ = true;
    } else {
      out.diagnostics.outcome = sol.status == QpStatus::kMaxIterations
                                    ? SolveOutcome::kMaxIterations
                                    : SolveOutcome::kInfeasible;
      out.diagnostics.fallback = true;
      out.inputs = fallback_inputs(buffer);
      out.predicted_outputs = MatrixXd::Zero(d.n + d.m, d.N);
      out.g = VectorXd::Zero(blocks_.dims.cols());
      out.sigma = VectorXd::Zero((d.n + d.m) * d.T_ini);
      solver_->reset_warm_start();
    }
    return out;
  }

  /// Spec-shaped control step: the first N_c columns of the optimal input.
  std::pair<MatrixXd, ControlDiagnostics> control_step(const PastBuffer& buffer) {
    ControlPlan p = plan(buffer);
    return {p.inputs.leftCols(cfg_.N_c), p.diagnostics};
  }

  /// Structured one-line state dump for debugging.
  std::string state_dump(const ControlDiagnostics& d) const {
    std::ostringstream os;
    os << "t=" << d.time << " v*=" << d.v_star << " s*=" << d.s_star
       << " obj=" << d.objective << " |sigma|=" << d.sigma_norm
       << " iters=" << d.iterations << " outcome=" << to_string(d.outcome);
    return os.str();
  }

 private:
  void build_basis() {
    const HankelDims& d = blocks_.dims;
    const int L = d.cols();
    const int rows = static_cast<int>(blocks_.U_p.rows() + blocks_.E_p.rows() +
                                      blocks_.Y_p.rows() + blocks_.U_f.rows() +
                                      blocks_.E_f.rows() + blocks_.Y_f.rows());
    MatrixXd stacked(rows, L);
    int r = 0;
    for (const MatrixXd* blk : {&blocks_.U_p, &blocks_.E_p, &blocks_.Y_p, &blocks_.U_f,
                                &blocks_.E_f, &blocks_.Y_f}) {
      stacked.middleRows(r, blk->rows()) = *blk;
      r += static_cast<int>(blk->rows());
    }
    Eigen::ColPivHouseholderQR<MatrixXd> qr(stacked.transpose());
    qr.setThreshold(1e-10);
    const int rank = static_cast<int>(qr.rank());
    basis_ = qr.householderQ() * MatrixXd::Identity(L, rank);
  }

  void warm_start_shifted() {
    // Shift the previous (u, y) trajectories by N_c samples, pad with zeros,
    // keep g/sigma coordinates and duals.
    const QpSolution& prev = solver_->solution();
    if (prev.x.size() != problem_.qp.P.rows()) return;
    VectorXd x = prev.x;
    const HankelDims& d = blocks_.dims;
    const int nm = d.n + d.m;
    for (int k = 0; k < d.N; ++k) {
      const int src = std::min(k + cfg_.N_c, d.N - 1);
      const bool pad = k + cfg_.N_c >= d.N;
      x.segment(problem_.u_offset + k * d.m, d.m) =
          pad ? VectorXd::Zero(d.m) : VectorXd(prev.x.segment(problem_.u_offset + src * d.m, d.m));
      x.segment(problem_.y_offset + k * nm, nm) =
          pad ? VectorXd::Zero(nm) : VectorXd(prev.x.segment(problem_.y_offset + src * nm, nm));
    }
    solver_->warm_start(x, prev.dual);
  }

  MatrixXd fallback_inputs(const PastBuffer& buffer) {
    // Remaining columns of the previous plan, then the OVM acceleration
    // computed from the latest raw output.
    const HankelDims& d = blocks_.dims;
    MatrixXd out(d.m, d.N);
    const VectorXd& y_raw = buffer.latest_y_raw();
    VectorXd ovm_u(d.m);
    for (int j = 0; j < d.m; ++j) {
      // Follower velocities are y_raw[0..n); CAV j is follower cav_local_[j].
      const int i = cav_rows_.empty() ? j : cav_rows_[j];
      const double v = y_raw(i);
      const double v_pred = i == 0 ? buffer.latest_v0() : y_raw(i - 1);
      const double s = y_raw(d.n + j);
      ovm_u(j) = ovm_acceleration(s, v, v_pred, ovm_);
    }
    for (int k = 0; k < d.N; ++k) {
      if (have_previous_ && previous_consumed_ + k < previous_plan_.cols())
        out.col(k) = previous_plan_.col(previous_consumed_ + k);
      else
        out.col(k) = ovm_u;
    }
    return out;
  }

 public:
  /// Tells the controller which follower rows (0-based) the CAVs occupy so
  /// the OVM fallback reads the right channels; defaults to the first m rows.
  void set_cav_rows(std::vector<int> rows) { cav_rows_ = std::move(rows); }

  /// Marks columns of the previous plan as consumed (receding horizon).
  void advance_previous_plan(int columns) {
    previous_consumed_ += columns;
  }

 private:
  HankelBlocks blocks_;
  DeepLccConfig cfg_;
  OvmParams ovm_;
  MatrixXd basis_;
  DeepLccProblem problem_;
  std::unique_ptr<QpSolver> solver_;
  MatrixXd previous_plan_;
  int previous_consumed_ = 0;
  bool have_previous_ = false;
  std::vector<int> cav_rows_;
};

}  // namespace deeplcc
