#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>

#include "deeplcc/core.hpp"

namespace deeplcc {

/// Spacing-dependent desired velocity of the optimal velocity model.
/// Zero below s_st, v_max above s_go, raised-cosine ramp in between.
inline double ovm_desired_velocity(double s, const OvmParams& p) {
  if (s <= p.s_st) return 0.0;
  if (s >= p.s_go) return p.v_max;
  return 0.5 * p.v_max * (1.0 - std::cos(M_PI * (s - p.s_st) / (p.s_go - p.s_st)));
}

/// d v_des / d s. Zero outside (s_st, s_go).
inline double ovm_desired_velocity_slope(double s, const OvmParams& p) {
  if (s <= p.s_st || s >= p.s_go) return 0.0;
  const double w = p.s_go - p.s_st;
  return 0.5 * p.v_max * (M_PI / w) * std::sin(M_PI * (s - p.s_st) / w);
}

inline double ovm_acceleration(double s, double v, double v_pred, const OvmParams& p) {
  return p.alpha * (ovm_desired_velocity(s, p) - v) + p.beta * (v_pred - v);
}

/// Inverse of ovm_desired_velocity on [0, v_max]; used to design the
/// equilibrium spacing from an equilibrium velocity.
inline double equilibrium_spacing_inverse(double v_star, const OvmParams& p) {
  if (v_star < 0.0 || v_star > p.v_max)
    throw std::invalid_argument("equilibrium_spacing_inverse: v_star outside [0, v_max]");
  return std::acos(1.0 - 2.0 * v_star / p.v_max) * (p.s_go - p.s_st) / M_PI + p.s_st;
}

inline EquilibriumState make_equilibrium(double v_star, const OvmParams& p) {
  return EquilibriumState{v_star, equilibrium_spacing_inverse(v_star, p)};
}

/// Discrete-time linearization of the mixed traffic system around an
/// equilibrium, x(k+1) = A x(k) + B u(k) + H eps(k), y(k) = C x(k).
/// State is [v~_1, s~_1, ..., v~_n, s~_n]; output is all velocity errors
/// followed by the CAV spacing errors. Forward-Euler discretization with the
/// simulator's step so the exactness properties of the data-driven
/// representation hold for trajectories of this same recursion.
struct LtiMixedModel {
  MatrixXd A;  ///< 2n x 2n
  MatrixXd B;  ///< 2n x m
  MatrixXd H;  ///< 2n x 1
  MatrixXd C;  ///< (n+m) x 2n
  double dt = kDefaultDt;
  int n = 0;
  int m = 0;
};

inline LtiMixedModel build_lti_model(const FleetConfig& fleet, const OvmParams& p,
                                     const EquilibriumState& eq, double dt) {
  fleet.validate();
  p.validate();
  if (eq.v_star <= 0.0 || eq.v_star >= p.v_max)
    throw std::invalid_argument("build_lti_model: equilibrium must lie strictly inside (0, v_max)");
  const FormationView view = formation_view(fleet);
  const int n = view.follower_count();
  const int m = view.cav_count();
  const double s_hdv = equilibrium_spacing_inverse(eq.v_star, p);
  const double slope = ovm_desired_velocity_slope(s_hdv, p);

  MatrixXd Ac = MatrixXd::Zero(2 * n, 2 * n);
  MatrixXd Bc = MatrixXd::Zero(2 * n, m);
  MatrixXd Hc = MatrixXd::Zero(2 * n, 1);
  auto vi = [](int i) { return 2 * (i - 1); };      // velocity error row of follower i
  auto si = [](int i) { return 2 * (i - 1) + 1; };  // spacing error row of follower i

  for (int i = 1; i <= n; ++i) {
    // d s~_i/dt = v~_{i-1} - v~_i
    Ac(si(i), vi(i)) = -1.0;
    if (i > 1)
      Ac(si(i), vi(i - 1)) = 1.0;
    else
      Hc(si(i), 0) = 1.0;

    const bool cav = std::find(view.cav_local.begin(), view.cav_local.end(), i) !=
                     view.cav_local.end();
    if (cav) {
      const int j = static_cast<int>(std::find(view.cav_local.begin(), view.cav_local.end(), i) -
                                     view.cav_local.begin());
      Bc(vi(i), j) = 1.0;
    } else {
      Ac(vi(i), si(i)) = p.alpha * slope;
      Ac(vi(i), vi(i)) = -(p.alpha + p.beta);
      if (i > 1)
        Ac(vi(i), vi(i - 1)) = p.beta;
      else
        Hc(vi(i), 0) = p.beta;
    }
  }

  LtiMixedModel model;
  model.A = MatrixXd::Identity(2 * n, 2 * n) + dt * Ac;
  model.B = dt * Bc;
  model.H = dt * Hc;
  model.C = MatrixXd::Zero(n + m, 2 * n);
  for (int i = 1; i <= n; ++i) model.C(i - 1, vi(i)) = 1.0;
  for (int j = 0; j < m; ++j) model.C(n + j, si(view.cav_local[j])) = 1.0;
  model.dt = dt;
  model.n = n;
  model.m = m;
  return model;
}

/// One step of the recursion; returns (x(k+1), y(k)).
inline std::pair<VectorXd, VectorXd> step_lti(const LtiMixedModel& model, const VectorXd& x,
                                              const VectorXd& u, double eps) {
  if (x.size() != model.A.rows() || u.size() != model.B.cols())
    throw std::invalid_argument("step_lti: dimension mismatch");
  VectorXd y = model.C * x;
  VectorXd x_next = model.A * x + model.B * u + model.H * VectorXd::Constant(1, eps);
  return {std::move(x_next), std::move(y)};
}

}  // namespace deeplcc
