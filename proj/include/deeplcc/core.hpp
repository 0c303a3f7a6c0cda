#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace deeplcc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Sampling interval shared by data collection and control (50 ms).
inline constexpr double kDefaultDt = 0.05;

struct VehicleState {
  double position = 0.0;      ///< m along track centerline
  double velocity = 0.0;      ///< m/s
  double acceleration = 0.0;  ///< m/s^2 (realized)
  double spacing = 0.0;       ///< m to predecessor's rear reference point
};

enum class Topology { kOpen, kRing };

/// Contiguous window of vehicle indices; the first member acts as the
/// head vehicle of the predictive-control formulation (ring scenarios).
struct IndexWindow {
  int first = 0;
  int last = 0;

  int head() const { return first; }
  int follower_count() const { return last - first; }
  bool contains(int i) const { return first <= i && i <= last; }
};

struct FleetConfig {
  int follower_count = 0;             ///< n, vehicles behind the head vehicle
  std::vector<int> cav_set;           ///< S, 1-based, strictly increasing
  Topology topology = Topology::kOpen;
  std::optional<IndexWindow> controlled_subset;  ///< required for ring
  double vehicle_length = 0.20;       ///< m, subtracted in spacing bookkeeping

  int cav_count() const { return static_cast<int>(cav_set.size()); }

  bool is_cav(int vehicle) const {
    return std::find(cav_set.begin(), cav_set.end(), vehicle) != cav_set.end();
  }

  void validate() const {
    if (follower_count < 1) throw std::invalid_argument("fleet: follower_count must be >= 1");
    if (vehicle_length < 0.0) throw std::invalid_argument("fleet: vehicle_length must be >= 0");
    int prev = 0;
    for (int i : cav_set) {
      if (i <= prev) throw std::invalid_argument("fleet: cav_set must be strictly increasing");
      if (i < 1 || i > follower_count)
        throw std::invalid_argument("fleet: cav index out of range [1, n]");
      prev = i;
    }
    if (topology == Topology::kRing) {
      if (!controlled_subset)
        throw std::invalid_argument("fleet: ring topology requires controlled_subset");
      const IndexWindow& w = *controlled_subset;
      if (w.first < 1 || w.last > follower_count || w.first >= w.last)
        throw std::invalid_argument("fleet: controlled_subset window invalid");
      for (int i : cav_set) {
        if (i <= w.first || i > w.last)
          throw std::invalid_argument("fleet: ring CAVs must lie strictly inside the subset, behind its head");
      }
    }
  }
};

/// The fleet as the predictive controller sees it: a head vehicle providing
/// the external input plus an ordered list of followers, with CAV positions
/// re-indexed locally (1-based).
struct FormationView {
  int head_vehicle = 0;            ///< global index (0 = fleet head)
  std::vector<int> followers;      ///< global indices, front to back
  std::vector<int> cav_local;      ///< 1-based positions of CAVs in `followers`

  int follower_count() const { return static_cast<int>(followers.size()); }
  int cav_count() const { return static_cast<int>(cav_local.size()); }
};

inline FormationView formation_view(const FleetConfig& fleet) {
  fleet.validate();
  FormationView view;
  if (fleet.topology == Topology::kOpen) {
    view.head_vehicle = 0;
    for (int i = 1; i <= fleet.follower_count; ++i) view.followers.push_back(i);
    for (int i : fleet.cav_set) view.cav_local.push_back(i);
  } else {
    const IndexWindow& w = *fleet.controlled_subset;
    view.head_vehicle = w.head();
    for (int i = w.first + 1; i <= w.last; ++i) view.followers.push_back(i);
    for (int i : fleet.cav_set) view.cav_local.push_back(i - w.first);
  }
  return view;
}

struct OvmParams {
  double alpha = 1.2;   ///< 1/s
  double beta = 1.8;    ///< 1/s
  double s_st = 0.5;    ///< m
  double s_go = 1.1;    ///< m
  double v_max = 0.6;   ///< m/s

  void validate() const {
    if (alpha <= 0.0 || beta <= 0.0) throw std::invalid_argument("ovm: alpha, beta must be > 0");
    if (!(0.0 < s_st && s_st < s_go)) throw std::invalid_argument("ovm: need 0 < s_st < s_go");
    if (v_max <= 0.0) throw std::invalid_argument("ovm: v_max must be > 0");
  }
};

struct EquilibriumState {
  double v_star = 0.0;  ///< m/s
  double s_star = 0.0;  ///< m
};

/// Converts a raw output [v_1..v_n, s_{i1}..s_{im}] to the error output of
/// the predictive formulation: velocities minus v*, CAV spacings minus s*.
inline VectorXd raw_to_error_output(const VectorXd& y_raw, const EquilibriumState& eq,
                                    int n, int m) {
  if (y_raw.size() != n + m)
    throw std::invalid_argument("raw_to_error_output: y_raw has wrong length");
  VectorXd y(n + m);
  y.head(n) = y_raw.head(n).array() - eq.v_star;
  y.tail(m) = y_raw.tail(m).array() - eq.s_star;
  return y;
}

inline VectorXd error_to_raw_output(const VectorXd& y, const EquilibriumState& eq,
                                    int n, int m) {
  if (y.size() != n + m)
    throw std::invalid_argument("error_to_raw_output: y has wrong length");
  VectorXd y_raw(n + m);
  y_raw.head(n) = y.head(n).array() + eq.v_star;
  y_raw.tail(m) = y.tail(m).array() + eq.s_star;
  return y_raw;
}

/// Control input, external input, and outputs of the controlled subset at
/// one sample, as seen by the cloud controller.
struct SystemSignals {
  VectorXd u;            ///< m CAV commanded accelerations
  double epsilon = 0.0;  ///< head-vehicle velocity error v_0 - v*
  VectorXd y_raw;        ///< n+m raw output
};

enum class SolveOutcome { kConverged, kMaxIterations, kInfeasible, kFallback, kSkipped };

/// Per-control-step record for the diagnostics sidecar.
struct ControlDiagnostics {
  double time = 0.0;
  double v_star = 0.0;
  double s_star = 0.0;
  double objective = 0.0;
  double sigma_norm = 0.0;
  int iterations = 0;
  SolveOutcome outcome = SolveOutcome::kSkipped;
  double solve_seconds = 0.0;
  bool fallback = false;
};

inline const char* to_string(SolveOutcome s) {
  switch (s) {
    case SolveOutcome::kConverged: return "converged";
    case SolveOutcome::kMaxIterations: return "max-iter";
    case SolveOutcome::kInfeasible: return "infeasible";
    case SolveOutcome::kFallback: return "fallback";
    case SolveOutcome::kSkipped: return "skipped";
  }
  return "unknown";
}

struct SimulationLog {
  double dt = kDefaultDt;
  Topology topology = Topology::kOpen;
  int vehicle_count = 0;                           ///< head + followers (open) or ring size
  std::vector<std::vector<VehicleState>> steps;    ///< steps[k][vehicle]
  std::vector<SystemSignals> signals;              ///< per step, controlled subset (empty if no CAV)
  std::vector<ControlDiagnostics> control_log;     ///< one entry per QP solve
  std::vector<double> command_velocities;          ///< flattened [k * vehicle_count + i]
  bool failed = false;
  double failure_time = 0.0;
  std::string failure_reason;

  int step_count() const { return static_cast<int>(steps.size()); }
  double duration() const { return steps.empty() ? 0.0 : dt * (step_count() - 1); }

  double command_velocity(int step, int vehicle) const {
    return command_velocities[static_cast<size_t>(step) * vehicle_count + vehicle];
  }
};

/// Splitmix-style stream derivation so each scenario owns an independent RNG
/// stream derived from (master seed, stream id).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace deeplcc
