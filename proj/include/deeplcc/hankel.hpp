#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <stdexcept>
#include <string>

#include "deeplcc/core.hpp"

namespace deeplcc {

/// Time-indexed sequences of control input, external input, and raw output
/// recorded during offline data collection. One column per sample.
struct TrajectoryDataset {
  double dt = kDefaultDt;
  int n = 0;        ///< followers in the formulation
  int m = 0;        ///< CAVs
  MatrixXd u;       ///< m x T
  VectorXd eps;     ///< T
  MatrixXd y_raw;   ///< (n+m) x T

  int length() const { return static_cast<int>(eps.size()); }

  void validate() const {
    if (n < 1 || m < 0) throw std::invalid_argument("dataset: bad dimensions");
    const int T = length();
    if (u.rows() != m || u.cols() != T || y_raw.rows() != n + m || y_raw.cols() != T)
      throw std::invalid_argument("dataset: inconsistent signal shapes");
  }
};

/// Block Hankel matrix of depth `order` built from a q x T signal: block row
/// r holds samples r .. r+T-order of the signal.
inline MatrixXd build_hankel(const MatrixXd& signal, int order) {
  const int q = static_cast<int>(signal.rows());
  const int T = static_cast<int>(signal.cols());
  if (order < 1 || order > T)
    throw std::invalid_argument("build_hankel: need 1 <= order <= T");
  const int cols = T - order + 1;
  MatrixXd H(q * order, cols);
  for (int r = 0; r < order; ++r) H.middleRows(r * q, q) = signal.middleCols(r, cols);
  return H;
}

struct PeCheck {
  bool satisfied = false;
  Eigen::Index rank = 0;
  Eigen::Index required_rank = 0;
  std::string reason;
};

/// Numerical rank with singular values below max_dim * sigma_max * 1e-10
/// treated as zero.
inline Eigen::Index numerical_rank(const MatrixXd& M) {
  Eigen::BDCSVD<MatrixXd> svd(M);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0) return 0;
  const double tol = static_cast<double>(std::max(M.rows(), M.cols())) * sv(0) * 1e-10;
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++r;
  return r;
}

/// Persistent excitation of the given order: the depth-`order` Hankel matrix
/// of the signal must have full row rank.
inline PeCheck check_persistent_excitation(const MatrixXd& signal, int order) {
  PeCheck out;
  const int q = static_cast<int>(signal.rows());
  const int T = static_cast<int>(signal.cols());
  out.required_rank = static_cast<Eigen::Index>(q) * order;
  if (order < 1 || order > T) {
    out.reason = "order outside [1, T]";
    return out;
  }
  if (T - order + 1 < q * order) {
    out.reason = "too few columns: T - order + 1 < q * order";
    return out;
  }
  out.rank = numerical_rank(build_hankel(signal, order));
  out.satisfied = (out.rank == out.required_rank);
  if (!out.satisfied) out.reason = "Hankel matrix row-rank deficient";
  return out;
}

/// Persistent excitation of the interleaved input col(u(t), eps(t)) at order
/// T_ini + N + 2n, the requirement behind the behavior representation.
inline PeCheck check_assumption_1(const TrajectoryDataset& data, int t_ini, int horizon) {
  data.validate();
  MatrixXd combined(data.m + 1, data.length());
  combined.topRows(data.m) = data.u;
  combined.bottomRows(1) = data.eps.transpose();
  return check_persistent_excitation(combined, t_ini + horizon + 2 * data.n);
}

struct HankelDims {
  int n = 0, m = 0, T = 0, T_ini = 0, N = 0;

  int depth() const { return T_ini + N; }
  int cols() const { return T - T_ini - N + 1; }
};

/// Past/future partition of the data Hankel matrices. Vertical concatenations
/// [U_p; U_f] etc. equal the depth-(T_ini+N) Hankel matrices of the signals.
struct HankelBlocks {
  HankelDims dims;
  MatrixXd U_p, U_f;  ///< m*T_ini x L and m*N x L
  MatrixXd E_p, E_f;  ///< T_ini x L and N x L
  MatrixXd Y_p, Y_f;  ///< (n+m)*T_ini x L and (n+m)*N x L
};

/// Builds the partitioned blocks from a dataset, converting raw outputs to
/// error outputs with the collection-time equilibrium.
inline HankelBlocks partition(const TrajectoryDataset& data, const EquilibriumState& eq,
                              int t_ini, int horizon) {
  data.validate();
  if (t_ini < 1 || horizon < 1)
    throw std::invalid_argument("partition: need T_ini >= 1 and N >= 1");
  if (data.length() < t_ini + horizon)
    throw std::invalid_argument("partition: dataset shorter than T_ini + N");

  MatrixXd y = data.y_raw;
  y.topRows(data.n).array() -= eq.v_star;
  y.bottomRows(data.m).array() -= eq.s_star;

  HankelBlocks blocks;
  blocks.dims = HankelDims{data.n, data.m, data.length(), t_ini, horizon};
  const int depth = t_ini + horizon;
  MatrixXd Hu = build_hankel(data.u, depth);
  MatrixXd He = build_hankel(data.eps.transpose(), depth);
  MatrixXd Hy = build_hankel(y, depth);
  blocks.U_p = Hu.topRows(data.m * t_ini);
  blocks.U_f = Hu.bottomRows(data.m * horizon);
  blocks.E_p = He.topRows(t_ini);
  blocks.E_f = He.bottomRows(horizon);
  blocks.Y_p = Hy.topRows((data.n + data.m) * t_ini);
  blocks.Y_f = Hy.bottomRows((data.n + data.m) * horizon);
  return blocks;
}

}  // namespace deeplcc
