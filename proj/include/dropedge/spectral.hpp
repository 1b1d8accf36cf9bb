#pragma once

#include "dropedge/common.hpp"
#include "dropedge/graph.hpp"
#include "dropedge/sparse.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace dropedge {

class Model;

/// Eigenstructure of a symmetric propagation matrix.
template <typename Scalar>
struct SpectralReport {
  Vector<Scalar> eigenvalues;  // ascending
  Index top_multiplicity = 0;  // M: size of the top eigenvalue cluster
  Scalar second_largest = 0;   // largest |eigenvalue| outside the cluster; 0 if none
  Matrix<Scalar> basis;        // N x M orthonormal basis of the cluster's eigenspace
  Index component_count = 0;
};

/// Dense symmetric eigendecomposition of `a_hat`. Eigenvalues within `tol`
/// of the largest form the top cluster. Asymmetric input is a DomainError.
template <typename Scalar>
SpectralReport<Scalar> analyze(const CsrMatrix<Scalar>& a_hat, Scalar tol = Scalar(1e-8)) {
  if (!a_hat.is_square()) throw DimensionError("analyze: matrix must be square");
  if (!a_hat.is_symmetric(Scalar(1e-12))) throw DomainError("analyze: matrix is not symmetric");
  const Index n = a_hat.rows();
  SpectralReport<Scalar> report;
  report.component_count = connected_components(a_hat).count;
  if (n == 0) return report;

  Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> solver(a_hat.to_dense());
  if (solver.info() != Eigen::Success) throw DomainError("analyze: eigensolver did not converge");
  report.eigenvalues = solver.eigenvalues();
  const Scalar top = report.eigenvalues(n - 1);
  Index m = 0;
  while (m < n && std::abs(report.eigenvalues(n - 1 - m) - top) <= tol) ++m;
  report.top_multiplicity = m;
  report.basis = solver.eigenvectors().rightCols(m);
  if (m < n) report.second_largest = report.eigenvalues.head(n - m).cwiseAbs().maxCoeff();
  return report;
}

/// Frobenius distance from `h` to span(basis): ||(I - E E^T) h||_F.
template <typename DerivedH, typename DerivedE>
typename DerivedH::Scalar subspace_distance(const Eigen::MatrixBase<DerivedH>& h,
                                            const Eigen::MatrixBase<DerivedE>& basis) {
  if (h.rows() != basis.rows()) throw DimensionError("subspace_distance: row counts differ");
  using Scalar = typename DerivedH::Scalar;
  if (basis.cols() == 0) return h.norm();
  const Matrix<Scalar> coords = basis.transpose() * h;
  return (h - basis * coords).norm();
}

/// Sentinel for "no finite smoothing layer is guaranteed".
inline constexpr std::int64_t kUnboundedDepth = std::numeric_limits<std::int64_t>::max();

/// Relaxed epsilon-smoothing layer ceil(log(eps / d0) / log(s lambda)).
///
/// 0 when d0 <= eps; 1 when s lambda = 0 (one layer collapses onto the
/// subspace); kUnboundedDepth when s lambda >= 1.
inline std::int64_t relaxed_smoothing_layer(double epsilon, double d0, double s, double lambda) {
  if (!(epsilon > 0.0)) throw DomainError("relaxed_smoothing_layer: epsilon must be positive");
  if (!(d0 > 0.0)) throw DomainError("relaxed_smoothing_layer: d0 must be positive");
  if (s < 0.0 || lambda < 0.0) throw DomainError("relaxed_smoothing_layer: s and lambda must be nonnegative");
  if (epsilon >= d0) return 0;
  const double rate = s * lambda;
  if (rate >= 1.0) return kUnboundedDepth;
  if (rate == 0.0) return 1;
  return static_cast<std::int64_t>(std::ceil(std::log(epsilon / d0) / std::log(rate)));
}

/// First layer (1-based) whose hidden state lies within `epsilon` of
/// span(basis), or nullopt.
template <typename DerivedE>
std::optional<std::int64_t> empirical_smoothing_layer(std::span<const MatrixXd> hidden_states,
                                                      const Eigen::MatrixBase<DerivedE>& basis, double epsilon) {
  for (std::size_t l = 0; l < hidden_states.size(); ++l) {
    if (subspace_distance(hidden_states[l], basis) < epsilon) return static_cast<std::int64_t>(l + 1);
  }
  return std::nullopt;
}

template <typename Derived>
typename Derived::Scalar largest_singular_value(const Eigen::MatrixBase<Derived>& w) {
  if (w.size() == 0) return 0;
  Eigen::BDCSVD<Matrix<typename Derived::Scalar>> svd(w);
  return svd.singularValues()(0);
}

/// s: the largest singular value over every GCL filter matrix.
double sup_singular_value(const Model& model);
double sup_singular_value(std::span<const MatrixXd> weights);

/// All-pairs effective resistance with unit resistors; infinity across
/// components and 0 on the diagonal. L+ is taken per component.
MatrixXd resistance_matrix(const SparseMatrix& adjacency);

double effective_resistance(const SparseMatrix& adjacency, Index s, Index t);

struct ResistanceBoundReport {
  double lambda = 0.0;
  double worst_margin = std::numeric_limits<double>::infinity();  // min of lambda - rhs
  Index worst_s = -1;
  Index worst_t = -1;
  Index pairs_checked = 0;
  bool holds = true;
};

/// Checks lambda >= 1 - (1/R_st)(1/d_s + 1/d_t) for every within-component
/// pair, with lambda from the AugNormAdj spectrum.
ResistanceBoundReport verify_resistance_bound(const SparseMatrix& adjacency, double tol = 1e-10);

/// State after one step of an edge-removal trajectory.
struct TrajectoryStep {
  Index edges_removed = 0;
  Edge removed{-1, -1};
  double lambda = 0.0;
  Index subspace_dim = 0;
  Index component_count = 0;
  std::int64_t l_hat = 0;
  bool disconnection = false;
  bool disjunction = true;  // l_hat >= initial or dim(M) > initial
};

struct TrajectoryReport {
  std::vector<TrajectoryStep> steps;  // steps[0] is the intact graph
  double epsilon = 1e-3;
  double d0 = 1.0;
  double s = 1.0;
  bool increments_ok = true;       // dim(M) grew by exactly 1 at each disconnection
  bool disjunction_ok = true;      // held at every disconnection and at the end
  bool dim_matches_components = true;
  bool resistance_monotone = true;
  Index lambda_decreases = 0;      // reported, not asserted
};

struct TrajectoryOptions {
  double epsilon = 1e-3;
  double d0 = 1.0;
  double s = 1.0;
  bool track_resistance = true;
};

/// Removes uniformly random undirected edges one at a time until none are
/// left, recording the AugNormAdj spectrum after every removal.
TrajectoryReport theorem1_trajectory(const SparseMatrix& adjacency, std::uint64_t removal_seed,
                                     const TrajectoryOptions& options = {});

}  // namespace dropedge
