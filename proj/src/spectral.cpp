#include "dropedge/spectral.hpp"

#include "dropedge/model.hpp"

#include <algorithm>
#include <numeric>

namespace dropedge {

double sup_singular_value(std::span<const MatrixXd> weights) {
  double s = 0.0;
  for (const auto& w : weights) s = std::max(s, largest_singular_value(w));
  return s;
}

double sup_singular_value(const Model& model) {
  double s = 0.0;
  for (const auto* w : model.weight_matrices()) s = std::max(s, largest_singular_value(*w));
  return s;
}

namespace {

std::vector<std::vector<Index>> members_by_component(const Components& comps) {
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(comps.count));
  for (std::size_t i = 0; i < comps.labels.size(); ++i) members[comps.labels[i]].push_back(static_cast<Index>(i));
  return members;
}

// Moore-Penrose inverse of the Laplacian of the subgraph induced by `nodes`
// (assumed connected, so exactly one zero eigenvalue).
MatrixXd component_laplacian_pinv(const SparseMatrix& adjacency, const std::vector<Index>& nodes) {
  const Index k = static_cast<Index>(nodes.size());
  std::vector<Index> local(static_cast<std::size_t>(adjacency.rows()), -1);
  for (Index i = 0; i < k; ++i) local[nodes[i]] = i;
  MatrixXd lap = MatrixXd::Zero(k, k);
  for (Index i = 0; i < k; ++i) {
    const auto cols = adjacency.row_indices(nodes[i]);
    const auto vals = adjacency.row_values(nodes[i]);
    for (std::size_t e = 0; e < cols.size(); ++e) {
      const Index j = local[cols[e]];
      lap(i, j) -= vals[e];
      lap(i, i) += vals[e];
    }
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(lap);
  const VectorXd& mu = solver.eigenvalues();
  const MatrixXd& v = solver.eigenvectors();
  MatrixXd pinv = MatrixXd::Zero(k, k);
  // Index 0 is the constant vector's zero eigenvalue.
  for (Index i = 1; i < k; ++i) pinv.noalias() += v.col(i) * v.col(i).transpose() / mu(i);
  return pinv;
}

}  // namespace

MatrixXd resistance_matrix(const SparseMatrix& adjacency) {
  if (!adjacency.is_square()) throw DimensionError("resistance_matrix: adjacency must be square");
  const Index n = adjacency.rows();
  MatrixXd r = MatrixXd::Constant(n, n, std::numeric_limits<double>::infinity());
  const auto comps = connected_components(adjacency);
  for (const auto& nodes : members_by_component(comps)) {
    const MatrixXd pinv = component_laplacian_pinv(adjacency, nodes);
    const Index k = static_cast<Index>(nodes.size());
    for (Index i = 0; i < k; ++i) {
      for (Index j = 0; j < k; ++j) r(nodes[i], nodes[j]) = pinv(i, i) + pinv(j, j) - 2.0 * pinv(i, j);
      r(nodes[i], nodes[i]) = 0.0;
    }
  }
  return r;
}

double effective_resistance(const SparseMatrix& adjacency, Index s, Index t) {
  if (!adjacency.is_square()) throw DimensionError("effective_resistance: adjacency must be square");
  if (s < 0 || t < 0 || s >= adjacency.rows() || t >= adjacency.rows()) {
    throw DimensionError("effective_resistance: node index out of range");
  }
  if (s == t) return 0.0;
  const auto comps = connected_components(adjacency);
  if (comps.labels[s] != comps.labels[t]) return std::numeric_limits<double>::infinity();
  const auto members = members_by_component(comps);
  const auto& nodes = members[comps.labels[s]];
  const MatrixXd pinv = component_laplacian_pinv(adjacency, nodes);
  const auto pos = [&](Index v) { return std::ranges::find(nodes, v) - nodes.begin(); };
  const auto i = pos(s), j = pos(t);
  return pinv(i, i) + pinv(j, j) - 2.0 * pinv(i, j);
}

ResistanceBoundReport verify_resistance_bound(const SparseMatrix& adjacency, double tol) {
  ResistanceBoundReport report;
  const auto spectrum = analyze(normalize(adjacency, NormalizationScheme::AugNormAdj));
  report.lambda = spectrum.second_largest;
  const VectorXd d = degrees(adjacency);
  const MatrixXd r = resistance_matrix(adjacency);
  for (Index s = 0; s < adjacency.rows(); ++s) {
    for (Index t = s + 1; t < adjacency.rows(); ++t) {
      if (!std::isfinite(r(s, t))) continue;
      const double rhs = 1.0 - (1.0 / r(s, t)) * (1.0 / d(s) + 1.0 / d(t));
      const double margin = report.lambda - rhs;
      ++report.pairs_checked;
      if (margin < report.worst_margin) {
        report.worst_margin = margin;
        report.worst_s = s;
        report.worst_t = t;
      }
    }
  }
  report.holds = report.worst_margin >= -tol;
  return report;
}

TrajectoryReport theorem1_trajectory(const SparseMatrix& adjacency, std::uint64_t removal_seed,
                                     const TrajectoryOptions& options) {
  TrajectoryReport report;
  report.epsilon = options.epsilon;
  report.d0 = options.d0;
  report.s = options.s;

  auto edges = undirected_edges(adjacency);
  Rng rng(removal_seed);
  for (std::size_t i = edges.size(); i > 1; --i) {
    std::swap(edges[i - 1], edges[rng.below(i)]);
  }

  MatrixXd previous_resistance;
  auto measure = [&](Index removed_count, Edge removed) {
    std::span<const Edge> kept(edges.data() + removed_count, edges.size() - static_cast<std::size_t>(removed_count));
    const auto current = adjacency_from_edges(adjacency.rows(), kept);
    const auto spectrum = analyze(normalize(current, NormalizationScheme::AugNormAdj));
    TrajectoryStep step;
    step.edges_removed = removed_count;
    step.removed = removed;
    step.lambda = spectrum.second_largest;
    step.subspace_dim = spectrum.top_multiplicity;
    step.component_count = spectrum.component_count;
    step.l_hat = relaxed_smoothing_layer(options.epsilon, options.d0, options.s, step.lambda);
    if (step.subspace_dim != step.component_count) report.dim_matches_components = false;

    if (options.track_resistance) {
      const MatrixXd r = resistance_matrix(current);
      if (previous_resistance.size()) {
        for (Index i = 0; i < r.size(); ++i) {
          const double before = previous_resistance.data()[i];
          const double after = r.data()[i];
          if (std::isfinite(before) && after < before - 1e-9 * std::max(1.0, before)) report.resistance_monotone = false;
        }
      }
      previous_resistance = r;
    }
    return step;
  };

  report.steps.push_back(measure(0, {-1, -1}));
  const auto& initial = report.steps.front();
  const std::int64_t initial_l_hat = initial.l_hat;
  const Index initial_dim = initial.subspace_dim;

  for (std::size_t k = 0; k < edges.size(); ++k) {
    TrajectoryStep step = measure(static_cast<Index>(k + 1), edges[k]);
    const auto& prev = report.steps.back();
    step.disconnection = step.component_count > prev.component_count;
    step.disjunction = step.l_hat >= initial_l_hat || step.subspace_dim > initial_dim;
    if (step.lambda < prev.lambda - 1e-12) ++report.lambda_decreases;
    if (step.disconnection) {
      if (step.subspace_dim != prev.subspace_dim + 1) report.increments_ok = false;
      if (!step.disjunction) report.disjunction_ok = false;
    }
    report.steps.push_back(step);
  }
  if (!report.steps.back().disjunction && report.steps.size() > 1) report.disjunction_ok = false;
  return report;
}

}  // namespace dropedge
