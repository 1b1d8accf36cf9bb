#pragma once

#include "dropedge/common.hpp"
#include "dropedge/sparse.hpp"

#include <filesystem>
#include <iosfwd>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dropedge {

/// Propagation-matrix family applied to an adjacency before convolution.
enum class NormalizationScheme {
  FirstOrderGCN,  // I + D^-1/2 A D^-1/2
  AugNormAdj,     // (D+I)^-1/2 (A+I) (D+I)^-1/2
  BingGeNormAdj,  // I + (D+I)^-1/2 (A+I) (D+I)^-1/2
  AugRWalk,       // (D+I)^-1 (A+I)
};

std::string_view to_string(NormalizationScheme scheme);
NormalizationScheme parse_normalization(std::string_view name);

/// AugRWalk is the only scheme that produces an asymmetric matrix.
constexpr bool is_symmetric_scheme(NormalizationScheme scheme) {
  return scheme != NormalizationScheme::AugRWalk;
}

template <typename Scalar>
Vector<Scalar> degrees(const CsrMatrix<Scalar>& a) {
  if (!a.is_square()) throw DimensionError("degrees: adjacency must be square");
  Vector<Scalar> d(a.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    Scalar sum(0);
    for (Scalar v : a.row_values(i)) sum += v;
    d(i) = sum;
  }
  return d;
}

/// Builds the propagation matrix for `scheme`.
///
/// The input must be square, nonnegative and free of self-loops; self-loops
/// only ever enter here, through the A + I term. Isolated nodes keep a pure
/// self-loop row.
template <typename Scalar>
CsrMatrix<Scalar> normalize(const CsrMatrix<Scalar>& a, NormalizationScheme scheme) {
  using Triplet = typename CsrMatrix<Scalar>::Triplet;
  if (!a.is_square()) throw DimensionError("normalize: adjacency must be square");
  for (Index i = 0; i < a.rows(); ++i) {
    const auto cols = a.row_indices(i);
    const auto vals = a.row_values(i);
    for (std::size_t k = 0; k < cols.size(); ++k) {
      if (vals[k] < Scalar(0)) throw DomainError("normalize: negative edge weight");
      if (cols[k] == i) throw DomainError("normalize: adjacency must have a zero diagonal");
    }
  }

  const Index n = a.rows();
  const Vector<Scalar> d = degrees(a);
  const bool augmented = scheme != NormalizationScheme::FirstOrderGCN;
  const Vector<Scalar> dd = augmented ? Vector<Scalar>(d.array() + Scalar(1)) : d;

  Vector<Scalar> left(n), right(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar inv_sqrt = dd(i) > Scalar(0) ? Scalar(1) / std::sqrt(dd(i)) : Scalar(0);
    if (scheme == NormalizationScheme::AugRWalk) {
      left(i) = Scalar(1) / dd(i);
      right(i) = Scalar(1);
    } else {
      left(i) = inv_sqrt;
      right(i) = inv_sqrt;
    }
  }

  // Diagonal: self-loop contribution plus the explicit identity where the
  // scheme adds one.
  Scalar diag_identity(0);
  Scalar self_loop(0);
  switch (scheme) {
    case NormalizationScheme::FirstOrderGCN: diag_identity = Scalar(1); break;
    case NormalizationScheme::AugNormAdj:
    case NormalizationScheme::AugRWalk: self_loop = Scalar(1); break;
    case NormalizationScheme::BingGeNormAdj:
      diag_identity = Scalar(1);
      self_loop = Scalar(1);
      break;
  }

  std::vector<Triplet> triplets;
  triplets.reserve(static_cast<std::size_t>(a.nnz() + n));
  for (Index i = 0; i < n; ++i) {
    const auto cols = a.row_indices(i);
    const auto vals = a.row_values(i);
    for (std::size_t k = 0; k < cols.size(); ++k) {
      triplets.emplace_back(i, cols[k], left(i) * vals[k] * right(cols[k]));
    }
    triplets.emplace_back(i, i, diag_identity + left(i) * self_loop * right(i));
  }
  return CsrMatrix<Scalar>::from_triplets(n, n, triplets);
}

struct Components {
  std::vector<Index> labels;  // labels[i] in [0, count), numbered by first node
  Index count = 0;
};

/// Components of the undirected structure; entry (i, j) links i and j.
template <typename Scalar>
Components connected_components(const CsrMatrix<Scalar>& a) {
  if (!a.is_square()) throw DimensionError("connected_components: matrix must be square");
  Components out;
  out.labels.assign(static_cast<std::size_t>(a.rows()), -1);
  std::vector<Index> stack;
  for (Index root = 0; root < a.rows(); ++root) {
    if (out.labels[root] >= 0) continue;
    out.labels[root] = out.count;
    stack.push_back(root);
    while (!stack.empty()) {
      const Index u = stack.back();
      stack.pop_back();
      for (auto v : a.row_indices(u)) {
        if (out.labels[v] < 0) {
          out.labels[v] = out.count;
          stack.push_back(v);
        }
      }
    }
    ++out.count;
  }
  return out;
}

using Edge = std::pair<Index, Index>;

/// Undirected edges (i < j) of a symmetric adjacency, in row-major order.
std::vector<Edge> undirected_edges(const SparseMatrix& adjacency);

/// Binary symmetric adjacency; duplicates and reversed pairs collapse.
SparseMatrix adjacency_from_edges(Index n_nodes, std::span<const Edge> edges);

struct Splits {
  std::vector<Index> train;
  std::vector<Index> val;
  std::vector<Index> test;
};

/// Attributed node-classification graph.
struct Graph {
  Index n_nodes = 0;
  SparseMatrix adjacency;  // binary, symmetric, zero diagonal
  MatrixXd features;       // n_nodes x n_features
  std::vector<int> labels;
  Splits splits;

  Index n_features() const { return features.cols(); }
  int n_classes() const;
  Index n_edges() const { return adjacency.nnz() / 2; }

  /// Throws ConfigError when any structural invariant fails.
  void validate() const;
};

/// Up to `limit` nodes reached breadth-first from `root`, in visit order.
std::vector<Index> bfs_nodes(const SparseMatrix& adjacency, Index root, Index limit);

/// Subgraph on `nodes` (renumbered in the given order); splits keep the
/// surviving members.
Graph induced_subgraph(const Graph& graph, std::span<const Index> nodes);

struct GraphPaths {
  std::filesystem::path edges;
  std::filesystem::path features;
  std::filesystem::path labels;
  std::filesystem::path splits;

  /// graph.edges, features.csv, labels.csv and splits.json inside `dir`.
  static GraphPaths in_directory(const std::filesystem::path& dir);
};

/// Parses the four dataset files. Self-loops are dropped with a note
/// written to `warnings` (if non-null). Errors name the file and line.
Graph load_graph(const GraphPaths& paths, std::ostream* warnings = nullptr);

void save_graph(const Graph& graph, const GraphPaths& paths);

}  // namespace dropedge
