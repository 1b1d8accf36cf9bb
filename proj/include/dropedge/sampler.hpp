#pragma once

#include "dropedge/common.hpp"
#include "dropedge/graph.hpp"
#include "dropedge/sparse.hpp"

#include <cstdint>
#include <vector>

namespace dropedge {

struct DropEdgeConfig {
  double p = 0.0;  // fraction of undirected edges removed per draw
  bool layer_wise = false;
  NormalizationScheme scheme = NormalizationScheme::AugNormAdj;
  std::uint64_t seed = 42;

  /// The CLI's "sampling percent" is the preserved fraction, 1 - p.
  static DropEdgeConfig from_sampling_percent(double percent);
  double sampling_percent() const { return 1.0 - p; }

  void validate() const;
};

/// Number of undirected edges a draw removes: floor(V p).
Index dropped_edge_count(Index n_edges, double p);

/// Removes floor(V p) undirected edges of `adjacency`, chosen uniformly
/// without replacement. Both stored directions of a chosen edge go together.
SparseMatrix sample(const SparseMatrix& adjacency, double p, Rng& rng);

/// `n_layers` independent draws of sample().
std::vector<SparseMatrix> sample_layerwise(const SparseMatrix& adjacency, double p, Index n_layers, Rng& rng);

using PropagationSet = std::vector<SharedSparse>;

/// Per-layer propagation matrices: drop first, then normalize.
///
/// With training off or p = 0 every layer shares normalize(A, scheme).
/// One-shot mode shares a single draw across layers; layer-wise mode draws
/// once per layer.
PropagationSet propagation_matrix(const SparseMatrix& adjacency, const DropEdgeConfig& cfg, Index n_layers,
                                  Rng& rng, bool training);

/// Caches the undirected edge list and the evaluation matrix of one graph
/// so the per-epoch resampling only pays for the draw itself.
class EdgeSampler {
 public:
  EdgeSampler(SparseMatrix adjacency, DropEdgeConfig cfg);

  const SparseMatrix& adjacency() const { return adjacency_; }
  const DropEdgeConfig& config() const { return cfg_; }
  Index n_edges() const { return static_cast<Index>(edges_.size()); }

  SparseMatrix draw(double p, Rng& rng) const;
  PropagationSet propagation(Index n_layers, Rng& rng, bool training) const;

  /// normalize(A, scheme), computed once.
  const SharedSparse& full() const { return full_; }

 private:
  SparseMatrix adjacency_;
  DropEdgeConfig cfg_;
  std::vector<Edge> edges_;
  SharedSparse full_;
};

}  // namespace dropedge
