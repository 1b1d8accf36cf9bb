#include "dropedge/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dropedge {

namespace {

void check_rate(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("DropEdge: rate p must lie in [0, 1]");
}

SparseMatrix drop_from(const SparseMatrix& adjacency, const std::vector<Edge>& edges, double p, Rng& rng) {
  check_rate(p);
  const Index n_edges = static_cast<Index>(edges.size());
  const Index k = dropped_edge_count(n_edges, p);
  if (k == 0) return adjacency;

  // Partial Fisher-Yates: the first k slots are a uniform k-subset.
  std::vector<Index> order(static_cast<std::size_t>(n_edges));
  std::iota(order.begin(), order.end(), Index{0});
  for (Index i = 0; i < k; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n_edges - i)));
    std::swap(order[i], order[j]);
  }
  std::vector<char> dropped(static_cast<std::size_t>(n_edges), 0);
  for (Index i = 0; i < k; ++i) dropped[order[i]] = 1;

  std::vector<SparseMatrix::Triplet> triplets;
  triplets.reserve(static_cast<std::size_t>(2 * (n_edges - k)));
  for (Index e = 0; e < n_edges; ++e) {
    if (dropped[e]) continue;
    const auto [u, v] = edges[e];
    const double w = adjacency.coeff(u, v);
    triplets.emplace_back(u, v, w);
    triplets.emplace_back(v, u, w);
  }
  return SparseMatrix::from_triplets(adjacency.rows(), adjacency.cols(), triplets);
}

}  // namespace

DropEdgeConfig DropEdgeConfig::from_sampling_percent(double percent) {
  if (!(percent >= 0.0 && percent <= 1.0)) throw DomainError("sampling percent must lie in [0, 1]");
  DropEdgeConfig cfg;
  cfg.p = 1.0 - percent;
  return cfg;
}

void DropEdgeConfig::validate() const { check_rate(p); }

Index dropped_edge_count(Index n_edges, double p) {
  check_rate(p);
  // The slack absorbs representation error such as 3 * (1/3) or 1 - 0.7.
  const auto k = static_cast<Index>(std::floor(static_cast<double>(n_edges) * p + 1e-9));
  return std::min(k, n_edges);
}

SparseMatrix sample(const SparseMatrix& adjacency, double p, Rng& rng) {
  return drop_from(adjacency, undirected_edges(adjacency), p, rng);
}

std::vector<SparseMatrix> sample_layerwise(const SparseMatrix& adjacency, double p, Index n_layers, Rng& rng) {
  if (n_layers < 1) throw ConfigError("sample_layerwise: n_layers must be at least 1");
  check_rate(p);
  const auto edges = undirected_edges(adjacency);
  std::vector<SparseMatrix> out;
  out.reserve(static_cast<std::size_t>(n_layers));
  for (Index l = 0; l < n_layers; ++l) out.push_back(drop_from(adjacency, edges, p, rng));
  return out;
}

PropagationSet propagation_matrix(const SparseMatrix& adjacency, const DropEdgeConfig& cfg, Index n_layers,
                                  Rng& rng, bool training) {
  return EdgeSampler(adjacency, cfg).propagation(n_layers, rng, training);
}

EdgeSampler::EdgeSampler(SparseMatrix adjacency, DropEdgeConfig cfg)
    : adjacency_(std::move(adjacency)),
      cfg_(cfg),
      edges_(undirected_edges(adjacency_)),
      full_(std::make_shared<const SparseMatrix>(normalize(adjacency_, cfg_.scheme))) {
  cfg_.validate();
}

SparseMatrix EdgeSampler::draw(double p, Rng& rng) const { return drop_from(adjacency_, edges_, p, rng); }

PropagationSet EdgeSampler::propagation(Index n_layers, Rng& rng, bool training) const {
  if (n_layers < 1) throw ConfigError("propagation_matrix: n_layers must be at least 1");
  const auto count = static_cast<std::size_t>(n_layers);
  if (!training || cfg_.p == 0.0) return PropagationSet(count, full_);
  if (!cfg_.layer_wise) {
    auto shared = std::make_shared<const SparseMatrix>(normalize(draw(cfg_.p, rng), cfg_.scheme));
    return PropagationSet(count, shared);
  }
  PropagationSet out;
  out.reserve(count);
  for (std::size_t l = 0; l < count; ++l) {
    out.push_back(std::make_shared<const SparseMatrix>(normalize(draw(cfg_.p, rng), cfg_.scheme)));
  }
  return out;
}

}  // namespace dropedge
