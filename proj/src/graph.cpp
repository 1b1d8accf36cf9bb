#include "dropedge/graph.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

namespace dropedge {

namespace {

[[noreturn]] void fail(const std::filesystem::path& file, std::size_t line, const std::string& what) {
  std::ostringstream msg;
  msg << file.string();
  if (line > 0) msg << ':' << line;
  msg << ": " << what;
  throw LoadError(msg.str());
}

std::ifstream open_input(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) fail(file, 0, "cannot open file");
  return in;
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  text = trim(text);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end && !text.empty();
}

template <typename T>
void write_number(std::ostream& out, T value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  out.write(buf, ptr - buf);
}

MatrixXd read_features(const std::filesystem::path& file) {
  auto in = open_input(file);
  std::vector<double> values;
  Index cols = -1;
  Index rows = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = trim(line);
    if (body.empty()) continue;
    Index count = 0;
    std::size_t start = 0;
    while (true) {
      const auto comma = body.find(',', start);
      const auto field = body.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
      double v = 0.0;
      if (!parse_number(field, v)) fail(file, line_no, "malformed real '" + std::string(field) + "'");
      values.push_back(v);
      ++count;
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (cols < 0) cols = count;
    if (count != cols) {
      fail(file, line_no, "expected " + std::to_string(cols) + " columns, found " + std::to_string(count));
    }
    ++rows;
  }
  if (rows == 0) fail(file, 0, "no feature rows");
  MatrixXd out(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) out(r, c) = values[static_cast<std::size_t>(r * cols + c)];
  }
  return out;
}

std::vector<int> read_labels(const std::filesystem::path& file, Index n_nodes) {
  auto in = open_input(file);
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = trim(line);
    if (body.empty()) continue;
    int v = 0;
    if (!parse_number(body, v) || v < 0) fail(file, line_no, "malformed label '" + std::string(body) + "'");
    labels.push_back(v);
  }
  if (static_cast<Index>(labels.size()) != n_nodes) {
    fail(file, line_no, "found " + std::to_string(labels.size()) + " labels but features declare N=" +
                            std::to_string(n_nodes));
  }
  return labels;
}

std::vector<Edge> read_edges(const std::filesystem::path& file, Index n_nodes, std::ostream* warnings) {
  auto in = open_input(file);
  std::vector<Edge> edges;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto split = body.find_first_of(" \t");
    if (split == std::string_view::npos) fail(file, line_no, "expected two node ids");
    const auto rest = trim(body.substr(split));
    if (rest.find_first_of(" \t") != std::string_view::npos) fail(file, line_no, "expected two node ids");
    long long u = 0, v = 0;
    if (!parse_number(body.substr(0, split), u) || !parse_number(rest, v)) {
      fail(file, line_no, "malformed node id");
    }
    if (u < 0 || v < 0 || u >= n_nodes || v >= n_nodes) {
      fail(file, line_no, "node id out of range [0, " + std::to_string(n_nodes) + ")");
    }
    if (u == v) {
      if (warnings) *warnings << "warning: " << file.string() << ':' << line_no << ": dropping self-loop on node " << u << '\n';
      continue;
    }
    edges.emplace_back(u, v);
  }
  return edges;
}

Splits read_splits(const std::filesystem::path& file, Index n_nodes) {
  auto in = open_input(file);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(file, 0, std::string("invalid JSON: ") + e.what());
  }
  auto read = [&](const char* key) {
    if (!doc.is_object() || !doc.contains(key) || !doc[key].is_array()) {
      fail(file, 0, std::string("missing array '") + key + "'");
    }
    std::vector<Index> ids;
    for (const auto& v : doc[key]) {
      if (!v.is_number_integer()) fail(file, 0, std::string("non-integer entry in '") + key + "'");
      const auto id = v.get<long long>();
      if (id < 0 || id >= n_nodes) fail(file, 0, std::string("node id out of range in '") + key + "'");
      ids.push_back(id);
    }
    return ids;
  };
  return Splits{read("train"), read("val"), read("test")};
}

}  // namespace

std::string_view to_string(NormalizationScheme scheme) {
  switch (scheme) {
    case NormalizationScheme::FirstOrderGCN: return "FirstOrderGCN";
    case NormalizationScheme::AugNormAdj: return "AugNormAdj";
    case NormalizationScheme::BingGeNormAdj: return "BingGeNormAdj";
    case NormalizationScheme::AugRWalk: return "AugRWalk";
  }
  return "unknown";
}

NormalizationScheme parse_normalization(std::string_view name) {
  for (auto s : {NormalizationScheme::FirstOrderGCN, NormalizationScheme::AugNormAdj,
                 NormalizationScheme::BingGeNormAdj, NormalizationScheme::AugRWalk}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown normalization '" + std::string(name) + "'");
}

std::vector<Edge> undirected_edges(const SparseMatrix& adjacency) {
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(adjacency.nnz() / 2));
  for (Index i = 0; i < adjacency.rows(); ++i) {
    for (auto j : adjacency.row_indices(i)) {
      if (j > i) edges.emplace_back(i, j);
    }
  }
  return edges;
}

SparseMatrix adjacency_from_edges(Index n_nodes, std::span<const Edge> edges) {
  std::vector<SparseMatrix::Triplet> triplets;
  triplets.reserve(edges.size() * 2);
  for (const auto& [u, v] : edges) {
    if (u == v) continue;
    triplets.emplace_back(u, v, 1.0);
    triplets.emplace_back(v, u, 1.0);
  }
  auto summed = SparseMatrix::from_triplets(n_nodes, n_nodes, triplets);
  // Collapse multiplicities back to binary weights.
  auto storage = summed.eigen();
  for (Index k = 0; k < storage.nonZeros(); ++k) storage.valuePtr()[k] = 1.0;
  return SparseMatrix(std::move(storage));
}

int Graph::n_classes() const {
  return labels.empty() ? 0 : *std::ranges::max_element(labels) + 1;
}

void Graph::validate() const {
  if (adjacency.rows() != n_nodes || adjacency.cols() != n_nodes) throw ConfigError("graph: adjacency is not N x N");
  if (features.rows() != n_nodes) throw ConfigError("graph: feature rows differ from N");
  if (static_cast<Index>(labels.size()) != n_nodes) throw ConfigError("graph: label count differs from N");
  for (Index i = 0; i < n_nodes; ++i) {
    if (adjacency.coeff(i, i) != 0.0) throw ConfigError("graph: adjacency has a self-loop");
  }
  if (!adjacency.is_symmetric()) throw ConfigError("graph: adjacency is not symmetric");
  std::set<Index> seen;
  for (const auto* part : {&splits.train, &splits.val, &splits.test}) {
    for (auto id : *part) {
      if (id < 0 || id >= n_nodes) throw ConfigError("graph: split index out of range");
      if (!seen.insert(id).second) throw ConfigError("graph: splits overlap at node " + std::to_string(id));
    }
  }
}

GraphPaths GraphPaths::in_directory(const std::filesystem::path& dir) {
  return {dir / "graph.edges", dir / "features.csv", dir / "labels.csv", dir / "splits.json"};
}

Graph load_graph(const GraphPaths& paths, std::ostream* warnings) {
  Graph g;
  g.features = read_features(paths.features);
  g.n_nodes = g.features.rows();
  g.labels = read_labels(paths.labels, g.n_nodes);
  const auto edges = read_edges(paths.edges, g.n_nodes, warnings);
  g.adjacency = adjacency_from_edges(g.n_nodes, edges);
  g.splits = read_splits(paths.splits, g.n_nodes);
  try {
    g.validate();
  } catch (const ConfigError& e) {
    throw LoadError(paths.splits.string() + ": " + e.what());
  }
  return g;
}

void save_graph(const Graph& graph, const GraphPaths& paths) {
  auto open = [](const std::filesystem::path& p) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw LoadError(p.string() + ": cannot open for writing");
    return out;
  };
  {
    auto out = open(paths.edges);
    for (const auto& [u, v] : undirected_edges(graph.adjacency)) out << u << ' ' << v << '\n';
  }
  {
    auto out = open(paths.features);
    for (Index r = 0; r < graph.features.rows(); ++r) {
      for (Index c = 0; c < graph.features.cols(); ++c) {
        if (c) out << ',';
        write_number(out, graph.features(r, c));
      }
      out << '\n';
    }
  }
  {
    auto out = open(paths.labels);
    for (int l : graph.labels) out << l << '\n';
  }
  {
    nlohmann::json doc;
    doc["train"] = graph.splits.train;
    doc["val"] = graph.splits.val;
    doc["test"] = graph.splits.test;
    auto out = open(paths.splits);
    out << doc.dump() << '\n';
  }
}

std::vector<Index> bfs_nodes(const SparseMatrix& adjacency, Index root, Index limit) {
  if (root < 0 || root >= adjacency.rows()) throw DimensionError("bfs_nodes: root out of range");
  std::vector<Index> order{root};
  std::vector<char> seen(static_cast<std::size_t>(adjacency.rows()), 0);
  seen[root] = 1;
  for (std::size_t head = 0; head < order.size() && static_cast<Index>(order.size()) < limit; ++head) {
    for (auto v : adjacency.row_indices(order[head])) {
      if (seen[v]) continue;
      seen[v] = 1;
      order.push_back(v);
      if (static_cast<Index>(order.size()) == limit) break;
    }
  }
  return order;
}

Graph induced_subgraph(const Graph& graph, std::span<const Index> nodes) {
  std::vector<Index> local(static_cast<std::size_t>(graph.n_nodes), -1);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i] < 0 || nodes[i] >= graph.n_nodes) throw DimensionError("induced_subgraph: node out of range");
    local[nodes[i]] = static_cast<Index>(i);
  }
  Graph sub;
  sub.n_nodes = static_cast<Index>(nodes.size());
  std::vector<Edge> edges;
  for (const auto& [u, v] : undirected_edges(graph.adjacency)) {
    if (local[u] >= 0 && local[v] >= 0) edges.emplace_back(local[u], local[v]);
  }
  sub.adjacency = adjacency_from_edges(sub.n_nodes, edges);
  sub.features.resize(sub.n_nodes, graph.features.cols());
  sub.labels.resize(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    sub.features.row(static_cast<Index>(i)) = graph.features.row(nodes[i]);
    sub.labels[i] = graph.labels[nodes[i]];
  }
  auto keep = [&](const std::vector<Index>& part) {
    std::vector<Index> out;
    for (auto id : part) {
      if (local[id] >= 0) out.push_back(local[id]);
    }
    std::ranges::sort(out);
    return out;
  };
  sub.splits = {keep(graph.splits.train), keep(graph.splits.val), keep(graph.splits.test)};
  return sub;
}

}  // namespace dropedge
