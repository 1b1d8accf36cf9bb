#include "dropedge/graph.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace dropedge;
using Scheme = NormalizationScheme;

namespace {

SparseMatrix graph_of(Index n, std::vector<Edge> edges) { return adjacency_from_edges(n, edges); }

void check_close(const MatrixXd& got, const MatrixXd& want, double tol = 1e-12) {
  REQUIRE(got.rows() == want.rows());
  REQUIRE(got.cols() == want.cols());
  CHECK((got - want).cwiseAbs().maxCoeff() <= tol);
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dropedge_graph_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST_CASE("csr storage is canonical") {
  using T = SparseMatrix::Triplet;
  std::vector<T> ts{{1, 2, 3.0}, {0, 1, 1.0}, {1, 0, 2.0}, {0, 1, 4.0}, {2, 2, 0.0}};
  const auto m = SparseMatrix::from_triplets(3, 3, ts);
  CHECK(m.nnz() == 3);
  CHECK(m.coeff(0, 1) == 5.0);
  CHECK(m.coeff(2, 2) == 0.0);
  const auto offsets = m.row_offsets();
  REQUIRE(offsets.size() == 4);
  for (std::size_t r = 0; r + 1 < offsets.size(); ++r) {
    CHECK(offsets[r] <= offsets[r + 1]);
    for (auto k = offsets[r] + 1; k < offsets[r + 1]; ++k) CHECK(m.col_indices()[k - 1] < m.col_indices()[k]);
  }
  for (double v : m.values()) CHECK(v != 0.0);
  CHECK_THROWS_AS(SparseMatrix::from_triplets(2, 2, std::vector<T>{{2, 0, 1.0}}), DimensionError);
}

TEST_CASE("csr dense round trip and product") {
  MatrixXd d(2, 3);
  d << 1, 0, 2, 0, 0, -1;
  const auto m = SparseMatrix::from_dense(d);
  CHECK(m.nnz() == 3);
  check_close(m.to_dense(), d, 0.0);
  check_close(m.transpose().to_dense(), d.transpose(), 0.0);
  MatrixXd x = MatrixXd::Random(3, 4);
  check_close(m * x, d * x);
}

TEST_CASE("degrees") {
  CHECK(degrees(graph_of(2, {{0, 1}})) == VectorXd::Ones(2));
  CHECK(degrees(graph_of(3, {})) == VectorXd::Zero(3));
  CHECK(degrees(graph_of(3, {{0, 1}, {1, 2}, {0, 2}})) == VectorXd::Constant(3, 2.0));
  CHECK_THROWS_AS(degrees(SparseMatrix(2, 3)), DimensionError);
}

TEST_CASE("normalizations on the fixtures match closed forms") {
  const auto single = graph_of(1, {});
  const auto pair = graph_of(2, {{0, 1}});
  const auto tri = graph_of(3, {{0, 1}, {1, 2}, {0, 2}});

  SUBCASE("single node") {
    check_close(normalize(single, Scheme::FirstOrderGCN).to_dense(), MatrixXd::Ones(1, 1));
    check_close(normalize(single, Scheme::AugNormAdj).to_dense(), MatrixXd::Ones(1, 1));
    check_close(normalize(single, Scheme::BingGeNormAdj).to_dense(), MatrixXd::Constant(1, 1, 2.0));
    check_close(normalize(single, Scheme::AugRWalk).to_dense(), MatrixXd::Ones(1, 1));
  }
  SUBCASE("single edge") {
    MatrixXd bing(2, 2);
    bing << 1.5, 0.5, 0.5, 1.5;
    check_close(normalize(pair, Scheme::FirstOrderGCN).to_dense(), MatrixXd::Ones(2, 2));
    check_close(normalize(pair, Scheme::AugNormAdj).to_dense(), MatrixXd::Constant(2, 2, 0.5));
    check_close(normalize(pair, Scheme::BingGeNormAdj).to_dense(), bing);
    check_close(normalize(pair, Scheme::AugRWalk).to_dense(), MatrixXd::Constant(2, 2, 0.5));
  }
  SUBCASE("triangle") {
    MatrixXd first = MatrixXd::Constant(3, 3, 0.5);
    first.diagonal().setOnes();
    MatrixXd bing = MatrixXd::Constant(3, 3, 1.0 / 3.0);
    bing.diagonal().setConstant(4.0 / 3.0);
    check_close(normalize(tri, Scheme::FirstOrderGCN).to_dense(), first);
    check_close(normalize(tri, Scheme::AugNormAdj).to_dense(), MatrixXd::Constant(3, 3, 1.0 / 3.0));
    check_close(normalize(tri, Scheme::BingGeNormAdj).to_dense(), bing);
    check_close(normalize(tri, Scheme::AugRWalk).to_dense(), MatrixXd::Constant(3, 3, 1.0 / 3.0));
  }
}

TEST_CASE("normalize matches a dense oracle on random graphs") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.below(12));
    const auto a = oracle::random_graph(n, 0.3, rng);
    for (auto scheme : {Scheme::FirstOrderGCN, Scheme::AugNormAdj, Scheme::BingGeNormAdj, Scheme::AugRWalk}) {
      check_close(normalize(a, scheme).to_dense(), oracle::normalize_dense(a.to_dense(), scheme));
    }
  }
}

TEST_CASE("normalize rejects invalid adjacency") {
  using T = SparseMatrix::Triplet;
  const auto negative = SparseMatrix::from_triplets(2, 2, std::vector<T>{{0, 1, -1.0}, {1, 0, -1.0}});
  CHECK_THROWS_AS(normalize(negative, Scheme::AugNormAdj), DomainError);
  CHECK_THROWS_AS(normalize(SparseMatrix(2, 3), Scheme::AugNormAdj), DimensionError);
}

TEST_CASE("isolated nodes normalize to a pure self loop") {
  const auto a = graph_of(3, {{0, 1}});
  const auto m = normalize(a, Scheme::AugNormAdj);
  CHECK(m.coeff(2, 2) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(m.row_indices(2).size() == 1);
}

TEST_CASE("AugNormAdj spectrum lies in [-1, 1] with top eigenvalue 1") {
  Rng rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(50));
    const auto a = oracle::random_graph(n, 0.1, rng);
    const auto m = normalize(a, Scheme::AugNormAdj);
    CHECK(m.is_symmetric(1e-14));
    const VectorXd ev = oracle::jacobi_eigenvalues(m.to_dense());
    CHECK(ev.minCoeff() >= -1.0 - 1e-10);
    CHECK(ev.maxCoeff() == doctest::Approx(1.0).epsilon(1e-10));
    const Index ones = (ev.array() > 1.0 - 1e-8).count();
    CHECK(ones == oracle::component_count(a));
  }
}

TEST_CASE("AugRWalk rows sum to one") {
  Rng rng(6);
  const auto a = oracle::random_graph(30, 0.15, rng);
  const VectorXd sums = normalize(a, Scheme::AugRWalk).to_dense().rowwise().sum();
  CHECK((sums.array() - 1.0).abs().maxCoeff() < 1e-14);
}

TEST_CASE("connected components") {
  CHECK(connected_components(graph_of(3, {{0, 1}, {1, 2}, {0, 2}})).count == 1);
  CHECK(connected_components(graph_of(2, {})).count == 2);
  const auto c = connected_components(graph_of(4, {{0, 1}, {2, 3}}));
  CHECK(c.count == 2);
  CHECK(c.labels[0] == c.labels[1]);
  CHECK(c.labels[2] == c.labels[3]);
  CHECK(c.labels[0] != c.labels[2]);

  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(20));
    const auto a = oracle::random_graph(n, 0.08, rng);
    const auto got = connected_components(a);
    CHECK(got.count == oracle::component_count(a));
    const auto roots = oracle::union_find_roots(a);
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) CHECK((got.labels[i] == got.labels[j]) == (roots[i] == roots[j]));
    }
  }
}

TEST_CASE("component count never drops along nested removals") {
  Rng rng(8);
  auto a = oracle::random_graph(15, 0.3, rng);
  auto edges = undirected_edges(a);
  Index prev = connected_components(a).count;
  while (!edges.empty()) {
    edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(rng.below(edges.size())));
    const Index now = connected_components(adjacency_from_edges(15, edges)).count;
    CHECK(now >= prev);
    prev = now;
  }
  CHECK(prev == 15);
}

TEST_CASE("edge file parsing") {
  const auto dir = scratch_dir("parse");
  const auto paths = GraphPaths::in_directory(dir);
  write_file(paths.features, "1,0\n0,1\n1,1\n0,0\n0.5,2\n1,1\n");
  write_file(paths.labels, "0\n1\n0\n1\n0\n1\n");
  write_file(paths.splits, R"({"train":[0,1],"val":[2],"test":[3,4]})");

  SUBCASE("reversed duplicates collapse") {
    write_file(paths.edges, "# comment\n0 1\n1 0\n");
    const auto g = load_graph(paths);
    CHECK(g.n_edges() == 1);
    CHECK(g.adjacency.nnz() == 2);
    CHECK(g.n_nodes == 6);
    CHECK(g.n_features() == 2);
    CHECK(g.n_classes() == 2);
  }
  SUBCASE("self loops are dropped with a warning") {
    write_file(paths.edges, "5 5\n0 1\n");
    std::ostringstream warnings;
    const auto g = load_graph(paths, &warnings);
    CHECK(g.adjacency.coeff(5, 5) == 0.0);
    CHECK(g.n_edges() == 1);
    CHECK(warnings.str().find("self-loop") != std::string::npos);
  }
  SUBCASE("errors name the file and line") {
    write_file(paths.edges, "0 1\n0 9\n");
    try {
      load_graph(paths);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("graph.edges:2") != std::string::npos);
    }
    write_file(paths.edges, "0 x\n");
    CHECK_THROWS_AS(load_graph(paths), LoadError);
  }
  SUBCASE("inconsistent node counts") {
    write_file(paths.edges, "0 1\n");
    write_file(paths.labels, "0\n1\n");
    CHECK_THROWS_AS(load_graph(paths), LoadError);
  }
  SUBCASE("overlapping splits") {
    write_file(paths.edges, "0 1\n");
    write_file(paths.splits, R"({"train":[0,1],"val":[1],"test":[]})");
    CHECK_THROWS_AS(load_graph(paths), LoadError);
  }
}

TEST_CASE("load save load round trips exactly") {
  Rng rng(9);
  Graph g;
  g.n_nodes = 25;
  g.adjacency = oracle::random_graph(25, 0.2, rng);
  g.features = MatrixXd::Random(25, 7);
  g.features(3, 2) = 0.1;
  g.features(4, 4) = 1.0 / 3.0;
  g.labels.resize(25);
  for (Index i = 0; i < 25; ++i) g.labels[i] = static_cast<int>(i % 4);
  g.splits = {{0, 1, 2, 3, 4}, {5, 6, 7}, {10, 11, 20}};

  const auto p1 = GraphPaths::in_directory(scratch_dir("rt1"));
  const auto p2 = GraphPaths::in_directory(scratch_dir("rt2"));
  save_graph(g, p1);
  const auto once = load_graph(p1);
  save_graph(once, p2);
  const auto twice = load_graph(p2);
  for (const auto* h : {&once, &twice}) {
    CHECK(h->adjacency == g.adjacency);
    CHECK(h->features == g.features);
    CHECK(h->labels == g.labels);
    CHECK(h->splits.train == g.splits.train);
    CHECK(h->splits.val == g.splits.val);
    CHECK(h->splits.test == g.splits.test);
  }
}

TEST_CASE("breadth-first subgraph") {
  const auto a = graph_of(6, {{0, 1}, {1, 2}, {2, 3}, {0, 4}});
  const auto nodes = bfs_nodes(a, 0, 4);
  CHECK(nodes == std::vector<Index>{0, 1, 4, 2});
  Graph g;
  g.n_nodes = 6;
  g.adjacency = a;
  g.features = MatrixXd::Identity(6, 6);
  g.labels = {0, 1, 0, 1, 0, 1};
  g.splits = {{0, 3}, {1}, {5}};
  const auto sub = induced_subgraph(g, nodes);
  CHECK(sub.n_nodes == 4);
  CHECK(sub.n_edges() == 3);
  CHECK(sub.labels == std::vector<int>{0, 1, 0, 0});
  CHECK(sub.splits.train == std::vector<Index>{0});
  CHECK(sub.splits.val == std::vector<Index>{1});
  CHECK(sub.splits.test.empty());
  sub.validate();
}

TEST_CASE("normalization names") {
  for (auto s : {Scheme::FirstOrderGCN, Scheme::AugNormAdj, Scheme::BingGeNormAdj, Scheme::AugRWalk}) {
    CHECK(parse_normalization(to_string(s)) == s);
  }
  CHECK_THROWS_AS(parse_normalization("Laplacian"), ConfigError);
  CHECK_FALSE(is_symmetric_scheme(Scheme::AugRWalk));
}
