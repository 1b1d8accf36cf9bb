#include "dropedge/cli.hpp"

#include "dropedge/harness.hpp"
#include "dropedge/spectral.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iostream>
#include <optional>

namespace dropedge {

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Raw flag values; only the ones given on the command line override the
// --config file.
struct TrainFlags {
  std::string config_file;
  std::string backbone;
  int n_layers = 0;
  int hidden = 0;
  double lr = 0;
  double weight_decay = 0;
  double sampling_percent = 0;
  double dropout = 0;
  std::string normalization;
  bool withloop = false;
  bool withbn = false;
  bool no_bias = false;
  bool input_dropout = false;
  bool layerwise = false;
  int epochs = 0;
  std::uint64_t seed = 0;
  std::string data_dir;
  std::string out_dir;
  Index synthetic = 0;
  std::vector<CLI::Option*> options;
};

void add_train_flags(CLI::App* sub, TrainFlags& f) {
  auto keep = [&](CLI::Option* o) { f.options.push_back(o); };
  keep(sub->add_option("--config", f.config_file, "JSON TrainConfig; explicit flags override it"));
  keep(sub->add_option("--backbone", f.backbone, "gcn | resgcn | jknet | incepgcn"));
  keep(sub->add_option("--nlayers", f.n_layers, "Number of GCLs"));
  keep(sub->add_option("--hidden", f.hidden, "Hidden width (default 128)"));
  keep(sub->add_option("--lr", f.lr, "Adam learning rate"));
  keep(sub->add_option("--weight-decay", f.weight_decay, "L2 weight on filter matrices"));
  keep(sub->add_option("--sampling-percent", f.sampling_percent, "Fraction of edges kept per draw (p = 1 - value)"));
  keep(sub->add_option("--dropout", f.dropout, "Feature dropout rate"));
  keep(sub->add_option("--normalization", f.normalization, "FirstOrderGCN | AugNormAdj | BingGeNormAdj | AugRWalk"));
  keep(sub->add_flag("--withloop", f.withloop, "Add a self feature weight to every GCL"));
  keep(sub->add_flag("--withbn", f.withbn, "Batch norm in hidden GCLs"));
  keep(sub->add_flag("--input-dropout", f.input_dropout, "Apply dropout to the raw input features too"));
  keep(sub->add_flag("--no-bias", f.no_bias, "Drop GCL biases"));
  keep(sub->add_flag("--layerwise-dropedge", f.layerwise, "Independent DropEdge draw per GCL"));
  keep(sub->add_option("--epochs", f.epochs, "Training epochs (default 400)"));
  keep(sub->add_option("--seed", f.seed, "Seed for initialization, dropout and DropEdge"));
  keep(sub->add_option("--data-dir", f.data_dir, "Directory with graph.edges, features.csv, labels.csv, splits.json"));
  keep(sub->add_option("--out-dir", f.out_dir, "Output directory"));
  keep(sub->add_option("--synthetic", f.synthetic, "Use a seeded block-model graph with this many nodes"));
}

bool given(const CLI::App* sub, const char* name) { return sub->count(name) > 0; }

TrainConfig resolve_config(const CLI::App* sub, const TrainFlags& f) {
  TrainConfig cfg;
  if (given(sub, "--config")) {
    std::ifstream in(f.config_file);
    if (!in) throw LoadError(f.config_file + ": cannot open");
    cfg = nlohmann::json::parse(in).get<TrainConfig>();
  }
  auto& m = cfg.model;
  if (given(sub, "--backbone")) m.backbone = parse_backbone(f.backbone);
  if (given(sub, "--nlayers")) m.n_layers = f.n_layers;
  if (given(sub, "--hidden")) m.hidden_dim = f.hidden;
  if (given(sub, "--lr")) cfg.lr = f.lr;
  if (given(sub, "--weight-decay")) cfg.weight_decay = f.weight_decay;
  if (given(sub, "--sampling-percent")) {
    if (!(f.sampling_percent >= 0.0 && f.sampling_percent <= 1.0)) {
      throw UsageError("--sampling-percent must lie in [0, 1]");
    }
    m.dropedge.p = 1.0 - f.sampling_percent;
  }
  if (given(sub, "--dropout")) m.dropout = f.dropout;
  if (given(sub, "--normalization")) m.scheme = parse_normalization(f.normalization);
  if (given(sub, "--withloop")) m.withloop = true;
  if (given(sub, "--withbn")) m.withbn = true;
  if (given(sub, "--no-bias")) m.bias = false;
  if (given(sub, "--input-dropout")) m.input_dropout = true;
  if (given(sub, "--layerwise-dropedge")) m.dropedge.layer_wise = true;
  if (given(sub, "--epochs")) cfg.epochs = f.epochs;
  if (given(sub, "--seed")) {
    cfg.seed = f.seed;
    m.dropedge.seed = f.seed;
  }
  if (given(sub, "--data-dir")) cfg.data_dir = f.data_dir;
  if (given(sub, "--out-dir")) cfg.out_dir = f.out_dir;
  m.dropedge.scheme = m.scheme;
  cfg.validate();
  return cfg;
}

Graph resolve_graph(const std::filesystem::path& data_dir, Index synthetic, std::uint64_t seed, std::ostream& err) {
  if (synthetic > 0) {
    if (!data_dir.empty()) throw UsageError("--synthetic and --data-dir are exclusive");
    SbmOptions o;
    o.n_nodes = synthetic;
    o.seed = seed;
    return make_sbm_graph(o);
  }
  if (data_dir.empty()) throw UsageError("a dataset is required: pass --data-dir or --synthetic");
  return load_graph(GraphPaths::in_directory(data_dir), &err);
}

std::filesystem::path out_dir_or_default(const TrainConfig& cfg) {
  return cfg.out_dir.empty() ? std::filesystem::path("out") : cfg.out_dir;
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError(path.string() + ": cannot open for writing");
  out << j.dump(2) << '\n';
}

nlohmann::json depth(std::int64_t d) {
  if (d == kUnboundedDepth) return "inf";
  return d;
}

nlohmann::json trajectory_json(const TrajectoryReport& r, bool with_steps) {
  nlohmann::json j{{"epsilon", r.epsilon},
                   {"d0", r.d0},
                   {"s", r.s},
                   {"increments_ok", r.increments_ok},
                   {"disjunction_ok", r.disjunction_ok},
                   {"dim_matches_components", r.dim_matches_components},
                   {"resistance_monotone", r.resistance_monotone},
                   {"lambda_decreases", r.lambda_decreases},
                   {"n_steps", r.steps.size()}};
  if (with_steps) {
    auto& steps = j["steps"] = nlohmann::json::array();
    for (const auto& s : r.steps) {
      steps.push_back({{"edges_removed", s.edges_removed},
                       {"removed", {s.removed.first, s.removed.second}},
                       {"lambda", s.lambda},
                       {"subspace_dim", s.subspace_dim},
                       {"component_count", s.component_count},
                       {"l_hat", depth(s.l_hat)},
                       {"disconnection", s.disconnection},
                       {"disjunction", s.disjunction}});
    }
  }
  return j;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  retain_freed_memory();
  CLI::App app{"Deep graph convolutional networks with DropEdge, plus over-smoothing analysis", "dropedge"};
  app.require_subcommand(1);

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train one model; writes metrics.csv and summary.json");
  add_train_flags(train_cmd, train_flags);
  std::string checkpoint;
  train_cmd->add_option("--checkpoint", checkpoint, "Also save the best-validation model here");

  TrainFlags probe_flags;
  auto* probe_cmd = app.add_subcommand("probe-oversmoothing", "Consecutive-layer distances before and after training");
  add_train_flags(probe_cmd, probe_flags);
  ProbeOptions probe_options;
  probe_cmd->add_option("--first-layer", probe_options.first_layer, "First layer l of ||H^l - H^(l-1)||");
  probe_cmd->add_option("--last-layer", probe_options.last_layer, "Last layer l");
  probe_cmd->add_option("--probe-epochs", probe_options.train_epochs, "Epochs before the second probe (default 150)");
  probe_cmd->add_option("--epsilon", probe_options.epsilon, "Smoothing threshold");
  bool no_spectral = false;
  probe_cmd->add_flag("--no-spectral", no_spectral, "Skip the eigendecomposition");

  auto* spectral_cmd = app.add_subcommand("analyze-spectral", "Eigenstructure of the normalized adjacency");
  std::string spectral_data, spectral_out, spectral_norm = "AugNormAdj";
  Index spectral_synthetic = 0, subgraph = 0, max_nodes = 5000;
  double tol = 1e-8, spectral_eps = 1e-3, spectral_s = 1.0;
  std::uint64_t spectral_seed = 42;
  bool with_basis = false;
  spectral_cmd->add_option("--data-dir", spectral_data, "Dataset directory");
  spectral_cmd->add_option("--synthetic", spectral_synthetic, "Block-model graph with this many nodes");
  spectral_cmd->add_option("--seed", spectral_seed, "Seed for --synthetic");
  spectral_cmd->add_option("--out-dir", spectral_out, "Also write spectral.json here");
  spectral_cmd->add_option("--normalization", spectral_norm, "A symmetric scheme");
  spectral_cmd->add_option("--tol", tol, "Top-cluster tolerance");
  spectral_cmd->add_option("--epsilon", spectral_eps, "Smoothing threshold for l_hat");
  spectral_cmd->add_option("--s", spectral_s, "Filter singular-value bound for l_hat");
  spectral_cmd->add_option("--subgraph", subgraph, "Analyze the breadth-first subgraph of this size from node 0");
  spectral_cmd->add_option("--max-nodes", max_nodes, "Refuse larger graphs (dense solver)");
  spectral_cmd->add_flag("--with-basis", with_basis, "Include the top eigenspace basis");

  auto* theorem_cmd = app.add_subcommand("theorem-check", "Edge-removal trajectories of the smoothing quantities");
  std::string theorem_data, theorem_out;
  int n_graphs = 50;
  Index theorem_nodes = 15, theorem_subgraph = 30;
  double edge_prob = 0.3, theorem_eps = 1e-3;
  std::uint64_t theorem_seed = 42;
  bool with_steps = false;
  theorem_cmd->add_option("--data-dir", theorem_data, "Run one trajectory on a breadth-first subgraph of this dataset");
  theorem_cmd->add_option("--subgraph", theorem_subgraph, "Subgraph size for --data-dir");
  theorem_cmd->add_option("--graphs", n_graphs, "Random connected graphs to test");
  theorem_cmd->add_option("--max-nodes", theorem_nodes, "Largest random graph");
  theorem_cmd->add_option("--edge-prob", edge_prob, "Extra-edge probability on top of a spanning tree");
  theorem_cmd->add_option("--epsilon", theorem_eps, "Smoothing threshold");
  theorem_cmd->add_option("--seed", theorem_seed, "Seed for graphs and removal orders");
  theorem_cmd->add_option("--out-dir", theorem_out, "Also write theorem.json here");
  theorem_cmd->add_flag("--steps", with_steps, "Include every trajectory step");

  TrainFlags ablate_flags;
  auto* ablate_cmd = app.add_subcommand("ablate", "Dropout vs DropEdge, or one-shot vs layer-wise DropEdge");
  add_train_flags(ablate_cmd, ablate_flags);
  std::string kind = "dropout";
  ablate_cmd->add_option("--kind", kind, "dropout | layerwise")->check(CLI::IsMember({"dropout", "layerwise"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\nRun with --help for usage.\n";
    return 2;
  }

  try {
    if (*train_cmd) {
      const TrainConfig cfg = resolve_config(train_cmd, train_flags);
      const Graph graph = resolve_graph(cfg.data_dir, train_flags.synthetic, cfg.seed, err);
      Model best;
      const RunReport report = train(cfg, graph, nullptr, checkpoint.empty() ? nullptr : &best);
      write_run(report, out_dir_or_default(cfg));
      if (!checkpoint.empty()) save_checkpoint(best, checkpoint);
      out << summary_json(report).dump(2) << '\n';
      return 0;
    }
    if (*probe_cmd) {
      const TrainConfig cfg = resolve_config(probe_cmd, probe_flags);
      const Graph graph = resolve_graph(cfg.data_dir, probe_flags.synthetic, cfg.seed, err);
      probe_options.spectral = !no_spectral;
      const auto j = probe_json(oversmoothing_probe(cfg, graph, probe_options));
      write_json(j, out_dir_or_default(cfg) / "probe.json");
      out << j.dump(2) << '\n';
      return 0;
    }
    if (*spectral_cmd) {
      const auto scheme = parse_normalization(spectral_norm);
      if (!is_symmetric_scheme(scheme)) {
        throw UsageError("analyze-spectral needs a symmetric normalization; " + spectral_norm + " is not");
      }
      Graph graph = resolve_graph(spectral_data, spectral_synthetic, spectral_seed, err);
      if (subgraph > 0) {
        const auto nodes = bfs_nodes(graph.adjacency, 0, subgraph);
        graph = induced_subgraph(graph, nodes);
      }
      if (graph.n_nodes > max_nodes) {
        throw UsageError("graph has " + std::to_string(graph.n_nodes) + " nodes, above --max-nodes " +
                         std::to_string(max_nodes) + "; use --subgraph");
      }
      const auto report = analyze(normalize(graph.adjacency, scheme), tol);
      const MatrixXd x = row_normalize(graph.features);
      const double d0 = subspace_distance(x, report.basis);
      nlohmann::json j{{"n_nodes", graph.n_nodes},
                       {"n_edges", graph.n_edges()},
                       {"normalization", to_string(scheme)},
                       {"tol", tol},
                       {"eigenvalues", std::vector<double>(report.eigenvalues.begin(), report.eigenvalues.end())},
                       {"top_multiplicity", report.top_multiplicity},
                       {"second_largest", report.second_largest},
                       {"component_count", report.component_count},
                       {"epsilon", spectral_eps},
                       {"s", spectral_s},
                       {"d0", d0},
                       {"l_hat", d0 > 0.0 ? depth(relaxed_smoothing_layer(spectral_eps, d0, spectral_s,
                                                                           report.second_largest))
                                          : nlohmann::json(0)}};
      if (with_basis) {
        auto& rows = j["basis"] = nlohmann::json::array();
        for (Index i = 0; i < report.basis.rows(); ++i) {
          rows.push_back(std::vector<double>(report.basis.row(i).begin(), report.basis.row(i).end()));
        }
      }
      if (!spectral_out.empty()) write_json(j, std::filesystem::path(spectral_out) / "spectral.json");
      out << j.dump(2) << '\n';
      return 0;
    }
    if (*theorem_cmd) {
      TrajectoryOptions options;
      options.epsilon = theorem_eps;
      nlohmann::json runs = nlohmann::json::array();
      bool all_ok = true;
      auto run_one = [&](const SparseMatrix& adjacency, std::uint64_t seed) {
        const auto r = theorem1_trajectory(adjacency, seed, options);
        const bool ok = r.increments_ok && r.disjunction_ok && r.dim_matches_components && r.resistance_monotone;
        all_ok = all_ok && ok;
        auto j = trajectory_json(r, with_steps);
        j["n_nodes"] = adjacency.rows();
        j["n_edges"] = adjacency.nnz() / 2;
        j["removal_seed"] = seed;
        j["ok"] = ok;
        runs.push_back(std::move(j));
      };
      if (!theorem_data.empty()) {
        const Graph graph = load_graph(GraphPaths::in_directory(theorem_data), &err);
        const auto nodes = bfs_nodes(graph.adjacency, 0, theorem_subgraph);
        run_one(induced_subgraph(graph, nodes).adjacency, theorem_seed);
      } else {
        if (n_graphs < 1 || theorem_nodes < 2) throw UsageError("need --graphs >= 1 and --max-nodes >= 2");
        Rng rng(theorem_seed);
        for (int g = 0; g < n_graphs; ++g) {
          const auto n = static_cast<Index>(2 + rng.below(static_cast<std::uint64_t>(theorem_nodes - 1)));
          const auto adjacency = random_connected_graph(n, edge_prob, rng);
          run_one(adjacency, rng.next());
        }
      }
      const nlohmann::json j{{"all_ok", all_ok}, {"trajectories", runs}};
      if (!theorem_out.empty()) write_json(j, std::filesystem::path(theorem_out) / "theorem.json");
      out << j.dump(2) << '\n';
      if (!all_ok) {
        err << "theorem-check: a trajectory violated an asserted property\n";
        return 1;
      }
      return 0;
    }
    if (*ablate_cmd) {
      const TrainConfig cfg = resolve_config(ablate_cmd, ablate_flags);
      const Graph graph = resolve_graph(cfg.data_dir, ablate_flags.synthetic, cfg.seed, err);
      const auto runs = kind == "dropout" ? ablation_dropout_vs_dropedge(cfg, graph) : ablation_layerwise(cfg, graph);
      const auto dir = out_dir_or_default(cfg);
      nlohmann::json j{{"kind", kind}, {"runs", nlohmann::json::object()}};
      for (const auto& run : runs) {
        write_run(run.report, dir / run.name);
        const auto& last = run.report.rows.back();
        j["runs"][run.name] = {{"final_train_loss", last.train_loss},
                               {"final_val_loss", last.val_loss},
                               {"best_epoch", run.report.best_epoch},
                               {"test_acc", run.report.test_acc}};
      }
      write_json(j, dir / "ablation.json");
      out << j.dump(2) << '\n';
      return 0;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dropedge
