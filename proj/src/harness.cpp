#include "dropedge/harness.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <limits>
#include <numeric>
#include <ostream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dropedge {

void TrainConfig::validate() const {
  model.validate();
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a nonnegative finite number");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight decay must be nonnegative");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = nlohmann::json{
      {"model", cfg.model},
      {"lr", cfg.lr},
      {"weight_decay", cfg.weight_decay},
      {"epochs", cfg.epochs},
      {"seed", cfg.seed},
      {"normalize_features", cfg.normalize_features},
      {"data_dir", cfg.data_dir.string()},
      {"out_dir", cfg.out_dir.string()},
  };
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  cfg = TrainConfig{};
  if (j.contains("model")) cfg.model = j.at("model").get<ModelConfig>();
  cfg.lr = j.value("lr", cfg.lr);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.normalize_features = j.value("normalize_features", cfg.normalize_features);
  cfg.data_dir = j.value("data_dir", std::string{});
  cfg.out_dir = j.value("out_dir", std::string{});
}

MatrixXd row_normalize(const MatrixXd& features) {
  MatrixXd out = features;
  for (Index i = 0; i < out.rows(); ++i) {
    const double total = out.row(i).sum();
    if (total != 0.0) out.row(i) /= total;
  }
  return out;
}

namespace {

// Stream layout shared by train() and init_model().
struct RunStreams {
  Rng init;
  Rng dropout;

  explicit RunStreams(std::uint64_t seed) : init(0), dropout(0) {
    Rng master(seed);
    init = master.split();
    dropout = master.split();
  }
};

SparseMatrix input_features(const TrainConfig& cfg, const Graph& graph) {
  return SparseMatrix::from_dense(cfg.normalize_features ? row_normalize(graph.features) : graph.features);
}

DropEdgeConfig sampler_config(const ModelConfig& model) {
  DropEdgeConfig de = model.dropedge;
  de.scheme = model.scheme;
  return de;
}

}  // namespace

Model init_model(const TrainConfig& cfg, const Graph& graph) {
  RunStreams streams(cfg.seed);
  return build_model(cfg.model, graph.n_features(), graph.n_classes(), streams.init);
}

std::pair<double, double> masked_loss_accuracy(const MatrixXd& logits, std::span<const int> labels,
                                               std::span<const Index> mask) {
  if (mask.empty()) return {0.0, 0.0};
  double loss = 0.0;
  Index correct = 0;
  for (const Index i : mask) {
    Index best = 0;
    const double top = logits.row(i).maxCoeff(&best);
    const double lse = top + std::log((logits.row(i).array() - top).exp().sum());
    loss += lse - logits(i, labels[i]);
    if (best == labels[i]) ++correct;
  }
  const auto n = static_cast<double>(mask.size());
  return {loss / n, static_cast<double>(correct) / n};
}

RunReport train(const TrainConfig& cfg, const Graph& graph, Model* final_model, Model* best_model) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  RunReport report;
  report.config = cfg;

  const SparseMatrix x = input_features(cfg, graph);
  RunStreams streams(cfg.seed);
  Model model = build_model(cfg.model, graph.n_features(), graph.n_classes(), streams.init);
  const EdgeSampler sampler(graph.adjacency, sampler_config(cfg.model));
  Rng dropedge_rng(sampler.config().seed);
  AdamState adam(AdamOptions{.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  const auto params = model.parameters();
  const Index n_gcl = model.gcl_count();
  const auto& labels = graph.labels;

  report.rows.reserve(static_cast<std::size_t>(cfg.epochs));
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochMetrics row;
    row.epoch = epoch;

    model.zero_grad();
    {
      Tape tape;
      const auto propagation = sampler.propagation(n_gcl, dropedge_rng, true);
      const auto out = forward(model, propagation, x, tape, streams.dropout, true);
      const Tensor loss = softmax_cross_entropy(out.logits, labels, graph.splits.train);
      row.train_loss = loss.value()(0, 0);
      if (!std::isfinite(row.train_loss)) {
        throw TrainingDiverged("epoch " + std::to_string(epoch) + ": training loss is not finite (lr " +
                               std::to_string(cfg.lr) + ")");
      }
      row.train_acc = masked_loss_accuracy(out.logits.value(), labels, graph.splits.train).second;
      tape.backward(loss);
    }
    adam_step(params, adam);

    {
      Tape tape;
      const auto propagation = sampler.propagation(n_gcl, dropedge_rng, false);
      for (const auto& a : propagation) {
        if (a != sampler.full()) report.eval_dropedge_free = false;
      }
      const auto out = forward(model, propagation, x, tape, streams.dropout, false);
      const MatrixXd& logits = out.logits.value();
      std::tie(row.val_loss, row.val_acc) = masked_loss_accuracy(logits, labels, graph.splits.val);
      row.test_acc = masked_loss_accuracy(logits, labels, graph.splits.test).second;
    }

    if (epoch == 1 || row.val_acc > report.best_val_acc) {
      report.best_epoch = epoch;
      report.best_val_acc = row.val_acc;
      report.test_acc = row.test_acc;
      if (best_model) *best_model = model;
    }
    report.rows.push_back(row);
  }

  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (final_model) *final_model = std::move(model);
  return report;
}

RunReport train(const TrainConfig& cfg) {
  if (cfg.data_dir.empty()) throw ConfigError("train: no data directory given");
  return train(cfg, load_graph(GraphPaths::in_directory(cfg.data_dir)));
}

namespace {

std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

void write_metrics_csv(const RunReport& report, std::ostream& out) {
  out << "epoch,train_loss,train_acc,val_loss,val_acc,test_acc\n";
  for (const auto& r : report.rows) {
    out << r.epoch << ',' << format_real(r.train_loss) << ',' << format_real(r.train_acc) << ','
        << format_real(r.val_loss) << ',' << format_real(r.val_acc) << ',' << format_real(r.test_acc) << '\n';
  }
}

nlohmann::json summary_json(const RunReport& report) {
  nlohmann::json j{
      {"config", report.config},
      {"epochs", report.rows.size()},
      {"best_epoch", report.best_epoch},
      {"best_val_acc", report.best_val_acc},
      {"test_acc", report.test_acc},
      {"wall_clock_seconds", report.wall_seconds},
      {"eval_dropedge_free", report.eval_dropedge_free},
  };
  if (!report.rows.empty()) {
    const auto& last = report.rows.back();
    j["final"] = {{"train_loss", last.train_loss}, {"train_acc", last.train_acc}, {"val_loss", last.val_loss},
                  {"val_acc", last.val_acc},       {"test_acc", last.test_acc}};
  }
  return j;
}

void write_run(const RunReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "metrics.csv");
    if (!out) throw LoadError((dir / "metrics.csv").string() + ": cannot open for writing");
    write_metrics_csv(report, out);
  }
  std::ofstream out(dir / "summary.json");
  if (!out) throw LoadError((dir / "summary.json").string() + ": cannot open for writing");
  out << summary_json(report).dump(2) << '\n';
}

std::vector<double> layer_distances(std::span<const Tensor> hidden_states, int first, int last) {
  const int n = static_cast<int>(hidden_states.size());
  if (first < 2 || first > last || last >= n) {
    throw ConfigError("layer range [" + std::to_string(first) + ", " + std::to_string(last) +
                      "] does not fit a model with " + std::to_string(n) + " GCLs (need 2 <= first <= last < " +
                      std::to_string(n) + ")");
  }
  std::vector<double> out;
  for (int l = first; l <= last; ++l) {
    const MatrixXd& cur = hidden_states[l - 1].value();
    const MatrixXd& prev = hidden_states[l - 2].value();
    if (cur.cols() != prev.cols()) throw ConfigError("layer " + std::to_string(l) + " changes width");
    out.push_back((cur - prev).norm());
  }
  return out;
}

namespace {

void check_layer_range(const ProbeOptions& options, Index gcl_count) {
  if (options.first_layer < 2 || options.first_layer > options.last_layer || options.last_layer >= gcl_count) {
    throw ConfigError("probe layer range [" + std::to_string(options.first_layer) + ", " +
                      std::to_string(options.last_layer) + "] needs 2 <= first <= last < " +
                      std::to_string(gcl_count));
  }
}

}  // namespace

ProbeSnapshot probe_model(Model& model, const Graph& graph, const TrainConfig& cfg, const ProbeOptions& options,
                          int epochs_trained) {
  check_layer_range(options, model.gcl_count());
  const MatrixXd dense_x = cfg.normalize_features ? row_normalize(graph.features) : graph.features;
  const SparseMatrix x = SparseMatrix::from_dense(dense_x);
  const EdgeSampler sampler(graph.adjacency, sampler_config(cfg.model));
  Rng draw_rng(sampler.config().seed);
  const auto propagation = sampler.propagation(model.gcl_count(), draw_rng, true);

  Tape tape;
  Rng unused(0);
  const auto out = forward(model, propagation, x, tape, unused, false);

  ProbeSnapshot snap;
  snap.epochs_trained = epochs_trained;
  for (int l = options.first_layer; l <= options.last_layer; ++l) snap.layers.push_back(l);
  snap.distances = layer_distances(out.hidden_states, options.first_layer, options.last_layer);

  if (options.spectral && is_symmetric_scheme(cfg.model.scheme)) {
    const auto spectrum = analyze(*propagation.front());
    SmoothingProbe sp;
    sp.epsilon = options.epsilon;
    const std::size_t n_hidden = out.hidden_states.size() - 1;
    std::vector<MatrixXd> hidden;
    for (std::size_t l = 0; l < n_hidden; ++l) {
      hidden.push_back(out.hidden_states[l].value());
      sp.distances.push_back(subspace_distance(hidden.back(), spectrum.basis));
    }
    sp.d0 = subspace_distance(dense_x, spectrum.basis);
    sp.lambda = spectrum.second_largest;
    sp.s = sup_singular_value(model);
    sp.l_hat = sp.d0 > 0.0 ? relaxed_smoothing_layer(sp.epsilon, sp.d0, sp.s, sp.lambda) : 0;
    sp.l_star = empirical_smoothing_layer(hidden, spectrum.basis, sp.epsilon);
    snap.spectral = sp;
  }
  return snap;
}

ProbeReport oversmoothing_probe(const TrainConfig& cfg, const Graph& graph, const ProbeOptions& options) {
  cfg.validate();
  if (options.train_epochs < 0) throw ConfigError("probe: training epochs must be nonnegative");
  ProbeReport report;
  report.config = cfg;
  report.options = options;
  Model model = init_model(cfg, graph);
  check_layer_range(options, model.gcl_count());
  report.before = probe_model(model, graph, cfg, options, 0);
  if (options.train_epochs > 0) {
    TrainConfig run = cfg;
    run.epochs = options.train_epochs;
    train(run, graph, &model);
  }
  report.after = probe_model(model, graph, cfg, options, options.train_epochs);
  return report;
}

namespace {

nlohmann::json depth_json(std::int64_t depth) {
  if (depth == kUnboundedDepth) return "inf";
  return depth;
}

nlohmann::json snapshot_json(const ProbeSnapshot& snap) {
  nlohmann::json j{{"epochs_trained", snap.epochs_trained}, {"layers", snap.layers}, {"distances", snap.distances}};
  if (snap.spectral) {
    const auto& sp = *snap.spectral;
    j["smoothing"] = {{"epsilon", sp.epsilon},
                      {"subspace_distances", sp.distances},
                      {"d0", sp.d0},
                      {"lambda", sp.lambda},
                      {"s", sp.s},
                      {"l_hat", depth_json(sp.l_hat)},
                      {"l_star", sp.l_star ? nlohmann::json(*sp.l_star) : nlohmann::json(nullptr)}};
  }
  return j;
}

}  // namespace

nlohmann::json probe_json(const ProbeReport& report) {
  return {{"config", report.config}, {"before", snapshot_json(report.before)}, {"after", snapshot_json(report.after)}};
}

namespace {

std::vector<NamedRun> run_all(const std::vector<std::pair<std::string, TrainConfig>>& plans, const Graph& graph) {
  std::vector<std::future<RunReport>> pending;
  for (const auto& [name, cfg] : plans) {
    pending.push_back(std::async(std::launch::async, [&graph, c = cfg] { return train(c, graph); }));
  }
  std::vector<NamedRun> out;
  for (std::size_t i = 0; i < plans.size(); ++i) out.push_back({plans[i].first, pending[i].get()});
  return out;
}

}  // namespace

std::vector<NamedRun> ablation_dropout_vs_dropedge(const TrainConfig& base, const Graph& graph) {
  base.validate();
  auto variant = [&](bool use_dropout, bool use_dropedge) {
    TrainConfig c = base;
    if (!use_dropout) c.model.dropout = 0.0;
    if (!use_dropedge) c.model.dropedge.p = 0.0;
    return c;
  };
  return run_all({{"neither", variant(false, false)},
                  {"dropout", variant(true, false)},
                  {"dropedge", variant(false, true)},
                  {"both", variant(true, true)}},
                 graph);
}

std::vector<NamedRun> ablation_layerwise(const TrainConfig& base, const Graph& graph) {
  base.validate();
  TrainConfig one_shot = base;
  one_shot.model.dropedge.layer_wise = false;
  TrainConfig layer_wise = base;
  layer_wise.model.dropedge.layer_wise = true;
  return run_all({{"one_shot", one_shot}, {"layer_wise", layer_wise}}, graph);
}

Graph make_sbm_graph(const SbmOptions& o) {
  if (o.n_nodes < 1 || o.blocks < 1 || o.n_features < 1) throw ConfigError("sbm: sizes must be positive");
  for (double p : {o.p_in, o.p_out, o.feature_on, o.feature_off}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("sbm: probabilities must lie in [0, 1]");
  }
  if (o.train_fraction < 0.0 || o.val_fraction < 0.0 || o.train_fraction + o.val_fraction > 1.0) {
    throw ConfigError("sbm: split fractions must be nonnegative and sum to at most 1");
  }
  Rng rng(o.seed);
  Graph g;
  g.n_nodes = o.n_nodes;
  g.labels.resize(static_cast<std::size_t>(o.n_nodes));
  for (Index i = 0; i < o.n_nodes; ++i) g.labels[i] = static_cast<int>(i % o.blocks);

  std::vector<Edge> edges;
  for (Index i = 0; i < o.n_nodes; ++i) {
    for (Index j = i + 1; j < o.n_nodes; ++j) {
      if (rng.bernoulli(g.labels[i] == g.labels[j] ? o.p_in : o.p_out)) edges.emplace_back(i, j);
    }
  }
  g.adjacency = adjacency_from_edges(o.n_nodes, edges);

  g.features = MatrixXd::Zero(o.n_nodes, o.n_features);
  for (Index i = 0; i < o.n_nodes; ++i) {
    for (Index f = 0; f < o.n_features; ++f) {
      const bool own = f % o.blocks == g.labels[i];
      if (rng.bernoulli(own ? o.feature_on : o.feature_off)) g.features(i, f) = 1.0;
    }
  }

  std::vector<Index> order(static_cast<std::size_t>(o.n_nodes));
  std::iota(order.begin(), order.end(), Index{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::floor(o.train_fraction * static_cast<double>(o.n_nodes)));
  const auto n_val = static_cast<std::size_t>(std::floor(o.val_fraction * static_cast<double>(o.n_nodes)));
  g.splits.train.assign(order.begin(), order.begin() + n_train);
  g.splits.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  g.splits.test.assign(order.begin() + n_train + n_val, order.end());
  for (auto* part : {&g.splits.train, &g.splits.val, &g.splits.test}) std::ranges::sort(*part);
  g.validate();
  return g;
}

SparseMatrix random_connected_graph(Index n_nodes, double extra_edge_prob, Rng& rng) {
  if (n_nodes < 1) throw ConfigError("random_connected_graph: need at least one node");
  std::vector<Edge> edges;
  for (Index v = 1; v < n_nodes; ++v) edges.emplace_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(v))), v);
  for (Index i = 0; i < n_nodes; ++i) {
    for (Index j = i + 1; j < n_nodes; ++j) {
      if (rng.bernoulli(extra_edge_prob)) edges.emplace_back(i, j);
    }
  }
  return adjacency_from_edges(n_nodes, edges);
}

void retain_freed_memory() {
#if defined(__GLIBC__)
  constexpr int kMax = std::numeric_limits<int>::max();
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, kMax);
#endif
}

}  // namespace dropedge
