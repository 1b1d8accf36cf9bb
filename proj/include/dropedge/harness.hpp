#pragma once

#include "dropedge/graph.hpp"
#include "dropedge/model.hpp"
#include "dropedge/spectral.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dropedge {

struct TrainConfig {
  ModelConfig model;
  double lr = 0.01;
  double weight_decay = 5e-4;
  int epochs = 400;
  std::uint64_t seed = 42;
  bool normalize_features = true;  // row-normalize X before training
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double test_acc = 0.0;
};

struct RunReport {
  std::vector<EpochMetrics> rows;
  int best_epoch = 0;  // highest val_acc, earliest on ties
  double best_val_acc = 0.0;
  double test_acc = 0.0;  // at best_epoch
  double wall_seconds = 0.0;
  bool eval_dropedge_free = true;  // every evaluation used normalize(A) without dropout
  TrainConfig config;
};

/// Thrown when the training loss stops being finite.
struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dense copy of X with each nonzero row scaled to sum 1.
MatrixXd row_normalize(const MatrixXd& features);

/// The model a run with `cfg` starts from.
Model init_model(const TrainConfig& cfg, const Graph& graph);

/// Full-batch training: one DropEdge draw and one Adam step per epoch, then
/// evaluation on the intact graph without dropout. `final_model`, when
/// given, receives the parameters after the last epoch; `best_model` those
/// of the best validation epoch.
RunReport train(const TrainConfig& cfg, const Graph& graph, Model* final_model = nullptr,
                Model* best_model = nullptr);
/// Loads the dataset from cfg.data_dir.
RunReport train(const TrainConfig& cfg);

/// Mean cross-entropy and accuracy of `logits` over `mask`.
std::pair<double, double> masked_loss_accuracy(const MatrixXd& logits, std::span<const int> labels,
                                               std::span<const Index> mask);

void write_metrics_csv(const RunReport& report, std::ostream& out);
nlohmann::json summary_json(const RunReport& report);
/// metrics.csv and summary.json under `dir` (created if missing).
void write_run(const RunReport& report, const std::filesystem::path& dir);

struct ProbeOptions {
  int first_layer = 2;
  int last_layer = 6;
  int train_epochs = 150;
  double epsilon = 1e-3;
  bool spectral = true;  // needs a symmetric scheme
};

/// Spectral view of one set of hidden states.
struct SmoothingProbe {
  double epsilon = 1e-3;
  std::vector<double> distances;  // d_M(H^(l)) for every GCL output but the logits
  double d0 = 0.0;                // d_M(X)
  double lambda = 0.0;
  double s = 0.0;
  std::int64_t l_hat = kUnboundedDepth;
  std::optional<std::int64_t> l_star;
};

struct ProbeSnapshot {
  int epochs_trained = 0;
  std::vector<int> layers;
  std::vector<double> distances;  // ||H^(l) - H^(l-1)||_F for l in layers
  std::optional<SmoothingProbe> spectral;
};

struct ProbeReport {
  ProbeSnapshot before;
  ProbeSnapshot after;
  TrainConfig config;
  ProbeOptions options;
};

/// Consecutive-layer distances for l in [first, last], 1-based over the
/// hidden states. Both ends need matching widths, so last < gcl_count.
std::vector<double> layer_distances(std::span<const Tensor> hidden_states, int first, int last);

/// Distances on one fixed forward pass: a single DropEdge draw at the
/// configured p, dropout off.
ProbeSnapshot probe_model(Model& model, const Graph& graph, const TrainConfig& cfg, const ProbeOptions& options,
                          int epochs_trained);

/// Probes the initial model, trains for options.train_epochs and probes
/// again.
ProbeReport oversmoothing_probe(const TrainConfig& cfg, const Graph& graph, const ProbeOptions& options = {});

nlohmann::json probe_json(const ProbeReport& report);

struct NamedRun {
  std::string name;
  RunReport report;
};

/// neither / dropout / dropedge / both, using base.model.dropout and
/// base.model.dropedge.p as the "on" settings.
std::vector<NamedRun> ablation_dropout_vs_dropedge(const TrainConfig& base, const Graph& graph);
/// one_shot / layer_wise at base.model.dropedge.p.
std::vector<NamedRun> ablation_layerwise(const TrainConfig& base, const Graph& graph);

/// Keep freed blocks in the heap instead of handing them back to the OS.
/// Per-epoch N x hidden temporaries otherwise cost an mmap, page faults and
/// an munmap each. Process-wide; a no-op off glibc.
void retain_freed_memory();

/// Stochastic block model with block-correlated binary features.
struct SbmOptions {
  Index n_nodes = 120;
  int blocks = 3;
  double p_in = 0.15;
  double p_out = 0.01;
  Index n_features = 24;
  double feature_on = 0.3;   // P(feature active) for the node's own block
  double feature_off = 0.05; // otherwise
  double train_fraction = 0.5;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// Block b owns the features j with j % blocks == b. Splits are a seeded
/// shuffle cut by the fractions.
Graph make_sbm_graph(const SbmOptions& options);

/// Random spanning tree on n nodes plus each remaining pair with
/// probability `extra_edge_prob`; always connected.
SparseMatrix random_connected_graph(Index n_nodes, double extra_edge_prob, Rng& rng);

}  // namespace dropedge
