#pragma once

#include "dropedge/autodiff.hpp"
#include "dropedge/graph.hpp"
#include "dropedge/sampler.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace dropedge {

enum class Backbone { GCN, ResGCN, JKNet, IncepGCN };

std::string_view to_string(Backbone backbone);
/// Case-insensitive: "gcn", "resgcn", "jknet", "incepgcn".
Backbone parse_backbone(std::string_view name);

/// Nonlinearity of the hidden GCLs. Identity exists for linearity and
/// contraction checks.
enum class Activation { ReLU, Identity };

struct ModelConfig {
  Backbone backbone = Backbone::GCN;
  int n_layers = 2;
  int hidden_dim = 128;
  double dropout = 0.5;
  /// Also drop raw input features, not only hidden GCL inputs.
  bool input_dropout = false;
  bool withloop = false;
  bool withbn = false;
  bool bias = true;
  NormalizationScheme scheme = NormalizationScheme::AugNormAdj;
  DropEdgeConfig dropedge;
  Activation activation = Activation::ReLU;

  /// 2 for GCN; 3 for the backbones with an input and an output GCL around
  /// a body.
  int min_layers() const { return backbone == Backbone::GCN ? 2 : 3; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

/// Parameters of one graph convolutional layer:
/// act(bn(A H W + H W_self + b)).
struct GclParams {
  Parameter weight;
  std::optional<Parameter> self_weight;
  std::optional<Parameter> bias;
  std::optional<BatchNorm> norm;
  bool activate = true;

  Index in_dim() const { return weight.value.rows(); }
  Index out_dim() const { return weight.value.cols(); }
};

/// Per-pass context shared by every layer of a forward call.
struct ForwardContext {
  Tape& tape;
  Rng& rng;
  bool training = false;
  double dropout = 0.0;
  bool input_dropout = false;
  Activation activation = Activation::ReLU;
};

/// One GCL on a dense input, with feature dropout on the input.
Tensor gcl_forward(const SharedSparse& propagation, const Tensor& h, GclParams& layer, ForwardContext& ctx);
/// One GCL on a constant sparse input (the raw features). Dropout applies
/// only when ctx.input_dropout is set.
Tensor gcl_forward(const SharedSparse& propagation, const SparseMatrix& x, GclParams& layer, ForwardContext& ctx);

class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, Index n_features, Index n_classes, std::vector<GclParams> layers);

  const ModelConfig& config() const { return cfg_; }
  Index n_features() const { return n_features_; }
  Index n_classes() const { return n_classes_; }

  /// Layers in evaluation order: input GCL, body (or branches, one after
  /// another), output GCL.
  std::span<GclParams> layers() { return layers_; }
  std::span<const GclParams> layers() const { return layers_; }
  Index gcl_count() const { return static_cast<Index>(layers_.size()); }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  /// Filter matrices W of every GCL (self weights excluded).
  std::vector<const MatrixXd*> weight_matrices() const;

  void zero_grad();

 private:
  ModelConfig cfg_;
  Index n_features_ = 0;
  Index n_classes_ = 0;
  std::vector<GclParams> layers_;
};

/// Glorot-initialized weights, zero biases.
Model build_model(const ModelConfig& cfg, Index n_features, Index n_classes, Rng& rng);

struct ForwardResult {
  Tensor logits;
  std::vector<Tensor> hidden_states;  // one per GCL, in layer order
};

/// `propagation[l]` feeds GCL l; it needs at least gcl_count() entries.
ForwardResult forward(Model& model, std::span<const SharedSparse> propagation, const SparseMatrix& features,
                      Tape& tape, Rng& rng, bool training);
ForwardResult forward(Model& model, std::span<const SharedSparse> propagation, const MatrixXd& features,
                      Tape& tape, Rng& rng, bool training);

/// Binary checkpoint: JSON config header followed by raw parameter arrays.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace dropedge
