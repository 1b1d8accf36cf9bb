#include "dropedge/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>

namespace dropedge {

std::string_view to_string(Backbone backbone) {
  switch (backbone) {
    case Backbone::GCN: return "GCN";
    case Backbone::ResGCN: return "ResGCN";
    case Backbone::JKNet: return "JKNet";
    case Backbone::IncepGCN: return "IncepGCN";
  }
  return "unknown";
}

Backbone parse_backbone(std::string_view name) {
  std::string lower(name);
  std::ranges::transform(lower, lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "gcn") return Backbone::GCN;
  if (lower == "resgcn") return Backbone::ResGCN;
  if (lower == "jknet") return Backbone::JKNet;
  if (lower == "incepgcn" || lower == "inceptgcn") return Backbone::IncepGCN;
  throw ConfigError("unknown backbone '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (n_layers < min_layers()) {
    throw ConfigError(std::string(to_string(backbone)) + " needs at least " + std::to_string(min_layers()) +
                      " layers, got " + std::to_string(n_layers));
  }
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be at least 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  try {
    dropedge.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{
      {"backbone", to_string(cfg.backbone)},
      {"n_layers", cfg.n_layers},
      {"hidden_dim", cfg.hidden_dim},
      {"dropout", cfg.dropout},
      {"input_dropout", cfg.input_dropout},
      {"withloop", cfg.withloop},
      {"withbn", cfg.withbn},
      {"bias", cfg.bias},
      {"normalization", to_string(cfg.scheme)},
      {"activation", cfg.activation == Activation::ReLU ? "relu" : "identity"},
      {"dropedge",
       {{"p", cfg.dropedge.p},
        {"sampling_percent", cfg.dropedge.sampling_percent()},
        {"layer_wise", cfg.dropedge.layer_wise},
        {"seed", cfg.dropedge.seed}}},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  cfg = ModelConfig{};
  if (j.contains("backbone")) cfg.backbone = parse_backbone(j.at("backbone").get<std::string>());
  cfg.n_layers = j.value("n_layers", cfg.n_layers);
  cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
  cfg.dropout = j.value("dropout", cfg.dropout);
  cfg.input_dropout = j.value("input_dropout", cfg.input_dropout);
  cfg.withloop = j.value("withloop", cfg.withloop);
  cfg.withbn = j.value("withbn", cfg.withbn);
  cfg.bias = j.value("bias", cfg.bias);
  if (j.contains("normalization")) cfg.scheme = parse_normalization(j.at("normalization").get<std::string>());
  if (j.contains("activation")) {
    cfg.activation = j.at("activation").get<std::string>() == "identity" ? Activation::Identity : Activation::ReLU;
  }
  if (j.contains("dropedge")) {
    const auto& d = j.at("dropedge");
    if (d.contains("p")) {
      cfg.dropedge.p = d.at("p").get<double>();
    } else if (d.contains("sampling_percent")) {
      cfg.dropedge.p = 1.0 - d.at("sampling_percent").get<double>();
    }
    cfg.dropedge.layer_wise = d.value("layer_wise", cfg.dropedge.layer_wise);
    cfg.dropedge.seed = d.value("seed", cfg.dropedge.seed);
  }
  cfg.dropedge.scheme = cfg.scheme;
}

namespace {

Tensor finish_gcl(const SharedSparse& propagation, Tensor projected, const Tensor* self_input,
                  const SparseMatrix* sparse_self, GclParams& layer, ForwardContext& ctx) {
  Tape& tape = ctx.tape;
  Tensor z = spmm(propagation, projected);
  if (layer.self_weight) {
    const Tensor w_self = tape.parameter(*layer.self_weight);
    z = add(z, self_input ? matmul(*self_input, w_self) : spmm(*sparse_self, w_self));
  }
  if (layer.bias) z = add_bias(z, tape.parameter(*layer.bias));
  if (layer.norm) z = batch_norm(z, *layer.norm, ctx.training);
  if (layer.activate && ctx.activation == Activation::ReLU) z = relu(z);
  return z;
}

void check_propagation(const SharedSparse& propagation, Index n_rows) {
  if (!propagation) throw ContractError("gcl_forward: missing propagation matrix");
  if (propagation->rows() != n_rows || propagation->cols() != n_rows) {
    throw DimensionError("gcl_forward: propagation matrix must be N x N");
  }
}

}  // namespace

Tensor gcl_forward(const SharedSparse& propagation, const Tensor& h, GclParams& layer, ForwardContext& ctx) {
  check_propagation(propagation, h.rows());
  if (h.cols() != layer.in_dim()) throw DimensionError("gcl_forward: input width differs from layer input");
  const Tensor x = dropout(h, ctx.dropout, ctx.rng, ctx.training);
  const Tensor projected = matmul(x, ctx.tape.parameter(layer.weight));
  return finish_gcl(propagation, projected, &x, nullptr, layer, ctx);
}

Tensor gcl_forward(const SharedSparse& propagation, const SparseMatrix& x, GclParams& layer, ForwardContext& ctx) {
  check_propagation(propagation, x.rows());
  if (x.cols() != layer.in_dim()) throw DimensionError("gcl_forward: input width differs from layer input");
  auto dropped = std::make_shared<const SparseMatrix>(dropout(x, ctx.input_dropout ? ctx.dropout : 0.0, ctx.rng, ctx.training));
  const Tensor projected = spmm(dropped, ctx.tape.parameter(layer.weight));
  return finish_gcl(propagation, projected, nullptr, dropped.get(), layer, ctx);
}

Model::Model(ModelConfig cfg, Index n_features, Index n_classes, std::vector<GclParams> layers)
    : cfg_(std::move(cfg)), n_features_(n_features), n_classes_(n_classes), layers_(std::move(layers)) {}

namespace {

template <typename Layers, typename Out>
void collect_parameters(Layers& layers, Out& out) {
  for (auto& l : layers) {
    out.push_back(&l.weight);
    if (l.self_weight) out.push_back(&*l.self_weight);
    if (l.bias) out.push_back(&*l.bias);
    if (l.norm) {
      out.push_back(&l.norm->scale);
      out.push_back(&l.norm->shift);
    }
  }
}

}  // namespace

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  collect_parameters(layers_, out);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  collect_parameters(layers_, out);
  return out;
}

std::vector<const MatrixXd*> Model::weight_matrices() const {
  std::vector<const MatrixXd*> out;
  for (const auto& l : layers_) out.push_back(&l.weight.value);
  return out;
}

void Model::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

Model build_model(const ModelConfig& cfg, Index n_features, Index n_classes, Rng& rng) {
  cfg.validate();
  if (n_features < 1 || n_classes < 1) throw ConfigError("build_model: need at least one feature and one class");
  const Index hidden = cfg.hidden_dim;
  std::vector<GclParams> layers;

  auto add_layer = [&](Index in, Index out, bool activate) {
    const std::string prefix = "gcl" + std::to_string(layers.size());
    GclParams p;
    p.weight = Parameter(prefix + ".weight", glorot_init(in, out, rng));
    if (cfg.withloop) p.self_weight = Parameter(prefix + ".self_weight", glorot_init(in, out, rng));
    if (cfg.bias) p.bias = Parameter(prefix + ".bias", MatrixXd::Zero(1, out), false);
    if (cfg.withbn && activate) p.norm = BatchNorm(out, prefix + ".bn");
    p.activate = activate;
    layers.push_back(std::move(p));
  };

  const Index body = cfg.n_layers - 2;
  add_layer(n_features, hidden, true);
  switch (cfg.backbone) {
    case Backbone::GCN:
    case Backbone::ResGCN:
      for (Index l = 0; l < body; ++l) add_layer(hidden, hidden, true);
      add_layer(hidden, n_classes, false);
      break;
    case Backbone::JKNet:
      for (Index l = 0; l < body; ++l) add_layer(hidden, hidden, true);
      add_layer((body + 1) * hidden, n_classes, false);
      break;
    case Backbone::IncepGCN:
      for (Index branch = 1; branch <= body; ++branch) {
        for (Index l = 0; l < branch; ++l) add_layer(hidden, hidden, true);
      }
      add_layer(body * hidden, n_classes, false);
      break;
  }
  return Model(cfg, n_features, n_classes, std::move(layers));
}

ForwardResult forward(Model& model, std::span<const SharedSparse> propagation, const SparseMatrix& features,
                      Tape& tape, Rng& rng, bool training) {
  const auto& cfg = model.config();
  auto layers = model.layers();
  if (static_cast<Index>(propagation.size()) < model.gcl_count()) {
    throw DimensionError("forward: need one propagation matrix per GCL (" + std::to_string(model.gcl_count()) +
                         "), got " + std::to_string(propagation.size()));
  }
  if (features.cols() != model.n_features()) throw DimensionError("forward: feature width differs from model");

  ForwardContext ctx{tape, rng, training, cfg.dropout, cfg.input_dropout, cfg.activation};
  ForwardResult out;
  std::size_t next = 0;
  auto step = [&](const Tensor& h) {
    Tensor y = gcl_forward(propagation[next], h, layers[next], ctx);
    ++next;
    return y;
  };

  Tensor h = gcl_forward(propagation[0], features, layers[0], ctx);
  ++next;
  out.hidden_states.push_back(h);
  const int body = cfg.n_layers - 2;

  switch (cfg.backbone) {
    case Backbone::GCN:
      for (int l = 0; l < body; ++l) {
        h = step(h);
        out.hidden_states.push_back(h);
      }
      break;
    case Backbone::ResGCN:
      for (int l = 0; l < body; ++l) {
        h = add(step(h), h);
        out.hidden_states.push_back(h);
      }
      break;
    case Backbone::JKNet: {
      std::vector<Tensor> collected{h};
      for (int l = 0; l < body; ++l) {
        h = step(h);
        out.hidden_states.push_back(h);
        collected.push_back(h);
      }
      h = concat_cols(collected);
      break;
    }
    case Backbone::IncepGCN: {
      const Tensor base = h;
      std::vector<Tensor> branches;
      for (int branch = 1; branch <= body; ++branch) {
        Tensor x = base;
        for (int l = 0; l < branch; ++l) {
          x = step(x);
          out.hidden_states.push_back(x);
        }
        branches.push_back(x);
      }
      h = concat_cols(branches);
      break;
    }
  }
  out.logits = step(h);
  out.hidden_states.push_back(out.logits);
  return out;
}

ForwardResult forward(Model& model, std::span<const SharedSparse> propagation, const MatrixXd& features,
                      Tape& tape, Rng& rng, bool training) {
  return forward(model, propagation, SparseMatrix::from_dense(features), tape, rng, training);
}

namespace {

constexpr char kMagic[8] = {'D', 'E', 'G', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw LoadError("checkpoint: truncated file");
  return v;
}

template <typename Derived>
void write_array(std::ostream& out, const Eigen::MatrixBase<Derived>& m) {
  const MatrixXd dense = m;
  write_u64(out, static_cast<std::uint64_t>(dense.rows()));
  write_u64(out, static_cast<std::uint64_t>(dense.cols()));
  out.write(reinterpret_cast<const char*>(dense.data()), static_cast<std::streamsize>(dense.size() * sizeof(double)));
}

template <typename Derived>
void read_array(std::istream& in, Eigen::MatrixBase<Derived>& m) {
  const auto rows = static_cast<Index>(read_u64(in));
  const auto cols = static_cast<Index>(read_u64(in));
  if (rows != m.rows() || cols != m.cols()) throw LoadError("checkpoint: array shape does not match config");
  MatrixXd dense(rows, cols);
  in.read(reinterpret_cast<char*>(dense.data()), static_cast<std::streamsize>(dense.size() * sizeof(double)));
  if (!in) throw LoadError("checkpoint: truncated array");
  m = dense;
}

// Fixed traversal shared by save and load.
template <typename ModelT, typename Fn>
void for_each_array(ModelT& model, Fn&& fn) {
  for (auto& l : model.layers()) {
    fn(l.weight.value);
    if (l.self_weight) fn(l.self_weight->value);
    if (l.bias) fn(l.bias->value);
    if (l.norm) {
      fn(l.norm->scale.value);
      fn(l.norm->shift.value);
      fn(l.norm->running_mean);
      fn(l.norm->running_var);
    }
  }
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError(path.string() + ": cannot open for writing");
  nlohmann::json header{{"config", model.config()},
                        {"n_features", model.n_features()},
                        {"n_classes", model.n_classes()}};
  const std::string text = header.dump();
  out.write(kMagic, sizeof kMagic);
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for_each_array(model, [&](const auto& m) { write_array(out, m); });
  if (!out) throw LoadError(path.string() + ": write failed");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string() + ": cannot open");
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw LoadError(path.string() + ": not a checkpoint");
  std::string text(read_u64(in), '\0');
  in.read(text.data(), static_cast<std::streamsize>(text.size()));
  if (!in) throw LoadError(path.string() + ": truncated header");
  const auto header = nlohmann::json::parse(text);
  Rng scratch(0);
  Model model = build_model(header.at("config").get<ModelConfig>(), header.at("n_features").get<Index>(),
                            header.at("n_classes").get<Index>(), scratch);
  for_each_array(model, [&](auto& m) { read_array(in, m); });
  for (auto* p : model.parameters()) p->zero_grad();
  return model;
}

}  // namespace dropedge
