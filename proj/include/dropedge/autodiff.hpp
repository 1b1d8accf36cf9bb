#pragma once

#include "dropedge/common.hpp"
#include "dropedge/sparse.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dropedge {

/// Trainable matrix that outlives any single tape.
struct Parameter {
  std::string name;
  MatrixXd value;
  MatrixXd grad;       // same shape as value, accumulated by Tape::backward
  bool decay = true;   // receives L2 weight decay in adam_step

  Parameter() = default;
  Parameter(std::string n, MatrixXd v, bool decay_ = true)
      : name(std::move(n)), value(std::move(v)), grad(MatrixXd::Zero(value.rows(), value.cols())), decay(decay_) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// owning tape lives.
class Tensor {
 public:
  Tensor() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const MatrixXd& value() const;
  const MatrixXd& grad() const;
  bool requires_grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of executed ops for one forward/backward pass.
///
/// Nodes are appended in execution order, which is already a topological
/// order; backward() walks it in reverse and may run once.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const MatrixXd& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(MatrixXd value);
  /// Leaf whose gradient is readable through Tensor::grad() after backward.
  Tensor variable(MatrixXd value);
  /// Leaf bound to `p`; backward accumulates into p.grad.
  Tensor parameter(Parameter& p);

  /// Records an op output. `backward` runs only if some input needs a grad.
  Tensor record(MatrixXd value, std::initializer_list<Tensor> inputs, Backward backward);
  Tensor record(MatrixXd value, std::span<const Tensor> inputs, Backward backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates in reverse order.
  void backward(const Tensor& loss);

  /// Adds `contribution` to the gradient of `t` (no-op for constants).
  void accumulate(const Tensor& t, const MatrixXd& contribution);

  const MatrixXd& value(std::size_t id) const { return nodes_[id].value; }
  const MatrixXd& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    MatrixXd value;
    MatrixXd grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };

  Tensor push(Node node);

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Differentiable ops. Operands must live on the same tape.

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * h for a constant sparse `a`; backward uses a^T g.
Tensor spmm(SharedSparse a, const Tensor& h);
Tensor spmm(const SparseMatrix& a, const Tensor& h);
Tensor add(const Tensor& x, const Tensor& y);
/// Broadcasts the 1 x C row `bias` over the rows of x.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor concat_cols(std::span<const Tensor> xs);
Tensor sum(const Tensor& x);

/// Inverted dropout: survivors scaled by 1 / (1 - rate). Identity when
/// not training.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);
/// Same law for a constant sparse input; only stored entries can survive.
SparseMatrix dropout(const SparseMatrix& x, double rate, Rng& rng, bool training);

/// Learnable per-feature scale/shift plus running statistics.
struct BatchNorm {
  Parameter scale;
  Parameter shift;
  RowVectorXd running_mean;
  RowVectorXd running_var;
  double momentum = 0.9;  // weight kept by the running statistics
  double eps = 1e-5;

  explicit BatchNorm(Index features = 0, const std::string& prefix = "bn");
  Index features() const { return running_mean.size(); }
};

/// Normalizes over the node (row) dimension: batch statistics while
/// training, running statistics otherwise.
Tensor batch_norm(const Tensor& x, BatchNorm& state, bool training);

/// Mean of -log softmax(logits)[label] over `mask`; returns a 1 x 1 tensor.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const Index> mask);

/// Adam with L2 weight decay added to the gradients of decaying parameters.
struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  AdamOptions options;
  std::vector<MatrixXd> first_moment;
  std::vector<MatrixXd> second_moment;
  long step = 0;

  AdamState() = default;
  explicit AdamState(AdamOptions opts) : options(opts) {}
};

void adam_step(std::span<Parameter* const> params, AdamState& state);

/// Uniform on +-sqrt(6 / (rows + cols)).
MatrixXd glorot_init(Index rows, Index cols, Rng& rng);

}  // namespace dropedge
