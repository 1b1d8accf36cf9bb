#include "dropedge/autodiff.hpp"

#include <cmath>

namespace dropedge {

const MatrixXd& Tensor::value() const { return tape_->value(id_); }
const MatrixXd& Tensor::grad() const { return tape_->grad(id_); }
bool Tensor::requires_grad() const { return tape_->requires_grad(id_); }

Tensor Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Tape::constant(MatrixXd value) { return push(Node{std::move(value), {}, false, nullptr, {}}); }

Tensor Tape::variable(MatrixXd value) { return push(Node{std::move(value), {}, true, nullptr, {}}); }

Tensor Tape::parameter(Parameter& p) {
  if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
  return push(Node{p.value, {}, true, &p, {}});
}

Tensor Tape::record(MatrixXd value, std::initializer_list<Tensor> inputs, Backward backward) {
  return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()), std::move(backward));
}

Tensor Tape::record(MatrixXd value, std::span<const Tensor> inputs, Backward backward) {
  bool needs = false;
  for (const auto& t : inputs) {
    if (&t.tape() != this) throw ContractError("Tape: operand recorded on a different tape");
    needs = needs || nodes_[t.id()].requires_grad;
  }
  return push(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : Backward{}});
}

const MatrixXd& Tape::grad(std::size_t id) const {
  static const MatrixXd empty;
  const auto& node = nodes_[id];
  return node.grad.size() ? node.grad : empty;
}

void Tape::accumulate(const Tensor& t, const MatrixXd& contribution) {
  auto& node = nodes_[t.id()];
  if (!node.requires_grad) return;
  if (contribution.rows() != node.value.rows() || contribution.cols() != node.value.cols()) {
    throw ContractError("Tape: gradient shape does not match value shape");
  }
  if (node.grad.size() == 0) {
    node.grad = contribution;
  } else {
    node.grad += contribution;
  }
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("Tape::backward: tape already consumed");
  if (&loss.tape() != this) throw ContractError("Tape::backward: loss is not on this tape");
  const auto& root = nodes_[loss.id()];
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw ContractError("Tape::backward: loss must be a scalar (1 x 1)");
  }
  consumed_ = true;
  if (!root.requires_grad) return;
  nodes_[loss.id()].grad = MatrixXd::Ones(1, 1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.grad.size() == 0) continue;
    if (node.backward) node.backward(*this, node.grad);
    if (node.param) node.param->grad += node.grad;
  }
}

namespace {

void same_tape(const Tensor& a, const Tensor& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("dropout: rate must lie in [0, 1)");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  same_tape(a, b);
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  MatrixXd out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const MatrixXd& g) {
    if (a.requires_grad()) tape.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) tape.accumulate(b, a.value().transpose() * g);
  });
}

Tensor spmm(SharedSparse a, const Tensor& h) {
  if (!a) throw ContractError("spmm: null sparse operand");
  if (a->cols() != h.rows()) throw DimensionError("spmm: inner dimensions differ");
  MatrixXd out = a->eigen() * h.value();
  return h.tape().record(std::move(out), {h}, [a = std::move(a), h](Tape& tape, const MatrixXd& g) {
    tape.accumulate(h, a->eigen().transpose() * g);
  });
}

Tensor spmm(const SparseMatrix& a, const Tensor& h) { return spmm(std::make_shared<const SparseMatrix>(a), h); }

Tensor add(const Tensor& x, const Tensor& y) {
  same_tape(x, y);
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw DimensionError("add: shapes differ");
  MatrixXd out = x.value() + y.value();
  return x.tape().record(std::move(out), {x, y}, [x, y](Tape& tape, const MatrixXd& g) {
    tape.accumulate(x, g);
    tape.accumulate(y, g);
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  same_tape(x, bias);
  if (bias.rows() != 1 || bias.cols() != x.cols()) throw DimensionError("add_bias: bias must be 1 x cols(x)");
  MatrixXd out = x.value().rowwise() + bias.value().row(0);
  return x.tape().record(std::move(out), {x, bias}, [x, bias](Tape& tape, const MatrixXd& g) {
    tape.accumulate(x, g);
    tape.accumulate(bias, g.colwise().sum());
  });
}

Tensor relu(const Tensor& x) {
  MatrixXd out = x.value().cwiseMax(0.0);
  return x.tape().record(std::move(out), {x}, [x](Tape& tape, const MatrixXd& g) {
    tape.accumulate(x, (x.value().array() > 0.0).select(g, 0.0));
  });
}

Tensor concat_cols(std::span<const Tensor> xs) {
  if (xs.empty()) throw DimensionError("concat_cols: no inputs");
  Index width = 0;
  for (const auto& t : xs) {
    same_tape(xs.front(), t);
    if (t.rows() != xs.front().rows()) throw DimensionError("concat_cols: row counts differ");
    width += t.cols();
  }
  MatrixXd out(xs.front().rows(), width);
  Index offset = 0;
  for (const auto& t : xs) {
    out.middleCols(offset, t.cols()) = t.value();
    offset += t.cols();
  }
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  return xs.front().tape().record(std::move(out), xs, [inputs](Tape& tape, const MatrixXd& g) {
    Index off = 0;
    for (const auto& t : inputs) {
      tape.accumulate(t, g.middleCols(off, t.cols()));
      off += t.cols();
    }
  });
}

Tensor sum(const Tensor& x) {
  MatrixXd out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape().record(std::move(out), {x}, [x](Tape& tape, const MatrixXd& g) {
    tape.accumulate(x, MatrixXd::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  check_rate(rate);
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  MatrixXd mask(x.rows(), x.cols());
  for (Index j = 0; j < mask.cols(); ++j) {
    for (Index i = 0; i < mask.rows(); ++i) mask(i, j) = rng.uniform() < rate ? 0.0 : keep_scale;
  }
  MatrixXd out = x.value().cwiseProduct(mask);
  return x.tape().record(std::move(out), {x}, [x, mask = std::move(mask)](Tape& tape, const MatrixXd& g) {
    tape.accumulate(x, g.cwiseProduct(mask));
  });
}

SparseMatrix dropout(const SparseMatrix& x, double rate, Rng& rng, bool training) {
  check_rate(rate);
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto storage = x.eigen();
  double* values = storage.valuePtr();
  for (Index k = 0; k < storage.nonZeros(); ++k) values[k] = rng.uniform() < rate ? 0.0 : values[k] * keep_scale;
  return SparseMatrix(std::move(storage));
}

BatchNorm::BatchNorm(Index features, const std::string& prefix)
    : scale(prefix + ".scale", MatrixXd::Ones(1, features), false),
      shift(prefix + ".shift", MatrixXd::Zero(1, features), false),
      running_mean(RowVectorXd::Zero(features)),
      running_var(RowVectorXd::Ones(features)) {}

Tensor batch_norm(const Tensor& x, BatchNorm& state, bool training) {
  if (x.cols() != state.features()) throw DimensionError("batch_norm: feature count differs from state");
  Tape& tape = x.tape();
  const Tensor scale = tape.parameter(state.scale);
  const Tensor shift = tape.parameter(state.shift);
  const Index n = x.rows();
  const auto& xv = x.value();

  RowVectorXd mean, var;
  if (training) {
    if (n < 1) throw DimensionError("batch_norm: empty batch");
    mean = xv.colwise().mean();
    var = (xv.rowwise() - mean).array().square().colwise().mean();
    const RowVectorXd unbiased = n > 1 ? RowVectorXd(var * (double(n) / double(n - 1))) : var;
    state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * mean;
    state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * unbiased;
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  const RowVectorXd inv_std = (var.array() + state.eps).rsqrt().matrix();
  MatrixXd normalized = (xv.rowwise() - mean).array().rowwise() * inv_std.array();
  MatrixXd out = (normalized.array().rowwise() * scale.value().row(0).array()).rowwise() +
                 shift.value().row(0).array();

  return tape.record(std::move(out), {x, scale, shift},
                     [x, scale, shift, normalized, inv_std, training](Tape& t, const MatrixXd& g) {
                       t.accumulate(scale, (g.array() * normalized.array()).colwise().sum().matrix());
                       t.accumulate(shift, g.colwise().sum());
                       if (!x.requires_grad()) return;
                       const MatrixXd dnorm = g.array().rowwise() * scale.value().row(0).array();
                       if (!training) {
                         t.accumulate(x, dnorm.array().rowwise() * inv_std.array());
                         return;
                       }
                       const double n = static_cast<double>(g.rows());
                       const RowVectorXd sum_d = dnorm.colwise().sum();
                       const RowVectorXd sum_dx = (dnorm.array() * normalized.array()).colwise().sum();
                       MatrixXd dx = (n * dnorm.array()).rowwise() - sum_d.array();
                       dx.array() -= normalized.array().rowwise() * sum_dx.array();
                       dx.array().rowwise() *= (inv_std.array() / n);
                       t.accumulate(x, dx);
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const Index> mask) {
  if (mask.empty()) throw DomainError("softmax_cross_entropy: empty mask");
  if (static_cast<Index>(labels.size()) != logits.rows()) {
    throw DimensionError("softmax_cross_entropy: one label per row required");
  }
  const auto& z = logits.value();
  const Index k = z.cols();
  MatrixXd probs(static_cast<Index>(mask.size()), k);
  double loss = 0.0;
  for (std::size_t m = 0; m < mask.size(); ++m) {
    const Index row = mask[m];
    if (row < 0 || row >= z.rows()) throw DimensionError("softmax_cross_entropy: mask index out of range");
    const int label = labels[row];
    if (label < 0 || label >= k) throw DimensionError("softmax_cross_entropy: label out of range");
    const double top = z.row(row).maxCoeff();
    const RowVectorXd shifted = z.row(row).array() - top;
    const double log_norm = std::log(shifted.array().exp().sum());
    loss -= shifted(label) - log_norm;
    probs.row(static_cast<Index>(m)) = (shifted.array() - log_norm).exp();
  }
  const double inv = 1.0 / static_cast<double>(mask.size());
  MatrixXd out(1, 1);
  out(0, 0) = loss * inv;
  std::vector<Index> rows(mask.begin(), mask.end());
  std::vector<int> targets;
  targets.reserve(rows.size());
  for (auto r : rows) targets.push_back(labels[r]);
  return logits.tape().record(std::move(out), {logits},
                              [logits, rows = std::move(rows), targets = std::move(targets),
                               probs = std::move(probs), inv](Tape& tape, const MatrixXd& g) {
                                MatrixXd d = MatrixXd::Zero(logits.rows(), logits.cols());
                                for (std::size_t m = 0; m < rows.size(); ++m) {
                                  auto row = d.row(rows[m]);
                                  row += probs.row(static_cast<Index>(m));
                                  row(targets[m]) -= 1.0;
                                }
                                tape.accumulate(logits, d * (g(0, 0) * inv));
                              });
}

void adam_step(std::span<Parameter* const> params, AdamState& state) {
  const auto& o = state.options;
  if (state.first_moment.empty()) {
    for (const auto* p : params) {
      state.first_moment.push_back(MatrixXd::Zero(p->value.rows(), p->value.cols()));
      state.second_moment.push_back(MatrixXd::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw DimensionError("adam_step: parameter count changed");
  ++state.step;
  const double correction1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw DimensionError("adam_step: accumulator shape differs from parameter '" + p.name + "'");
    }
    MatrixXd g = p.grad;
    if (p.decay && o.weight_decay != 0.0) g += o.weight_decay * p.value;
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g.cwiseProduct(g);
    const auto m_hat = m.array() / correction1;
    const auto v_hat = v.array() / correction2;
    p.value.array() -= o.lr * m_hat / (v_hat.sqrt() + o.eps);
  }
}

MatrixXd glorot_init(Index rows, Index cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  MatrixXd w(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) w(i, j) = rng.uniform(-bound, bound);
  }
  return w;
}

}  // namespace dropedge
