#include "dropedge/autodiff.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace dropedge;

namespace {

constexpr double kStep = 1e-4;
constexpr double kTol = 1e-4;

// <out, r>: a scalar that sees every entry of `out`.
Tensor weighted_sum(const Tensor& out, const MatrixXd& r) {
  MatrixXd v(1, 1);
  v(0, 0) = out.value().cwiseProduct(r).sum();
  return out.tape().record(std::move(v), {out},
                           [out, r](Tape& tape, const MatrixXd& g) { tape.accumulate(out, r * g(0, 0)); });
}

// Builds op(inputs) on a fresh tape, returns <op, r> and the analytic
// gradient of every input, then compares each against central differences.
using Op = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

void check_gradients(const Op& op, const std::vector<MatrixXd>& inputs, std::uint64_t seed = 1) {
  Rng rng(seed);
  MatrixXd r;
  std::vector<MatrixXd> analytic;
  {
    Tape tape;
    std::vector<Tensor> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    const Tensor out = op(tape, vars);
    r = MatrixXd::NullaryExpr(out.rows(), out.cols(), [&] { return rng.uniform(-1.0, 1.0); });
    const Tensor loss = weighted_sum(out, r);
    tape.backward(loss);
    for (const auto& v : vars) {
      analytic.push_back(v.grad().size() ? v.grad() : MatrixXd::Zero(v.rows(), v.cols()));
    }
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const MatrixXd& xk) {
      Tape tape;
      std::vector<Tensor> vars;
      for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.variable(i == k ? xk : inputs[i]));
      return op(tape, vars).value().cwiseProduct(r).sum();
    };
    const MatrixXd numeric = oracle::numeric_gradient(f, inputs[k], kStep);
    INFO("input " << k);
    CHECK(oracle::relative_error(analytic[k], numeric) < kTol);
  }
}

MatrixXd random_matrix(Index r, Index c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return MatrixXd::NullaryExpr(r, c, [&] { return rng.uniform(lo, hi); });
}

// Entries bounded away from the ReLU kink.
MatrixXd away_from_zero(Index r, Index c, Rng& rng) {
  return MatrixXd::NullaryExpr(r, c, [&] {
    const double m = rng.uniform(0.1, 1.0);
    return rng.bernoulli(0.5) ? m : -m;
  });
}

}  // namespace

TEST_CASE("matmul gradient") {
  Rng rng(1);
  check_gradients([](Tape&, std::vector<Tensor>& v) { return matmul(v[0], v[1]); },
                  {random_matrix(4, 3, rng), random_matrix(3, 5, rng)});
}

TEST_CASE("spmm gradient") {
  Rng rng(2);
  const auto a = std::make_shared<const SparseMatrix>(
      normalize(oracle::random_graph(6, 0.5, rng), NormalizationScheme::AugNormAdj));
  check_gradients([a](Tape&, std::vector<Tensor>& v) { return spmm(a, v[0]); }, {random_matrix(6, 3, rng)});
  // Asymmetric operand exercises the transpose in backward.
  const auto rw = std::make_shared<const SparseMatrix>(
      normalize(oracle::random_graph(6, 0.5, rng), NormalizationScheme::AugRWalk));
  check_gradients([rw](Tape&, std::vector<Tensor>& v) { return spmm(rw, v[0]); }, {random_matrix(6, 2, rng)});
}

TEST_CASE("add and add_bias gradients") {
  Rng rng(3);
  check_gradients([](Tape&, std::vector<Tensor>& v) { return add(v[0], v[1]); },
                  {random_matrix(3, 4, rng), random_matrix(3, 4, rng)});
  check_gradients([](Tape&, std::vector<Tensor>& v) { return add_bias(v[0], v[1]); },
                  {random_matrix(5, 3, rng), random_matrix(1, 3, rng)});
  // Same tensor on both sides accumulates twice.
  check_gradients([](Tape&, std::vector<Tensor>& v) { return add(v[0], v[0]); }, {random_matrix(2, 2, rng)});
}

TEST_CASE("relu gradient") {
  Rng rng(4);
  check_gradients([](Tape&, std::vector<Tensor>& v) { return relu(v[0]); }, {away_from_zero(4, 4, rng)});
}

TEST_CASE("concat_cols gradient") {
  Rng rng(5);
  check_gradients(
      [](Tape&, std::vector<Tensor>& v) {
        const std::vector<Tensor> parts{v[0], v[1], v[2]};
        return concat_cols(parts);
      },
      {random_matrix(3, 2, rng), random_matrix(3, 1, rng), random_matrix(3, 4, rng)});
}

TEST_CASE("sum gradient") {
  Rng rng(6);
  check_gradients([](Tape&, std::vector<Tensor>& v) { return sum(v[0]); }, {random_matrix(3, 3, rng)});
}

TEST_CASE("dropout gradient under a fixed mask") {
  Rng rng(7);
  check_gradients(
      [](Tape&, std::vector<Tensor>& v) {
        Rng mask_rng(123);
        return dropout(v[0], 0.4, mask_rng, true);
      },
      {random_matrix(6, 5, rng)});
}

TEST_CASE("batch norm input gradient") {
  Rng rng(8);
  const MatrixXd x = random_matrix(7, 3, rng);
  for (bool training : {true, false}) {
    INFO("training " << training);
    BatchNorm bn(3);
    bn.scale.value << 1.2, 0.7, -0.4;
    bn.shift.value << 0.1, 0.0, -0.3;
    check_gradients(
        [training, &bn](Tape&, std::vector<Tensor>& v) {
          bn.running_mean << 0.1, -0.2, 0.3;
          bn.running_var << 0.5, 1.5, 2.0;
          return batch_norm(v[0], bn, training);
        },
        {x});
  }
}

TEST_CASE("batch norm parameter gradients") {
  Rng rng(9);
  const MatrixXd x = random_matrix(6, 2, rng);
  MatrixXd r = random_matrix(6, 2, rng);
  for (bool training : {true, false}) {
    BatchNorm bn(2);
    bn.running_mean << 0.2, -0.1;
    bn.running_var << 0.7, 1.3;
    bn.scale.value << 1.2, 0.8;
    bn.shift.value << -0.3, 0.4;
    auto loss_of = [&](const MatrixXd& scale, const MatrixXd& shift) {
      BatchNorm copy = bn;
      copy.scale.value = scale;
      copy.shift.value = shift;
      Tape tape;
      return batch_norm(tape.constant(x), copy, training).value().cwiseProduct(r).sum();
    };
    BatchNorm live = bn;
    live.scale.zero_grad();
    live.shift.zero_grad();
    {
      Tape tape;
      tape.backward(weighted_sum(batch_norm(tape.constant(x), live, training), r));
    }
    const MatrixXd num_scale =
        oracle::numeric_gradient([&](const MatrixXd& s) { return loss_of(s, bn.shift.value); }, bn.scale.value);
    const MatrixXd num_shift =
        oracle::numeric_gradient([&](const MatrixXd& s) { return loss_of(bn.scale.value, s); }, bn.shift.value);
    CHECK(oracle::relative_error(live.scale.grad, num_scale) < kTol);
    CHECK(oracle::relative_error(live.shift.grad, num_shift) < kTol);
  }
}

TEST_CASE("batch norm running statistics") {
  MatrixXd x(4, 2);
  x << 1, 2, 3, 2, 5, 2, 7, 2;
  BatchNorm bn(2);
  Tape tape;
  const Tensor y = batch_norm(tape.constant(x), bn, true);
  CHECK(bn.running_mean(0) == doctest::Approx(0.1 * 4.0));
  CHECK(bn.running_mean(1) == doctest::Approx(0.1 * 2.0));
  // Unbiased variance of {1,3,5,7} is 20/3.
  CHECK(bn.running_var(0) == doctest::Approx(0.9 + 0.1 * 20.0 / 3.0));
  CHECK(bn.running_var(1) == doctest::Approx(0.9));
  CHECK(std::abs(y.value().col(0).mean()) < 1e-12);
  CHECK(y.value().col(1).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("softmax cross entropy") {
  Rng rng(10);
  const std::vector<int> labels{0, 2, 1, 2, 0};
  const std::vector<Index> mask{0, 2, 3};
  check_gradients(
      [&](Tape&, std::vector<Tensor>& v) {
        const Tensor l = softmax_cross_entropy(v[0], labels, mask);
        return l;
      },
      {random_matrix(5, 3, rng, -3.0, 3.0)});

  Tape tape;
  MatrixXd z = MatrixXd::Zero(2, 4);
  const Tensor loss = softmax_cross_entropy(tape.constant(z), std::vector<int>{1, 3}, std::vector<Index>{0, 1});
  CHECK(loss.value()(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK_THROWS_AS(softmax_cross_entropy(tape.constant(z), std::vector<int>{1, 7}, std::vector<Index>{1}),
                  DimensionError);
  CHECK_THROWS_AS(softmax_cross_entropy(tape.constant(z), std::vector<int>{1, 3}, std::vector<Index>{}),
                  DomainError);
}

TEST_CASE("composite expression gradient") {
  Rng rng(11);
  const auto a = std::make_shared<const SparseMatrix>(
      normalize(oracle::random_graph(5, 0.5, rng), NormalizationScheme::AugNormAdj));
  check_gradients(
      [a](Tape&, std::vector<Tensor>& v) {
        const Tensor h = relu(add_bias(spmm(a, matmul(v[0], v[1])), v[2]));
        const std::vector<Tensor> parts{h, v[0]};
        return matmul(concat_cols(parts), v[3]);
      },
      {away_from_zero(5, 3, rng), random_matrix(3, 4, rng), random_matrix(1, 4, rng), random_matrix(7, 2, rng)});
}

TEST_CASE("tape contracts") {
  Tape tape;
  const Tensor x = tape.variable(MatrixXd::Ones(2, 2));
  CHECK_THROWS_AS(tape.backward(x), ContractError);
  const Tensor s = sum(x);
  tape.backward(s);
  CHECK(x.grad() == MatrixXd::Ones(2, 2));
  CHECK_THROWS_AS(tape.backward(s), ContractError);

  Tape other;
  const Tensor y = other.variable(MatrixXd::Ones(2, 2));
  CHECK_THROWS_AS(add(x, y), ContractError);
  CHECK_THROWS_AS(matmul(x, other.variable(MatrixXd::Ones(3, 1))), ContractError);

  Tape t3;
  const Tensor c = t3.constant(MatrixXd::Ones(2, 3));
  CHECK_FALSE(sum(c).requires_grad());
  CHECK_THROWS_AS(matmul(c, t3.constant(MatrixXd::Ones(2, 2))), DimensionError);
}

TEST_CASE("parameter gradients accumulate across tapes") {
  Parameter w("w", MatrixXd::Constant(2, 2, 3.0));
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    tape.backward(sum(tape.parameter(w)));
  }
  CHECK(w.grad == MatrixXd::Constant(2, 2, 2.0));
  w.zero_grad();
  CHECK(w.grad.isZero());
}

TEST_CASE("dropout law") {
  Rng rng(12);
  Tape tape;
  const MatrixXd ones = MatrixXd::Ones(200, 200);
  const Tensor x = tape.constant(ones);
  CHECK(dropout(x, 0.5, rng, false).value() == ones);
  CHECK(dropout(x, 0.0, rng, true).value() == ones);
  const MatrixXd y = dropout(x, 0.25, rng, true).value();
  const double kept = (y.array() != 0.0).cast<double>().mean();
  CHECK(kept == doctest::Approx(0.75).epsilon(0.02));
  CHECK(y.maxCoeff() == doctest::Approx(1.0 / 0.75));
  CHECK(y.mean() == doctest::Approx(1.0).epsilon(0.03));
  CHECK_THROWS_AS(dropout(x, 1.0, rng, true), DomainError);

  const auto sparse = SparseMatrix::from_dense(MatrixXd::Identity(500, 500));
  const auto dropped = dropout(sparse, 0.5, rng, true);
  CHECK(dropped.nnz() < 300);
  CHECK(dropped.nnz() > 200);
  for (double v : dropped.values()) CHECK(v == 2.0);
  CHECK(dropout(sparse, 0.5, rng, false) == sparse);
}

TEST_CASE("adam step matches the update rule") {
  Parameter w("w", MatrixXd::Constant(1, 2, 1.0));
  Parameter b("b", MatrixXd::Constant(1, 1, 1.0), false);
  AdamState state(AdamOptions{.lr = 0.1, .weight_decay = 0.5});
  std::vector<Parameter*> params{&w, &b};
  w.grad << 0.2, -0.4;
  b.grad << 0.3;
  adam_step(params, state);
  // First step: m_hat = g, v_hat = g^2, so the move is lr * sign(g) up to eps.
  const double g0 = 0.2 + 0.5 * 1.0, g1 = -0.4 + 0.5 * 1.0;
  CHECK(w.value(0, 0) == doctest::Approx(1.0 - 0.1 * g0 / (std::abs(g0) + 1e-8)));
  CHECK(w.value(0, 1) == doctest::Approx(1.0 - 0.1 * g1 / (std::abs(g1) + 1e-8)));
  CHECK(b.value(0, 0) == doctest::Approx(1.0 - 0.1));

  // Second step against a hand-rolled recursion.
  w.grad << 0.1, 0.1;
  b.grad << -0.2;
  const double w0 = w.value(0, 0);
  const double g2 = 0.1 + 0.5 * w0;
  const double m = 0.9 * (0.1 * g0) + 0.1 * g2;
  const double v = 0.999 * (0.001 * g0 * g0) + 0.001 * g2 * g2;
  const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
  adam_step(params, state);
  CHECK(w.value(0, 0) == doctest::Approx(w0 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8)));

  Parameter fixed("f", MatrixXd::Ones(2, 2));
  AdamState frozen(AdamOptions{.lr = 0.0, .weight_decay = 0.1});
  std::vector<Parameter*> one{&fixed};
  fixed.grad.setConstant(5.0);
  adam_step(one, frozen);
  CHECK(fixed.value == MatrixXd::Ones(2, 2));
}

TEST_CASE("glorot init stays in bounds") {
  Rng rng(13);
  const MatrixXd w = glorot_init(30, 20, rng);
  const double bound = std::sqrt(6.0 / 50.0);
  CHECK(w.cwiseAbs().maxCoeff() <= bound);
  CHECK(w.cwiseAbs().maxCoeff() > 0.9 * bound);
  CHECK(std::abs(w.mean()) < 0.05);
}
