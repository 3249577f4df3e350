#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <numbers>
#include <vector>

#include "cmdret/errors.hpp"
#include "cmdret/numerics/gradcheck.hpp"
#include "cmdret/numerics/ops.hpp"
#include "cmdret/numerics/tape.hpp"
#include "cmdret/numerics/tensor.hpp"
#include "cmdret/params.hpp"
#include "cmdret/rng.hpp"
#include "test_util.hpp"

using namespace cmdret;
using test::op_gradient_error;
using test::random_tensor;

namespace {

constexpr double kOpGradTol = 1e-6;

std::vector<double> brute_softmax(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += e[i] = std::exp(x[i] - mx);
  for (double& v : e) v /= z;
  return e;
}

}  // namespace

TEST(Tensor, RejectsZeroExtentAndLengthMismatch) {
  EXPECT_THROW(Tensor(Shape{0, 3}), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), DimensionError);
}

TEST(Tensor, ScalarAndMatrixViews) {
  const Tensor s = Tensor::scalar(2.5);
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.item(), 2.5);
  const Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_THROW(m.item(), ContractError);
  EXPECT_THROW(m.reshaped(Shape{4}), DimensionError);
  EXPECT_EQ(m.reshaped(Shape{3, 2})(2, 1), 6.0);
}

TEST(Tensor, SoftmaxAlongEachAxisMatchesBruteForce) {
  Rng rng(3);
  const Tensor x = random_tensor(Shape{3, 4, 5}, rng, 3.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const Tensor y = softmax(x, axis);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t c = 0; c < 5; ++c) {
          std::vector<double> line;
          const std::size_t len = x.dim(axis);
          std::size_t pos = axis == 0 ? a : axis == 1 ? b : c;
          for (std::size_t k = 0; k < len; ++k) {
            const std::size_t i = axis == 0 ? k : a, j = axis == 1 ? k : b, l = axis == 2 ? k : c;
            line.push_back(x[(i * 4 + j) * 5 + l]);
          }
          EXPECT_NEAR(y[(a * 4 + b) * 5 + c], brute_softmax(line)[pos], 1e-15);
        }
  }
}

TEST(Tensor, SoftmaxSurvivesHugeLogits) {
  const Tensor y = softmax(Tensor::vector({1000.0, 1000.0, -1000.0}), 0);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
  EXPECT_EQ(y[2], 0.0);
}

TEST(Tape, BackwardContract) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(tape.backward(x), ContractError);
  Var s = ops::sum(ops::mul(x, x));
  tape.backward(s);
  EXPECT_THROW(tape.backward(s), StateError);
  EXPECT_EQ(tape.grad(x)[0], 2.0);
  EXPECT_EQ(tape.grad(x)[1], 4.0);
  tape.reset();
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tape, FanOutAccumulates) {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0));
  Var y = ops::add(ops::mul(x, x), ops::scale(x, 2.0));
  tape.backward(y);
  EXPECT_EQ(tape.grad(x).item(), 8.0);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape tape;
  Var c = tape.constant(Tensor::scalar(3.0));
  Var x = tape.leaf(Tensor::scalar(2.0));
  tape.backward(ops::mul(c, x));
  EXPECT_FALSE(tape.has_grad(c));
  EXPECT_EQ(tape.grad(x).item(), 3.0);
  EXPECT_THROW(tape.grad(c), StateError);
}

TEST(OpsGradient, Elementwise) {
  Rng rng(1);
  const Tensor a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{3, 4}, rng);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::add(v[0], v[1]); }, {a, b}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::sub(v[0], v[1]); }, {a, b}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::mul(v[0], v[1]); }, {a, b}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::scale(v[0], -1.7); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([&](Tape&, auto& v) { return ops::mul_const(v[0], b); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([&](Tape&, auto& v) { return ops::add_const(v[0], b); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::exp(v[0]); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::gelu(v[0]); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::mul_scalar(v[0], v[1]); },
                              {a, Tensor::scalar(0.7)}),
            kOpGradTol);
}

TEST(OpsGradient, ReductionsAndShapes) {
  Rng rng(2);
  const Tensor a = random_tensor(Shape{3, 4}, rng);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::sum(v[0]); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::mean(v[0]); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::transpose(v[0]); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::reshape(v[0], Shape{2, 6}); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::slice_rows(v[0], 1, 2); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::slice_cols(v[0], 1, 2); }, {a}), kOpGradTol);
  const Tensor b = random_tensor(Shape{2, 4}, rng), c = random_tensor(Shape{3, 2}, rng);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::concat_rows({v[0], v[1]}); }, {a, b}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::concat_cols({v[0], v[1]}); }, {a, c}), kOpGradTol);
}

TEST(OpsGradient, LinearAlgebra) {
  Rng rng(3);
  const Tensor a = random_tensor(Shape{3, 4}, rng), b = random_tensor(Shape{4, 5}, rng);
  const Tensor bias = random_tensor(Shape{5}, rng), x3 = random_tensor(Shape{2, 3, 4}, rng);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::matmul(v[0], v[1]); }, {a, b}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::linear(v[0], v[1], v[2]); }, {a, b, bias}),
            kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::linear(v[0], v[1], v[2]); }, {x3, b, bias}),
            kOpGradTol);
}

TEST(OpsGradient, NormalizersAndSoftmax) {
  Rng rng(4);
  const Tensor a = random_tensor(Shape{3, 5}, rng, 2.0);
  const Tensor g = random_tensor(Shape{5}, rng), b = random_tensor(Shape{5}, rng);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::softmax_rows(v[0]); }, {a}), kOpGradTol);
  const std::vector<bool> mask{true, false, true, true, false};
  EXPECT_LT(op_gradient_error([&](Tape&, auto& v) { return ops::softmax_rows(v[0], &mask); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::log_softmax_rows(v[0]); }, {a}), kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::layer_norm(v[0], v[1], v[2]); }, {a, g, b}),
            kOpGradTol);
  EXPECT_LT(op_gradient_error([](Tape&, auto& v) { return ops::l2_normalize_rows(v[0]); }, {a}), kOpGradTol);
  const std::vector<Tensor> layers{random_tensor(Shape{3, 2}, rng), random_tensor(Shape{3, 2}, rng)};
  EXPECT_LT(op_gradient_error([&](Tape&, auto& v) { return ops::weighted_sum(v[0], layers); },
                              {Tensor::vector({0.3, 0.7})}),
            kOpGradTol);
}

TEST(OpsGradient, ClampMaxBlocksGradientAboveCap) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 5.0}));
  tape.backward(ops::sum(ops::clamp_max(x, 2.0)));
  EXPECT_EQ(tape.grad(x)[0], 1.0);
  EXPECT_EQ(tape.grad(x)[1], 0.0);
}

TEST(OpsForward, MatmulMatchesTripleLoop) {
  Rng rng(5);
  const Tensor a = random_tensor(Shape{4, 3}, rng), b = random_tensor(Shape{3, 6}, rng);
  Tape tape;
  const Tensor c = ops::matmul(tape.constant(a), tape.constant(b)).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-14);
    }
  EXPECT_THROW(ops::matmul(tape.constant(a), tape.constant(a)), DimensionError);
}

TEST(OpsForward, MaskedSoftmaxGivesExactZeros) {
  Tape tape;
  const std::vector<bool> mask{true, true, false};
  const Tensor y = ops::softmax_rows(tape.constant(Tensor::matrix({{0.0, 0.0, 50.0}})), &mask).value();
  EXPECT_EQ(y(0, 2), 0.0);
  EXPECT_DOUBLE_EQ(y(0, 0), 0.5);
  const std::vector<bool> none{false, false, false};
  EXPECT_THROW(ops::softmax_rows(tape.constant(Tensor::matrix({{0.0, 0.0, 0.0}})), &none), DataError);
}

TEST(OpsForward, LogSoftmaxIsStableAndConsistent) {
  Tape tape;
  const Tensor x = Tensor::matrix({{800.0, 0.0, -800.0}, {0.1, 0.2, 0.3}});
  const Tensor ls = ops::log_softmax_rows(tape.constant(x)).value();
  EXPECT_NEAR(ls(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(ls(0, 1), -800.0, 1e-12);
  for (std::size_t j = 0; j < 3; ++j) {
    const auto p = brute_softmax({0.1, 0.2, 0.3});
    EXPECT_NEAR(ls(1, j), std::log(p[j]), 1e-15);
  }
}

TEST(OpsForward, LayerNormMatchesHandComputation) {
  Tape tape;
  const Tensor x = Tensor::matrix({{1.0, 2.0, 3.0, 6.0}});
  const Tensor g = Tensor::vector({1.0, 2.0, 1.0, 1.0}), b = Tensor::vector({0.0, 0.0, 1.0, 0.0});
  const Tensor y = ops::layer_norm(tape.constant(x), tape.constant(g), tape.constant(b)).value();
  const double mu = 3.0, var = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
  const double inv = 1.0 / std::sqrt(var + ops::kLayerNormEps);
  EXPECT_NEAR(y(0, 0), (1.0 - mu) * inv, 1e-15);
  EXPECT_NEAR(y(0, 1), 2.0 * (2.0 - mu) * inv, 1e-15);
  EXPECT_NEAR(y(0, 2), 1.0, 1e-15);
  EXPECT_NEAR(y(0, 3), (6.0 - mu) * inv, 1e-15);
  EXPECT_THROW(ops::layer_norm(tape.constant(x), tape.constant(Tensor::vector({1, 1})), tape.constant(b)),
               DimensionError);
}

TEST(OpsForward, GeluKnownValues) {
  Tape tape;
  const Tensor y = ops::gelu(tape.constant(Tensor::vector({0.0, 1.0, -1.0}))).value();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.8413447460685429, 1e-15);
  EXPECT_NEAR(y[2], -0.15865525393145707, 1e-15);
}

TEST(OpsForward, L2NormalizeRows) {
  Tape tape;
  const Tensor y = ops::l2_normalize_rows(tape.constant(Tensor::matrix({{3.0, 4.0}, {0.0, -2.0}}))).value();
  EXPECT_DOUBLE_EQ(y(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(y(0, 1), 0.8);
  EXPECT_DOUBLE_EQ(y(1, 1), -1.0);
  EXPECT_THROW(ops::l2_normalize_rows(tape.constant(Tensor::matrix({{0.0, 0.0}}))), DataError);
}

TEST(Rng, DeterministicAndStreamSeparated) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  Rng s1(42, Stream::noise), s2(42, Stream::shuffle);
  EXPECT_NE(s1.next(), s2.next());
  EXPECT_NE(mix_seed(1, 2), mix_seed(2, 1));
}

TEST(Rng, BelowIsInRangeAndRoughlyUniform) {
  Rng rng(9);
  std::vector<int> counts(7, 0);
  const int draws = 70000;
  for (int i = 0; i < draws; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    ++counts[v];
  }
  for (int c : counts) EXPECT_NEAR(c, draws / 7, 400);
}

TEST(Rng, NormalMoments) {
  Rng rng(11);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Params, RegistrationAndBinding) {
  ParamStore store;
  store.add("w", Tensor::vector({1.0, 2.0}), ParamGroup::encoder, true);
  EXPECT_THROW(store.add("w", Tensor::scalar(0.0), ParamGroup::encoder, false), ContractError);
  EXPECT_THROW(store.at("missing"), ContractError);
  Tape tape;
  Binding frozen(tape, store, false);
  tape.backward(ops::sum(frozen["w"]));
  EXPECT_TRUE(frozen.grads().empty());
  EXPECT_THROW(frozen["nope"], ContractError);
}

namespace {

ParamStore quadratic_params() {
  ParamStore store;
  store.add("a", Tensor::vector({0.3, -1.2, 2.0}), ParamGroup::encoder, true);
  store.add("t", Tensor::scalar(0.5), ParamGroup::temperature, false);
  return store;
}

Var quadratic(Tape&, const Binding& p) {
  return ops::mul_scalar(ops::sum(ops::mul(p["a"], p["a"])), ops::exp(p["t"]));
}

}  // namespace

TEST(GradCheck, PassesOnCorrectRulesAndRestoresParams) {
  ParamStore store = quadratic_params();
  const ParamStore before = store;
  const GradCheckReport rep = finite_diff_check(quadratic, store);
  EXPECT_TRUE(rep.passed()) << rep.summary();
  EXPECT_LT(rep.worst().max_rel_error, 1e-8);
  EXPECT_TRUE(store == before);
  EXPECT_EQ(rep.by_group().size(), 2u);
}

TEST(GradCheck, DetectsInjectedFaultAndNamesParameter) {
  ParamStore store = quadratic_params();
  const Objective faulty = [](Tape& tape, const Binding& p) {
    Binding routed = p;
    routed.reroute("t", cmdret::testing::faulty_identity(p["t"]));
    return quadratic(tape, routed);
  };
  const GradCheckReport rep = finite_diff_check(faulty, store);
  EXPECT_FALSE(rep.passed());
  EXPECT_EQ(rep.worst().name, "t");
  EXPECT_NEAR(rep.worst().max_rel_error, 1.0 / 3.0, 1e-6);
}

TEST(GradCheck, RejectsNondeterministicObjective) {
  ParamStore store = quadratic_params();
  int calls = 0;
  const Objective drifting = [&](Tape& tape, const Binding& p) {
    ++calls;
    return ops::add(quadratic(tape, p), tape.constant(Tensor::scalar(1e-9 * calls)));
  };
  EXPECT_THROW(finite_diff_check(drifting, store), NumericError);
}

TEST(GradCheck, UnreachedParametersGetZeroGradient) {
  ParamStore store = quadratic_params();
  store.add("unused", Tensor::vector({1.0}), ParamGroup::fusion, true);
  const GradMap g = objective_gradients(quadratic, store);
  EXPECT_EQ(g.at("unused")[0], 0.0);
  const GradCheckReport rep = finite_diff_check(quadratic, store);
  EXPECT_TRUE(rep.passed());
}

TEST(Tape, ValueReferencesSurviveGrowth) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0, 3.0}));
  const Tensor& held = x.value();
  const double* first = held.data().data();
  for (int i = 0; i < 5000; ++i) ops::scale(x, 1.0);
  EXPECT_EQ(held.data().data(), first);
  EXPECT_EQ(held[2], 3.0);
}
