#include "setcls/gradcheck.hpp"
#include "setcls/ops.hpp"
#include "setcls/optimizer.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

namespace setcls {
namespace {

using testing::numeric_gradient;
using testing::random_tensor;
using testing::rel_error;

TEST(Linear, ZeroInputGivesBias) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{3, 2}));
  auto w = tape.constant(Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  auto b = tape.constant(Tensor<double>::vector({0.5, -1, 2}));
  auto y = linear(x, w, b).value();
  ASSERT_EQ(y.shape(), (Shape{3, 3}));
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(y.at(r, 0), 0.5);
    EXPECT_EQ(y.at(r, 1), -1.0);
    EXPECT_EQ(y.at(r, 2), 2.0);
  }
}

TEST(Linear, IdentityWeights) {
  Rng rng(1);
  Tape<double> tape;
  auto xv = random_tensor({4, 3}, rng);
  auto x = tape.constant(xv);
  auto w = tape.constant(Tensor<double>::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  auto b = tape.constant(Tensor<double>(Shape{3}));
  EXPECT_EQ(linear(x, w, b).value(), xv);
}

TEST(Linear, ShapeMismatchRejected) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{2, 3}));
  auto w = tape.constant(Tensor<double>(Shape{4, 2}));
  auto b = tape.constant(Tensor<double>(Shape{2}));
  EXPECT_THROW(linear(x, w, b), std::invalid_argument);
  auto w2 = tape.constant(Tensor<double>(Shape{3, 2}));
  auto b2 = tape.constant(Tensor<double>(Shape{3}));
  EXPECT_THROW(linear(x, w2, b2), std::invalid_argument);
}

TEST(Linear, HigherRankInputKeepsLeadingAxes) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{2, 5, 3}, 1.0));
  auto w = tape.constant(Tensor<double>(Shape{3, 4}, 1.0));
  auto b = tape.constant(Tensor<double>(Shape{4}));
  auto y = linear(x, w, b).value();
  EXPECT_EQ(y.shape(), (Shape{2, 5, 4}));
  EXPECT_EQ(y[0], 3.0);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> xv = random_tensor({5, 4}, rng), wv = random_tensor({4, 3}, rng),
                   bv = random_tensor({3}, rng), probe = random_tensor({5, 3}, rng);
    auto loss_of = [&] {
      Tape<double> t;
      auto y = linear(t.frozen(xv), t.frozen(wv), t.frozen(bv));
      return sum(mul(y, t.frozen(probe))).value()[0];
    };
    Tape<double> tape;
    auto x = tape.input(xv), w = tape.input(wv), b = tape.input(bv);
    tape.backward(sum(mul(linear(x, w, b), tape.constant(probe))));
    EXPECT_LT(rel_error(tape.grad(x).values(), numeric_gradient(xv, loss_of)), 1e-6);
    EXPECT_LT(rel_error(tape.grad(w).values(), numeric_gradient(wv, loss_of)), 1e-6);
    EXPECT_LT(rel_error(tape.grad(b).values(), numeric_gradient(bv, loss_of)), 1e-6);
  }
}

TEST(Linear, WithoutBiasMatchesZeroBias) {
  Rng rng(8);
  Tensor<double> xv = random_tensor({5, 4}, rng), wv = random_tensor({4, 3}, rng), probe = random_tensor({5, 3}, rng);
  Tape<double> tape;
  EXPECT_EQ(linear(tape.constant(xv), tape.constant(wv)).value(),
            linear(tape.constant(xv), tape.constant(wv), tape.constant(Tensor<double>(Shape{3}))).value());
  auto loss_of = [&] {
    Tape<double> t;
    return sum(mul(linear(t.frozen(xv), t.frozen(wv)), t.frozen(probe))).value()[0];
  };
  auto x = tape.input(xv), w = tape.input(wv);
  tape.backward(sum(mul(linear(x, w), tape.constant(probe))));
  EXPECT_LT(rel_error(tape.grad(x).values(), numeric_gradient(xv, loss_of)), 1e-6);
  EXPECT_LT(rel_error(tape.grad(w).values(), numeric_gradient(wv, loss_of)), 1e-6);
}

Tensor<double> softmax_of(std::vector<double> row) {
  Tape<double> tape;
  return softmax(tape.constant(Tensor<double>::vector(std::move(row)))).value();
}

TEST(Softmax, AnalyticCases) {
  auto half = softmax_of({0, 0});
  EXPECT_EQ(half[0], 0.5);
  EXPECT_EQ(half[1], 0.5);
  auto thirds = softmax_of({std::numbers::ln2, 0});
  EXPECT_NEAR(thirds[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(thirds[1], 1.0 / 3.0, 1e-15);
  auto extreme = softmax_of({1000, 0});
  EXPECT_TRUE(extreme.all_finite());
  EXPECT_NEAR(extreme[0], 1.0, 1e-15);
  EXPECT_NEAR(extreme[1], 0.0, 1e-15);
}

TEST(Softmax, EmptyAxisRejected) {
  Tape<double> tape;
  EXPECT_THROW(softmax(tape.constant(Tensor<double>(Shape{3, 0}))), std::invalid_argument);
}

TEST(Softmax, RowsAreDistributionsAtAnyMagnitude) {
  Rng rng(3);
  for (double scale : {1e-30, 1e-3, 1.0, 30.0, 1e3, 1e30}) {
    Tape<double> tape;
    auto p = softmax(tape.constant(random_tensor({6, 9}, rng, scale))).value();
    ASSERT_TRUE(p.all_finite()) << scale;
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 9; ++c) {
        EXPECT_GE(p.at(r, c), 0.0);
        EXPECT_LE(p.at(r, c), 1.0);
        s += p.at(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, LogSoftmaxMatchesLogOfSoftmax) {
  Rng rng(4);
  Tape<double> tape;
  auto x = tape.constant(random_tensor({3, 5}, rng, 3.0));
  auto p = softmax(x).value();
  auto lp = log_softmax(x).value();
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(std::log(p[i]), lp[i], 1e-13);
}

TEST(LayerNorm, ConstantRowMapsToShift) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{2, 4}, 3.25));
  auto g = tape.constant(Tensor<double>(Shape{4}, 1.0));
  auto s = tape.constant(Tensor<double>::vector({0.1, -0.2, 0.3, 7}));
  auto y = layer_norm(x, g, s).value();
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(r, c), s.value()[c]);
  }
}

TEST(LayerNorm, NormalizedRowIsFixedPoint) {
  Tape<double> tape;
  auto y = layer_norm(tape.constant(Tensor<double>::vector({1, -1})),
                      tape.constant(Tensor<double>(Shape{2}, 1.0)), tape.constant(Tensor<double>(Shape{2})))
               .value();
  EXPECT_NEAR(y[0], 1.0, 1e-5);
  EXPECT_NEAR(y[1], -1.0, 1e-5);
}

TEST(LayerNorm, ExtremeMagnitudesStayFinite) {
  Rng rng(5);
  for (double scale : {1e-30, 1e30}) {
    Tape<double> tape;
    auto y = layer_norm(tape.constant(random_tensor({3, 8}, rng, scale)),
                        tape.constant(Tensor<double>(Shape{8}, 1.0)), tape.constant(Tensor<double>(Shape{8})))
                 .value();
    EXPECT_TRUE(y.all_finite()) << scale;
  }
  Tape<float> ftape;
  Tensor<float> big(Shape{1, 4});
  big.values() = {1e30f, -1e30f, 3e30f, 0.f};
  auto fy = layer_norm(ftape.constant(big), ftape.constant(Tensor<float>(Shape{4}, 1.f)),
                       ftape.constant(Tensor<float>(Shape{4})))
                .value();
  EXPECT_TRUE(fy.all_finite());
}

TEST(LayerNorm, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  Tensor<double> xv = random_tensor({4, 6}, rng, 2.0), gv = random_tensor({6}, rng),
                 sv = random_tensor({6}, rng), probe = random_tensor({4, 6}, rng);
  auto loss_of = [&] {
    Tape<double> t;
    return sum(mul(layer_norm(t.frozen(xv), t.frozen(gv), t.frozen(sv)), t.frozen(probe))).value()[0];
  };
  Tape<double> tape;
  auto x = tape.input(xv), g = tape.input(gv), s = tape.input(sv);
  tape.backward(sum(mul(layer_norm(x, g, s), tape.constant(probe))));
  EXPECT_LT(rel_error(tape.grad(x).values(), numeric_gradient(xv, loss_of)), 1e-6);
  EXPECT_LT(rel_error(tape.grad(g).values(), numeric_gradient(gv, loss_of)), 1e-6);
  EXPECT_LT(rel_error(tape.grad(s).values(), numeric_gradient(sv, loss_of)), 1e-6);
}

struct AttentionFixture {
  std::size_t d;
  std::vector<Tensor<double>> weights;  // wq bq wk bk wv bv wo bo

  AttentionFixture(std::size_t width, Rng& rng) : d(width) {
    for (int i = 0; i < 4; ++i) {
      weights.push_back(random_tensor({d, d}, rng, 0.5));
      weights.push_back(random_tensor({d}, rng, 0.1));
    }
  }

  AttentionVars<double> bind(Tape<double>& t, bool track, std::vector<Var<double>>* out = nullptr) {
    std::vector<Var<double>> v;
    for (auto& w : weights) v.push_back(track ? t.input(w) : t.frozen(w));
    if (out) *out = v;
    return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
  }
};

TEST(MultiHeadAttention, SingleTokenIsValueThenOutputProjection) {
  Rng rng(21);
  AttentionFixture f(8, rng);
  Tensor<double> token = random_tensor({1, 8}, rng);
  Tape<double> tape;
  auto w = f.bind(tape, false);
  auto x = tape.frozen(token);
  auto got = multi_head_attention(x, w, 2).value();
  auto expected = linear(linear(x, w.wv, w.bv), w.wo, w.bo).value();
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], expected[i], 1e-14);
}

TEST(MultiHeadAttention, PermutationEquivariantWithTokenZeroFixed) {
  Rng rng(22);
  AttentionFixture f(8, rng);
  Tensor<double> tokens = random_tensor({6, 8}, rng);
  const std::vector<std::size_t> perm{0, 3, 5, 1, 4, 2};
  Tensor<double> permuted(Shape{6, 8});
  for (std::size_t r = 0; r < 6; ++r) permuted.mat().row(r) = tokens.mat().row(perm[r]);
  Tape<double> tape;
  auto w = f.bind(tape, false);
  auto a = multi_head_attention(tape.frozen(tokens), w, 4).value();
  auto b = multi_head_attention(tape.frozen(permuted), w, 4).value();
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(b.at(r, c), a.at(perm[r], c), 1e-12);
  }
}

TEST(MultiHeadAttention, SegmentsDoNotInteract) {
  Rng rng(23);
  AttentionFixture f(8, rng);
  Tensor<double> first = random_tensor({3, 8}, rng), second = random_tensor({4, 8}, rng);
  Tensor<double> both(Shape{7, 8});
  both.mat().topRows(3) = first.mat();
  both.mat().bottomRows(4) = second.mat();
  Tape<double> tape;
  auto w = f.bind(tape, false);
  const std::size_t offsets[3] = {0, 3, 7};
  auto packed = multi_head_attention(tape.frozen(both), w, 2, offsets).value();
  auto alone = multi_head_attention(tape.frozen(second), w, 2).value();
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(packed.at(3 + r, c), alone.at(r, c), 1e-14);
  }
}

TEST(MultiHeadAttention, IndivisibleWidthRejected) {
  Rng rng(24);
  AttentionFixture f(8, rng);
  Tape<double> tape;
  auto w = f.bind(tape, false);
  EXPECT_THROW(multi_head_attention(tape.frozen(random_tensor({2, 8}, rng)), w, 3), std::invalid_argument);
}

TEST(MultiHeadAttention, GradientsMatchFiniteDifferences) {
  Rng rng(25);
  AttentionFixture f(8, rng);
  Tensor<double> xv = random_tensor({3, 8}, rng), probe = random_tensor({3, 8}, rng);
  auto loss_of = [&] {
    Tape<double> t;
    auto w = f.bind(t, false);
    return sum(mul(multi_head_attention(t.frozen(xv), w, 2), t.frozen(probe))).value()[0];
  };
  Tape<double> tape;
  std::vector<Var<double>> vars;
  auto w = f.bind(tape, true, &vars);
  auto x = tape.input(xv);
  tape.backward(sum(mul(multi_head_attention(x, w, 2), tape.constant(probe))));
  EXPECT_LT(rel_error(tape.grad(x).values(), numeric_gradient(xv, loss_of)), 1e-5);
  for (std::size_t i = 0; i < vars.size(); ++i) {
    EXPECT_LT(rel_error(tape.grad(vars[i]).values(), numeric_gradient(f.weights[i], loss_of)), 1e-5) << i;
  }
}

TEST(MultiHeadAttention, KeyBiasNeverChangesOutput) {
  Rng rng(26);
  AttentionFixture f(8, rng);
  const Tensor<double> xv = random_tensor({4, 8}, rng);
  const std::size_t offsets[3] = {0, 1, 4};
  Tape<double> tape;
  auto w = f.bind(tape, false);
  auto with_bias = multi_head_attention(tape.frozen(xv), w, 2, offsets).value();
  w.bk = Var<double>{};
  auto without = multi_head_attention(tape.frozen(xv), w, 2, offsets).value();
  for (std::size_t i = 0; i < without.size(); ++i) EXPECT_NEAR(with_bias[i], without[i], 1e-12);
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  Rng rng(31);
  Tape<double> tape;
  auto x = tape.input(random_tensor({2, 5}, rng));
  tape.backward(sum(softmax(x)));
  const Tensor<double> g = tape.grad(x);
  for (double v : g.values()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Backward, HalfSquaredNormGradientIsInput) {
  Rng rng(32);
  Tensor<double> xv = random_tensor({7}, rng);
  Tape<double> tape;
  auto x = tape.input(xv);
  tape.backward(scale(sum(mul(x, x)), 0.5));
  EXPECT_EQ(tape.grad(x), xv);
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> tape;
  auto x = tape.input(Tensor<double>(Shape{3}));
  EXPECT_THROW(tape.backward(x), std::invalid_argument);
}

TEST(Backward, RepeatedCallsAccumulateIntoParameters) {
  Parameter<double> p("w", Tensor<double>::vector({1.0, -2.0}));
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    auto w = tape.parameter(p);
    tape.backward(scale(sum(mul(w, w)), 0.5));
  }
  EXPECT_EQ(p.grad[0], 2.0);
  EXPECT_EQ(p.grad[1], -4.0);
  p.zero_grad();
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(Backward, NonFiniteForwardIsAnError) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::vector({1e300}));
  EXPECT_THROW(mul(x, x), std::domain_error);
}

TEST(Backward, RandomizedOpsMatchFiniteDifferences) {
  // Property: a random composition of every differentiable op agrees with
  // central differences.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    Tensor<double> xv = random_tensor({4, 6}, rng), wv = random_tensor({6, 6}, rng, 0.4),
                   bv = random_tensor({6}, rng), gv = random_tensor({6}, rng), sv = random_tensor({6}, rng);
    const std::vector<std::size_t> rows{3, 0, 0, 2};
    auto build = [&](Tape<double>& t, Var<double> x, Var<double> w, Var<double> b, Var<double> g,
                     Var<double> s) {
      auto h = layer_norm(add(x, relu(linear(x, w, b))), g, s);
      auto z = concat_rows(gather_rows(h, rows), scale(h, 0.7));
      return sum(mul(log_softmax(z), softmax(z)));
    };
    auto loss_of = [&] {
      Tape<double> t;
      return build(t, t.frozen(xv), t.frozen(wv), t.frozen(bv), t.frozen(gv), t.frozen(sv)).value()[0];
    };
    Tape<double> tape;
    auto x = tape.input(xv), w = tape.input(wv), b = tape.input(bv), g = tape.input(gv), s = tape.input(sv);
    tape.backward(build(tape, x, w, b, g, s));
    EXPECT_LT(rel_error(tape.grad(x).values(), numeric_gradient(xv, loss_of)), 1e-5);
    EXPECT_LT(rel_error(tape.grad(w).values(), numeric_gradient(wv, loss_of)), 1e-5);
    EXPECT_LT(rel_error(tape.grad(b).values(), numeric_gradient(bv, loss_of)), 1e-5);
    EXPECT_LT(rel_error(tape.grad(g).values(), numeric_gradient(gv, loss_of)), 1e-5);
    EXPECT_LT(rel_error(tape.grad(s).values(), numeric_gradient(sv, loss_of)), 1e-5);
  }
}

TEST(GradCheck, ReportsPerParameterErrors) {
  Parameter<double> p("w", Tensor<double>::vector({0.3, -0.4, 1.2}));
  std::vector<Parameter<double>*> params{&p};
  auto report = check_gradients(params, [&](bool accumulate) {
    Tape<double> t;
    auto w = accumulate ? t.parameter(p) : t.frozen(p.value);
    auto loss = sum(mul(softmax(w), w));
    if (accumulate) t.backward(loss);
    return loss.value()[0];
  });
  ASSERT_EQ(report.entries.size(), 1u);
  EXPECT_EQ(report.entries[0].name, "w");
  EXPECT_TRUE(report.passed(1e-7));
}

TEST(Optimizer, ZeroGradientsLeaveParametersUnchanged) {
  for (auto kind : {OptimizerKind::kAdam, OptimizerKind::kSgd}) {
    Parameter<double> p("w", Tensor<double>::vector({1.5, -2.0}));
    p.zero_grad();
    OptimizerConfig cfg;
    cfg.kind = kind;
    OptimizerState<double> state(cfg);
    std::vector<Parameter<double>*> params{&p};
    optimizer_step(state, params);
    EXPECT_EQ(p.value[0], 1.5);
    EXPECT_EQ(p.value[1], -2.0);
    EXPECT_EQ(state.step, 1u);
  }
}

TEST(Optimizer, PlainGradientDescentStep) {
  Parameter<double> p("w", Tensor<double>::vector({1.0}));
  p.grad = Tensor<double>::vector({1.0});  // d/dw 0.5 w^2 at w = 1
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::kSgd;
  cfg.learning_rate = 0.1;
  cfg.momentum = 0.0;
  OptimizerState<double> state(cfg);
  std::vector<Parameter<double>*> params{&p};
  optimizer_step(state, params);
  EXPECT_NEAR(p.value[0], 0.9, 1e-15);
}

TEST(Optimizer, MissingGradientRejected) {
  Parameter<double> p;
  p.name = "w";
  p.value = Tensor<double>::vector({1.0});
  OptimizerState<double> state;
  std::vector<Parameter<double>*> params{&p};
  EXPECT_THROW(optimizer_step(state, params), std::invalid_argument);
}

double run_quadratic(OptimizerConfig cfg, int steps) {
  // f(w) = 0.5 w^T diag(a) w, minimum at 0.
  const std::vector<double> a{1.0, 2.0, 0.5, 1.5};
  Parameter<double> p("w", Tensor<double>::vector({1.0, -0.8, 0.6, 0.9}));
  OptimizerState<double> state(cfg);
  std::vector<Parameter<double>*> params{&p};
  for (int s = 0; s < steps; ++s) {
    p.zero_grad();
    for (std::size_t i = 0; i < a.size(); ++i) p.grad[i] = a[i] * p.value[i];
    optimizer_step(state, params);
  }
  return p.value.mat().norm();
}

TEST(Optimizer, ConvergesOnConvexQuadratic) {
  OptimizerConfig sgd;
  sgd.kind = OptimizerKind::kSgd;
  sgd.learning_rate = 0.1;
  sgd.momentum = 0.5;
  EXPECT_LT(run_quadratic(sgd, 200), 1e-3);
  OptimizerConfig adam;
  adam.learning_rate = 0.05;
  EXPECT_LT(run_quadratic(adam, 200), 1e-3);
}

}  // namespace
}  // namespace setcls
