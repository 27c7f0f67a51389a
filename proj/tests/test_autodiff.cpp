// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "moqe/autodiff.hpp"
#include "moqe/optim.hpp"

using namespace moqe;
using moqe::testing::check_gradients;
using moqe::testing::random_tensor;

namespace {

constexpr Real kStep = 1e-5;

// Scalar probe of a non-scalar output: sum(out * w) with w fixed.
struct Probe {
  Tensor w;
  Var operator()(Graph& g, Var out) {
    if (w.numel() == 0) {
      Rng rng(99);
      w = random_tensor(g.shape(out), rng);
    }
    return sum(mul(out, g.constant(w)));
  }
};

void expect_gradients(const std::function<Var(Graph&)>& loss, const std::vector<Tensor*>& params, Real rel_tol = 1e-4) {
  const auto rep = check_gradients(loss, params, kStep, rel_tol, 1e-7);
  EXPECT_EQ(rep.failures, 0) << rep.first_failure << " (worst rel " << rep.worst_rel << ")";
  EXPECT_GT(rep.checked, 0);
}

}  // namespace

TEST(Matmul, IdentityAndDot) {
  Graph g;
  RowMatrixX i2 = RowMatrixX::Identity(2, 2), b(2, 2), r(1, 2), c(2, 1);
  b << 3, 4, 5, 6;
  r << 1, 2;
  c << 3, 4;
  EXPECT_EQ(RowMatrixX(g.mat(matmul(g.constant(i2), g.constant(b)))), b);
  EXPECT_DOUBLE_EQ(g.item(matmul(g.constant(r), g.constant(c))), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph g;
  Var a = g.constant(RowMatrixX::Zero(2, 3)), b = g.constant(RowMatrixX::Zero(2, 3));
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSum) {
  Rng rng(1);
  Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  expect_gradients([&](Graph& g) { return sum(matmul(g.param(a), g.param(b))); }, {&a, &b});
}

TEST(Matmul, TransposedAndLinearGradients) {
  Rng rng(2);
  Tensor x = random_tensor({3, 4}, rng), w = random_tensor({5, 4}, rng), bias = random_tensor({1, 5}, rng);
  Probe p;
  expect_gradients([&](Graph& g) { return p(g, matmul_nt(g.param(x), g.param(w))); }, {&x, &w});
  Probe q;
  expect_gradients([&](Graph& g) { return q(g, linear(g.param(x), g.param(w), g.param(bias))); }, {&x, &w, &bias});
  Probe t;
  expect_gradients([&](Graph& g) { return t(g, transpose(g.param(x))); }, {&x});
}

TEST(Elementwise, Definitions) {
  Graph g;
  Var x = g.constant(Shape{3}, (VectorX(3) << -1, 0, 2).finished());
  EXPECT_EQ(g.value(relu(x)), (VectorX(3) << 0, 0, 2).finished());
  EXPECT_EQ(g.value(add_scalar(x, 0.0)), g.value(x));
  EXPECT_THROW(add(x, g.constant(RowMatrixX::Zero(2, 2))), DimensionError);
}

TEST(Elementwise, Gradients) {
  Rng rng(3);
  Tensor a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng), row = random_tensor({1, 3}, rng);
  Probe p1, p2, p3, p4, p5, p6, p7;
  expect_gradients([&](Graph& g) { return p1(g, mul(g.param(a), g.param(b))); }, {&a, &b});
  expect_gradients([&](Graph& g) { return p2(g, sub(g.param(a), g.param(b))); }, {&a, &b});
  expect_gradients([&](Graph& g) { return p3(g, relu(g.param(a))); }, {&a});
  expect_gradients([&](Graph& g) { return p4(g, sigmoid(g.param(a))); }, {&a});
  expect_gradients([&](Graph& g) { return p5(g, scale(add_row(g.param(a), g.param(row)), 0.7)); }, {&a, &row});
  expect_gradients([&](Graph& g) { return p6(g, mean_rows(g.param(a))); }, {&a});
  expect_gradients([&](Graph& g) { return p7(g, reshape(g.param(a), {9})); }, {&a});
  expect_gradients([&](Graph& g) { return mean(g.param(a)); }, {&a});
}

TEST(Softmax, SymmetryStabilityAndShift) {
  Graph g;
  RowMatrixX z = RowMatrixX::Zero(1, 3), big(1, 2);
  big << 1000, 0;
  const VectorX p = g.value(softmax(g.constant(z)));
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(p[i], 1.0 / 3.0, 1e-15);
  const VectorX q = g.value(softmax(g.constant(big)));
  EXPECT_TRUE(q.allFinite());
  EXPECT_NEAR(q[0], 1.0, 1e-15);

  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    RowMatrixX x = random_tensor({2, 5}, rng, 3.0).mat();
    const RowMatrixX s = g.mat(softmax(g.constant(x)));
    const RowMatrixX shifted = g.mat(softmax(g.constant(RowMatrixX(x.array() + 17.25))));
    for (Index r = 0; r < 2; ++r) {
      EXPECT_NEAR(s.row(r).sum(), 1.0, 1e-9);
      Index a = 0, b = 0;
      s.row(r).maxCoeff(&a);
      shifted.row(r).maxCoeff(&b);
      EXPECT_EQ(a, b);
    }
    EXPECT_LT((s - shifted).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Softmax, Gradients) {
  Rng rng(5);
  Tensor x = random_tensor({3, 4}, rng);
  Probe p, q;
  expect_gradients([&](Graph& g) { return p(g, softmax(g.param(x))); }, {&x});
  expect_gradients([&](Graph& g) { return q(g, log_softmax(g.param(x))); }, {&x});
}

TEST(CrossEntropy, Values) {
  Graph g;
  RowMatrixX two = RowMatrixX::Zero(1, 2), sat(1, 2);
  sat << 1000, 0;
  const int zero[1] = {0};
  EXPECT_NEAR(g.item(cross_entropy(g.constant(two), zero)), std::log(2.0), 1e-12);
  EXPECT_NEAR(g.item(cross_entropy(g.constant(sat), zero)), 0.0, 1e-12);
  EXPECT_THROW(cross_entropy(g.constant(two), std::vector<int>{2}), IndexError);

  RowMatrixX rows(2, 3);
  rows << 0.5, -1, 2, 1, 1, 0;
  const std::vector<int> labels{2, 0};
  const Real both = g.item(cross_entropy(g.constant(rows), labels));
  const Real r0 = g.item(cross_entropy(g.constant(RowMatrixX(rows.row(0))), std::vector<int>{2}));
  const Real r1 = g.item(cross_entropy(g.constant(RowMatrixX(rows.row(1))), std::vector<int>{0}));
  EXPECT_NEAR(both, 0.5 * (r0 + r1), 1e-15);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOnehot) {
  Rng rng(6);
  Tensor x = random_tensor({4, 3}, rng);
  const std::vector<int> labels{0, 2, 1, 2};
  expect_gradients([&](Graph& g) { return cross_entropy(g.param(x), labels); }, {&x});

  Graph g;
  x.requires_grad = true;
  x.zero_grad();
  g.backward(cross_entropy(g.param(x), labels));
  Graph h;
  const RowMatrixX p = h.mat(softmax(h.constant(x.mat())));
  const Eigen::Map<const RowMatrixX> grad(x.grad->data(), 4, 3);
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 3; ++c)
      EXPECT_NEAR(grad(r, c), (p(r, c) - (labels[static_cast<std::size_t>(r)] == c ? 1.0 : 0.0)) / 4.0, 1e-12);

  const std::vector<int> masked{0, -1, 1, -1};
  expect_gradients([&](Graph& g2) { return masked_cross_entropy(g2.param(x), masked); }, {&x});
}

TEST(Norms, LayerNormConstantRowIsZero) {
  Graph g;
  Tensor gain({1, 4}), bias({1, 4});
  gain.data.setOnes();
  const VectorX out = g.value(layer_norm(g.constant(RowMatrixX::Constant(1, 4, 3.0)), g.param(gain), g.param(bias)));
  EXPECT_LT(out.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Norms, BatchNormTrainingStatistics) {
  Rng rng(7);
  Tensor x = random_tensor({8, 4}, rng, 2.0), gain({1, 4}), bias({1, 4});
  gain.data.setOnes();
  NormStats stats{Tensor({1, 4}), Tensor({1, 4})};
  stats.running_var.data.setOnes();
  Graph g;
  const RowMatrixX y = g.mat(batch_norm(g.param(x), g.param(gain), g.param(bias), stats, true));
  for (Index c = 0; c < 4; ++c) {
    EXPECT_NEAR(y.col(c).mean(), 0.0, 1e-6);
    EXPECT_NEAR((y.col(c).array() - y.col(c).mean()).square().mean(), 1.0, 1e-4);  // eps = 1e-5 shrinks it slightly
  }
  Tensor one = random_tensor({1, 4}, rng);
  EXPECT_THROW(batch_norm(g.param(one), g.param(gain), g.param(bias), stats, true), ContractError);
}

TEST(Norms, Gradients) {
  Rng rng(8);
  Tensor x = random_tensor({8, 4}, rng), gain = random_tensor({1, 4}, rng), bias = random_tensor({1, 4}, rng);
  NormStats stats{Tensor({1, 4}), Tensor({1, 4})};
  Probe p, q;
  expect_gradients([&](Graph& g) { return p(g, layer_norm(g.param(x), g.param(gain), g.param(bias))); }, {&x, &gain, &bias});
  expect_gradients([&](Graph& g) { return q(g, batch_norm(g.param(x), g.param(gain), g.param(bias), stats, true)); },
                   {&x, &gain, &bias});
}

TEST(Attention, SinglePositionPassesValues) {
  Rng rng(9);
  Graph g;
  Tensor q = random_tensor({2, 8}, rng), k = random_tensor({2, 8}, rng), v = random_tensor({2, 8}, rng);
  const VectorX out = g.value(attention(g.param(q), g.param(k), g.param(v), 1, 2, false));
  EXPECT_LT((out - v.data).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Attention, ZeroQueriesGiveUniformWeights) {
  Rng rng(10);
  Graph g;
  Tensor v = random_tensor({3, 8}, rng);
  Var zero = g.constant(RowMatrixX::Zero(3, 8));
  const RowMatrixX out = g.mat(attention(zero, zero, g.param(v), 3, 2, false));
  const RowMatrixX mean_v = v.mat().colwise().mean();
  for (Index r = 0; r < 3; ++r) EXPECT_LT((out.row(r) - mean_v).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(attention(zero, zero, g.param(v), 3, 3, false), ConfigError);
}

TEST(Attention, Gradients) {
  Rng rng(11);
  Tensor q = random_tensor({6, 8}, rng), k = random_tensor({6, 8}, rng), v = random_tensor({6, 8}, rng);
  for (bool causal : {false, true}) {
    Probe p;
    expect_gradients([&](Graph& g) { return p(g, attention(g.param(q), g.param(k), g.param(v), 3, 2, causal)); }, {&q, &k, &v});
  }
}

TEST(Maps, ConvolutionAndSegmentGradients) {
  Rng rng(12);
  const MapGeometry map{2, 4, 4, 3};
  Tensor x = random_tensor({32, 3}, rng), gate = random_tensor({2, 3}, rng), pos = random_tensor({16, 3}, rng);
  Probe p1, p2, p3, p4, p5;
  expect_gradients([&](Graph& g) { return p1(g, im2col(g.param(x), map, ConvGeometry{3, 2, 1})); }, {&x});
  expect_gradients([&](Graph& g) { return p2(g, segment_mean(g.param(x), 16)); }, {&x});
  expect_gradients([&](Graph& g) { return p3(g, segment_mul(g.param(x), g.param(gate), 16)); }, {&x, &gate});
  expect_gradients([&](Graph& g) { return p4(g, segment_add(g.param(x), g.param(gate), 16)); }, {&x, &gate});
  expect_gradients([&](Graph& g) { return p5(g, tile_add(g.param(x), g.param(pos))); }, {&x, &pos});
}

TEST(Maps, GatherGradientAccumulatesRepeats) {
  Rng rng(13);
  Tensor table = random_tensor({5, 3}, rng);
  const std::vector<int> ids{1, 4, 1, 0};
  Probe p;
  expect_gradients([&](Graph& g) { return p(g, gather_rows(g.param(table), ids)); }, {&table});
  Graph g;
  EXPECT_THROW(gather_rows(g.param(table), std::vector<int>{5}), IndexError);
}

TEST(Backward, SimpleGradientsAndScalarContract) {
  Rng rng(14);
  Tensor x = random_tensor({2, 3}, rng);
  x.requires_grad = true;
  x.zero_grad();
  {
    Graph g;
    g.backward(sum(g.param(x)));
  }
  EXPECT_EQ(*x.grad, VectorX::Ones(6));
  x.zero_grad();
  {
    Graph g;
    Var v = g.param(x);
    g.backward(sum(mul(v, v)));
  }
  EXPECT_LT((*x.grad - 2.0 * x.data).cwiseAbs().maxCoeff(), 1e-15);
  Graph g;
  EXPECT_THROW(g.backward(g.param(x)), ContractError);
}

TEST(Backward, InputsPrecedeNodes) {
  Rng rng(15);
  Tensor a = random_tensor({3, 3}, rng);
  Graph g;
  Var v = g.param(a);
  sum(softmax(matmul(relu(v), transpose(v))));
  for (std::size_t k = 0; k < g.size(); ++k)
    for (int in : g.node(static_cast<int>(k)).inputs) EXPECT_LT(in, static_cast<int>(k));
}

TEST(Backward, DeterministicForward) {
  Rng r1(16), r2(16);
  Tensor a = random_tensor({4, 4}, r1), b = random_tensor({4, 4}, r2);
  Graph g1, g2;
  EXPECT_EQ(g1.value(softmax(matmul(g1.param(a), g1.param(a)))), g2.value(softmax(matmul(g2.param(b), g2.param(b)))));
}

TEST(Optimizer, ZeroGradientLeavesParameters) {
  Tensor w({1, 3});
  w.data << 1, 2, 3;
  w.requires_grad = true;
  w.zero_grad();
  AdamW opt({&w}, {.lr = 0.1});
  opt.step();
  EXPECT_EQ(w.data, (VectorX(3) << 1, 2, 3).finished());
  EXPECT_THROW(AdamW({&w}, {.lr = 0.0}), ConfigError);
}

TEST(Optimizer, ClippingScalesExactly) {
  Tensor w({1, 2});
  w.requires_grad = true;
  w.grad = (VectorX(2) << 6, 8).finished();
  EXPECT_DOUBLE_EQ(global_grad_norm({&w}), 10.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm({&w}, 1.0), 0.1);
  EXPECT_DOUBLE_EQ((*w.grad)[0], 0.6);
  EXPECT_DOUBLE_EQ((*w.grad)[1], 0.8);
}

TEST(Optimizer, ConvergesOnQuadratic) {
  Tensor w({1});
  w.requires_grad = true;
  AdamW opt({&w}, {.lr = 0.3, .max_grad_norm = 0.0});
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    Graph g;
    g.backward(sum(mul(add_scalar(g.param(w), -3.0), add_scalar(g.param(w), -3.0))));
    opt.step();
  }
  EXPECT_NEAR(w.data[0], 3.0, 1e-2);
}

TEST(Schedule, Endpoints) {
  EXPECT_DOUBLE_EQ(lr_schedule(10, 110, 10, 2e-3), 2e-3);
  EXPECT_DOUBLE_EQ(lr_schedule(110, 110, 10, 2e-3), 0.0);
  EXPECT_NEAR(lr_schedule(60, 110, 10, 2e-3), 1e-3, 1e-12);
  EXPECT_THROW(lr_schedule(0, 5, 6, 1e-3), ConfigError);
}

TEST(Tensor, Invariants) {
  EXPECT_THROW(Tensor({2, 2}, VectorX::Zero(3)), DimensionError);
  Tensor t({2, 2});
  t.requires_grad = true;
  t.zero_grad();
  EXPECT_EQ(t.grad->size(), t.numel());
  t.data[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(t.check_finite("t"), DataError);
}
