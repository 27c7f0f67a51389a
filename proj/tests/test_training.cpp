// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fixtures.hpp"
#include "moqe/training.hpp"

using namespace moqe;
using moqe::testing::check_gradients;
using moqe::testing::random_tensor;

namespace {

const nlohmann::json kTinyCvRouter = {{"pool_size", 4},        {"mlp", {4, 4, 3}}, {"se_channels", {3, 4, 4}},
                                      {"se_strides", {1, 2, 1}}, {"se_reduction", 2}, {"attention_heads", 2}};

RowMatrixX softmax_rows(const RowMatrixX& z) {
  RowMatrixX p(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const VectorX e = (z.row(r).array() - z.row(r).maxCoeff()).exp();
    p.row(r) = (e / e.sum()).transpose();
  }
  return p;
}

struct RoutingSuite {
  Dataset data = moqe::testing::tiny_cv(4);
  std::unique_ptr<Model> base = moqe::testing::tiny_cv_model();
  Registry registry = moqe::testing::tiny_registry(*base);
  LabelSet labels = label_oracle(registry, data);
  RoutingSet set = make_routing_set(data, labels, registry, *base);
};

TrainConfig quick_train(std::uint64_t seed) {
  TrainConfig c = default_train_config(Modality::cv);
  c.epochs = 4;
  c.warm_epochs = 1;
  c.batch_size = 8;
  c.base_lr = 1e-3;
  c.min_margin = 0.0;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(BalanceLoss, ClosedFormIdentities) {
  for (Index n : {2, 4, 7}) {
    const VectorX u = VectorX::Constant(n, 1.0 / static_cast<Real>(n));
    EXPECT_NEAR(balance_value(u, u), 1.0, 1e-9);
    VectorX c = VectorX::Zero(n);
    c[0] = 1.0;
    EXPECT_NEAR(balance_value(c, c), static_cast<Real>(n), 1e-9);
  }
  VectorX P(4), F(4);
  P << 0.4, 0.3, 0.2, 0.1;
  F << 0.5, 0.25, 0.25, 0.0;
  EXPECT_NEAR(balance_value(P, F), 1.3, 1e-9);
}

TEST(BalanceLoss, GraphValueMatchesClosedForm) {
  RowMatrixX probs(4, 4);
  probs << 0.7, 0.1, 0.1, 0.1,  //
      0.1, 0.6, 0.2, 0.1,       //
      0.3, 0.3, 0.2, 0.2,       //
      0.1, 0.2, 0.3, 0.4;
  const BalanceStats s = batch_balance_stats(probs);
  EXPECT_EQ(s.n, (std::vector<Index>{2, 1, 0, 1}));  // row 2 ties -> expert 0
  EXPECT_DOUBLE_EQ(s.F.sum(), 1.0);
  Graph g;
  const Var v = balance_loss(g.constant(probs), s);
  EXPECT_NEAR(g.item(v), balance_value(s.P, s.F), 1e-15);
  EXPECT_THROW(batch_balance_stats(RowMatrixX(0, 4)), ContractError);
}

TEST(BalanceLoss, BoundedByNOnRandomBatches) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    const Index n = 2 + t % 5, b = 1 + t % 17;
    const Real spread = 0.1 + 0.05 * (t % 40);
    const RowMatrixX p = softmax_rows(random_tensor({b, n}, rng, spread).mat());
    const BalanceStats s = batch_balance_stats(p);
    const Real l = balance_value(s.P, s.F);
    EXPECT_LE(l, static_cast<Real>(n) + 1e-12) << "trial " << t;
    EXPECT_GE(l, 1.0 / static_cast<Real>(b) - 1e-12) << "trial " << t;
    // With a single dispatched expert c, L = N * P_c >= N * mean_b max_i p_bi >= 1.
    if (std::count(s.n.begin(), s.n.end(), 0) == n - 1) EXPECT_GE(l, 1.0 - 1e-12) << "trial " << t;
  }
}

TEST(BalanceLoss, CanFallBelowOneWhenDispatchSpreads) {
  // The bound L >= 1 needs every sample on one expert; mixed dispatch can
  // pair F mass with low mean probability.
  RowMatrixX probs(2, 3);
  probs << 0.4, 0.3, 0.3,  //
      0.0, 0.6, 0.4;
  const BalanceStats s = batch_balance_stats(probs);
  EXPECT_NEAR(balance_value(s.P, s.F), 0.975, 1e-12);
}

TEST(Schedule, Endpoints) {
  EXPECT_DOUBLE_EQ(alpha_dyn(0.02, 0.0, 0, 30, 0.8), 0.02);
  EXPECT_DOUBLE_EQ(alpha_dyn(0.02, 3.0, 29, 30, 0.8), 0.0);
  const std::vector<Index> counts{3, 1};
  EXPECT_DOUBLE_EQ(usage_sigma(counts), 0.5);
  EXPECT_NEAR(alpha_dyn(0.02, usage_sigma(counts), 0, 30, 0.8), 0.03, 1e-15);
  EXPECT_EQ(usage_sigma(std::vector<Index>{0, 0, 0}), 0.0);
  const std::vector<Index> collapsed{8, 0, 0, 0};
  EXPECT_NEAR(usage_sigma(collapsed), std::sqrt(3.0), 1e-12);
  EXPECT_THROW(alpha_dyn(0.02, -0.1, 0, 30, 0.8), ContractError);
}

TEST(Schedule, NonIncreasingAndZeroAtEnd) {
  for (Index epochs : {1, 2, 5, 30})
    for (Real frac : {0.0, 0.5, 0.8, 1.0}) {
      Real prev = alpha_schedule(0.02, 0, epochs, frac);
      for (Index e = 1; e < epochs; ++e) {
        const Real a = alpha_schedule(0.02, e, epochs, frac);
        EXPECT_LE(a, prev);
        prev = a;
      }
      EXPECT_EQ(alpha_schedule(0.02, epochs - 1, epochs, frac), 0.0);
    }
}

TEST(CompositeLoss, ReducesToCrossEntropyAndUniformClosedForm) {
  Graph g;
  Rng rng(2);
  const Var z = g.constant(random_tensor({6, 3}, rng));
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  const CompositeLoss a = composite_loss(z, labels, 0.0);
  EXPECT_EQ(g.item(a.total), g.item(a.ce));
  const CompositeLoss b = composite_loss(z, labels, 0.5);
  EXPECT_NEAR(g.item(b.total), g.item(b.ce) + 0.5 * g.item(b.balance), 1e-15);
  const std::vector<int> bad{0, 3, 1, 1, 1, 1};
  EXPECT_THROW(composite_loss(z, bad, 0.0), IndexError);

  // Uniform logits: argmax ties send everything to expert 0, so F collapses
  // while P is uniform and the balance term is N * (1/N) * 1 = 1.
  const Var flat = g.constant(RowMatrixX::Zero(6, 3));
  const CompositeLoss u = composite_loss(flat, labels, 0.02);
  EXPECT_NEAR(g.item(u.ce), std::log(3.0), 1e-12);
  EXPECT_NEAR(g.item(u.total), std::log(3.0) + 0.02, 1e-12);
}

TEST(CompositeLoss, GradientMatchesFiniteDifferencesOnToyRouter) {
  Rng rng(5);
  Tensor w = random_tensor({4, 4}, rng);
  Tensor b = random_tensor({1, 4}, rng, 0.1);
  const Tensor x = random_tensor({10, 4}, rng);
  const std::vector<int> labels{0, 1, 2, 3, 0, 1, 2, 3, 0, 0};
  const auto rep = check_gradients(
      [&](Graph& g) { return composite_loss(linear(g.constant(x), g.param(w), g.param(b)), labels, 0.37).total; },
      {&w, &b}, 1e-5);
  EXPECT_EQ(rep.checked, 20);
  EXPECT_EQ(rep.failures, 0) << rep.first_failure;
}

TEST(CompositeLoss, ExpertsAndEmbeddingReceiveNoGradient) {
  auto base = moqe::testing::tiny_lm();
  const Registry reg = moqe::testing::tiny_registry(*base);
  const Dataset d = moqe::testing::tiny_nlp();
  auto router = make_router(*base, {{"heads", 2}, {"encoder_hidden", 8}, {"mlp_hidden", 6}}, reg.size(), 1);
  set_requires_grad(router->params(), true);
  for (const NamedParam& p : router->params()) p.tensor->zero_grad();
  const RouterInput in = router_input(d, all_rows(d), *base);
  std::vector<int> labels(static_cast<std::size_t>(in.batch), 1);
  {
    Graph g;
    g.backward(composite_loss(router->logits(g, in), labels, 0.02).total);
  }
  bool router_grad = false;
  for (const NamedParam& p : router->params())
    router_grad = router_grad || (p.tensor->grad && p.tensor->grad->cwiseAbs().maxCoeff() > 0);
  EXPECT_TRUE(router_grad);
  for (const NamedParam& p : base->params()) EXPECT_FALSE(p.tensor->grad.has_value()) << p.name;
  for (const Expert& e : reg.experts())
    for (const NamedParam& p : e.model->params()) EXPECT_FALSE(p.tensor->grad.has_value()) << p.name;
}

TEST(TrainConfig, ValidationAndJsonRoundTrip) {
  TrainConfig c = default_train_config(Modality::nlp);
  EXPECT_EQ(c.lr_mode, LrMode::cosine);
  EXPECT_EQ(c.grad_accum, 6);
  EXPECT_EQ(c.batch_size, 8);
  nlohmann::json j = c;
  const TrainConfig back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  c.warm_fraction = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = default_train_config(Modality::cv);
  c.alpha0 = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  j["bogus"] = 1;
  EXPECT_THROW(j.get<TrainConfig>(), ConfigError);
}

TEST(TrainRouter, ReproducibleHistoryAndFrozenExperts) {
  RoutingSuite s;
  std::vector<Digest> before;
  for (const Expert& e : s.registry.experts()) before.push_back(e.model->weights_digest());
  auto a = make_router(*s.base, kTinyCvRouter, s.registry.size(), 3);
  auto b = make_router(*s.base, kTinyCvRouter, s.registry.size(), 3);
  const TrainHistory ha = train_router(*a, s.set, s.set, quick_train(4));
  const TrainHistory hb = train_router(*b, s.set, s.set, quick_train(4));
  ASSERT_EQ(ha.epochs.size(), hb.epochs.size());
  for (std::size_t i = 0; i < ha.epochs.size(); ++i) {
    EXPECT_EQ(ha.epochs[i].val_ra, hb.epochs[i].val_ra);
    EXPECT_EQ(ha.epochs[i].train_loss, hb.epochs[i].train_loss);
    const EpochRecord& r = ha.epochs[i];
    EXPECT_TRUE(r.val_ra >= 0.0 && r.val_ra <= 1.0);
    Real f = 0.0;
    for (Real x : r.F) f += x;
    EXPECT_NEAR(f, 1.0, 1e-12);
  }
  EXPECT_EQ(ha.epochs.back().alpha_eff, 0.0);
  EXPECT_EQ(a->weights_digest(), b->weights_digest());
  for (int i = 0; i < s.registry.size(); ++i)
    EXPECT_EQ(s.registry.at(i).model->weights_digest(), before[static_cast<std::size_t>(i)]);
  EXPECT_EQ(ha.best_ra, ha.epochs[static_cast<std::size_t>(ha.best_epoch)].val_ra);
}

TEST(TrainRouter, BestWeightsAreRestored) {
  RoutingSuite s;
  auto r = make_router(*s.base, kTinyCvRouter, s.registry.size(), 3);
  const TrainHistory h = train_router(*r, s.set, s.set, quick_train(4));
  const std::vector<int> choice = route_choices(*r, s.set.input);
  Index hits = 0;
  for (std::size_t i = 0; i < choice.size(); ++i) hits += choice[i] == s.set.oracle[i] ? 1 : 0;
  EXPECT_DOUBLE_EQ(static_cast<Real>(hits) / static_cast<Real>(choice.size()), h.best_ra);
}

TEST(TrainRouter, Preconditions) {
  RoutingSuite s;
  auto wrong = make_router(*s.base, kTinyCvRouter, 2, 3);
  EXPECT_THROW(train_router(*wrong, s.set, s.set, quick_train(1)), ContractError);
  auto r = make_router(*s.base, kTinyCvRouter, s.registry.size(), 3);
  TrainConfig c = quick_train(1);
  c.min_margin = 1e9;
  EXPECT_THROW(train_router(*r, s.set, s.set, c), ContractError);
}

TEST(TrainRouter, HistoryIsJsonLines) {
  RoutingSuite s;
  auto r = make_router(*s.base, kTinyCvRouter, s.registry.size(), 3);
  const TrainHistory h = train_router(*r, s.set, s.set, quick_train(2));
  moqe::testing::TempDir dir("moqe_train");
  h.write_jsonl(dir / "h.jsonl");
  std::ifstream in(dir / "h.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("val_ra") && j.contains("F") && j.contains("alpha_eff") && j.contains("sigma"));
    ++n;
  }
  EXPECT_EQ(n, h.epochs.size());
}
