// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "fixtures.hpp"
#include "moqe/serving.hpp"

using namespace moqe;
using moqe::testing::TempDir;

namespace {

const nlohmann::json kTinyCvRouter = {{"pool_size", 4},        {"mlp", {4, 4, 3}}, {"se_channels", {3, 4, 4}},
                                      {"se_strides", {1, 2, 1}}, {"se_reduction", 2}, {"attention_heads", 2}};
const nlohmann::json kTinyNlpRouter = {{"heads", 2}, {"encoder_hidden", 8}, {"mlp_hidden", 6}};

// Router with a random head whose bias centres each expert logit over `data`,
// so that different rows pick different experts.
Container spread_router(const Model& base, const Registry& reg, const Dataset& data, std::uint64_t seed) {
  auto r = make_router(base, base.kind() == Modality::cv ? kTinyCvRouter : kTinyNlpRouter, reg.size(), seed);
  Rng rng(seed);
  r->head().weight = moqe::testing::random_tensor(r->head().weight.shape, rng, 20.0);
  const auto recs = route(*r, router_input(data, all_rows(data), base));
  VectorX mean = VectorX::Zero(reg.size());
  for (const RoutingRecord& rec : recs) mean += rec.probs.array().log().matrix();
  r->head().bias.data -= mean / static_cast<Real>(recs.size());
  return router_to_container(*r, base_binding_digest(base), reg.set_digest());
}

struct Suite {
  Dataset data;
  std::shared_ptr<const Model> base;
  Registry registry;
  Container router;
  std::shared_ptr<MemoryExpertStore> store;

  explicit Suite(Modality kind, int experts = 3) {
    data = kind == Modality::cv ? moqe::testing::tiny_cv(3) : moqe::testing::tiny_nlp();
    base = kind == Modality::cv ? std::shared_ptr<const Model>(moqe::testing::tiny_cv_model())
                                : std::shared_ptr<const Model>(moqe::testing::tiny_lm());
    registry = moqe::testing::tiny_registry(*base).prefix(experts);
    router = spread_router(*base, registry, data, 4);
    store = std::make_shared<MemoryExpertStore>(registry);
  }
  Engine engine(Index capacity = 0) const { return Engine(router, store, base, capacity); }
};

}  // namespace

TEST(Serving, OutputsAreBitwiseEqualToDirectExpertOutputs) {
  for (Modality kind : {Modality::cv, Modality::nlp}) {
    Suite s(kind);
    Engine e = s.engine();
    Router& router = e.router();
    std::set<int> used;
    for (Index row = 0; row < s.data.size(); ++row) {
      const std::vector<Index> one{row};
      const InferResult r = e.infer(s.data, row);
      const RoutingRecord direct = route(router, router_input(s.data, one, *s.base)).front();
      EXPECT_EQ(r.record.chosen, direct.chosen);
      EXPECT_EQ(r.record.probs, direct.probs);
      const SampleEval ref = per_sample_loss(s.registry.at(r.record.chosen), s.data, one);
      EXPECT_EQ(r.output.loss, ref.loss) << "row " << row;
      EXPECT_EQ(r.output.loss_sum, ref.loss_sum) << "row " << row;
      EXPECT_EQ(r.output.predictions, ref.predictions) << "row " << row;
      used.insert(r.record.chosen);
    }
    EXPECT_GE(used.size(), 2u) << to_string(kind);
  }
}

TEST(Serving, SingleResidencyOnAlternatingStream) {
  Suite s(Modality::cv);
  Engine e = s.engine();
  const Workload w = alternating_workload(e, s.data, 2000);
  ASSERT_EQ(w.rows.size(), 2000u);
  for (Index row : w.rows) {
    e.infer(s.data, row);
    ASSERT_TRUE(e.residency().audit());
    int fast = 0;
    for (const auto& [id, entry] : e.residency().store) fast += entry.location == Location::fast;
    ASSERT_EQ(fast, 1);
    ASSERT_EQ(e.resident_expert()->id, *e.resident());
  }
  EXPECT_EQ(e.residency().switch_count, 1999);
  EXPECT_EQ(e.residency().load_count, 2000);
}

TEST(Serving, ZeroSwitchWorkloadHasNoIoAndStablePeak) {
  Suite s(Modality::cv);
  Engine e = s.engine();
  e.infer(s.data, 0);
  const MemoryLedger first = e.memory_report();
  e.reset_timing();
  for (Index row : zero_switch_workload(0, 50).rows) e.infer(s.data, row);
  EXPECT_EQ(e.timing().load_total, 0.0);
  EXPECT_EQ(e.residency().switch_count, 0);
  EXPECT_EQ(e.residency().load_count, 1);
  for (const TimingEntry& t : e.timing().entries) {
    EXPECT_EQ(t.load_s, 0.0);
    EXPECT_FALSE(t.switched);
  }
  EXPECT_EQ(e.memory_report().fast_peak_bytes, first.fast_peak_bytes);
  EXPECT_EQ(e.memory_report().activation_peak_bytes, first.activation_peak_bytes);
}

TEST(Serving, AccountingIdentitiesAreExact) {
  Suite s(Modality::cv);
  Engine e = s.engine();
  for (Index row : alternating_workload(e, s.data, 40).rows) e.infer(s.data, row);
  const TimingLedger& t = e.timing();
  Real router = 0.0, load = 0.0, expert = 0.0;
  for (const TimingEntry& x : t.entries) {
    router += x.router_s;
    load += x.load_s;
    expert += x.expert_s;
    EXPECT_EQ(x.load_s > 0.0, x.switched || &x == &t.entries.front());
  }
  EXPECT_EQ(router, t.router_total);
  EXPECT_EQ(load, t.load_total);
  EXPECT_EQ(expert, t.expert_total);
  EXPECT_EQ(t.eit(), t.router_total + t.load_total);
  EXPECT_EQ(t.eit_ratio(), t.eit() / t.expert_total);
  EXPECT_TRUE(std::isnan(TimingLedger{}.eit_ratio()));
}

TEST(Serving, BenchReportStructure) {
  Suite s(Modality::cv);
  Engine e = s.engine();
  const Workload w = alternating_workload(e, s.data, 8);
  const BenchReport r = bench(e, s.data, w, 3, 3, "tiny");
  EXPECT_EQ(r.requests, 24);
  EXPECT_EQ(r.ledger.entries.size(), 24u);
  EXPECT_EQ(r.total_pct, r.router_pct + r.io_pct);
  EXPECT_EQ(r.router_ms, r.ledger.router_total * 1e3 / 24.0);
  EXPECT_EQ(r.io_pct, 100.0 * r.ledger.load_total / r.ledger.expert_total);
  const nlohmann::json j = r.to_json();
  for (const char* key : {"model", "expert_ms", "router_ms", "io_ms", "io_pct", "total_pct"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j.at("model"), "tiny");
  const nlohmann::json m = r.memory.to_json();
  for (const char* key : {"fast_peak_bytes", "slow_resident_bytes", "router_bytes"}) EXPECT_TRUE(m.contains(key)) << key;
}

TEST(Serving, CapacityBelowRouterPlusLargestExpertIsRefused) {
  Suite s(Modality::cv);
  Index largest = 0;
  int id = 0;
  for (int i = 0; i < s.store->count(); ++i)
    if (s.store->bytes(i) > largest) {
      largest = s.store->bytes(i);
      id = i;
    }
  const Engine ok = s.engine();
  EXPECT_EQ(ok.capacity(), ok.router_bytes() + largest);
  try {
    s.engine(ok.capacity() - 1);
    FAIL() << "expected CapacityError";
  } catch (const CapacityError& err) {
    EXPECT_NE(std::string(err.what()).find(s.registry.at(id).label()), std::string::npos) << err.what();
  }
  EXPECT_NO_THROW(s.engine(ok.capacity()));
}

TEST(Serving, IntegrityFailures) {
  Suite s(Modality::cv);
  // A store holding a different registry.
  auto other = std::make_shared<MemoryExpertStore>(s.registry.prefix(2));
  EXPECT_THROW(Engine(s.router, other, s.base), IntegrityError);
  // A router bound to a different base.
  std::shared_ptr<const Model> alien(moqe::testing::tiny_cv_model(77));
  EXPECT_THROW(Engine(s.router, s.store, alien), IntegrityError);
  // A corrupted blob is refused at load time, leaving residency intact.
  Engine e = s.engine();
  const InferResult first = e.infer(s.data, 0);
  Index row = 0;
  for (; row < s.data.size(); ++row)
    if (route(e.router(), router_input(s.data, std::vector<Index>{row}, *s.base)).front().chosen != first.record.chosen) break;
  ASSERT_LT(row, s.data.size());
  const int victim = route(e.router(), router_input(s.data, std::vector<Index>{row}, *s.base)).front().chosen;
  s.store->corrupt(victim, s.store->bytes(victim) - 7);
  EXPECT_THROW(e.infer(s.data, row), IntegrityError);
  EXPECT_TRUE(e.residency().audit());
}

TEST(Serving, DiskStoreMatchesMemoryStore) {
  Suite s(Modality::cv);
  TempDir dir("moqe_serve");
  s.registry.save(dir.path());
  Engine disk(s.router, std::make_shared<DiskExpertStore>(dir.path()), s.base);
  Engine mem = s.engine();
  for (Index row = 0; row < s.data.size(); ++row) EXPECT_EQ(disk.infer(s.data, row).output.loss, mem.infer(s.data, row).output.loss);
  EXPECT_EQ(disk.residency().switch_count, mem.residency().switch_count);
}

TEST(Serving, NlpPerformsOneEmbeddingGatherPerRequest) {
  Suite s(Modality::nlp);
  Engine e = s.engine();
  const long before = e.gather_count();
  for (Index row = 0; row < s.data.size(); ++row) e.infer(s.data, row);
  EXPECT_EQ(e.gather_count() - before, s.data.size());
}

TEST(Serving, FastPeakDoesNotGrowWithExpertCount) {
  Suite two(Modality::cv, 2), three(Modality::cv, 3);
  Engine a = two.engine(), b = three.engine();
  for (Index row : zero_switch_workload(0, 5).rows) {
    a.infer(two.data, row);
    b.infer(three.data, row);
  }
  // Fast memory holds the router, activations and exactly one expert, whatever N is.
  const MemoryLedger ma = a.memory_report(), mb = b.memory_report();
  EXPECT_EQ(ma.fast_peak_bytes - ma.router_bytes - ma.activation_peak_bytes, ma.expert_bytes.at(*ma.resident));
  EXPECT_EQ(mb.fast_peak_bytes - mb.router_bytes - mb.activation_peak_bytes, mb.expert_bytes.at(*mb.resident));
  EXPECT_GT(mb.slow_resident_bytes, ma.slow_resident_bytes);
}

TEST(Serving, AlternatingWorkloadNeedsTwoExperts) {
  Suite s(Modality::cv);
  auto flat = make_router(*s.base, kTinyCvRouter, s.registry.size(), 1);
  flat->zero_head();
  Engine e(router_to_container(*flat, base_binding_digest(*s.base), s.registry.set_digest()), s.store, s.base);
  EXPECT_THROW(alternating_workload(e, s.data, 10), ContractError);
}
