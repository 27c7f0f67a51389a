// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "fixtures.hpp"
#include "moqe/experts.hpp"

using namespace moqe;
using moqe::testing::TempDir;

namespace {

struct Suite {
  Dataset data = moqe::testing::tiny_cv(3);
  std::unique_ptr<Model> base = moqe::testing::tiny_cv_model();
  Registry registry = moqe::testing::tiny_registry(*base);
};

}  // namespace

TEST(Registry, IdsFollowRegistrationAndDuplicatesAreRefused) {
  Suite s;
  ASSERT_EQ(s.registry.size(), 3);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(s.registry.at(i).id, i);
  EXPECT_THROW(s.registry.at(3), IndexError);
  QuantSpec dup;
  dup.scheme = QuantScheme::rtn_per_tensor;
  dup.bits = 4;
  EXPECT_THROW(s.registry.add(quantize_model(*s.base, dup)), RegistrationError);
  EXPECT_THROW(s.registry.add(quantize_model(*moqe::testing::tiny_lm(), dup)), RegistrationError);
  EXPECT_EQ(s.registry.prefix(2).size(), 2);
  EXPECT_EQ(s.registry.prefix(2).at(1).digest, s.registry.at(1).digest);
  EXPECT_THROW(s.registry.prefix(4), ConfigError);
}

TEST(Registry, SetDigestDependsOnOrder) {
  Suite s;
  Registry reversed;
  for (int i = 2; i >= 0; --i) reversed.add(s.registry.at(i));
  EXPECT_NE(reversed.set_digest(), s.registry.set_digest());
}

TEST(Registry, SaveLoadSaveIsBitwiseStable) {
  Suite s;
  TempDir a("moqe_reg"), b("moqe_reg");
  s.registry.save(a.path());
  const Registry back = Registry::load(a.path());
  back.save(b.path());
  for (int i = 0; i < 3; ++i) {
    const std::string f = "expert_" + std::to_string(i) + ".moqe";
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  }
  EXPECT_EQ(read_file(a / "registry.json"), read_file(b / "registry.json"));
  EXPECT_EQ(back.set_digest(), s.registry.set_digest());
  const nlohmann::json idx = Registry::read_index(a.path());
  EXPECT_GT(idx.at("experts").at(0).at("bytes").get<Index>(), 0);
}

TEST(Expert, MutatedPayloadByteIsRefused) {
  Suite s;
  const Bytes clean = s.registry.at(0).to_container().serialize();
  // Flip a byte near the end, inside the payload.
  Bytes dirty = clean;
  dirty[dirty.size() - 5] ^= 0x5a;
  EXPECT_NO_THROW(Expert::from_container(Container::parse(clean)));
  EXPECT_THROW(Expert::from_container(Container::parse(dirty)), IntegrityError);

  TempDir dir("moqe_reg");
  s.registry.save(dir.path());
  write_file(dir / "expert_1.moqe", dirty);
  EXPECT_THROW(Registry::load(dir.path()), IntegrityError);
}

TEST(Expert, FrozenUnderEvaluation) {
  Suite s;
  std::vector<Digest> before;
  for (const Expert& e : s.registry.experts()) before.push_back(e.model->weights_digest());
  for (int pass = 0; pass < 3; ++pass)
    for (const Expert& e : s.registry.experts()) per_sample_loss(e, s.data, all_rows(s.data));
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(s.registry.at(i).model->weights_digest(), before[static_cast<std::size_t>(i)]);
    EXPECT_EQ(expert_digest(s.registry.at(i).spec, *s.registry.at(i).model, s.registry.at(i).quantized),
              s.registry.at(i).digest);
  }
  EXPECT_THROW(per_sample_loss(s.registry.at(0), moqe::testing::tiny_nlp(), std::vector<Index>{0}), ContractError);
}

TEST(Calibration, RowsAreDeterministicAndRestricted) {
  const Dataset d = moqe::testing::tiny_cv(4);
  QuantSpec spec;
  spec.scheme = QuantScheme::activation_aware;
  spec.calib_samples = 5;
  spec.calib_subset = 1;
  const std::vector<Index> a = calibration_rows(d, spec, 3);
  EXPECT_EQ(a, calibration_rows(d, spec, 3));
  EXPECT_EQ(a.size(), 5u);
  for (Index r : a) EXPECT_EQ(d.subsets[static_cast<std::size_t>(r)], 1);
  spec.calib_subset = 9;
  EXPECT_THROW(calibration_rows(d, spec, 3), ConfigError);
}

TEST(OracleLabel, LowestLossWinsTiesGoLow) {
  const OracleLabel a = make_label({}, {0.5, 0.2, 0.9});
  EXPECT_EQ(a.j_star, 1);
  EXPECT_NEAR(a.margin, 0.3, 1e-15);
  const OracleLabel b = make_label({}, {0.4, 0.4, 0.9});
  EXPECT_EQ(b.j_star, 0);
  EXPECT_EQ(b.margin, 0.0);
  EXPECT_THROW(make_label({}, {}), ContractError);
}

TEST(OracleLabel, LabelsMatchPerExpertLossesAndAreDeterministic) {
  Suite s;
  std::vector<SampleEval> evals;
  const LabelSet l = label_oracle(s.registry, s.data, evals);
  ASSERT_EQ(evals.size(), 3u);
  ASSERT_EQ(static_cast<Index>(l.labels.size()), s.data.size());
  for (Index r = 0; r < s.data.size(); ++r) {
    const OracleLabel& lab = l.labels[static_cast<std::size_t>(r)];
    EXPECT_EQ(lab.sample, s.data.sample_digest(r));
    for (int j = 0; j < 3; ++j) {
      EXPECT_EQ(lab.losses[static_cast<std::size_t>(j)], evals[static_cast<std::size_t>(j)].loss[r]);
      EXPECT_LE(lab.losses[static_cast<std::size_t>(lab.j_star)], lab.losses[static_cast<std::size_t>(j)]);
    }
  }
  EXPECT_EQ(label_oracle(s.registry, s.data).j_star(), l.j_star());
  EXPECT_TRUE(l.matches(s.registry));
  EXPECT_FALSE(l.matches(s.registry.prefix(2)));
  Real share = 0.0;
  for (Real w : l.win_share()) share += w;
  EXPECT_NEAR(share, 1.0, 1e-12);
  for (Index r : l.confident_rows(0.01)) EXPECT_GT(l.labels[static_cast<std::size_t>(r)].margin, 0.01);
  EXPECT_THROW(label_oracle(s.registry.prefix(1), s.data), ContractError);
}

TEST(LabelStore, BinaryRoundTripAndCache) {
  Suite s;
  const LabelSet l = label_oracle(s.registry, s.data);
  const Bytes bytes = l.serialize();
  const LabelSet back = LabelSet::parse(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.j_star(), l.j_star());
  Bytes bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(LabelSet::parse(bad), DataError);

  TempDir dir("moqe_labels");
  const LabelSet first = label_oracle_cached(s.registry, s.data, dir.path());
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  EXPECT_EQ(files, 1u);
  EXPECT_EQ(label_oracle_cached(s.registry, s.data, dir.path()).serialize(), first.serialize());
}

TEST(Heterogeneity, WinnersFollowSubsetMeans) {
  Suite s;
  const LabelSet l = label_oracle(s.registry, s.data);
  const HeterogeneityReport h = heterogeneity_report(s.registry, s.data, l);
  ASSERT_EQ(h.mean_loss.rows(), s.data.subset_count());
  ASSERT_EQ(h.mean_loss.cols(), 3);
  for (Index sub = 0; sub < h.mean_loss.rows(); ++sub) {
    Index best = 0;
    h.mean_loss.row(sub).minCoeff(&best);
    EXPECT_EQ(h.winner[static_cast<std::size_t>(sub)], best);
  }
  const std::set<int> distinct(h.winner.begin(), h.winner.end());
  EXPECT_EQ(h.distinct_winners(), static_cast<int>(distinct.size()));
  EXPECT_EQ(h.to_json().at("subsets").size(), h.winner.size());
  EXPECT_THROW(heterogeneity_report(s.registry.prefix(2), s.data, l), ContractError);
}
