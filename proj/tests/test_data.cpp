// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "moqe/checkpoint.hpp"
#include "moqe/data.hpp"

using namespace moqe;
using moqe::testing::TempDir;

namespace {

CvGenConfig small_cv(std::uint64_t seed) {
  CvGenConfig c;
  c.classes = 5;
  c.families = 4;
  c.per_class = 3;
  c.size = 8;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(CvGenerator, ShapeLabelsAndFamilies) {
  const Dataset d = generate_cv(small_cv(1));
  EXPECT_EQ(d.size(), 5 * 4 * 3);
  EXPECT_EQ(d.inputs.cols(), 3 * 8 * 8);
  EXPECT_TRUE(d.inputs.allFinite());
  std::vector<int> per_label(5, 0);
  for (int l : d.labels) ++per_label[static_cast<std::size_t>(l)];
  for (int c : per_label) EXPECT_EQ(c, 12);
  EXPECT_EQ(d.subset_count(), 4);
}

TEST(CvGenerator, DeterministicAndSeedSensitive) {
  EXPECT_EQ(generate_cv(small_cv(7)).digest(), generate_cv(small_cv(7)).digest());
  EXPECT_NE(generate_cv(small_cv(7)).digest(), generate_cv(small_cv(8)).digest());
}

TEST(CvGenerator, RejectsBadConfig) {
  CvGenConfig c = small_cv(1);
  c.classes = 11;
  EXPECT_THROW(generate_cv(c), ConfigError);
  c = small_cv(1);
  c.size = 4;
  EXPECT_THROW(generate_cv(c), ConfigError);
}

TEST(Tokenizer, ByteRoundTrip) {
  const std::string text = "h\xc3\xa9llo\n\x01";
  const std::vector<int> ids = tokenize(text);
  EXPECT_EQ(ids.size(), text.size());
  for (int id : ids) EXPECT_TRUE(id >= 0 && id < 256);
  EXPECT_EQ(detokenize(ids), text);
  const std::vector<int> bad{300};
  EXPECT_THROW(detokenize(bad), IndexError);
}

TEST(NlpGenerator, SourcesDifferInEntropy) {
  NlpGenConfig c;
  c.sources = 4;
  c.documents_per_source = 2;
  c.document_bytes = 1024;
  c.seed = 2;
  const std::vector<std::string> docs = generate_corpus(c);
  ASSERT_EQ(docs.size(), 8u);
  for (const std::string& d : docs) EXPECT_EQ(d.size(), 1024u);
  // Sources are ordered by temperature, so mean entropy rises with the source.
  std::vector<Real> mean(4, 0.0);
  for (std::size_t i = 0; i < docs.size(); ++i) mean[i / 2] += byte_entropy(docs[i]) / 2.0;
  EXPECT_TRUE(std::is_sorted(mean.begin(), mean.end()));
  EXPECT_EQ(generate_corpus(c), docs);
}

TEST(NlpGenerator, WindowsArePaddedAndContiguous) {
  const std::vector<std::string> docs{"abcdefghij", "xyz"};
  const Dataset d = sequences_from_documents(docs, 4);
  EXPECT_EQ(d.inputs.cols(), 5);
  ASSERT_EQ(d.size(), 3);
  EXPECT_EQ(detokenize(d.tokens(0)), "abcde");
  EXPECT_EQ(d.subsets[2], 1);
  EXPECT_EQ(d.inputs(2, 3), kPadToken);
  EXPECT_EQ(d.inputs(2, 4), kPadToken);
}

TEST(ByteEntropy, Extremes) {
  EXPECT_DOUBLE_EQ(byte_entropy("aaaaaaaa"), 0.0);
  std::string all;
  for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
  EXPECT_NEAR(byte_entropy(all), 8.0, 1e-12);
}

TEST(Subsets, TextureFamiliesPartitionRows) {
  const Dataset d = generate_cv(small_cv(3));
  std::vector<Real> strata(d.subsets.begin(), d.subsets.end());
  const std::vector<Dataset> parts = make_subsets(d, 2, SubsetStrategy::texture_family, strata);
  ASSERT_EQ(parts.size(), 2u);
  EXPECT_EQ(parts[0].size() + parts[1].size(), d.size());
  for (int s = 0; s < 2; ++s)
    for (int id : parts[static_cast<std::size_t>(s)].subsets) EXPECT_EQ(id, s);
  EXPECT_THROW(make_subsets(d, 5, SubsetStrategy::texture_family, strata), ConfigError);
  EXPECT_THROW(make_subsets(d, 1, SubsetStrategy::texture_family, strata), ConfigError);
}

TEST(Subsets, EntropyQuantilesAreOrdered) {
  const Dataset d = moqe::testing::tiny_nlp();
  std::vector<Real> strata;
  for (int doc : d.subsets) strata.push_back(static_cast<Real>(doc));
  const std::vector<Dataset> parts = make_subsets(d, 3, SubsetStrategy::entropy_quantile, strata);
  Real prev_max = -1.0;
  Index total = 0;
  for (const Dataset& p : parts) {
    ASSERT_GT(p.size(), 0);
    total += p.size();
    // Each group holds a contiguous range of the sorted strata.
    Real lo = 1e9;
    Real hi = -1e9;
    for (Index r = 0; r < p.size(); ++r) {
      // The original document id is not kept; recover it through the digest.
      for (Index o = 0; o < d.size(); ++o)
        if (d.sample_digest(o) == p.sample_digest(r)) {
          lo = std::min(lo, strata[static_cast<std::size_t>(o)]);
          hi = std::max(hi, strata[static_cast<std::size_t>(o)]);
        }
    }
    EXPECT_GT(lo, prev_max);
    prev_max = hi;
  }
  EXPECT_EQ(total, d.size());
}

TEST(Split, DisjointStratifiedDeterministic) {
  Dataset d = generate_cv(small_cv(4));
  const Split a = split_dataset(d, 0.25, 9);
  const Split b = split_dataset(d, 0.25, 9);
  EXPECT_EQ(a.train.digest(), b.train.digest());
  EXPECT_EQ(a.val.digest(), b.val.digest());
  EXPECT_EQ(a.train.size() + a.val.size(), d.size());
  std::set<Digest> train;
  for (Index r = 0; r < a.train.size(); ++r) train.insert(a.train.sample_digest(r));
  for (Index r = 0; r < a.val.size(); ++r) EXPECT_EQ(train.count(a.val.sample_digest(r)), 0u);
  for (int s = 0; s < d.subset_count(); ++s) EXPECT_FALSE(rows_of_subset(a.val, s).empty());
  EXPECT_THROW(split_dataset(d, 1.0, 9), ConfigError);
}

TEST(Dataset, SelectAndAppend) {
  const Dataset d = generate_cv(small_cv(5));
  const std::vector<Index> rows{3, 1};
  const Dataset s = d.select(rows);
  EXPECT_EQ(s.sample_digest(0), d.sample_digest(3));
  EXPECT_EQ(s.labels[1], d.labels[1]);
  Dataset joined = s;
  joined.append(s);
  EXPECT_EQ(joined.size(), 4);
  const std::vector<Index> bad{d.size()};
  EXPECT_THROW(d.select(bad), IndexError);
  EXPECT_THROW(joined.append(moqe::testing::tiny_nlp()), DimensionError);
}

TEST(Manifest, SaveLoadRoundTrip) {
  TempDir dir("moqe_data");
  const Dataset d = generate_cv(small_cv(6));
  const Manifest m = save_dataset(d, "toy", dir.path());
  EXPECT_EQ(m.subsets.size(), 4u);
  const Dataset back = load_dataset(dir.path());
  EXPECT_EQ(to_hex(back.digest()), m.digest);
  EXPECT_EQ(back.size(), d.size());
  const nlohmann::json j = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
  EXPECT_EQ(j.at("kind"), "cv");
  EXPECT_EQ(j.at("name"), "toy");
  EXPECT_EQ(manifest_from_json(j).digest, m.digest);
}

TEST(Manifest, TamperedSubsetIsRefused) {
  TempDir dir("moqe_data");
  const Dataset d = generate_cv(small_cv(6));
  save_dataset(d, "toy", dir.path());
  Container c = Container::load(dir / "subset_0.moqe");
  Tensor in = c.tensor("inputs");
  in.data[0] += 1.0;
  Container mutated;
  mutated.header = c.header;
  for (const Entry& e : c.entries())
    if (e.name == "inputs")
      mutated.add_f64("inputs", in);
    else
      mutated.add_f64(e.name, c.tensor(e.name));
  mutated.save(dir / "subset_0.moqe");
  EXPECT_THROW(load_dataset(dir.path()), IntegrityError);
}

TEST(RealData, TextFilesAndRgbDirectory) {
  TempDir dir("moqe_data");
  {
    std::ofstream(dir / "a.txt") << "hello world, hello";
    std::ofstream(dir / "b.txt") << "zzz";
  }
  const std::vector<std::filesystem::path> files{dir / "a.txt", dir / "b.txt"};
  const Dataset t = load_text_files(files, 4);
  EXPECT_EQ(t.kind, Modality::nlp);
  EXPECT_EQ(detokenize(t.tokens(0)), "hello");

  std::filesystem::create_directories(dir / "rgb");
  for (int i = 0; i < 2; ++i) {
    std::ofstream f(dir / "rgb" / ("img" + std::to_string(i) + ".bin"), std::ios::binary);
    for (int k = 0; k < 3 * 8 * 8; ++k) f.put(static_cast<char>(k % 256));
  }
  std::ofstream(dir / "rgb" / "index.csv") << "img0.bin,1,0\nimg1.bin,2,1\n";
  const Dataset img = load_rgb_directory(dir / "rgb", 3, 8, 8);
  EXPECT_EQ(img.size(), 2);
  EXPECT_EQ(img.labels[1], 2);
  EXPECT_EQ(img.subsets[1], 1);
  EXPECT_THROW(load_rgb_directory(dir / "missing", 3, 8, 8), DependencyError);
}
