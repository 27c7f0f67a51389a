// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/checkpoint.hpp"
#include "moqe/tensor.hpp"

namespace moqe {

enum class Modality { cv, nlp };

std::string to_string(Modality m);
Modality parse_modality(const std::string& s);

// Token id marking padding in stored sequences.
inline constexpr int kPadToken = -1;

// A labelled sample set. One row of `inputs` per sample:
//   cv  - c*h*w pixel values in channel-major (CHW) order, label = class id
//   nlp - seq_len + 1 token ids (kPadToken after the end), label unused
struct Dataset {
  Modality kind = Modality::cv;
  Index channels = 3;
  Index height = 32;
  Index width = 32;
  Index seq_len = 0;
  RowMatrixX inputs;
  std::vector<int> labels;
  std::vector<int> subsets;

  Index size() const { return inputs.rows(); }
  Dataset select(std::span<const Index> rows) const;
  Dataset empty_like() const;
  void append(const Dataset& other);
  std::vector<int> tokens(Index row) const;

  Digest sample_digest(Index row) const;
  Digest digest() const;
  int subset_count() const;
};

std::vector<Index> all_rows(const Dataset& d);
std::vector<Index> rows_of_subset(const Dataset& d, int subset);

// Byte-level tokenizer: one token per byte.
std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> ids);

// Procedural image classes on textured backgrounds. Each texture family has its
// own colour-channel mix, stripe frequency and orientation, so the family is
// the natural sub-dataset.
struct CvGenConfig {
  Index classes = 10;
  Index families = 7;
  Index per_class = 30;  // per (family, class)
  Index channels = 3;
  Index size = 32;
  Real noise = 0.05;
  std::uint64_t seed = 0;
};
Dataset generate_cv(const CvGenConfig& cfg);

// Synthetic text: documents from `sources` order-1 Markov sources of
// increasing temperature (entropy).
struct NlpGenConfig {
  Index sources = 7;
  Index documents_per_source = 12;
  Index document_bytes = 2048;
  Index seq_len = 32;
  std::uint64_t seed = 0;
};
std::vector<std::string> generate_corpus(const NlpGenConfig& cfg);
// Splits documents into non-overlapping windows of seq_len + 1 tokens; the
// tail of a document is padded. subsets[r] is the document index.
Dataset sequences_from_documents(std::span<const std::string> docs, Index seq_len);

// Mean per-byte empirical entropy (bits) of a document.
Real byte_entropy(std::string_view text);

enum class SubsetStrategy {
  texture_family,   // cv: stratum = generator family, balanced labels
  entropy_quantile  // nlp: stratum = document byte-entropy quantile
};

// Partitions `data` into n subsets and stamps subset ids. `strata` gives the
// stratum of every row (texture family, or a per-row entropy for nlp).
std::vector<Dataset> make_subsets(const Dataset& data, Index n_subsets, SubsetStrategy strategy,
                                  std::span<const Real> strata);

// Deterministic split of every subset into a training and validation part.
struct Split {
  Dataset train;
  Dataset val;
};
Split split_dataset(const Dataset& data, Real val_fraction, std::uint64_t seed);

// On-disk dataset: manifest.json + one container per subset.
struct ManifestEntry {
  int id = 0;
  std::string path;
  Index count = 0;
};
struct Manifest {
  std::string name;
  Modality kind = Modality::cv;
  std::vector<ManifestEntry> subsets;
  std::string digest;
};
nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);

Container dataset_to_container(const Dataset& d);
Dataset dataset_from_container(const Container& c);

Manifest save_dataset(const Dataset& d, const std::string& name, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Real-data ingestion: UTF-8 text files, or a directory of raw RGB arrays
// (c*h*w little-endian f64 or u8 files) with a CSV index "file,label[,subset]".
Dataset load_text_files(std::span<const std::filesystem::path> files, Index seq_len);
Dataset load_rgb_directory(const std::filesystem::path& dir, Index channels, Index height, Index width);

}  // namespace moqe
