// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/checkpoint.hpp"
#include "moqe/data.hpp"
#include "moqe/models.hpp"
#include "moqe/quant.hpp"

namespace moqe {

// A frozen quantized copy of the base model. `model` computes with the
// dequantized weights; biases, norms and embeddings stay full precision.
struct Expert {
  int id = -1;
  QuantSpec spec;
  std::shared_ptr<const Model> model;
  std::map<std::string, QuantizedTensor> quantized;
  Digest digest{};

  std::string label() const { return spec.label(); }
  Modality kind() const { return model->kind(); }

  Container to_container() const;
  // Rebuilds the expert and checks its content digest (IntegrityError).
  static Expert from_container(const Container& c);
};

// Digest over the spec, the integer codes with their affine parameters, and
// every full-precision tensor.
Digest expert_digest(const QuantSpec& spec, const Model& model, const std::map<std::string, QuantizedTensor>& q);

// Calibration batch for `spec`: calib_samples rows of `train` (restricted to
// spec.calib_subset when set), drawn with the "calib" substream of `seed`.
std::vector<Index> calibration_rows(const Dataset& train, const QuantSpec& spec, std::uint64_t seed);

// Quantizes every matrix weight of `base`. `calib` must cover every matrix
// when the scheme needs calibration.
Expert quantize_model(const Model& base, const QuantSpec& spec, const CalibrationStats* calib = nullptr);

class Registry {
 public:
  // Returns the new id (registration order). Duplicate digest -> RegistrationError.
  int add(Expert e);
  const Expert& at(int id) const;
  int size() const { return static_cast<int>(experts_.size()); }
  const std::vector<Expert>& experts() const { return experts_; }
  std::vector<Digest> digests() const;
  // Digest binding the ordered id -> digest mapping.
  Digest set_digest() const;
  // Registry with the experts of ids [0, count).
  Registry prefix(int count) const;

  nlohmann::json index() const;
  // Writes expert_<id>.moqe files and registry.json under `dir`.
  void save(const std::filesystem::path& dir) const;
  static Registry load(const std::filesystem::path& dir);
  // Reads only the index (id, label, digest, file, bytes) without loading experts.
  static nlohmann::json read_index(const std::filesystem::path& dir);

 private:
  std::vector<Expert> experts_;
};

// Per-sample loss of one expert; throws ContractError on modality mismatch.
SampleEval per_sample_loss(const Expert& expert, const Dataset& data, std::span<const Index> rows);

struct OracleLabel {
  Digest sample{};
  std::vector<Real> losses;
  int j_star = 0;
  Real margin = 0.0;
};

struct LabelSet {
  std::vector<Digest> registry;  // expert digests in id order
  Digest dataset{};
  std::vector<OracleLabel> labels;

  int experts() const { return static_cast<int>(registry.size()); }
  std::vector<int> j_star() const;
  // Rows whose margin exceeds `min_margin`.
  std::vector<Index> confident_rows(Real min_margin) const;
  // Per-expert share of oracle wins.
  std::vector<Real> win_share() const;
  bool matches(const Registry& r) const;

  Bytes serialize() const;
  static LabelSet parse(std::span<const std::uint8_t> bytes);
};

// Lowest loss wins; ties go to the lowest expert id.
OracleLabel make_label(const Digest& sample, std::vector<Real> losses);

// Labels every row of `data` with its optimal expert. Needs >= 2 experts and a
// non-empty dataset (ContractError).
LabelSet label_oracle(const Registry& registry, const Dataset& data);
// As above, also returning the per-expert evaluations the labels came from.
LabelSet label_oracle(const Registry& registry, const Dataset& data, std::vector<SampleEval>& evals);
// As label_oracle, reusing <cache_dir>/labels_<key>.bin keyed by the registry
// digests and the dataset digest.
LabelSet label_oracle_cached(const Registry& registry, const Dataset& data, const std::filesystem::path& cache_dir);

struct HeterogeneityReport {
  RowMatrixX mean_loss;   // [subsets x experts]
  std::vector<int> winner;  // per subset, lowest mean loss (ties -> lowest id)
  std::vector<std::string> experts;

  nlohmann::json to_json() const;
  int distinct_winners() const;
};

HeterogeneityReport heterogeneity_report(const Registry& registry, const Dataset& data, const LabelSet& labels);

}  // namespace moqe
