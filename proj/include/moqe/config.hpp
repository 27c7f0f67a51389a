// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/data.hpp"
#include "moqe/models.hpp"
#include "moqe/quant.hpp"
#include "moqe/training.hpp"

namespace moqe {

// ConfigError when `j` is not an object or has a key outside `keys`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& what);

struct DataSection {
  Modality kind = Modality::cv;
  Index subsets = 7;
  Real val_fraction = 0.25;
  CvGenConfig cv{10, 7, 24, 3, 16, 0.05, 0};
  NlpGenConfig nlp;
};

struct BaseSection {
  std::string arch = "cv_resnet";
  nlohmann::json config = nlohmann::json::object();
  TrainBaseConfig train;
};

struct EvalSection {
  std::vector<int> sweep_counts{2, 3, 4, 5};
  std::vector<std::uint64_t> sweep_seeds{1, 2, 3};
};

struct BenchSection {
  Index requests = 64;
  Index repetitions = 30;
  Index warmup = 3;
  std::string store = "disk";  // disk | memory
  // 0 = router bytes plus the largest expert.
  Index fast_capacity_bytes = 0;
};

// One pipeline run. Unknown keys are rejected at every level; every seed
// below is derived from `seed` unless set explicitly.
struct RunConfig {
  std::uint64_t seed = 1;
  DataSection data;
  BaseSection base_model;
  std::vector<QuantSpec> quant;
  nlohmann::json router = nlohmann::json::object();
  TrainConfig train;
  EvalSection eval;
  BenchSection bench;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

// Shipped configurations: the heterogeneous image suite and the text suite.
RunConfig default_cv_config();
RunConfig default_nlp_config();

}  // namespace moqe
