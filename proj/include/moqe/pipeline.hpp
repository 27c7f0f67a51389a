// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/config.hpp"
#include "moqe/experts.hpp"
#include "moqe/metrics.hpp"
#include "moqe/serving.hpp"

namespace moqe {

// Full dataset of a run with subset ids stamped (texture family for cv,
// document entropy quantile for nlp).
Dataset generate_run_data(const RunConfig& cfg);
Split split_run_data(const RunConfig& cfg, const Dataset& all);

std::unique_ptr<Model> train_run_base(const RunConfig& cfg, const Dataset& train, TrainBaseHistory* history = nullptr);
// Quantizes `base` once per spec; calibration rows come from `train`.
Registry build_registry(const RunConfig& cfg, const Model& base, const Dataset& train);
std::unique_ptr<Router> make_run_router(const RunConfig& cfg, const Model& base, int n_experts, std::uint64_t seed);

// Stages in dependency order.
enum class Stage { data, train_base, quantize, label, train_router, eval, bench };

std::string to_string(Stage s);
Stage parse_stage(const std::string& s);  // ConfigError on an unknown name
const std::vector<Stage>& all_stages();

// Artifacts of a run live under one directory:
//   resolved_config.json, manifest.json
//   data/                             train-base input (both splits)
//   base.moqe, base_history.json
//   experts/registry.json, experts/expert_<id>.moqe
//   labels_train.bin, labels_val.bin
//   router.moqe, router_history.jsonl
//   eval.json, eval_table.txt, eval.csv, histograms.csv, sweep.json
//   bench.json
// manifest.json records, per completed stage, the digest of every artifact
// it consumed and produced. A stage refuses to run when an upstream artifact
// is missing or no longer matches its recorded digest (DependencyError).
// Without `overwrite`, a directory holding a different resolved config is
// refused (DependencyError) and a completed stage is not rerun (ConfigError).
class Pipeline {
 public:
  Pipeline(RunConfig cfg, std::filesystem::path run_dir, bool overwrite = false);

  void run(Stage stage);
  // Every stage from the first one not yet recorded.
  void run_all();

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return dir_; }
  const nlohmann::json& manifest() const { return manifest_; }
  bool completed(Stage stage) const;

 private:
  void run_data();
  void run_train_base();
  void run_quantize();
  void run_label();
  void run_train_router();
  void run_eval();
  void run_bench();

  std::filesystem::path path(const std::string& artifact) const;
  std::string artifact_digest(const std::string& artifact) const;
  // Upstream artifacts, verified against the producing stage's record.
  void require(Stage stage, const std::vector<std::string>& artifacts) const;
  void record(Stage stage, const std::vector<std::string>& inputs, const std::vector<std::string>& outputs);
  void write_resolved_config() const;

  Split load_split() const;
  std::unique_ptr<Model> load_base() const;

  RunConfig cfg_;
  std::filesystem::path dir_;
  bool overwrite_ = false;
  nlohmann::json manifest_;
};

// runs_root/<UTC timestamp>-seed<seed>.
std::filesystem::path default_run_dir(const std::filesystem::path& runs_root, std::uint64_t seed);

// Process exit code for an exception escaping a pipeline stage:
// 2 configuration, 3 missing or stale dependency, 4 numerical failure, 1 other.
int exit_code_for(const std::exception& e);

}  // namespace moqe
