// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/experts.hpp"
#include "moqe/router.hpp"
#include "moqe/training.hpp"

namespace moqe {

// Aggregate task metric of an assignment of samples to experts.
//   loss: token-pooled mean cross-entropy (cv: one token per sample)
//   accuracy: cv top-1, NaN for nlp
//   perplexity: exp(loss) for nlp, NaN for cv
struct TaskMetric {
  Real loss = 0.0;
  Real accuracy = 0.0;
  Real perplexity = 0.0;
  Index samples = 0;
  Index tokens = 0;
};

nlohmann::json to_json(const TaskMetric& m);

// The single evaluation path shared by per-expert, oracle and routed metrics.
// `rows` empty means every sample.
TaskMetric evaluate_assignment(const RoutingSet& set, std::span<const int> assignment, std::span<const Index> rows = {});
TaskMetric single_expert_metric(const RoutingSet& set, int expert, std::span<const Index> rows = {});
// Every sample evaluated by its oracle expert.
TaskMetric upper_bound_eval(const RoutingSet& set, std::span<const Index> rows = {});
TaskMetric upper_bound_eval(const Registry& registry, const Dataset& data, const LabelSet& labels, const Model& base);

// Fraction of records whose choice equals the oracle. Empty input or a
// missing oracle -> ContractError.
Real routing_accuracy(std::span<const RoutingRecord> records);

struct SubsetHistogram {
  int subset = 0;
  Index samples = 0;
  VectorX mean_probs;
  Real entropy = 0.0;  // of mean_probs
};

std::vector<SubsetHistogram> prob_histograms(std::span<const RoutingRecord> records, std::span<const int> subset_ids);

struct EvalReport {
  std::vector<std::string> experts;
  std::vector<TaskMetric> per_expert;
  std::optional<TaskMetric> baseline;  // full-precision base model
  TaskMetric moqe;
  TaskMetric oracle;
  // The same three on samples with oracle margin above min_margin.
  std::vector<TaskMetric> per_expert_confident;
  TaskMetric moqe_confident;
  TaskMetric oracle_confident;
  Real min_margin = 0.0;
  Real ra = 0.0;            // on confident samples
  Real ra_all = 0.0;        // on every sample
  Real mean_entropy = 0.0;
  std::vector<Real> usage;  // share of samples routed to each expert
  HeterogeneityReport winners;
  std::vector<SubsetHistogram> histograms;
  Real gap_to_upper_bound = 0.0;  // moqe.loss - oracle.loss

  int best_expert() const;  // lowest per-expert loss, ties -> lowest id
  nlohmann::json to_json() const;
  // Experts as rows, then MoQE, oracle and the baseline when present.
  std::string table() const;
  std::string csv() const;
  std::string histogram_csv() const;
};

// Routes every sample of `set` and assembles the report. `registry_digest`
// is the set digest the router was trained against; a mismatch with
// `registry` is refused (IntegrityError).
EvalReport moqe_eval(Router& router, const Digest& registry_digest, const Registry& registry, const Dataset& data,
                     const RoutingSet& set, Real min_margin, const Model* baseline = nullptr);

struct SweepPoint {
  int count = 0;
  TaskMetric upper_bound;
  std::vector<Real> moqe_loss;  // one per seed
  std::vector<Real> ra;         // one per seed
  Real mean_moqe_loss = 0.0;
};

nlohmann::json to_json(const SweepPoint& p);

// Fresh router per count on the id-prefix registry, same seeds for every
// count. Counts beyond the registry or below 1 -> ConfigError. Count 1 is
// the single-expert metric.
std::vector<SweepPoint> expert_count_sweep(const Registry& registry, const Model& base, const Dataset& train,
                                           const Dataset& val, std::span<const int> counts,
                                           const nlohmann::json& router_config, const TrainConfig& train_config,
                                           std::span<const std::uint64_t> seeds);

}  // namespace moqe
