// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/experts.hpp"
#include "moqe/router.hpp"

namespace moqe {

struct BalanceStats {
  VectorX P;               // mean routing probability per expert
  VectorX F;               // dispatch fraction n_i / B
  std::vector<Index> n;    // argmax counts
  Index B = 0;
  Real sigma = 0.0;        // relative std of epoch-aggregated usage
};

// P, F and n of a batch of probabilities [B x N]; argmax ties -> lowest index.
BalanceStats batch_balance_stats(const Eigen::Ref<const RowMatrixX>& probs);
// std(F) / mean(F) of usage counts; 0 when nothing was dispatched.
Real usage_sigma(std::span<const Index> counts);

// N * sum_i P_i F_i, P taken from `probs` [B x N] in the graph, F constant.
Var balance_loss(Var probs, const BalanceStats& stats);
Real balance_value(const VectorX& P, const VectorX& F);

// alpha0 before the decay start, then linear to 0 at the last epoch (0-based).
Real alpha_schedule(Real alpha0, Index epoch, Index epochs, Real decay_start_fraction);
Real alpha_dyn(Real alpha0, Real sigma, Index epoch, Index epochs, Real decay_start_fraction);

struct CompositeLoss {
  Var total;
  Var ce;
  Var balance;
  BalanceStats stats;
};

// L_CE + alpha_eff * L_bal. Labels >= N -> IndexError.
CompositeLoss composite_loss(Var logits, std::span<const int> labels, Real alpha_eff);

enum class LrMode { staged, cosine };

struct TrainConfig {
  Real alpha0 = 0.02;
  Index epochs = 30;
  Real base_lr = 5e-5;
  LrMode lr_mode = LrMode::staged;
  // staged: base_lr, boosted by stage_boost over the middle third of the epochs.
  Real stage_boost = 2.0;
  Index warmup_steps = 0;
  Index batch_size = 32;
  Index grad_accum = 1;
  Real weight_decay = 0.0;
  Real max_grad_norm = 1.0;
  Index warm_epochs = 2;
  Real warm_fraction = 0.3;
  Index early_stop_patience = 7;
  Real decay_start_fraction = 0.8;
  // Samples whose oracle margin does not exceed this are neither trained on
  // nor counted in routing accuracy.
  Real min_margin = 0.05;
  // Added to the head bias of expert 0 before training.
  Real adversarial_bias = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
// Desk defaults per modality: staged schedule for cv, cosine with
// accumulation for nlp.
TrainConfig default_train_config(Modality kind);

// Oracle-labelled samples in router form.
struct RoutingSet {
  Modality kind = Modality::cv;
  RouterInput input;
  std::vector<int> oracle;
  std::vector<Real> margin;
  RowMatrixX loss;             // [samples x experts] per-sample task loss
  std::vector<Index> tokens;   // scored targets per sample
  std::vector<int> labels;     // cv class labels
  RowMatrixX predictions;      // [samples x experts] cv argmax classes
  std::vector<int> subsets;

  Index size() const { return static_cast<Index>(oracle.size()); }
  int experts() const { return static_cast<int>(loss.cols()); }
  std::vector<Index> confident(Real min_margin) const;
};

RoutingSet make_routing_set(const Dataset& data, const LabelSet& labels, const Registry& registry, const Model& base);
// Reuses per-expert evaluations of every row of `data` (as label_oracle returns them).
RoutingSet make_routing_set(const Dataset& data, const LabelSet& labels, std::span<const SampleEval> evals, const Model& base);
RouterInput slice_input(const RouterInput& in, std::span<const Index> rows);

struct EpochRecord {
  Index epoch = 0;
  Real lr = 0.0;
  Real train_loss = 0.0;
  Real train_ce = 0.0;
  Real train_balance = 0.0;
  Real val_ra = 0.0;
  Real val_loss = 0.0;   // task loss of the routed assignment
  std::vector<Real> F;   // epoch usage
  Real sigma = 0.0;
  Real alpha_eff = 0.0;  // last batch of the epoch
  Index samples = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  Index best_epoch = -1;
  Real best_ra = -1.0;
  bool stopped_early = false;

  void write_jsonl(const std::filesystem::path& path) const;
};

nlohmann::json to_json(const EpochRecord& r);

// Router predictions (argmax) for every sample.
std::vector<int> route_choices(Router& router, const RouterInput& in, Index batch = 256);

// Trains `router` on the confident samples of `train`, selecting on the
// routing accuracy of the confident samples of `val`. The best-RA weights are
// restored on return. Experts only enter through precomputed labels.
TrainHistory train_router(Router& router, const RoutingSet& train, const RoutingSet& val, const TrainConfig& cfg);

}  // namespace moqe
