// SPDX-License-Identifier: Apache-2.0
#include "moqe/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace moqe {

namespace {

constexpr Real kNaN = std::numeric_limits<Real>::quiet_NaN();

std::vector<Index> rows_or_all(const RoutingSet& set, std::span<const Index> rows) {
  if (!rows.empty()) return {rows.begin(), rows.end()};
  std::vector<Index> all(static_cast<std::size_t>(set.size()));
  std::iota(all.begin(), all.end(), Index{0});
  return all;
}

nlohmann::json real_or_null(Real v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

// Oracle and margin recomputed on the first `count` experts.
RoutingSet prefix_set(const RoutingSet& full, int count) {
  RoutingSet s = full;
  s.loss = full.loss.leftCols(count).eval();
  s.predictions = full.predictions.leftCols(count).eval();
  for (Index i = 0; i < full.size(); ++i) {
    std::vector<Real> l(s.loss.row(i).data(), s.loss.row(i).data() + count);
    const OracleLabel lab = make_label({}, std::move(l));
    s.oracle[static_cast<std::size_t>(i)] = lab.j_star;
    s.margin[static_cast<std::size_t>(i)] = lab.margin;
  }
  return s;
}

}  // namespace

nlohmann::json to_json(const TaskMetric& m) {
  return {{"loss", m.loss},
          {"accuracy", real_or_null(m.accuracy)},
          {"perplexity", real_or_null(m.perplexity)},
          {"samples", m.samples},
          {"tokens", m.tokens}};
}

TaskMetric evaluate_assignment(const RoutingSet& set, std::span<const int> assignment, std::span<const Index> rows) {
  if (static_cast<Index>(assignment.size()) != set.size()) throw ContractError("assignment does not cover the set");
  const std::vector<Index> use = rows_or_all(set, rows);
  if (use.empty()) throw ContractError("evaluate_assignment: no samples");
  const bool cv = set.kind == Modality::cv;
  Real loss_sum = 0.0;
  Index tokens = 0, hits = 0;
  for (Index r : use) {
    const int j = assignment[static_cast<std::size_t>(r)];
    if (j < 0 || j >= set.experts()) throw IndexError("assignment names expert " + std::to_string(j));
    const Index t = set.tokens[static_cast<std::size_t>(r)];
    loss_sum += set.loss(r, j) * static_cast<Real>(t);
    tokens += t;
    if (cv) hits += static_cast<int>(set.predictions(r, j)) == set.labels[static_cast<std::size_t>(r)];
  }
  TaskMetric m;
  m.samples = static_cast<Index>(use.size());
  m.tokens = tokens;
  m.loss = tokens > 0 ? loss_sum / static_cast<Real>(tokens) : 0.0;
  m.accuracy = cv ? static_cast<Real>(hits) / static_cast<Real>(use.size()) : kNaN;
  m.perplexity = cv ? kNaN : std::exp(m.loss);
  return m;
}

TaskMetric single_expert_metric(const RoutingSet& set, int expert, std::span<const Index> rows) {
  return evaluate_assignment(set, std::vector<int>(static_cast<std::size_t>(set.size()), expert), rows);
}

TaskMetric upper_bound_eval(const RoutingSet& set, std::span<const Index> rows) {
  return evaluate_assignment(set, set.oracle, rows);
}

TaskMetric upper_bound_eval(const Registry& registry, const Dataset& data, const LabelSet& labels, const Model& base) {
  return upper_bound_eval(make_routing_set(data, labels, registry, base));
}

Real routing_accuracy(std::span<const RoutingRecord> records) {
  if (records.empty()) throw ContractError("routing accuracy of an empty record list");
  Index hits = 0;
  for (const RoutingRecord& r : records) {
    if (!r.oracle) throw ContractError("routing accuracy: record without an oracle label");
    hits += r.chosen == *r.oracle;
  }
  return static_cast<Real>(hits) / static_cast<Real>(records.size());
}

std::vector<SubsetHistogram> prob_histograms(std::span<const RoutingRecord> records, std::span<const int> subset_ids) {
  if (records.size() != subset_ids.size()) throw ContractError("prob_histograms: one subset id per record required");
  std::vector<SubsetHistogram> out;
  if (records.empty()) return out;
  const int subsets = *std::max_element(subset_ids.begin(), subset_ids.end()) + 1;
  const Index n = records.front().probs.size();
  for (int s = 0; s < subsets; ++s) out.push_back({s, 0, VectorX::Zero(n), 0.0});
  for (std::size_t i = 0; i < records.size(); ++i) {
    SubsetHistogram& h = out[static_cast<std::size_t>(subset_ids[i])];
    h.mean_probs += records[i].probs;
    ++h.samples;
  }
  for (SubsetHistogram& h : out) {
    if (h.samples == 0) continue;
    h.mean_probs /= static_cast<Real>(h.samples);
    for (Index j = 0; j < n; ++j)
      if (h.mean_probs[j] > 0) h.entropy -= h.mean_probs[j] * std::log(h.mean_probs[j]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

int EvalReport::best_expert() const {
  int best = 0;
  for (std::size_t j = 1; j < per_expert.size(); ++j)
    if (per_expert[j].loss < per_expert[static_cast<std::size_t>(best)].loss) best = static_cast<int>(j);
  return best;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json experts_json = nlohmann::json::array();
  for (std::size_t j = 0; j < experts.size(); ++j)
    experts_json.push_back({{"id", j},
                            {"label", experts[j]},
                            {"metric", moqe::to_json(per_expert[j])},
                            {"confident", moqe::to_json(per_expert_confident[j])},
                            {"usage", usage[j]}});
  nlohmann::json hist = nlohmann::json::array();
  for (const SubsetHistogram& h : histograms)
    hist.push_back({{"subset", h.subset},
                    {"samples", h.samples},
                    {"mean_probs", std::vector<Real>(h.mean_probs.data(), h.mean_probs.data() + h.mean_probs.size())},
                    {"entropy", h.entropy}});
  nlohmann::json j = {{"experts", experts_json},
                      {"moqe", moqe::to_json(moqe)},
                      {"oracle", moqe::to_json(oracle)},
                      {"moqe_confident", moqe::to_json(moqe_confident)},
                      {"oracle_confident", moqe::to_json(oracle_confident)},
                      {"min_margin", min_margin},
                      {"ra", ra},
                      {"ra_all", ra_all},
                      {"mean_entropy", mean_entropy},
                      {"best_expert", best_expert()},
                      {"gap_to_upper_bound", gap_to_upper_bound},
                      {"winner_table", winners.to_json()},
                      {"histograms", hist}};
  if (baseline) j["baseline"] = moqe::to_json(*baseline);
  return j;
}

std::string EvalReport::table() const {
  const bool cv = std::isfinite(moqe.accuracy);
  std::ostringstream os;
  os << std::left << std::setw(34) << "model" << std::right << std::setw(12) << "loss" << std::setw(12)
     << (cv ? "top1" : "ppl") << std::setw(12) << "usage" << '\n';
  auto row = [&](const std::string& name, const TaskMetric& m, std::optional<Real> use) {
    os << std::left << std::setw(34) << name << std::right << std::fixed << std::setprecision(4) << std::setw(12) << m.loss
       << std::setw(12) << (cv ? m.accuracy : m.perplexity);
    if (use) os << std::setw(12) << *use;
    os << '\n';
  };
  for (std::size_t j = 0; j < experts.size(); ++j) row(experts[j], per_expert[j], usage[j]);
  row("MoQE", moqe, std::nullopt);
  row("oracle (upper bound)", oracle, std::nullopt);
  if (baseline) row("full precision", *baseline, std::nullopt);
  os << "routing accuracy " << std::setprecision(4) << ra << " (margin > " << min_margin << "), " << ra_all << " overall\n";
  return os.str();
}

std::string EvalReport::csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "model,loss,accuracy,perplexity,samples\n";
  auto row = [&](const std::string& name, const TaskMetric& m) {
    os << name << ',' << m.loss << ',' << m.accuracy << ',' << m.perplexity << ',' << m.samples << '\n';
  };
  for (std::size_t j = 0; j < experts.size(); ++j) row(experts[j], per_expert[j]);
  row("MoQE", moqe);
  row("oracle", oracle);
  if (baseline) row("full_precision", *baseline);
  return os.str();
}

std::string EvalReport::histogram_csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "subset,samples";
  for (std::size_t j = 0; j < experts.size(); ++j) os << ",p" << j;
  os << ",entropy\n";
  for (const SubsetHistogram& h : histograms) {
    os << h.subset << ',' << h.samples;
    for (Index j = 0; j < h.mean_probs.size(); ++j) os << ',' << h.mean_probs[j];
    os << ',' << h.entropy << '\n';
  }
  return os.str();
}

EvalReport moqe_eval(Router& router, const Digest& registry_digest, const Registry& registry, const Dataset& data,
                     const RoutingSet& set, Real min_margin, const Model* baseline) {
  if (registry_digest != registry.set_digest())
    throw IntegrityError("router was trained against registry " + to_hex(registry_digest) + ", got " + to_hex(registry.set_digest()));
  if (router.n_experts() != registry.size() || set.experts() != registry.size())
    throw ContractError("moqe_eval: router, registry and labels disagree on the expert count");
  if (set.size() != data.size()) throw ContractError("moqe_eval: routing set does not match the dataset");

  std::vector<RoutingRecord> records;
  for (Index begin = 0; begin < set.size(); begin += 256) {
    std::vector<Index> rows(static_cast<std::size_t>(std::min<Index>(256, set.size() - begin)));
    std::iota(rows.begin(), rows.end(), begin);
    for (RoutingRecord& r : route(router, slice_input(set.input, rows))) records.push_back(std::move(r));
  }
  std::vector<int> chosen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].oracle = set.oracle[i];
    chosen.push_back(records[i].chosen);
  }

  EvalReport rep;
  rep.min_margin = min_margin;
  const std::vector<Index> confident = set.confident(min_margin);
  for (int j = 0; j < registry.size(); ++j) {
    rep.experts.push_back(registry.at(j).label());
    rep.per_expert.push_back(single_expert_metric(set, j));
    rep.per_expert_confident.push_back(confident.empty() ? TaskMetric{} : single_expert_metric(set, j, confident));
  }
  rep.moqe = evaluate_assignment(set, chosen);
  rep.oracle = upper_bound_eval(set);
  if (!confident.empty()) {
    rep.moqe_confident = evaluate_assignment(set, chosen, confident);
    rep.oracle_confident = upper_bound_eval(set, confident);
    std::vector<RoutingRecord> sub;
    for (Index r : confident) sub.push_back(records[static_cast<std::size_t>(r)]);
    rep.ra = routing_accuracy(sub);
  }
  rep.ra_all = routing_accuracy(records);
  rep.usage.assign(static_cast<std::size_t>(registry.size()), 0.0);
  for (const RoutingRecord& r : records) {
    rep.usage[static_cast<std::size_t>(r.chosen)] += 1.0 / static_cast<Real>(records.size());
    rep.mean_entropy += r.entropy / static_cast<Real>(records.size());
  }
  rep.gap_to_upper_bound = rep.moqe.loss - rep.oracle.loss;

  LabelSet labels;
  labels.registry = registry.digests();
  labels.dataset = data.digest();
  for (Index i = 0; i < set.size(); ++i) {
    std::vector<Real> l(set.loss.row(i).data(), set.loss.row(i).data() + set.loss.cols());
    labels.labels.push_back(make_label({}, std::move(l)));
  }
  rep.winners = heterogeneity_report(registry, data, labels);
  rep.histograms = prob_histograms(records, set.subsets);

  if (baseline != nullptr) {
    const SampleEval ev = baseline->evaluate(data, all_rows(data));
    RoutingSet b = set;
    b.loss = Eigen::Map<const VectorX>(ev.loss.data(), ev.loss.size());
    b.predictions.resize(set.size(), 1);
    for (Index i = 0; i < set.size(); ++i) b.predictions(i, 0) = ev.predictions[static_cast<std::size_t>(i)];
    rep.baseline = single_expert_metric(b, 0);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Expert-count sweep

nlohmann::json to_json(const SweepPoint& p) {
  return {{"count", p.count},
          {"upper_bound", to_json(p.upper_bound)},
          {"moqe_loss", p.moqe_loss},
          {"ra", p.ra},
          {"mean_moqe_loss", p.mean_moqe_loss}};
}

std::vector<SweepPoint> expert_count_sweep(const Registry& registry, const Model& base, const Dataset& train,
                                           const Dataset& val, std::span<const int> counts,
                                           const nlohmann::json& router_config, const TrainConfig& train_config,
                                           std::span<const std::uint64_t> seeds) {
  for (int c : counts)
    if (c < 1 || c > registry.size())
      throw ConfigError("expert count " + std::to_string(c) + " outside [1, " + std::to_string(registry.size()) + "]");
  if (seeds.empty()) throw ConfigError("expert_count_sweep: no seeds");
  const int max_count = *std::max_element(counts.begin(), counts.end());
  const Registry full = registry.prefix(std::max(2, max_count));
  std::vector<SampleEval> evals;
  const LabelSet train_labels = label_oracle(full, train, evals);
  const RoutingSet train_full = make_routing_set(train, train_labels, evals, base);
  const LabelSet val_labels = label_oracle(full, val, evals);
  const RoutingSet val_full = make_routing_set(val, val_labels, evals, base);

  std::vector<SweepPoint> out;
  for (int count : counts) {
    SweepPoint p;
    p.count = count;
    if (count == 1) {
      p.upper_bound = single_expert_metric(val_full, 0);
      for (std::size_t s = 0; s < seeds.size(); ++s) {
        p.moqe_loss.push_back(p.upper_bound.loss);
        p.ra.push_back(1.0);
      }
    } else {
      const RoutingSet tr = prefix_set(train_full, count);
      const RoutingSet va = prefix_set(val_full, count);
      p.upper_bound = upper_bound_eval(va);
      for (std::uint64_t seed : seeds) {
        std::unique_ptr<Router> router = make_router(base, router_config, count, seed);
        TrainConfig tc = train_config;
        tc.seed = seed;
        const TrainHistory h = train_router(*router, tr, va, tc);
        p.moqe_loss.push_back(evaluate_assignment(va, route_choices(*router, va.input)).loss);
        p.ra.push_back(h.best_ra);
      }
    }
    p.mean_moqe_loss = std::accumulate(p.moqe_loss.begin(), p.moqe_loss.end(), 0.0) / static_cast<Real>(p.moqe_loss.size());
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace moqe
