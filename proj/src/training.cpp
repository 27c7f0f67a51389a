// SPDX-License-Identifier: Apache-2.0
#include "moqe/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "moqe/config.hpp"
#include "moqe/metrics.hpp"
#include "moqe/optim.hpp"

namespace moqe {

// ---------------------------------------------------------------------------
// Balance term

BalanceStats batch_balance_stats(const Eigen::Ref<const RowMatrixX>& probs) {
  if (probs.rows() == 0) throw ContractError("balance statistics of an empty batch");
  const Index n = probs.cols();
  BalanceStats s;
  s.B = probs.rows();
  s.P = probs.colwise().mean().transpose();
  s.n.assign(static_cast<std::size_t>(n), 0);
  for (Index r = 0; r < s.B; ++r) ++s.n[static_cast<std::size_t>(argmax_lowest(probs.row(r).transpose()))];
  s.F.resize(n);
  for (Index i = 0; i < n; ++i) s.F[i] = static_cast<Real>(s.n[static_cast<std::size_t>(i)]) / static_cast<Real>(s.B);
  s.sigma = usage_sigma(s.n);
  return s;
}

Real usage_sigma(std::span<const Index> counts) {
  const Real total = std::accumulate(counts.begin(), counts.end(), Real{0});
  if (counts.empty() || total == 0) return 0.0;
  const Real mean = 1.0 / static_cast<Real>(counts.size());
  Real var = 0.0;
  for (Index c : counts) {
    const Real d = static_cast<Real>(c) / total - mean;
    var += d * d;
  }
  return std::sqrt(var / static_cast<Real>(counts.size())) / mean;
}

Var balance_loss(Var probs, const BalanceStats& stats) {
  if (stats.B == 0) throw ContractError("balance loss of an empty batch");
  Graph& g = *probs.graph;
  const Index n = stats.F.size();
  if (g.shape(probs).size() != 2 || g.shape(probs)[1] != n) throw DimensionError("balance loss: probs do not match F");
  Var P = mean_rows(probs);
  Var F = g.constant(Shape{1, n}, stats.F);
  return scale(sum(mul(P, F)), static_cast<Real>(n));
}

Real balance_value(const VectorX& P, const VectorX& F) {
  if (P.size() != F.size()) throw DimensionError("balance value: P and F differ in length");
  return static_cast<Real>(P.size()) * P.dot(F);
}

Real alpha_schedule(Real alpha0, Index epoch, Index epochs, Real decay_start_fraction) {
  const Index last = epochs - 1;
  if (epoch >= last) return 0.0;
  const Real start = decay_start_fraction * static_cast<Real>(last);
  const Real e = static_cast<Real>(epoch);
  if (e <= start) return alpha0;
  return alpha0 * (static_cast<Real>(last) - e) / (static_cast<Real>(last) - start);
}

Real alpha_dyn(Real alpha0, Real sigma, Index epoch, Index epochs, Real decay_start_fraction) {
  if (sigma < 0) throw ContractError("alpha_dyn: sigma must be non-negative");
  return alpha_schedule(alpha0, epoch, epochs, decay_start_fraction) * (1.0 + sigma);
}

CompositeLoss composite_loss(Var logits, std::span<const int> labels, Real alpha_eff) {
  Graph& g = *logits.graph;
  const Index n = g.shape(logits)[1];
  for (int l : labels)
    if (l < 0 || l >= n) throw IndexError("oracle label " + std::to_string(l) + " outside [0, " + std::to_string(n) + ")");
  Var probs = softmax(logits);
  CompositeLoss out;
  out.stats = batch_balance_stats(g.mat(probs));
  out.ce = cross_entropy(logits, labels);
  out.balance = balance_loss(probs, out.stats);
  out.total = alpha_eff == 0.0 ? out.ce : add(out.ce, scale(out.balance, alpha_eff));
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  if (alpha0 < 0) throw ConfigError("train: alpha0 must be >= 0");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (!(base_lr > 0)) throw ConfigError("train: base_lr must be positive");
  if (stage_boost <= 0) throw ConfigError("train: stage_boost must be positive");
  if (warmup_steps < 0 || batch_size < 1 || grad_accum < 1) throw ConfigError("train: bad batch configuration");
  if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
  if (warm_epochs < 0 || !(warm_fraction > 0 && warm_fraction <= 1)) throw ConfigError("train: warm_fraction must be in (0, 1]");
  if (early_stop_patience < 1) throw ConfigError("train: early_stop_patience must be >= 1");
  if (!(decay_start_fraction >= 0 && decay_start_fraction <= 1)) throw ConfigError("train: decay_start_fraction must be in [0, 1]");
  if (min_margin < 0) throw ConfigError("train: min_margin must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"alpha0", c.alpha0},
       {"epochs", c.epochs},
       {"base_lr", c.base_lr},
       {"lr_mode", c.lr_mode == LrMode::staged ? "staged" : "cosine"},
       {"stage_boost", c.stage_boost},
       {"warmup_steps", c.warmup_steps},
       {"batch_size", c.batch_size},
       {"grad_accum", c.grad_accum},
       {"weight_decay", c.weight_decay},
       {"max_grad_norm", c.max_grad_norm},
       {"curriculum", {{"warm_epochs", c.warm_epochs}, {"warm_fraction", c.warm_fraction}}},
       {"early_stop_patience", c.early_stop_patience},
       {"decay_start_fraction", c.decay_start_fraction},
       {"min_margin", c.min_margin},
       {"adversarial_bias", c.adversarial_bias},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown_keys(j, {"alpha0", "epochs", "base_lr", "lr_mode", "stage_boost", "warmup_steps", "batch_size", "grad_accum",
                          "weight_decay", "max_grad_norm", "curriculum", "early_stop_patience", "decay_start_fraction",
                          "min_margin", "adversarial_bias", "seed"},
                      "train");
  c.alpha0 = j.value("alpha0", c.alpha0);
  c.epochs = j.value("epochs", c.epochs);
  c.base_lr = j.value("base_lr", c.base_lr);
  if (j.contains("lr_mode")) {
    const std::string m = j.at("lr_mode").get<std::string>();
    if (m == "staged") c.lr_mode = LrMode::staged;
    else if (m == "cosine") c.lr_mode = LrMode::cosine;
    else throw ConfigError("train: lr_mode must be 'staged' or 'cosine'");
  }
  c.stage_boost = j.value("stage_boost", c.stage_boost);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.grad_accum = j.value("grad_accum", c.grad_accum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  if (j.contains("curriculum")) {
    const nlohmann::json& cur = j.at("curriculum");
    reject_unknown_keys(cur, {"warm_epochs", "warm_fraction"}, "train.curriculum");
    c.warm_epochs = cur.value("warm_epochs", c.warm_epochs);
    c.warm_fraction = cur.value("warm_fraction", c.warm_fraction);
  }
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.decay_start_fraction = j.value("decay_start_fraction", c.decay_start_fraction);
  c.min_margin = j.value("min_margin", c.min_margin);
  c.adversarial_bias = j.value("adversarial_bias", c.adversarial_bias);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

TrainConfig default_train_config(Modality kind) {
  TrainConfig c;
  if (kind == Modality::nlp) {
    c.lr_mode = LrMode::cosine;
    c.batch_size = 8;
    c.grad_accum = 6;
    c.weight_decay = 0.01;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Routing sets

std::vector<Index> RoutingSet::confident(Real min_margin) const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i)
    if (margin[static_cast<std::size_t>(i)] > min_margin) out.push_back(i);
  return out;
}

RoutingSet make_routing_set(const Dataset& data, const LabelSet& labels, const Registry& registry, const Model& base) {
  if (!labels.matches(registry)) throw ContractError("routing set: labels belong to a different registry");
  const std::vector<Index> rows = all_rows(data);
  std::vector<SampleEval> evals;
  for (const Expert& e : registry.experts()) evals.push_back(per_sample_loss(e, data, rows));
  return make_routing_set(data, labels, evals, base);
}

RoutingSet make_routing_set(const Dataset& data, const LabelSet& labels, std::span<const SampleEval> evals, const Model& base) {
  if (static_cast<Index>(labels.labels.size()) != data.size()) throw ContractError("routing set: labels do not cover the dataset");
  if (evals.size() != static_cast<std::size_t>(labels.experts())) throw ContractError("routing set: one evaluation per expert required");
  RoutingSet s;
  s.kind = data.kind;
  s.input = router_input(data, all_rows(data), base);
  s.subsets = data.subsets;
  s.labels = data.labels;
  const Index n = data.size();
  const auto experts = static_cast<Index>(evals.size());
  s.loss.resize(n, experts);
  s.predictions.resize(n, experts);
  for (Index j = 0; j < experts; ++j) {
    const SampleEval& ev = evals[static_cast<std::size_t>(j)];
    if (ev.loss.size() != n) throw ContractError("routing set: evaluation does not cover the dataset");
    for (Index i = 0; i < n; ++i) {
      s.loss(i, j) = ev.loss[i];
      s.predictions(i, j) = ev.predictions[static_cast<std::size_t>(i)];
    }
  }
  s.tokens = evals.front().tokens;
  for (Index i = 0; i < n; ++i) {
    const OracleLabel& l = labels.labels[static_cast<std::size_t>(i)];
    for (Index j = 0; j < experts; ++j)
      if (s.loss(i, j) != l.losses[static_cast<std::size_t>(j)])
        throw IntegrityError("routing set: stored oracle losses differ from the evaluations");
    s.oracle.push_back(l.j_star);
    s.margin.push_back(l.margin);
  }
  return s;
}

RouterInput slice_input(const RouterInput& in, std::span<const Index> rows) {
  RouterInput out;
  out.seq = in.seq;
  out.batch = static_cast<Index>(rows.size());
  out.values.resize(out.batch * in.seq, in.values.cols());
  for (Index i = 0; i < out.batch; ++i)
    out.values.middleRows(i * in.seq, in.seq) = in.values.middleRows(rows[static_cast<std::size_t>(i)] * in.seq, in.seq);
  return out;
}

std::vector<int> route_choices(Router& router, const RouterInput& in, Index batch) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(in.batch));
  for (Index begin = 0; begin < in.batch; begin += batch) {
    std::vector<Index> rows(static_cast<std::size_t>(std::min(batch, in.batch - begin)));
    std::iota(rows.begin(), rows.end(), begin);
    for (const RoutingRecord& r : route(router, slice_input(in, rows))) out.push_back(r.chosen);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Router training

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},      {"lr", r.lr},        {"train_loss", r.train_loss}, {"train_ce", r.train_ce},
          {"train_balance", r.train_balance}, {"val_ra", r.val_ra}, {"val_loss", r.val_loss}, {"F", r.F},
          {"sigma", r.sigma},      {"alpha_eff", r.alpha_eff}, {"samples", r.samples}};
}

void TrainHistory::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const EpochRecord& r : epochs) out << to_json(r).dump() << '\n';
}

namespace {

Real epoch_lr(const TrainConfig& cfg, Index epoch, long step, long total_steps) {
  if (cfg.lr_mode == LrMode::cosine) return lr_schedule(step, total_steps, cfg.warmup_steps, cfg.base_lr);
  const Real warm = cfg.warmup_steps > 0 && step <= cfg.warmup_steps
                        ? static_cast<Real>(step) / static_cast<Real>(cfg.warmup_steps)
                        : 1.0;
  const Index third = cfg.epochs / 3;
  const bool boosted = epoch >= third && epoch < 2 * third;
  return cfg.base_lr * warm * (boosted ? cfg.stage_boost : 1.0);
}

std::vector<std::vector<Real>> snapshot(const ParamList& params) {
  std::vector<std::vector<Real>> out;
  for (const NamedParam& p : params) out.emplace_back(p.tensor->data.data(), p.tensor->data.data() + p.tensor->numel());
  return out;
}

void restore(const ParamList& params, const std::vector<std::vector<Real>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i].tensor->data = Eigen::Map<const VectorX>(snap[i].data(), static_cast<Index>(snap[i].size()));
}

}  // namespace

TrainHistory train_router(Router& router, const RoutingSet& train, const RoutingSet& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.experts() != router.n_experts() || val.experts() != router.n_experts())
    throw ContractError("train_router: label sets do not match the router's expert count");
  const std::vector<Index> pool = train.confident(cfg.min_margin);
  const std::vector<Index> val_rows = val.confident(cfg.min_margin);
  if (pool.size() < 2) throw ContractError("train_router: fewer than 2 confident training samples");
  if (val_rows.empty()) throw ContractError("train_router: no confident validation samples");

  Rng rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<Index> warm = pool;
  std::shuffle(warm.begin(), warm.end(), rng);
  warm.resize(std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(cfg.warm_fraction * static_cast<Real>(pool.size())))));

  const ParamList params = router.params();
  if (cfg.adversarial_bias != 0.0) router.head().bias.data[0] += cfg.adversarial_bias;
  set_requires_grad(params, true);
  AdamW opt(trainable(params), {cfg.base_lr, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.max_grad_norm});

  auto steps_in = [&](std::size_t n) {
    const long batches = static_cast<long>((n + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size));
    return (batches + cfg.grad_accum - 1) / cfg.grad_accum;
  };
  long total_steps = 0;
  for (Index e = 0; e < cfg.epochs; ++e) total_steps += steps_in(e < cfg.warm_epochs ? warm.size() : pool.size());

  const std::vector<int> val_oracle = [&] {
    std::vector<int> o;
    for (Index r : val_rows) o.push_back(val.oracle[static_cast<std::size_t>(r)]);
    return o;
  }();

  TrainHistory hist;
  std::vector<std::vector<Real>> best;
  long step = 0;
  Index since_best = 0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Index> order = epoch < cfg.warm_epochs ? warm : pool;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Index> usage(static_cast<std::size_t>(router.n_experts()), 0);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.samples = static_cast<Index>(order.size());
    Real lr = epoch_lr(cfg, epoch, step + 1, total_steps);
    Index micro = 0, batches = 0;
    opt.zero_grad();
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::span<const Index> rows(order.data() + begin, std::min(order.size() - begin, static_cast<std::size_t>(cfg.batch_size)));
      std::vector<int> labels;
      for (Index r : rows) labels.push_back(train.oracle[static_cast<std::size_t>(r)]);
      Graph g;
      Var z = router.logits(g, slice_input(train.input, rows));
      // sigma is consumed per batch from the usage aggregated so far this epoch.
      const BalanceStats probe = batch_balance_stats(g.mat(softmax(z)));
      for (std::size_t i = 0; i < usage.size(); ++i) usage[i] += probe.n[i];
      const Real sigma = usage_sigma(usage);
      const Real alpha = alpha_dyn(cfg.alpha0, sigma, epoch, cfg.epochs, cfg.decay_start_fraction);
      CompositeLoss loss = composite_loss(z, labels, alpha);
      const Real value = g.item(loss.total);
      if (!std::isfinite(value))
        throw TrainingError("router training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                            " (loss " + std::to_string(value) + ")");
      g.backward(cfg.grad_accum > 1 ? scale(loss.total, 1.0 / static_cast<Real>(cfg.grad_accum)) : loss.total);
      rec.train_loss += value;
      rec.train_ce += g.item(loss.ce);
      rec.train_balance += g.item(loss.balance);
      rec.alpha_eff = alpha;
      ++batches;
      const bool last = begin + static_cast<std::size_t>(cfg.batch_size) >= order.size();
      if (++micro == cfg.grad_accum || last) {
        lr = epoch_lr(cfg, epoch, step + 1, total_steps);
        opt.step(lr);
        opt.zero_grad();
        ++step;
        micro = 0;
      }
    }
    rec.lr = lr;
    rec.train_loss /= static_cast<Real>(batches);
    rec.train_ce /= static_cast<Real>(batches);
    rec.train_balance /= static_cast<Real>(batches);
    rec.sigma = usage_sigma(usage);
    const Real used = static_cast<Real>(std::accumulate(usage.begin(), usage.end(), Index{0}));
    for (Index u : usage) rec.F.push_back(static_cast<Real>(u) / used);

    const std::vector<int> chosen = route_choices(router, val.input);
    Index hits = 0;
    for (std::size_t i = 0; i < val_rows.size(); ++i) hits += chosen[static_cast<std::size_t>(val_rows[i])] == val_oracle[i];
    rec.val_ra = static_cast<Real>(hits) / static_cast<Real>(val_rows.size());
    rec.val_loss = evaluate_assignment(val, chosen).loss;
    hist.epochs.push_back(rec);

    if (rec.val_ra > hist.best_ra) {
      hist.best_ra = rec.val_ra;
      hist.best_epoch = epoch;
      best = snapshot(params);
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      hist.stopped_early = true;
      break;
    }
  }
  restore(params, best);
  set_requires_grad(params, false);
  return hist;
}

}  // namespace moqe
