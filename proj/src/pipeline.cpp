// SPDX-License-Identifier: Apache-2.0
#include "moqe/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>

#include "moqe/errors.hpp"

namespace moqe {

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  write_file(p, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

nlohmann::json read_json(const std::filesystem::path& p) {
  const Bytes raw = read_file(p);
  try {
    return nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.string() + " is not JSON: " + e.what());
  }
}

Dataset concat(const std::vector<Dataset>& parts) {
  Dataset out = parts.front().empty_like();
  for (const Dataset& p : parts) out.append(p);
  return out;
}

struct StageInfo {
  Stage stage;
  const char* name;
};

constexpr StageInfo kStages[] = {{Stage::data, "data"},           {Stage::train_base, "train-base"},
                                 {Stage::quantize, "quantize"},   {Stage::label, "label"},
                                 {Stage::train_router, "train-router"}, {Stage::eval, "eval"},
                                 {Stage::bench, "bench"}};

}  // namespace

// ---------------------------------------------------------------------------
// Building blocks

Dataset generate_run_data(const RunConfig& cfg) {
  if (cfg.data.kind == Modality::cv) {
    CvGenConfig g = cfg.data.cv;
    g.seed = cfg.seed;
    const Dataset all = generate_cv(g);
    std::vector<Real> strata(all.subsets.begin(), all.subsets.end());
    return concat(make_subsets(all, cfg.data.subsets, SubsetStrategy::texture_family, strata));
  }
  NlpGenConfig g = cfg.data.nlp;
  g.seed = cfg.seed;
  const std::vector<std::string> docs = generate_corpus(g);
  const Dataset all = sequences_from_documents(docs, g.seq_len);
  std::vector<Real> strata;
  for (int doc : all.subsets) strata.push_back(byte_entropy(docs[static_cast<std::size_t>(doc)]));
  return concat(make_subsets(all, cfg.data.subsets, SubsetStrategy::entropy_quantile, strata));
}

Split split_run_data(const RunConfig& cfg, const Dataset& all) { return split_dataset(all, cfg.data.val_fraction, cfg.seed); }

std::unique_ptr<Model> train_run_base(const RunConfig& cfg, const Dataset& train, TrainBaseHistory* history) {
  std::unique_ptr<Model> base = make_model(cfg.base_model.arch, cfg.base_model.config, cfg.seed);
  TrainBaseConfig tc = cfg.base_model.train;
  tc.seed = cfg.seed;
  TrainBaseHistory h = train_base(*base, train, tc);
  if (history) *history = std::move(h);
  return base;
}

Registry build_registry(const RunConfig& cfg, const Model& base, const Dataset& train) {
  if (cfg.quant.size() < 2) throw ConfigError("quant: at least two expert specs are required");
  Registry reg;
  for (const QuantSpec& q : cfg.quant) {
    std::optional<CalibrationStats> cal;
    if (q.needs_calibration()) cal = base.calibrate(train, calibration_rows(train, q, cfg.seed));
    reg.add(quantize_model(base, q, cal ? &*cal : nullptr));
  }
  return reg;
}

std::unique_ptr<Router> make_run_router(const RunConfig& cfg, const Model& base, int n_experts, std::uint64_t seed) {
  return make_router(base, cfg.router, n_experts, seed);
}

std::string to_string(Stage s) {
  for (const StageInfo& i : kStages)
    if (i.stage == s) return i.name;
  throw ContractError("unknown stage");
}

Stage parse_stage(const std::string& s) {
  for (const StageInfo& i : kStages)
    if (s == i.name) return i.stage;
  throw ConfigError("unknown pipeline stage '" + s + "'");
}

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages = [] {
    std::vector<Stage> v;
    for (const StageInfo& i : kStages) v.push_back(i.stage);
    return v;
  }();
  return stages;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DependencyError*>(&e) || dynamic_cast<const IntegrityError*>(&e)) return 3;
  if (dynamic_cast<const TrainingError*>(&e)) return 4;
  return 1;
}

// ---------------------------------------------------------------------------
// Pipeline

std::filesystem::path default_run_dir(const std::filesystem::path& runs_root, std::uint64_t seed) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &utc);
  return runs_root / (std::string(stamp) + "-seed" + std::to_string(seed));
}

Pipeline::Pipeline(RunConfig cfg, std::filesystem::path run_dir, bool overwrite)
    : cfg_(std::move(cfg)), dir_(std::move(run_dir)), overwrite_(overwrite) {
  std::filesystem::create_directories(dir_);
  if (!overwrite_ && std::filesystem::exists(path("resolved_config.json")) &&
      read_json(path("resolved_config.json")) != cfg_.to_json())
    throw DependencyError(dir_.string() + " belongs to a run with a different configuration");
  manifest_ = std::filesystem::exists(path("manifest.json")) ? read_json(path("manifest.json"))
                                                             : nlohmann::json{{"stages", nlohmann::json::object()}};
}

std::filesystem::path Pipeline::path(const std::string& artifact) const { return dir_ / artifact; }

std::string Pipeline::artifact_digest(const std::string& artifact) const {
  const std::filesystem::path p = path(artifact);
  if (!std::filesystem::exists(p)) throw DependencyError("missing artifact " + p.string());
  return to_hex(sha256(read_file(p)));
}

bool Pipeline::completed(Stage stage) const { return manifest_.at("stages").contains(to_string(stage)); }

void Pipeline::require(Stage stage, const std::vector<std::string>& artifacts) const {
  const std::string name = to_string(stage);
  if (!completed(stage)) throw DependencyError("stage '" + name + "' has not been run in " + dir_.string());
  const nlohmann::json& outputs = manifest_.at("stages").at(name).at("outputs");
  for (const std::string& a : artifacts) {
    if (!outputs.contains(a)) throw DependencyError("stage '" + name + "' did not record " + a);
    if (artifact_digest(a) != outputs.at(a).get<std::string>())
      throw DependencyError(a + " changed since stage '" + name + "' produced it; rerun that stage");
  }
}

void Pipeline::record(Stage stage, const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
  nlohmann::json in = nlohmann::json::object(), out = nlohmann::json::object();
  for (const std::string& a : inputs) in[a] = artifact_digest(a);
  for (const std::string& a : outputs) out[a] = artifact_digest(a);
  const std::string config = cfg_.to_json().dump();
  const Digest config_digest = sha256({reinterpret_cast<const std::uint8_t*>(config.data()), config.size()});
  manifest_["stages"][to_string(stage)] = {{"inputs", in}, {"outputs", out}, {"config_digest", to_hex(config_digest)}};
  // Downstream records are stale once an upstream stage reruns.
  bool after = false;
  for (const StageInfo& i : kStages) {
    if (after) manifest_["stages"].erase(i.name);
    if (i.stage == stage) after = true;
  }
  write_text(path("manifest.json"), manifest_.dump(2) + "\n");
}

void Pipeline::write_resolved_config() const { write_text(path("resolved_config.json"), cfg_.to_json().dump(2) + "\n"); }

Split Pipeline::load_split() const {
  require(Stage::data, {"data/train/manifest.json", "data/val/manifest.json"});
  return {load_dataset(path("data/train")), load_dataset(path("data/val"))};
}

std::unique_ptr<Model> Pipeline::load_base() const {
  require(Stage::train_base, {"base.moqe"});
  return model_from_container(Container::load(path("base.moqe")));
}

void Pipeline::run(Stage stage) {
  if (completed(stage) && !overwrite_)
    throw ConfigError("stage '" + to_string(stage) + "' already completed in " + dir_.string() + "; overwriting needs --force");
  write_resolved_config();
  switch (stage) {
    case Stage::data: return run_data();
    case Stage::train_base: return run_train_base();
    case Stage::quantize: return run_quantize();
    case Stage::label: return run_label();
    case Stage::train_router: return run_train_router();
    case Stage::eval: return run_eval();
    case Stage::bench: return run_bench();
  }
}

void Pipeline::run_all() {
  for (Stage s : all_stages())
    if (!completed(s)) run(s);
}

void Pipeline::run_data() {
  const Split sp = split_run_data(cfg_, generate_run_data(cfg_));
  std::filesystem::create_directories(path("data/train"));
  std::filesystem::create_directories(path("data/val"));
  save_dataset(sp.train, "train", path("data/train"));
  save_dataset(sp.val, "val", path("data/val"));
  record(Stage::data, {}, {"data/train/manifest.json", "data/val/manifest.json"});
}

void Pipeline::run_train_base() {
  const Split sp = load_split();
  TrainBaseHistory h;
  const std::unique_ptr<Model> base = train_run_base(cfg_, sp.train, &h);
  base->to_container().save(path("base.moqe"));
  nlohmann::json hist = {{"epoch_loss", h.epoch_loss},
                         {"final_loss", h.final_loss},
                         {"final_accuracy", h.final_accuracy},
                         {"threshold_met", h.threshold_met},
                         {"parameters", base->parameter_count()},
                         {"forward_macs", base->forward_macs()}};
  write_text(path("base_history.json"), hist.dump(2) + "\n");
  record(Stage::train_base, {"data/train/manifest.json"}, {"base.moqe", "base_history.json"});
}

void Pipeline::run_quantize() {
  const Split sp = load_split();
  const std::unique_ptr<Model> base = load_base();
  const Registry reg = build_registry(cfg_, *base, sp.train);
  std::filesystem::create_directories(path("experts"));
  reg.save(path("experts"));
  record(Stage::quantize, {"base.moqe", "data/train/manifest.json"}, {"experts/registry.json"});
}

void Pipeline::run_label() {
  const Split sp = load_split();
  require(Stage::quantize, {"experts/registry.json"});
  const Registry reg = Registry::load(path("experts"));
  write_file(path("labels_train.bin"), label_oracle(reg, sp.train).serialize());
  write_file(path("labels_val.bin"), label_oracle(reg, sp.val).serialize());
  record(Stage::label, {"experts/registry.json", "data/train/manifest.json", "data/val/manifest.json"},
         {"labels_train.bin", "labels_val.bin"});
}

void Pipeline::run_train_router() {
  const Split sp = load_split();
  const std::unique_ptr<Model> base = load_base();
  require(Stage::quantize, {"experts/registry.json"});
  require(Stage::label, {"labels_train.bin", "labels_val.bin"});
  const Registry reg = Registry::load(path("experts"));
  const LabelSet lt = LabelSet::parse(read_file(path("labels_train.bin")));
  const LabelSet lv = LabelSet::parse(read_file(path("labels_val.bin")));
  if (!lt.matches(reg) || !lv.matches(reg)) throw DependencyError("labels were made with a different registry; rerun label");
  const RoutingSet train = make_routing_set(sp.train, lt, reg, *base);
  const RoutingSet val = make_routing_set(sp.val, lv, reg, *base);
  std::unique_ptr<Router> router = make_run_router(cfg_, *base, reg.size(), cfg_.seed);
  TrainConfig tc = cfg_.train;
  tc.seed = cfg_.seed;
  const TrainHistory h = train_router(*router, train, val, tc);
  router_to_container(*router, base_binding_digest(*base), reg.set_digest()).save(path("router.moqe"));
  h.write_jsonl(path("router_history.jsonl"));
  record(Stage::train_router, {"base.moqe", "experts/registry.json", "labels_train.bin", "labels_val.bin"},
         {"router.moqe", "router_history.jsonl"});
}

void Pipeline::run_eval() {
  const Split sp = load_split();
  const std::unique_ptr<Model> base = load_base();
  require(Stage::quantize, {"experts/registry.json"});
  require(Stage::label, {"labels_val.bin"});
  require(Stage::train_router, {"router.moqe"});
  const Registry reg = Registry::load(path("experts"));
  const LabelSet lv = LabelSet::parse(read_file(path("labels_val.bin")));
  RouterCheckpoint ck = router_from_container(Container::load(path("router.moqe")), *base);
  const RoutingSet val = make_routing_set(sp.val, lv, reg, *base);
  const EvalReport rep = moqe_eval(*ck.router, ck.registry, reg, sp.val, val, cfg_.train.min_margin, base.get());
  write_text(path("eval.json"), rep.to_json().dump(2) + "\n");
  write_text(path("eval_table.txt"), rep.table());
  write_text(path("eval.csv"), rep.csv());
  write_text(path("histograms.csv"), rep.histogram_csv());

  nlohmann::json sweep = nlohmann::json::array();
  if (!cfg_.eval.sweep_counts.empty()) {
    const auto pts = expert_count_sweep(reg, *base, sp.train, sp.val, cfg_.eval.sweep_counts, cfg_.router, cfg_.train,
                                        cfg_.eval.sweep_seeds);
    for (const SweepPoint& p : pts) sweep.push_back(to_json(p));
  }
  write_text(path("sweep.json"), sweep.dump(2) + "\n");
  record(Stage::eval, {"router.moqe", "experts/registry.json", "labels_val.bin"},
         {"eval.json", "eval_table.txt", "eval.csv", "histograms.csv", "sweep.json"});
}

void Pipeline::run_bench() {
  const Split sp = load_split();
  std::shared_ptr<const Model> base = load_base();
  require(Stage::quantize, {"experts/registry.json"});
  require(Stage::train_router, {"router.moqe"});
  std::shared_ptr<const ExpertStore> store;
  if (cfg_.bench.store == "memory")
    store = std::make_shared<MemoryExpertStore>(Registry::load(path("experts")));
  else
    store = std::make_shared<DiskExpertStore>(path("experts"));
  const Container router = Container::load(path("router.moqe"));
  const std::string model = cfg_.base_model.arch;
  const std::size_t n = static_cast<std::size_t>(std::min(cfg_.bench.requests, sp.val.size()));

  nlohmann::json runs = nlohmann::json::array();
  {
    Engine engine(router, store, base, cfg_.bench.fast_capacity_bytes);
    std::vector<Index> rows = all_rows(sp.val);
    rows.resize(n);
    const Workload w{"validation", rows};
    runs.push_back(bench(engine, sp.val, w, cfg_.bench.repetitions, cfg_.bench.warmup, model).to_json());
  }
  {
    Engine engine(router, store, base, cfg_.bench.fast_capacity_bytes);
    runs.push_back(bench(engine, sp.val, zero_switch_workload(0, static_cast<Index>(n)), cfg_.bench.repetitions,
                         cfg_.bench.warmup, model)
                       .to_json());
  }
  {
    Engine engine(router, store, base, cfg_.bench.fast_capacity_bytes);
    const Workload w = alternating_workload(engine, sp.val, static_cast<Index>(n));
    runs.push_back(bench(engine, sp.val, w, cfg_.bench.repetitions, cfg_.bench.warmup, model).to_json());
  }
  write_text(path("bench.json"), nlohmann::json{{"store", cfg_.bench.store}, {"runs", runs}}.dump(2) + "\n");
  record(Stage::bench, {"router.moqe", "experts/registry.json"}, {"bench.json"});
}

}  // namespace moqe
