// SPDX-License-Identifier: Apache-2.0
#include "moqe/serving.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "moqe/autodiff.hpp"
#include "moqe/errors.hpp"
#include "moqe/training.hpp"

namespace moqe {

namespace {

using Clock = std::chrono::steady_clock;

Real seconds_since(Clock::time_point t0) { return std::chrono::duration<Real>(Clock::now() - t0).count(); }

const nlohmann::json& index_entry(const nlohmann::json& index, int id) {
  const nlohmann::json& list = index.at("experts");
  if (id < 0 || id >= static_cast<int>(list.size())) throw IndexError("no expert with id " + std::to_string(id) + " in the store");
  const nlohmann::json& e = list.at(static_cast<std::size_t>(id));
  if (e.at("id").get<int>() != id) throw IntegrityError("store index ids are not in order");
  return e;
}

Real median(std::vector<Real> v) {
  if (v.empty()) return std::numeric_limits<Real>::quiet_NaN();
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  Real m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stores

Index ExpertStore::bytes(int id) const { return index_entry(index(), id).at("bytes").get<Index>(); }

Digest ExpertStore::digest(int id) const { return digest_from_hex(index_entry(index(), id).at("digest").get<std::string>()); }

DiskExpertStore::DiskExpertStore(std::filesystem::path dir) : dir_(std::move(dir)), index_(Registry::read_index(dir_)) {
  if (!index_.contains("experts") || !index_.contains("digest")) throw DataError("registry index lacks experts or digest");
  for (const nlohmann::json& e : index_.at("experts"))
    if (!e.contains("bytes")) throw DataError("registry index entry lacks a byte size");
}

Bytes DiskExpertStore::read(int id) const { return read_file(dir_ / index_entry(index_, id).at("file").get<std::string>()); }

MemoryExpertStore::MemoryExpertStore(const Registry& registry) : index_(registry.index()) {
  for (const Expert& e : registry.experts()) {
    blobs_.push_back(e.to_container().serialize());
    index_["experts"][static_cast<std::size_t>(e.id)]["bytes"] = blobs_.back().size();
  }
}

Bytes MemoryExpertStore::read(int id) const {
  index_entry(index_, id);
  return blobs_[static_cast<std::size_t>(id)];
}

void MemoryExpertStore::corrupt(int id, std::size_t offset) {
  index_entry(index_, id);
  Bytes& b = blobs_[static_cast<std::size_t>(id)];
  if (offset >= b.size()) throw IndexError("corruption offset beyond the blob");
  b[offset] ^= 0x5a;
}

// ---------------------------------------------------------------------------
// Ledgers

bool ResidencyState::audit() const {
  int fast = 0;
  for (const auto& [id, entry] : store) {
    if (entry.location != Location::fast) continue;
    ++fast;
    if (!resident || *resident != id) return false;
  }
  return fast == (resident ? 1 : 0);
}

void TimingLedger::add(const TimingEntry& e) {
  entries.push_back(e);
  router_total += e.router_s;
  load_total += e.load_s;
  expert_total += e.expert_s;
}

Real TimingLedger::eit_ratio() const {
  return expert_total > 0.0 ? eit() / expert_total : std::numeric_limits<Real>::quiet_NaN();
}

nlohmann::json MemoryLedger::to_json() const {
  nlohmann::json experts = nlohmann::json::object();
  for (const auto& [id, b] : expert_bytes) experts[std::to_string(id)] = b;
  return {{"fast_peak_bytes", fast_peak_bytes},
          {"slow_resident_bytes", slow_resident_bytes},
          {"router_bytes", router_bytes},
          {"activation_peak_bytes", activation_peak_bytes},
          {"resident", resident ? nlohmann::json(*resident) : nlohmann::json(nullptr)},
          {"expert_bytes", experts}};
}

// ---------------------------------------------------------------------------
// Engine

Engine::Engine(const Container& router_checkpoint, std::shared_ptr<const ExpertStore> store, std::shared_ptr<const Model> base,
               Index fast_capacity_bytes)
    : store_(std::move(store)), base_(std::move(base)) {
  if (!store_ || !base_) throw ContractError("engine needs a store and a base model");
  RouterCheckpoint ck = router_from_container(router_checkpoint, *base_);
  if (ck.registry != store_->set_digest())
    throw IntegrityError("router was trained against registry " + to_hex(ck.registry) + ", store holds " +
                         to_hex(store_->set_digest()));
  if (ck.router->n_experts() != store_->count())
    throw IntegrityError("router has " + std::to_string(ck.router->n_experts()) + " outputs, store holds " +
                         std::to_string(store_->count()) + " experts");
  router_ = std::move(ck.router);
  for (const NamedParam& p : router_->params()) p.tensor->requires_grad = false;
  router_bytes_ = static_cast<Index>(router_checkpoint.serialize().size());

  int largest = 0;
  for (int id = 0; id < store_->count(); ++id) {
    state_.store[id] = {Location::slow, store_->bytes(id)};
    if (store_->bytes(id) > store_->bytes(largest)) largest = id;
  }
  const Index need = router_bytes_ + store_->bytes(largest);
  capacity_ = fast_capacity_bytes == 0 ? need : fast_capacity_bytes;
  if (capacity_ < need) {
    const std::string label = index_entry(store_->index(), largest).at("label").get<std::string>();
    throw CapacityError("fast memory of " + std::to_string(capacity_) + " bytes cannot hold the router (" +
                        std::to_string(router_bytes_) + " bytes) plus expert " + std::to_string(largest) + " (" + label +
                        ", " + std::to_string(store_->bytes(largest)) + " bytes)");
  }
  fast_peak_ = router_bytes_;
}

void Engine::load(int id) {
  const Bytes bytes = store_->read(id);
  Expert e = Expert::from_container(Container::parse(bytes));
  if (e.digest != store_->digest(id))
    throw IntegrityError("expert " + std::to_string(id) + " does not match its registry digest");
  if (static_cast<Index>(bytes.size()) != store_->bytes(id))
    throw IntegrityError("expert " + std::to_string(id) + " size differs from the registry index");
  if (state_.resident) {
    expert_.reset();
    state_.store[*state_.resident].location = Location::slow;
    ++state_.switch_count;
  }
  expert_ = std::move(e);
  state_.resident = id;
  state_.store[id].location = Location::fast;
  ++state_.load_count;
}

InferResult Engine::infer(const Dataset& data, Index row) {
  if (data.kind != base_->kind()) throw ContractError("request modality differs from the engine's");
  const Index rows[1] = {row};
  reset_activation_high_water();
  InferResult out;

  const auto t0 = Clock::now();
  RouterInput in;
  std::vector<int> inputs, targets;
  const auto* lm = dynamic_cast<const LmBaseModel*>(base_.get());
  if (lm) {
    lm->batch_tokens(data, rows, inputs, targets);
    in.values = lm->embed(inputs);
    in.batch = 1;
    in.seq = static_cast<Index>(inputs.size());
  } else {
    in = router_input(data, rows, *base_);
  }
  out.record = route(*router_, in).front();
  out.timing.router_s = seconds_since(t0);
  out.timing.expert = out.record.chosen;

  if (!state_.resident || *state_.resident != out.record.chosen) {
    const bool had = state_.resident.has_value();
    const auto t1 = Clock::now();
    load(out.record.chosen);
    out.timing.load_s = seconds_since(t1);
    out.timing.switched = had;
    state_.load_time_total += out.timing.load_s;
  }

  const auto t2 = Clock::now();
  if (lm) {
    const auto* expert_lm = dynamic_cast<const LmBaseModel*>(expert_->model.get());
    if (!expert_lm) throw ContractError("nlp engine holds a non-language expert");
    out.output = expert_lm->evaluate_embedded(in.values, targets, in.seq);
  } else {
    out.output = per_sample_loss(*expert_, data, rows);
  }
  out.timing.expert_s = seconds_since(t2);

  const Index activations = static_cast<Index>(activation_high_water());
  activation_peak_ = std::max(activation_peak_, activations);
  fast_peak_ = std::max(fast_peak_, router_bytes_ + store_->bytes(*state_.resident) + activations);
  timing_.add(out.timing);
  return out;
}

MemoryLedger Engine::memory_report() const {
  MemoryLedger m;
  m.fast_peak_bytes = fast_peak_;
  m.router_bytes = router_bytes_;
  m.activation_peak_bytes = activation_peak_;
  m.resident = state_.resident;
  for (const auto& [id, entry] : state_.store) {
    m.expert_bytes[id] = entry.bytes;
    if (entry.location == Location::slow) m.slow_resident_bytes += entry.bytes;
  }
  return m;
}

long Engine::gather_count() const {
  const auto* lm = dynamic_cast<const LmBaseModel*>(base_.get());
  return lm ? lm->gather_count() : 0;
}

// ---------------------------------------------------------------------------
// Workloads and benchmark

Workload zero_switch_workload(Index row, Index length) {
  if (length < 1) throw ContractError("workload length must be positive");
  return {"zero_switch", std::vector<Index>(static_cast<std::size_t>(length), row)};
}

Workload alternating_workload(Engine& engine, const Dataset& data, Index length) {
  if (length < 2) throw ContractError("alternating workload needs at least two requests");
  std::vector<Index> all(static_cast<std::size_t>(data.size()));
  for (Index i = 0; i < data.size(); ++i) all[static_cast<std::size_t>(i)] = i;
  // Routing the candidates does not touch residency.
  const std::vector<int> choice = route_choices(engine.router(), router_input(data, all, engine.base()));
  std::optional<Index> a, b;
  for (Index i = 0; i < data.size() && !b; ++i) {
    if (!a) a = i;
    else if (choice[static_cast<std::size_t>(i)] != choice[static_cast<std::size_t>(*a)]) b = i;
  }
  if (!b) throw ContractError("every sample routes to the same expert; no alternating workload exists");
  Workload w{"alternating", {}};
  for (Index i = 0; i < length; ++i) w.rows.push_back(i % 2 == 0 ? *a : *b);
  return w;
}

nlohmann::json BenchReport::to_json() const {
  return {{"model", model},
          {"workload", workload},
          {"requests", requests},
          {"switches", switches},
          {"expert_ms", expert_ms},
          {"router_ms", router_ms},
          {"io_ms", io_ms},
          {"median_expert_ms", median_expert_ms},
          {"median_router_ms", median_router_ms},
          {"median_io_ms", median_io_ms},
          {"router_pct", router_pct},
          {"io_pct", io_pct},
          {"total_pct", total_pct},
          {"memory", memory.to_json()}};
}

BenchReport bench(Engine& engine, const Dataset& data, const Workload& workload, Index repetitions, Index warmup,
                  const std::string& model_name) {
  if (workload.rows.empty() || repetitions < 1 || warmup < 0) throw ContractError("bench needs rows, repetitions >= 1, warmup >= 0");
  for (Index i = 0; i < warmup; ++i) engine.infer(data, workload.rows[static_cast<std::size_t>(i) % workload.rows.size()]);
  engine.reset_timing();
  const long switches0 = engine.residency().switch_count;
  for (Index r = 0; r < repetitions; ++r)
    for (Index row : workload.rows) engine.infer(data, row);

  BenchReport rep;
  rep.model = model_name;
  rep.workload = workload.name;
  rep.ledger = engine.timing();
  rep.memory = engine.memory_report();
  rep.requests = static_cast<Index>(rep.ledger.entries.size());
  rep.switches = engine.residency().switch_count - switches0;
  const Real n = static_cast<Real>(rep.requests);
  rep.expert_ms = 1e3 * rep.ledger.expert_total / n;
  rep.router_ms = 1e3 * rep.ledger.router_total / n;
  rep.io_ms = 1e3 * rep.ledger.load_total / n;
  std::vector<Real> ex, ro, io;
  for (const TimingEntry& e : rep.ledger.entries) {
    ex.push_back(1e3 * e.expert_s);
    ro.push_back(1e3 * e.router_s);
    io.push_back(1e3 * e.load_s);
  }
  rep.median_expert_ms = median(ex);
  rep.median_router_ms = median(ro);
  rep.median_io_ms = median(io);
  rep.router_pct = 100.0 * rep.ledger.router_total / rep.ledger.expert_total;
  rep.io_pct = 100.0 * rep.ledger.load_total / rep.ledger.expert_total;
  rep.total_pct = rep.router_pct + rep.io_pct;
  return rep;
}

}  // namespace moqe
