// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/experts.hpp"
#include "moqe/router.hpp"

namespace moqe {

// Slow store of serialized experts.
class ExpertStore {
 public:
  virtual ~ExpertStore() = default;
  // Registry index: {"experts": [{id, label, digest, file, bytes}], "digest"}.
  virtual const nlohmann::json& index() const = 0;
  virtual Bytes read(int id) const = 0;

  int count() const { return static_cast<int>(index().at("experts").size()); }
  Index bytes(int id) const;
  Digest digest(int id) const;
  Digest set_digest() const { return digest_from_hex(index().at("digest").get<std::string>()); }
};

// Expert files of a saved registry directory.
class DiskExpertStore final : public ExpertStore {
 public:
  explicit DiskExpertStore(std::filesystem::path dir);
  const nlohmann::json& index() const override { return index_; }
  Bytes read(int id) const override;

 private:
  std::filesystem::path dir_;
  nlohmann::json index_;
};

// In-memory byte blobs; switch logic without disk variance.
class MemoryExpertStore final : public ExpertStore {
 public:
  explicit MemoryExpertStore(const Registry& registry);
  const nlohmann::json& index() const override { return index_; }
  Bytes read(int id) const override;
  // Flips one payload byte of expert `id` (integrity tests).
  void corrupt(int id, std::size_t offset);

 private:
  nlohmann::json index_;
  std::vector<Bytes> blobs_;
};

enum class Location { fast, slow };

struct StoreEntry {
  Location location = Location::slow;
  Index bytes = 0;
};

struct ResidencyState {
  std::optional<int> resident;
  std::map<int, StoreEntry> store;
  long switch_count = 0;  // loads that replaced a resident expert
  long load_count = 0;    // every load, the cold one included
  Real load_time_total = 0.0;

  // At most one fast entry, and it is the resident expert.
  bool audit() const;
};

struct TimingEntry {
  Real router_s = 0.0;
  Real load_s = 0.0;  // 0 when the chosen expert was resident
  Real expert_s = 0.0;
  int expert = -1;
  bool switched = false;
};

struct TimingLedger {
  std::vector<TimingEntry> entries;
  Real router_total = 0.0;
  Real load_total = 0.0;
  Real expert_total = 0.0;

  void add(const TimingEntry& e);
  Real eit() const { return router_total + load_total; }
  // NaN when no expert time was recorded.
  Real eit_ratio() const;
};

struct MemoryLedger {
  Index fast_peak_bytes = 0;
  Index slow_resident_bytes = 0;
  Index router_bytes = 0;
  Index activation_peak_bytes = 0;
  std::optional<int> resident;
  std::map<int, Index> expert_bytes;

  nlohmann::json to_json() const;
};

struct InferResult {
  SampleEval output;
  RoutingRecord record;
  TimingEntry timing;
};

// Router plus exactly one resident expert. Requests are serialized.
class Engine {
 public:
  // fast_capacity_bytes = 0 means router bytes plus the largest expert.
  // Refuses a store whose registry digest differs from the router's
  // (IntegrityError) and a capacity below router + largest expert
  // (CapacityError naming that expert).
  Engine(const Container& router_checkpoint, std::shared_ptr<const ExpertStore> store, std::shared_ptr<const Model> base,
         Index fast_capacity_bytes = 0);

  InferResult infer(const Dataset& data, Index row);

  std::optional<int> resident() const { return state_.resident; }
  const ResidencyState& residency() const { return state_; }
  const TimingLedger& timing() const { return timing_; }
  MemoryLedger memory_report() const;
  void reset_timing() { timing_ = {}; }
  Router& router() { return *router_; }
  const ExpertStore& store() const { return *store_; }
  const Model& base() const { return *base_; }
  const Expert* resident_expert() const { return expert_ ? &*expert_ : nullptr; }
  Index router_bytes() const { return router_bytes_; }
  Index capacity() const { return capacity_; }
  long gather_count() const;

 private:
  void load(int id);

  std::unique_ptr<Router> router_;
  std::shared_ptr<const ExpertStore> store_;
  std::shared_ptr<const Model> base_;
  Index router_bytes_ = 0;
  Index capacity_ = 0;
  std::optional<Expert> expert_;
  ResidencyState state_;
  TimingLedger timing_;
  Index fast_peak_ = 0;
  Index activation_peak_ = 0;
};

struct Workload {
  std::string name;
  std::vector<Index> rows;
};

// One row repeated: never switches once the first expert is resident.
Workload zero_switch_workload(Index row, Index length);
// Alternates between two rows the router sends to different experts; throws
// ContractError when every row routes to the same expert.
Workload alternating_workload(Engine& engine, const Dataset& data, Index length);

struct BenchReport {
  std::string model;
  std::string workload;
  Index requests = 0;  // timed requests (warmup excluded)
  long switches = 0;
  Real expert_ms = 0.0;
  Real router_ms = 0.0;
  Real io_ms = 0.0;
  Real median_expert_ms = 0.0;
  Real median_router_ms = 0.0;
  Real median_io_ms = 0.0;
  Real router_pct = 0.0;  // mean router / mean expert
  Real io_pct = 0.0;      // mean load / mean expert
  Real total_pct = 0.0;   // router_pct + io_pct
  TimingLedger ledger;
  MemoryLedger memory;

  nlohmann::json to_json() const;
};

// `warmup` requests from the head of the workload are discarded, then the
// workload is replayed `repetitions` times on a monotonic clock.
BenchReport bench(Engine& engine, const Dataset& data, const Workload& workload, Index repetitions, Index warmup,
                  const std::string& model_name);

}  // namespace moqe
