// SPDX-License-Identifier: Apache-2.0
#include "moqe/experts.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <random>
#include <set>

namespace moqe {

namespace {

std::string granularity_name(Granularity g) {
  switch (g) {
    case Granularity::tensor:
      return "tensor";
    case Granularity::channel:
      return "channel";
    case Granularity::block:
      return "block";
  }
  return "?";
}

Granularity parse_granularity(const std::string& s) {
  if (s == "tensor") return Granularity::tensor;
  if (s == "channel") return Granularity::channel;
  if (s == "block") return Granularity::block;
  throw DataError("unknown granularity '" + s + "'");
}

std::span<const std::uint8_t> as_bytes(const std::vector<std::int8_t>& v) {
  return {reinterpret_cast<const std::uint8_t*>(v.data()), v.size()};
}

std::span<const Real> as_span(const VectorX& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

}  // namespace

Digest expert_digest(const QuantSpec& spec, const Model& model, const std::map<std::string, QuantizedTensor>& q) {
  Hasher h;
  nlohmann::json sj = spec;
  h.update(sj.dump());
  h.update(model.arch());
  h.update(model.config().dump());
  for (const NamedParam& p : model.params()) {
    h.update(p.name);
    if (auto it = q.find(p.name); it != q.end()) {
      const QuantizedTensor& t = it->second;
      h.update(static_cast<std::int64_t>(t.bits));
      h.update(as_bytes(t.codes));
      h.update(as_span(t.scale));
      h.update(as_bytes(t.zero_point));
      h.update(as_span(t.column_scale));
    } else {
      h.update(as_span(p.tensor->data));
    }
  }
  return h.finish();
}

Container Expert::to_container() const {
  Container c;
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, q] : quantized)
    tensors[name] = {{"granularity", granularity_name(q.granularity)}, {"rows", q.rows}, {"cols", q.cols}, {"block_size", q.block_size}};
  c.header = {{"kind", "expert"},
              {"id", id},
              {"label", label()},
              {"spec", spec},
              {"bits", spec.bits},
              {"digest", to_hex(digest)},
              {"base", {{"arch", model->arch()}, {"config", model->config()}}},
              {"tensors", tensors}};
  for (const NamedParam& p : model->params()) {
    if (auto it = quantized.find(p.name); it != quantized.end()) {
      const QuantizedTensor& q = it->second;
      c.add_codes(p.name + ":codes", q.original_shape, q.codes, q.bits);
      c.add_f64(p.name + ":scale", {q.scale.size()}, as_span(q.scale));
      c.add_codes(p.name + ":zero_point", {static_cast<Index>(q.zero_point.size())}, q.zero_point, 8);
      if (q.column_scale.size()) c.add_f64(p.name + ":column_scale", {q.column_scale.size()}, as_span(q.column_scale));
    } else {
      c.add_f64(p.name, *p.tensor);
    }
  }
  return c;
}

Expert Expert::from_container(const Container& c) {
  Expert e;
  std::unique_ptr<Model> model;
  try {
    if (c.header.at("kind").get<std::string>() != "expert") throw DataError("container is not an expert checkpoint");
    e.id = c.header.at("id").get<int>();
    e.spec = c.header.at("spec").get<QuantSpec>();
    model = make_model(c.header.at("base").at("arch").get<std::string>(), c.header.at("base").at("config"), 0);
    const nlohmann::json& tensors = c.header.at("tensors");
    for (const NamedParam& p : model->params()) {
      if (tensors.contains(p.name)) {
        const nlohmann::json& t = tensors.at(p.name);
        QuantizedTensor q;
        q.bits = e.spec.bits;
        q.granularity = parse_granularity(t.at("granularity").get<std::string>());
        q.rows = t.at("rows").get<Index>();
        q.cols = t.at("cols").get<Index>();
        q.block_size = t.at("block_size").get<Index>();
        q.original_shape = c.entry(p.name + ":codes").shape;
        q.codes = c.codes(p.name + ":codes");
        q.scale = c.tensor(p.name + ":scale").data;
        q.zero_point = c.codes(p.name + ":zero_point");
        if (c.contains(p.name + ":column_scale")) q.column_scale = c.tensor(p.name + ":column_scale").data;
        q.validate();
        Tensor w = dequantize(q);
        if (w.shape != p.tensor->shape) throw DataError("expert tensor " + p.name + " has the wrong shape");
        p.tensor->data = std::move(w.data);
        e.quantized.emplace(p.name, std::move(q));
      } else {
        Tensor t = c.tensor(p.name);
        if (t.shape != p.tensor->shape) throw DataError("expert tensor " + p.name + " has the wrong shape");
        p.tensor->data = std::move(t.data);
      }
    }
    e.digest = digest_from_hex(c.header.at("digest").get<std::string>());
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("expert checkpoint header: ") + ex.what());
  }
  if (expert_digest(e.spec, *model, e.quantized) != e.digest)
    throw IntegrityError("expert " + std::to_string(e.id) + " payload does not match its digest");
  e.model = std::move(model);
  return e;
}

std::vector<Index> calibration_rows(const Dataset& train, const QuantSpec& spec, std::uint64_t seed) {
  std::vector<Index> rows = spec.calib_subset >= 0 ? rows_of_subset(train, spec.calib_subset) : all_rows(train);
  if (rows.empty()) throw ConfigError("calibration subset " + std::to_string(spec.calib_subset) + " has no samples");
  Rng rng(derive_seed(seed, "calib"));
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(std::min(rows.size(), static_cast<std::size_t>(std::max<Index>(spec.calib_samples, 1))));
  std::sort(rows.begin(), rows.end());
  return rows;
}

Expert quantize_model(const Model& base, const QuantSpec& spec, const CalibrationStats* calib) {
  spec.validate();
  if (spec.needs_calibration() && calib == nullptr)
    throw ConfigError("quantize_model: scheme " + to_string(spec.scheme) + " requires calibration data");
  std::unique_ptr<Model> model = base.clone();
  Expert e;
  e.spec = spec;
  for (const NamedParam& p : model->params()) {
    p.tensor->requires_grad = false;
    p.tensor->grad.reset();
    if (p.role != ParamRole::matrix) continue;
    const ColumnStats* stats = nullptr;
    if (spec.needs_calibration()) {
      auto it = calib->find(p.name);
      if (it == calib->end()) throw ConfigError("quantize_model: no calibration statistics for " + p.name);
      stats = &it->second;
    }
    QuantizedTensor q = quantize(*p.tensor, spec, stats);
    p.tensor->data = dequantize(q).data;
    e.quantized.emplace(p.name, std::move(q));
  }
  e.digest = expert_digest(spec, *model, e.quantized);
  e.model = std::move(model);
  return e;
}

// ---------------------------------------------------------------------------
// Registry

int Registry::add(Expert e) {
  for (const Expert& x : experts_)
    if (x.digest == e.digest) throw RegistrationError("expert with digest " + to_hex(e.digest) + " already registered as id " + std::to_string(x.id));
  if (!experts_.empty() && experts_.front().kind() != e.kind()) throw RegistrationError("registry mixes modalities");
  e.id = size();
  experts_.push_back(std::move(e));
  return experts_.back().id;
}

const Expert& Registry::at(int id) const {
  if (id < 0 || id >= size()) throw IndexError("no expert with id " + std::to_string(id));
  return experts_[static_cast<std::size_t>(id)];
}

std::vector<Digest> Registry::digests() const {
  std::vector<Digest> out;
  for (const Expert& e : experts_) out.push_back(e.digest);
  return out;
}

Digest Registry::set_digest() const {
  Hasher h;
  for (const Expert& e : experts_) {
    h.update(static_cast<std::int64_t>(e.id));
    h.update(std::span<const std::uint8_t>(e.digest));
  }
  return h.finish();
}

Registry Registry::prefix(int count) const {
  if (count < 1 || count > size())
    throw ConfigError("expert count " + std::to_string(count) + " outside [1, " + std::to_string(size()) + "]");
  Registry r;
  for (int i = 0; i < count; ++i) r.experts_.push_back(experts_[static_cast<std::size_t>(i)]);
  return r;
}

nlohmann::json Registry::index() const {
  nlohmann::json list = nlohmann::json::array();
  for (const Expert& e : experts_)
    list.push_back({{"id", e.id}, {"label", e.label()}, {"digest", to_hex(e.digest)}, {"file", "expert_" + std::to_string(e.id) + ".moqe"}});
  return {{"experts", list}, {"digest", to_hex(set_digest())}};
}

void Registry::save(const std::filesystem::path& dir) const {
  nlohmann::json idx = index();
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    const Bytes bytes = experts_[i].to_container().serialize();
    write_file(dir / idx["experts"][i]["file"].get<std::string>(), bytes);
    idx["experts"][i]["bytes"] = bytes.size();
  }
  const std::string text = idx.dump(2) + "\n";
  write_file(dir / "registry.json", {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

nlohmann::json Registry::read_index(const std::filesystem::path& dir) {
  const Bytes raw = read_file(dir / "registry.json");
  try {
    return nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("registry index is not JSON: ") + e.what());
  }
}

Registry Registry::load(const std::filesystem::path& dir) {
  const nlohmann::json idx = read_index(dir);
  Registry r;
  try {
    for (const auto& entry : idx.at("experts")) {
      Expert e = Expert::from_container(Container::load(dir / entry.at("file").get<std::string>()));
      if (to_hex(e.digest) != entry.at("digest").get<std::string>())
        throw IntegrityError("expert file " + entry.at("file").get<std::string>() + " does not match the registry index");
      if (r.add(std::move(e)) != entry.at("id").get<int>()) throw IntegrityError("registry index ids are not in order");
    }
    if (to_hex(r.set_digest()) != idx.at("digest").get<std::string>()) throw IntegrityError("registry digest mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed registry index: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Losses and oracle labels

SampleEval per_sample_loss(const Expert& expert, const Dataset& data, std::span<const Index> rows) {
  if (expert.kind() != data.kind)
    throw ContractError("expert " + std::to_string(expert.id) + " is " + to_string(expert.kind()) + ", data is " + to_string(data.kind));
  return expert.model->evaluate(data, rows);
}

OracleLabel make_label(const Digest& sample, std::vector<Real> losses) {
  if (losses.empty()) throw ContractError("oracle label needs at least one loss");
  OracleLabel l;
  l.sample = sample;
  l.losses = std::move(losses);
  int best = 0;
  for (int j = 1; j < static_cast<int>(l.losses.size()); ++j)
    if (l.losses[static_cast<std::size_t>(j)] < l.losses[static_cast<std::size_t>(best)]) best = j;
  l.j_star = best;
  Real second = std::numeric_limits<Real>::infinity();
  for (int j = 0; j < static_cast<int>(l.losses.size()); ++j)
    if (j != best) second = std::min(second, l.losses[static_cast<std::size_t>(j)]);
  l.margin = std::isfinite(second) ? second - l.losses[static_cast<std::size_t>(best)] : 0.0;
  return l;
}

std::vector<int> LabelSet::j_star() const {
  std::vector<int> out;
  out.reserve(labels.size());
  for (const OracleLabel& l : labels) out.push_back(l.j_star);
  return out;
}

std::vector<Index> LabelSet::confident_rows(Real min_margin) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i].margin > min_margin) out.push_back(static_cast<Index>(i));
  return out;
}

std::vector<Real> LabelSet::win_share() const {
  std::vector<Real> share(static_cast<std::size_t>(experts()), 0.0);
  for (const OracleLabel& l : labels) share[static_cast<std::size_t>(l.j_star)] += 1.0;
  for (Real& s : share) s /= static_cast<Real>(std::max<std::size_t>(labels.size(), 1));
  return share;
}

bool LabelSet::matches(const Registry& r) const { return registry == r.digests(); }

namespace {

constexpr char kLabelMagic[4] = {'M', 'Q', 'L', 'B'};
constexpr std::uint16_t kLabelVersion = 1;

template <typename T>
void put(Bytes& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> b, std::size_t& pos) {
  if (pos + sizeof(T) > b.size()) throw DataError("label store truncated");
  T v;
  std::memcpy(&v, b.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

Digest get_digest(std::span<const std::uint8_t> b, std::size_t& pos) {
  if (pos + 32 > b.size()) throw DataError("label store truncated");
  Digest d;
  std::memcpy(d.data(), b.data() + pos, 32);
  pos += 32;
  return d;
}

}  // namespace

// "MQLB" | u16 version | u32 N | N x 32-byte expert digests | 32-byte dataset
// digest | u64 count | records {32-byte sample digest, N x f64 loss, u16 j_star}
Bytes LabelSet::serialize() const {
  Bytes out(kLabelMagic, kLabelMagic + 4);
  put<std::uint16_t>(out, kLabelVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(registry.size()));
  for (const Digest& d : registry) out.insert(out.end(), d.begin(), d.end());
  out.insert(out.end(), dataset.begin(), dataset.end());
  put<std::uint64_t>(out, labels.size());
  for (const OracleLabel& l : labels) {
    out.insert(out.end(), l.sample.begin(), l.sample.end());
    for (Real v : l.losses) put<Real>(out, v);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(l.j_star));
  }
  return out;
}

LabelSet LabelSet::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kLabelMagic, 4) != 0) throw DataError("not a label store");
  std::size_t pos = 4;
  if (get<std::uint16_t>(bytes, pos) != kLabelVersion) throw DataError("unsupported label store version");
  LabelSet s;
  const auto n = get<std::uint32_t>(bytes, pos);
  for (std::uint32_t j = 0; j < n; ++j) s.registry.push_back(get_digest(bytes, pos));
  s.dataset = get_digest(bytes, pos);
  const auto count = get<std::uint64_t>(bytes, pos);
  for (std::uint64_t i = 0; i < count; ++i) {
    const Digest sample = get_digest(bytes, pos);
    std::vector<Real> losses(n);
    for (Real& v : losses) v = get<Real>(bytes, pos);
    const auto j = get<std::uint16_t>(bytes, pos);
    OracleLabel l = make_label(sample, std::move(losses));
    if (l.j_star != j) throw IntegrityError("label store record " + std::to_string(i) + ": j_star does not match its losses");
    s.labels.push_back(std::move(l));
  }
  if (pos != bytes.size()) throw DataError("label store has trailing bytes");
  return s;
}

LabelSet label_oracle(const Registry& registry, const Dataset& data) {
  std::vector<SampleEval> evals;
  return label_oracle(registry, data, evals);
}

LabelSet label_oracle(const Registry& registry, const Dataset& data, std::vector<SampleEval>& evals) {
  if (registry.size() < 2) throw ContractError("label_oracle needs at least 2 experts");
  if (data.size() == 0) throw ContractError("label_oracle: empty dataset");
  const std::vector<Index> rows = all_rows(data);
  evals.clear();
  for (const Expert& e : registry.experts()) evals.push_back(per_sample_loss(e, data, rows));
  LabelSet s;
  s.registry = registry.digests();
  s.dataset = data.digest();
  for (Index r = 0; r < data.size(); ++r) {
    std::vector<Real> losses;
    for (const SampleEval& ev : evals) losses.push_back(ev.loss[r]);
    s.labels.push_back(make_label(data.sample_digest(r), std::move(losses)));
  }
  return s;
}

LabelSet label_oracle_cached(const Registry& registry, const Dataset& data, const std::filesystem::path& cache_dir) {
  Hasher h;
  for (const Digest& d : registry.digests()) h.update(std::span<const std::uint8_t>(d));
  const Digest dd = data.digest();
  h.update(std::span<const std::uint8_t>(dd));
  const std::filesystem::path file = cache_dir / ("labels_" + to_hex(h.finish()).substr(0, 16) + ".bin");
  if (std::filesystem::exists(file)) {
    LabelSet s = LabelSet::parse(read_file(file));
    if (s.matches(registry) && s.dataset == dd && static_cast<Index>(s.labels.size()) == data.size()) return s;
  }
  LabelSet s = label_oracle(registry, data);
  write_file(file, s.serialize());
  return s;
}

// ---------------------------------------------------------------------------
// Heterogeneity

nlohmann::json HeterogeneityReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (Index s = 0; s < mean_loss.rows(); ++s) {
    std::vector<Real> row(mean_loss.row(s).data(), mean_loss.row(s).data() + mean_loss.cols());
    rows.push_back({{"subset", s}, {"mean_loss", row}, {"winner", winner[static_cast<std::size_t>(s)]}});
  }
  return {{"experts", experts}, {"subsets", rows}, {"distinct_winners", distinct_winners()}};
}

int HeterogeneityReport::distinct_winners() const {
  return static_cast<int>(std::set<int>(winner.begin(), winner.end()).size());
}

HeterogeneityReport heterogeneity_report(const Registry& registry, const Dataset& data, const LabelSet& labels) {
  if (static_cast<Index>(labels.labels.size()) != data.size()) throw ContractError("heterogeneity_report: labels do not cover the dataset");
  if (!labels.matches(registry)) throw ContractError("heterogeneity_report: labels belong to a different registry");
  const int n_sub = data.subset_count(), n = registry.size();
  HeterogeneityReport rep;
  rep.mean_loss = RowMatrixX::Zero(n_sub, n);
  std::vector<Index> counts(static_cast<std::size_t>(n_sub), 0);
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const int s = data.subsets[i];
    ++counts[static_cast<std::size_t>(s)];
    for (int j = 0; j < n; ++j) rep.mean_loss(s, j) += labels.labels[i].losses[static_cast<std::size_t>(j)];
  }
  for (int s = 0; s < n_sub; ++s) {
    if (counts[static_cast<std::size_t>(s)] > 0) rep.mean_loss.row(s) /= static_cast<Real>(counts[static_cast<std::size_t>(s)]);
    int best = 0;
    for (int j = 1; j < n; ++j)
      if (rep.mean_loss(s, j) < rep.mean_loss(s, best)) best = j;
    rep.winner.push_back(best);
  }
  for (const Expert& e : registry.experts()) rep.experts.push_back(e.label());
  return rep;
}

}  // namespace moqe
