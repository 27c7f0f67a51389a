// SPDX-License-Identifier: Apache-2.0
#include "moqe/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "moqe/nn.hpp"

namespace moqe {

std::string to_string(Modality m) { return m == Modality::cv ? "cv" : "nlp"; }

Modality parse_modality(const std::string& s) {
  if (s == "cv") return Modality::cv;
  if (s == "nlp") return Modality::nlp;
  throw ConfigError("unknown data kind '" + s + "' (expected cv or nlp)");
}

Dataset Dataset::empty_like() const {
  Dataset d;
  d.kind = kind;
  d.channels = channels;
  d.height = height;
  d.width = width;
  d.seq_len = seq_len;
  d.inputs.resize(0, inputs.cols());
  return d;
}

Dataset Dataset::select(std::span<const Index> rows) const {
  Dataset d = empty_like();
  d.inputs.resize(static_cast<Index>(rows.size()), inputs.cols());
  d.labels.reserve(rows.size());
  d.subsets.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Index r = rows[i];
    if (r < 0 || r >= size()) throw IndexError("dataset row " + std::to_string(r) + " out of range");
    d.inputs.row(static_cast<Index>(i)) = inputs.row(r);
    d.labels.push_back(labels[static_cast<std::size_t>(r)]);
    d.subsets.push_back(subsets[static_cast<std::size_t>(r)]);
  }
  return d;
}

void Dataset::append(const Dataset& other) {
  if (size() == 0 && inputs.cols() == 0) inputs.resize(0, other.inputs.cols());
  if (other.kind != kind || other.inputs.cols() != inputs.cols())
    throw DimensionError("cannot append datasets of different kind or width");
  RowMatrixX joined(size() + other.size(), inputs.cols());
  joined << inputs, other.inputs;
  inputs = std::move(joined);
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  subsets.insert(subsets.end(), other.subsets.begin(), other.subsets.end());
}

std::vector<int> Dataset::tokens(Index row) const {
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(inputs.cols()));
  for (Index c = 0; c < inputs.cols(); ++c) {
    const int id = static_cast<int>(inputs(row, c));
    if (id == kPadToken) break;
    ids.push_back(id);
  }
  return ids;
}

Digest Dataset::sample_digest(Index row) const {
  Hasher h;
  h.update(to_string(kind));
  h.update(std::span<const Real>(inputs.data() + row * inputs.cols(), static_cast<std::size_t>(inputs.cols())));
  h.update(static_cast<std::int64_t>(labels[static_cast<std::size_t>(row)]));
  return h.finish();
}

Digest Dataset::digest() const {
  Hasher h;
  h.update(to_string(kind));
  for (std::int64_t v : {channels, height, width, seq_len, size()}) h.update(v);
  for (Index r = 0; r < size(); ++r) {
    const Digest s = sample_digest(r);
    h.update(std::span<const std::uint8_t>(s));
    h.update(static_cast<std::int64_t>(subsets[static_cast<std::size_t>(r)]));
  }
  return h.finish();
}

int Dataset::subset_count() const {
  int n = 0;
  for (int s : subsets) n = std::max(n, s + 1);
  return n;
}

std::vector<Index> all_rows(const Dataset& d) {
  std::vector<Index> rows(static_cast<std::size_t>(d.size()));
  std::iota(rows.begin(), rows.end(), Index{0});
  return rows;
}

std::vector<Index> rows_of_subset(const Dataset& d, int subset) {
  std::vector<Index> rows;
  for (Index r = 0; r < d.size(); ++r)
    if (d.subsets[static_cast<std::size_t>(r)] == subset) rows.push_back(r);
  return rows;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string s;
  s.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id > 255) throw IndexError("token id " + std::to_string(id) + " is not a byte");
    s.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic images

namespace {

bool shape_mask(int cls, Real x, Real y) {
  const Real r = std::hypot(x, y);
  switch (cls) {
    case 0:  // disk
      return r < 0.6;
    case 1:  // square
      return std::max(std::abs(x), std::abs(y)) < 0.5;
    case 2:  // ring
      return r > 0.35 && r < 0.68;
    case 3:  // plus
      return (std::abs(x) < 0.2 && std::abs(y) < 0.68) || (std::abs(y) < 0.2 && std::abs(x) < 0.68);
    case 4:  // diagonal cross
      return std::abs(std::abs(x) - std::abs(y)) < 0.24 && r < 0.8;
    case 5:  // triangle, apex up
      return y > -0.6 && y < 0.5 && std::abs(x) < (y + 0.6) * 0.55;
    case 6:  // horizontal bar
      return std::abs(y) < 0.22 && std::abs(x) < 0.72;
    case 7:  // vertical bar
      return std::abs(x) < 0.22 && std::abs(y) < 0.72;
    case 8:  // diamond
      return std::abs(x) + std::abs(y) < 0.68;
    case 9:  // two dots
      return std::hypot(x - 0.38, y) < 0.26 || std::hypot(x + 0.38, y) < 0.26;
    default:
      throw ConfigError("cv generator supports at most 10 classes");
  }
}

// Channels lit by family f: the non-empty channel combinations in the order
// single channels first, then pairs, then all.
std::vector<Index> family_channels(Index family, Index channels) {
  const Index combos = (Index{1} << channels) - 1;
  std::vector<std::uint32_t> masks;
  for (Index k = 1; k <= channels; ++k)
    for (std::uint32_t m = 1; m <= static_cast<std::uint32_t>(combos); ++m)
      if (std::popcount(m) == k) masks.push_back(m);
  const std::uint32_t m = masks[static_cast<std::size_t>(family % combos)];
  std::vector<Index> out;
  for (Index c = 0; c < channels; ++c)
    if (m >> c & 1U) out.push_back(c);
  return out;
}

}  // namespace

Dataset generate_cv(const CvGenConfig& cfg) {
  if (cfg.classes < 2 || cfg.classes > 10) throw ConfigError("cv generator: classes must be in [2, 10]");
  if (cfg.families < 1) throw ConfigError("cv generator: families must be positive");
  if (cfg.channels < 1 || cfg.channels > 8) throw ConfigError("cv generator: channels must be in [1, 8]");
  if (cfg.size < 8) throw ConfigError("cv generator: size must be >= 8");
  if (cfg.per_class < 1) throw ConfigError("cv generator: per_class must be positive");
  const Index s = cfg.size, plane = s * s;
  Dataset d;
  d.kind = Modality::cv;
  d.channels = cfg.channels;
  d.height = d.width = s;
  d.inputs = RowMatrixX::Zero(cfg.families * cfg.classes * cfg.per_class, cfg.channels * plane);
  Rng rng(derive_seed(cfg.seed, "data"));
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  std::normal_distribution<Real> gauss(0.0, 1.0);
  constexpr Real kTwoPi = 2.0 * std::numbers::pi;
  Index row = 0;
  for (Index f = 0; f < cfg.families; ++f) {
    const std::vector<Index> lit = family_channels(f, cfg.channels);
    // Texture of the family: stripe frequency (cycles per image) and angle.
    const Real freq = 1.5 + 0.75 * static_cast<Real>(f % 5);
    const Real angle = std::numbers::pi * static_cast<Real>(f) / static_cast<Real>(cfg.families);
    const Real sector_offset = kTwoPi * static_cast<Real>(f) / 7.0;
    for (Index k = 0; k < cfg.classes; ++k)
      for (Index i = 0; i < cfg.per_class; ++i, ++row) {
        const Real cx = 0.3 * (unit(rng) - 0.5), cy = 0.3 * (unit(rng) - 0.5);
        const Real scale = 0.78 + 0.22 * unit(rng);
        const Real phase = kTwoPi * unit(rng);
        const Real spin = 0.6 * (unit(rng) - 0.5);
        for (Index y = 0; y < s; ++y)
          for (Index x = 0; x < s; ++x) {
            const Real u = 2.0 * (static_cast<Real>(x) + 0.5) / static_cast<Real>(s) - 1.0;
            const Real v = 2.0 * (static_cast<Real>(y) + 0.5) / static_cast<Real>(s) - 1.0;
            const bool inside = shape_mask(static_cast<int>(k), (u - cx) / scale, (v - cy) / scale);
            const Real stripe = 0.7 + 0.3 * std::cos(kTwoPi * freq * 0.5 * (u * std::cos(angle) + v * std::sin(angle)) + phase);
            // Multi-channel families split the image into angular sectors
            // around the shape centre, one lit channel per sector.
            Real theta = std::atan2(v - cy, u - cx) + sector_offset + spin;
            theta = std::fmod(std::fmod(theta, kTwoPi) + kTwoPi, kTwoPi);
            const auto sector = std::min<std::size_t>(lit.size() - 1, static_cast<std::size_t>(theta / kTwoPi * static_cast<Real>(lit.size())));
            const Index ch = lit[sector];
            const Real value = (inside ? 1.0 : 0.15) * stripe + cfg.noise * gauss(rng);
            d.inputs(row, ch * plane + y * s + x) = value;
          }
        d.labels.push_back(static_cast<int>(k));
        d.subsets.push_back(static_cast<int>(f));
      }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic text

namespace {

constexpr std::string_view kAlphabet = "etaoinshrdlucmfwypvbgkjqxz ETAOINSHRDLU.,;:!?'-0123456789\n";

}  // namespace

std::vector<std::string> generate_corpus(const NlpGenConfig& cfg) {
  if (cfg.sources < 1 || cfg.documents_per_source < 1 || cfg.document_bytes < 2)
    throw ConfigError("nlp generator: sources, documents_per_source and document_bytes must be positive");
  const auto a = static_cast<Index>(kAlphabet.size());
  Rng rng(derive_seed(cfg.seed, "data"));
  std::normal_distribution<Real> gauss(0.0, 1.0);
  std::vector<std::string> docs;
  for (Index src = 0; src < cfg.sources; ++src) {
    // Temperature rises with the source index, so does entropy.
    const Real temperature =
        cfg.sources == 1 ? 1.0 : 0.25 + 1.75 * static_cast<Real>(src) / static_cast<Real>(cfg.sources - 1);
    RowMatrixX logits(a, a);
    for (Index i = 0; i < a; ++i)
      for (Index j = 0; j < a; ++j) logits(i, j) = 2.0 * gauss(rng);
    std::vector<std::discrete_distribution<int>> next;
    for (Index i = 0; i < a; ++i) {
      std::vector<Real> w(static_cast<std::size_t>(a));
      const Real mx = logits.row(i).maxCoeff();
      for (Index j = 0; j < a; ++j) w[static_cast<std::size_t>(j)] = std::exp((logits(i, j) - mx) / temperature);
      next.emplace_back(w.begin(), w.end());
    }
    std::uniform_int_distribution<int> first(0, static_cast<int>(a) - 1);
    for (Index doc = 0; doc < cfg.documents_per_source; ++doc) {
      std::string text;
      text.reserve(static_cast<std::size_t>(cfg.document_bytes));
      int state = first(rng);
      for (Index b = 0; b < cfg.document_bytes; ++b) {
        text.push_back(kAlphabet[static_cast<std::size_t>(state)]);
        state = next[static_cast<std::size_t>(state)](rng);
      }
      docs.push_back(std::move(text));
    }
  }
  return docs;
}

Dataset sequences_from_documents(std::span<const std::string> docs, Index seq_len) {
  if (seq_len < 1) throw ConfigError("seq_len must be positive");
  Dataset d;
  d.kind = Modality::nlp;
  d.channels = d.height = d.width = 1;
  d.seq_len = seq_len;
  const Index window = seq_len + 1;
  std::vector<std::vector<Real>> rows;
  for (std::size_t doc = 0; doc < docs.size(); ++doc) {
    const std::vector<int> ids = tokenize(docs[doc]);
    for (std::size_t begin = 0; begin + 1 < ids.size(); begin += static_cast<std::size_t>(window)) {
      std::vector<Real> row(static_cast<std::size_t>(window), static_cast<Real>(kPadToken));
      const std::size_t end = std::min(ids.size(), begin + static_cast<std::size_t>(window));
      for (std::size_t i = begin; i < end; ++i) row[i - begin] = ids[i];
      rows.push_back(std::move(row));
      d.labels.push_back(static_cast<int>(doc));
      d.subsets.push_back(static_cast<int>(doc));
    }
  }
  d.inputs.resize(static_cast<Index>(rows.size()), window);
  for (std::size_t r = 0; r < rows.size(); ++r)
    d.inputs.row(static_cast<Index>(r)) = Eigen::Map<const VectorX>(rows[r].data(), window).transpose();
  return d;
}

Real byte_entropy(std::string_view text) {
  if (text.empty()) return 0.0;
  std::array<Index, 256> counts{};
  for (char c : text) ++counts[static_cast<unsigned char>(c)];
  Real h = 0.0;
  const auto n = static_cast<Real>(text.size());
  for (Index c : counts)
    if (c > 0) {
      const Real p = static_cast<Real>(c) / n;
      h -= p * std::log2(p);
    }
  return h;
}

// ---------------------------------------------------------------------------
// Partitioning

std::vector<Dataset> make_subsets(const Dataset& data, Index n_subsets, SubsetStrategy strategy,
                                  std::span<const Real> strata) {
  if (n_subsets < 2) throw ConfigError("make_subsets: need at least 2 subsets, got " + std::to_string(n_subsets));
  if (static_cast<Index>(strata.size()) != data.size()) throw DimensionError("make_subsets: one stratum per row required");
  std::vector<Real> distinct(strata.begin(), strata.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  const auto n_strata = static_cast<Index>(distinct.size());
  if (n_subsets > n_strata)
    throw ConfigError("make_subsets: " + std::to_string(n_subsets) + " subsets requested but only " +
                      std::to_string(n_strata) + " distinct strata available");
  std::map<Real, int> assign;
  for (Index i = 0; i < n_strata; ++i) {
    const Real key = distinct[static_cast<std::size_t>(i)];
    // texture families are dealt round-robin; entropy strata split into
    // contiguous quantile groups of the sorted values.
    assign[key] = strategy == SubsetStrategy::texture_family ? static_cast<int>(i % n_subsets)
                                                             : static_cast<int>(i * n_subsets / n_strata);
  }
  std::vector<std::vector<Index>> rows(static_cast<std::size_t>(n_subsets));
  for (Index r = 0; r < data.size(); ++r) rows[static_cast<std::size_t>(assign.at(strata[static_cast<std::size_t>(r)]))].push_back(r);
  std::vector<Dataset> parts;
  for (Index s = 0; s < n_subsets; ++s) {
    Dataset part = data.select(rows[static_cast<std::size_t>(s)]);
    std::fill(part.subsets.begin(), part.subsets.end(), static_cast<int>(s));
    parts.push_back(std::move(part));
  }
  return parts;
}

Split split_dataset(const Dataset& data, Real val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  Rng rng(derive_seed(seed, "split"));
  std::vector<Index> train_rows, val_rows;
  for (int s = 0; s < data.subset_count(); ++s) {
    std::vector<Index> rows = rows_of_subset(data, s);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<Real>(rows.size())));
    val_rows.insert(val_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_val));
    train_rows.insert(train_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_val), rows.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(val_rows.begin(), val_rows.end());
  return {data.select(train_rows), data.select(val_rows)};
}

// ---------------------------------------------------------------------------
// Persistence

nlohmann::json to_json(const Manifest& m) {
  nlohmann::json subsets = nlohmann::json::array();
  for (const auto& e : m.subsets) subsets.push_back({{"id", e.id}, {"path", e.path}, {"count", e.count}});
  return {{"name", m.name}, {"kind", to_string(m.kind)}, {"subsets", subsets}, {"digest", m.digest}};
}

Manifest manifest_from_json(const nlohmann::json& j) {
  try {
    Manifest m;
    m.name = j.at("name").get<std::string>();
    m.kind = parse_modality(j.at("kind").get<std::string>());
    for (const auto& e : j.at("subsets")) m.subsets.push_back({e.at("id").get<int>(), e.at("path").get<std::string>(), e.at("count").get<Index>()});
    m.digest = j.value("digest", std::string{});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed dataset manifest: ") + e.what());
  }
}

Container dataset_to_container(const Dataset& d) {
  Container c;
  c.header = {{"kind", to_string(d.kind)}, {"channels", d.channels}, {"height", d.height},
              {"width", d.width},          {"seq_len", d.seq_len},   {"count", d.size()}};
  if (d.size() > 0) {
    c.add_f64("inputs", {d.size(), d.inputs.cols()}, {d.inputs.data(), static_cast<std::size_t>(d.inputs.size())});
    std::vector<Real> labels(d.labels.begin(), d.labels.end()), subsets(d.subsets.begin(), d.subsets.end());
    c.add_f64("labels", {d.size()}, labels);
    c.add_f64("subsets", {d.size()}, subsets);
  }
  return c;
}

Dataset dataset_from_container(const Container& c) {
  Dataset d;
  d.kind = parse_modality(c.header.at("kind").get<std::string>());
  d.channels = c.header.at("channels").get<Index>();
  d.height = c.header.at("height").get<Index>();
  d.width = c.header.at("width").get<Index>();
  d.seq_len = c.header.at("seq_len").get<Index>();
  const auto count = c.header.at("count").get<Index>();
  if (count == 0) return d;
  const Tensor in = c.tensor("inputs"), labels = c.tensor("labels"), subsets = c.tensor("subsets");
  if (in.rows() != count || labels.numel() != count || subsets.numel() != count) throw DataError("dataset container: count mismatch");
  d.inputs = in.mat();
  for (Index i = 0; i < count; ++i) {
    d.labels.push_back(static_cast<int>(labels.data[i]));
    d.subsets.push_back(static_cast<int>(subsets.data[i]));
  }
  return d;
}

Manifest save_dataset(const Dataset& d, const std::string& name, const std::filesystem::path& dir) {
  Manifest m;
  m.name = name;
  m.kind = d.kind;
  Dataset ordered = d.empty_like();
  for (int s = 0; s < d.subset_count(); ++s) {
    const Dataset part = d.select(rows_of_subset(d, s));
    const std::string file = "subset_" + std::to_string(s) + ".moqe";
    dataset_to_container(part).save(dir / file);
    m.subsets.push_back({s, file, part.size()});
    ordered.append(part);
  }
  // The digest covers the subset-major order in which load_dataset rebuilds it.
  m.digest = to_hex(ordered.digest());
  const std::string text = to_json(m).dump(2) + "\n";
  write_file(dir / "manifest.json", {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  return m;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const Bytes raw = read_file(dir / "manifest.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dataset manifest is not JSON: ") + e.what());
  }
  const Manifest m = manifest_from_json(j);
  Dataset d;
  d.kind = m.kind;
  bool first = true;
  for (const auto& e : m.subsets) {
    Dataset part = dataset_from_container(Container::load(dir / e.path));
    if (part.size() != e.count) throw IntegrityError("subset " + std::to_string(e.id) + ": count differs from manifest");
    if (first) {
      d = part.empty_like();
      first = false;
    }
    d.append(part);
  }
  if (!m.digest.empty() && to_hex(d.digest()) != m.digest)
    throw IntegrityError("dataset digest mismatch in " + dir.string());
  return d;
}

Dataset load_text_files(std::span<const std::filesystem::path> files, Index seq_len) {
  std::vector<std::string> docs;
  for (const auto& f : files) {
    const Bytes raw = read_file(f);
    docs.emplace_back(raw.begin(), raw.end());
  }
  return sequences_from_documents(docs, seq_len);
}

Dataset load_rgb_directory(const std::filesystem::path& dir, Index channels, Index height, Index width) {
  const Index n = channels * height * width;
  std::ifstream index(dir / "index.csv");
  if (!index) throw DependencyError("cannot open " + (dir / "index.csv").string());
  Dataset d;
  d.kind = Modality::cv;
  d.channels = channels;
  d.height = height;
  d.width = width;
  std::vector<VectorX> rows;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty() || line.rfind("file,", 0) == 0) continue;
    std::stringstream ss(line);
    std::string file, label, subset;
    std::getline(ss, file, ',');
    std::getline(ss, label, ',');
    std::getline(ss, subset, ',');
    const Bytes raw = read_file(dir / file);
    VectorX px(n);
    if (static_cast<Index>(raw.size()) == n) {
      for (Index i = 0; i < n; ++i) px[i] = raw[static_cast<std::size_t>(i)] / 255.0;
    } else if (static_cast<Index>(raw.size()) == 8 * n) {
      std::memcpy(px.data(), raw.data(), raw.size());
    } else {
      throw DataError(file + ": expected " + std::to_string(n) + " u8 or f64 values");
    }
    rows.push_back(std::move(px));
    try {
      d.labels.push_back(std::stoi(label));
      d.subsets.push_back(subset.empty() ? 0 : std::stoi(subset));
    } catch (const std::exception&) {
      throw DataError("index.csv: bad label or subset in line '" + line + "'");
    }
  }
  d.inputs.resize(static_cast<Index>(rows.size()), n);
  for (std::size_t r = 0; r < rows.size(); ++r) d.inputs.row(static_cast<Index>(r)) = rows[r].transpose();
  return d;
}

}  // namespace moqe
