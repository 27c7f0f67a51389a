// SPDX-License-Identifier: Apache-2.0
#include "moqe/router.hpp"

#include <cmath>

#include "moqe/config.hpp"

namespace moqe {

Digest Router::weights_digest() const {
  Hasher h;
  h.update(arch());
  h.update(config().dump());
  for (const NamedParam& p : params()) {
    h.update(p.name);
    h.update(std::span<const Real>(p.tensor->data.data(), static_cast<std::size_t>(p.tensor->numel())));
  }
  return h.finish();
}

void Router::zero_head() {
  LinearLayer& h = head();
  h.weight.data.setZero();
  h.bias.data.setZero();
}

// ---------------------------------------------------------------------------
// CV router

void CvRouterConfig::validate() const {
  if (n_experts < 2) throw ConfigError("router needs at least 2 experts");
  if (channels < 1 || image_size < 1 || pool_size < 1 || image_size % pool_size != 0)
    throw ConfigError("cv router: pool_size must divide image_size");
  for (Index v : mlp)
    if (v < 1) throw ConfigError("cv router: mlp widths must be positive");
  for (std::size_t i = 0; i < 3; ++i)
    if (se_channels[i] < 1 || se_strides[i] < 1) throw ConfigError("cv router: bad SE stage");
  if (mlp[2] != se_channels[0]) throw ConfigError("cv router: last mlp width must equal the first SE width");
  if (se_reduction < 1) throw ConfigError("cv router: se_reduction must be positive");
  if (attention_heads < 1 || se_channels[2] % attention_heads != 0)
    throw ConfigError("cv router: attention heads must divide the last SE width");
}

CvRouter::CvRouter(const CvRouterConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, "init"));
  const Index feats = 2 * cfg_.channels;
  mlp_[0] = LinearLayer(feats, cfg_.mlp[0], rng, std::sqrt(2.0));
  mlp_[1] = LinearLayer(cfg_.mlp[0], cfg_.mlp[1], rng, std::sqrt(2.0));
  mlp_[2] = LinearLayer(cfg_.mlp[1], cfg_.mlp[2], rng);
  stem_ = ConvLayer(cfg_.channels, cfg_.se_channels[0], 3, 1, rng);
  Index in = cfg_.se_channels[0];
  for (std::size_t i = 0; i < 3; ++i) {
    const Index out = cfg_.se_channels[i], stride = cfg_.se_strides[i];
    const Index mid = std::max<Index>(1, out / cfg_.se_reduction);
    SeStage& s = stages_[i];
    s.conv1 = ConvLayer(in, out, 3, stride, rng);
    s.conv2 = ConvLayer(out, out, 3, 1, rng);
    s.squeeze = LinearLayer(out, mid, rng, std::sqrt(2.0));
    s.excite = LinearLayer(mid, out, rng);
    if (stride != 1 || in != out) s.proj = ConvLayer(in, out, 1, stride, rng);
    in = out;
  }
  attn_ = AttentionLayer(in, cfg_.attention_heads, rng);
  head_ = LinearLayer(in, cfg_.n_experts, rng);
}

nlohmann::json CvRouter::config() const {
  return {{"channels", cfg_.channels},       {"image_size", cfg_.image_size},   {"pool_size", cfg_.pool_size},
          {"mlp", cfg_.mlp},                 {"se_channels", cfg_.se_channels}, {"se_strides", cfg_.se_strides},
          {"se_reduction", cfg_.se_reduction}, {"attention_heads", cfg_.attention_heads}, {"n_experts", cfg_.n_experts}};
}

ParamList CvRouter::params() {
  ParamList out;
  for (std::size_t i = 0; i < 3; ++i) mlp_[i].collect("mlp" + std::to_string(i), out);
  stem_.collect("stem", out);
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = "stage" + std::to_string(i + 1);
    SeStage& s = stages_[i];
    s.conv1.collect(p + ".conv1", out);
    s.conv2.collect(p + ".conv2", out);
    s.squeeze.collect(p + ".squeeze", out);
    s.excite.collect(p + ".excite", out);
    if (s.proj) s.proj->collect(p + ".proj", out);
  }
  attn_.collect("attn", out);
  head_.collect("head", out);
  return out;
}

namespace {

void check_cv_input(const CvRouterConfig& cfg, const RouterInput& in) {
  if (in.values.rows() != in.batch || in.values.cols() != cfg.channels * cfg.image_size * cfg.image_size)
    throw DimensionError("cv router expects [batch x " + std::to_string(cfg.channels * cfg.image_size * cfg.image_size) +
                         "] images");
}

}  // namespace

RowMatrixX CvRouter::pooled(const RouterInput& in) const {
  check_cv_input(cfg_, in);
  const Index c = cfg_.channels, s = cfg_.image_size, p = cfg_.pool_size, k = s / p;
  const Real inv = 1.0 / static_cast<Real>(k * k);
  RowMatrixX out = RowMatrixX::Zero(in.batch * p * p, c);
  for (Index b = 0; b < in.batch; ++b)
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y < s; ++y)
        for (Index x = 0; x < s; ++x) out(b * p * p + (y / k) * p + x / k, ch) += in.values(b, (ch * s + y) * s + x);
  return out * inv;
}

RowMatrixX CvRouter::global_features(const RouterInput& in) const {
  check_cv_input(cfg_, in);
  const Index c = cfg_.channels, plane = cfg_.image_size * cfg_.image_size;
  RowMatrixX out(in.batch, 2 * c);
  for (Index b = 0; b < in.batch; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      const auto v = in.values.row(b).segment(ch * plane, plane);
      const Real m = v.mean();
      out(b, ch) = m;
      out(b, c + ch) = std::sqrt((v.array() - m).square().mean());
    }
  return out;
}

Var CvRouter::stage(Graph& g, SeStage& s, Var x, MapGeometry& map) {
  MapGeometry skip_map = map;
  Var y = relu(s.conv1(g, x, map));
  y = s.conv2(g, y, map);
  const Index positions = map.height * map.width;
  Var gate = sigmoid(s.excite(g, relu(s.squeeze(g, segment_mean(y, positions)))));
  y = segment_mul(y, gate, positions);
  Var skip = s.proj ? (*s.proj)(g, x, skip_map) : x;
  return relu(add(y, skip));
}

Var CvRouter::logits(Graph& g, const RouterInput& in) {
  Var bias = mlp_[2](g, relu(mlp_[1](g, relu(mlp_[0](g, g.constant(global_features(in)))))));
  MapGeometry map{in.batch, cfg_.pool_size, cfg_.pool_size, cfg_.channels};
  Var h = stem_(g, g.constant(pooled(in)), map);
  h = relu(segment_add(h, bias, map.height * map.width));
  for (SeStage& s : stages_) h = stage(g, s, h, map);
  const Index positions = map.height * map.width;
  h = add(h, attn_(g, h, positions, false));
  return head_(g, segment_mean(h, positions));
}

Index CvRouter::forward_macs() const {
  Index macs = 0;
  for (const LinearLayer& l : mlp_) macs += l.weight.numel();
  MapGeometry map{1, cfg_.pool_size, cfg_.pool_size, cfg_.channels};
  macs += stem_.macs(map);
  map.channels = stem_.out_channels();
  for (const SeStage& s : stages_) {
    if (s.proj) macs += s.proj->macs(map);
    macs += s.conv1.macs(map);
    map = {1, s.conv1.geom.out_height(map), s.conv1.geom.out_width(map), s.conv1.out_channels()};
    macs += s.conv2.macs(map) + s.squeeze.weight.numel() + s.excite.weight.numel();
  }
  macs += attn_.macs(map.height * map.width) + head_.weight.numel();
  return macs;
}

// ---------------------------------------------------------------------------
// NLP router

namespace {

Index patches(Index seq, Index patch) { return (seq + patch - 1) / patch; }

}  // namespace

void NlpRouterConfig::validate() const {
  if (n_experts < 2) throw ConfigError("router needs at least 2 experts");
  if (d_model < 1 || context < 1 || patch < 1 || width < 1 || encoder_layers < 0 || encoder_hidden < 1 || mlp_hidden < 1)
    throw ConfigError("nlp router: widths must be positive");
  if (heads < 1 || width % heads != 0) throw ConfigError("nlp router: heads must divide width");
}

NlpRouter::NlpRouter(const NlpRouterConfig& cfg, const Tensor& shared_embedding, std::uint64_t seed)
    : cfg_(cfg), embedding_(&shared_embedding) {
  cfg_.validate();
  if (shared_embedding.shape.size() != 2 || shared_embedding.shape[1] != cfg_.d_model)
    throw ConfigError("nlp router: d_model " + std::to_string(cfg_.d_model) + " does not match embedding width " +
                      std::to_string(shared_embedding.cols()));
  Rng rng(derive_seed(seed, "init"));
  position_ = normal_tensor({patches(cfg_.context, cfg_.patch) * cfg_.patch, cfg_.d_model}, 0.1, rng);
  merge_ = LinearLayer(cfg_.patch * cfg_.d_model, cfg_.width, rng);
  for (Index l = 0; l < cfg_.encoder_layers; ++l)
    encoder_.emplace_back(cfg_.width, cfg_.heads, cfg_.encoder_hidden, rng);
  refine_ln_ = LayerNormLayer(cfg_.width);
  refine_ = AttentionLayer(cfg_.width, cfg_.heads, rng);
  hidden_ = LinearLayer(cfg_.width, cfg_.mlp_hidden, rng, std::sqrt(2.0));
  out_ = LinearLayer(cfg_.mlp_hidden, cfg_.n_experts, rng);
}

nlohmann::json NlpRouter::config() const {
  return {{"d_model", cfg_.d_model},
          {"context", cfg_.context},
          {"patch", cfg_.patch},
          {"width", cfg_.width},
          {"heads", cfg_.heads},
          {"encoder_layers", cfg_.encoder_layers},
          {"encoder_hidden", cfg_.encoder_hidden},
          {"mlp_hidden", cfg_.mlp_hidden},
          {"n_experts", cfg_.n_experts}};
}

ParamList NlpRouter::params() {
  ParamList out;
  out.push_back({"position.weight", &position_, ParamRole::embedding});
  merge_.collect("merge", out);
  for (std::size_t l = 0; l < encoder_.size(); ++l) encoder_[l].collect("encoder" + std::to_string(l), out);
  refine_ln_.collect("refine_ln", out);
  refine_.collect("refine", out);
  hidden_.collect("mlp.hidden", out);
  out_.collect("mlp.out", out);
  return out;
}

Var NlpRouter::logits(Graph& g, const RouterInput& in) {
  if (in.seq < 1 || in.seq > cfg_.context) throw ContractError("nlp router: sequence length outside the router context");
  if (in.values.rows() != in.batch * in.seq || in.values.cols() != cfg_.d_model)
    throw DimensionError("nlp router expects [batch*seq x " + std::to_string(cfg_.d_model) + "] embeddings");
  const Index n = patches(in.seq, cfg_.patch), padded = n * cfg_.patch, d = cfg_.d_model;
  std::vector<int> positions(static_cast<std::size_t>(padded));
  for (Index i = 0; i < padded; ++i) positions[static_cast<std::size_t>(i)] = static_cast<int>(i);
  Var h;
  if (padded == in.seq) {
    h = tile_add(g.constant(in.values), gather_rows(g.param(position_), positions));
  } else {
    // Tail positions of a short sequence are zero rows, position included.
    RowMatrixX x = RowMatrixX::Zero(in.batch * padded, d), mask = RowMatrixX::Zero(in.batch * padded, d);
    for (Index b = 0; b < in.batch; ++b) {
      x.middleRows(b * padded, in.seq) = in.values.middleRows(b * in.seq, in.seq);
      mask.middleRows(b * padded, in.seq).setOnes();
    }
    h = mul(tile_add(g.constant(x), gather_rows(g.param(position_), positions)), g.constant(mask));
  }
  h = merge_(g, reshape(h, {in.batch * n, cfg_.patch * d}));
  for (TransformerBlock& b : encoder_) h = b(g, h, n, false);
  h = add(h, refine_(g, refine_ln_(g, h), n, false));
  return out_(g, relu(hidden_(g, segment_mean(h, n))));
}

Index NlpRouter::forward_macs() const {
  const Index n = patches(cfg_.context, cfg_.patch);
  Index macs = n * merge_.weight.numel();
  for (const TransformerBlock& b : encoder_) macs += b.macs(n);
  return macs + refine_.macs(n) + hidden_.weight.numel() + out_.weight.numel();
}

RouterInput NlpRouter::embed(std::span<const int> ids, Index seq) const {
  if (seq < 1 || ids.size() % static_cast<std::size_t>(seq) != 0) throw DimensionError("nlp router: ids are not whole sequences");
  RouterInput in;
  in.seq = seq;
  in.batch = static_cast<Index>(ids.size()) / seq;
  in.values.resize(static_cast<Index>(ids.size()), cfg_.d_model);
  const auto table = embedding_->mat();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i] < 0 ? 0 : ids[i];
    if (id >= table.rows()) throw IndexError("token id " + std::to_string(id) + " outside the shared embedding");
    in.values.row(static_cast<Index>(i)) = table.row(id);
  }
  return in;
}

// ---------------------------------------------------------------------------
// Routing

RouterInput router_input(const Dataset& data, std::span<const Index> rows, const Model& base) {
  base.check_input(data);
  RouterInput in;
  in.batch = static_cast<Index>(rows.size());
  if (data.kind == Modality::cv) {
    in.values.resize(in.batch, data.inputs.cols());
    for (Index i = 0; i < in.batch; ++i) in.values.row(i) = data.inputs.row(rows[static_cast<std::size_t>(i)]);
    return in;
  }
  const auto& lm = dynamic_cast<const LmBaseModel&>(base);
  std::vector<int> inputs, targets;
  lm.batch_tokens(data, rows, inputs, targets);
  in.seq = data.seq_len;
  in.values = lm.embed(inputs);
  return in;
}

int argmax_lowest(const Eigen::Ref<const VectorX>& v) {
  int best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

RoutingRecord make_record(const Eigen::Ref<const VectorX>& logits) {
  RoutingRecord r;
  const Real m = logits.maxCoeff();
  VectorX e = (logits.array() - m).exp();
  r.probs = e / e.sum();
  r.chosen = argmax_lowest(logits);
  for (Index i = 0; i < r.probs.size(); ++i)
    if (r.probs[i] > 0) r.entropy -= r.probs[i] * std::log(r.probs[i]);
  return r;
}

std::vector<RoutingRecord> route(Router& router, const RouterInput& in) {
  Graph g;
  Var z = router.logits(g, in);
  const auto m = g.mat(z);
  std::vector<RoutingRecord> out;
  out.reserve(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) out.push_back(make_record(m.row(i).transpose()));
  return out;
}

Digest base_binding_digest(const Model& base) {
  if (base.kind() == Modality::nlp) {
    const Tensor& t = dynamic_cast<const LmBaseModel&>(base).embedding();
    Hasher h;
    h.update("token.weight");
    h.update(std::span<const Real>(t.data.data(), static_cast<std::size_t>(t.numel())));
    return h.finish();
  }
  return base.weights_digest();
}

std::unique_ptr<Router> make_router(const Model& base, const nlohmann::json& config, int n_experts, std::uint64_t seed) {
  try {
    if (base.kind() == Modality::cv) {
      reject_unknown_keys(config, {"pool_size", "mlp", "se_channels", "se_strides", "se_reduction", "attention_heads",
                                   "channels", "image_size", "n_experts"},
                          "cv router");
      const nlohmann::json bc = base.config();
      CvRouterConfig c;
      c.channels = bc.at("channels").get<Index>();
      c.image_size = bc.at("size").get<Index>();
      if (config.value("channels", c.channels) != c.channels || config.value("image_size", c.image_size) != c.image_size)
        throw ConfigError("cv router: input geometry must match the base model");
      c.pool_size = config.value("pool_size", c.pool_size);
      c.mlp = config.value("mlp", c.mlp);
      c.se_channels = config.value("se_channels", c.se_channels);
      c.se_strides = config.value("se_strides", c.se_strides);
      c.se_reduction = config.value("se_reduction", c.se_reduction);
      c.attention_heads = config.value("attention_heads", c.attention_heads);
      c.n_experts = config.value("n_experts", n_experts);
      if (c.n_experts != n_experts) throw ConfigError("router n_experts does not match the registry");
      return std::make_unique<CvRouter>(c, seed);
    }
    reject_unknown_keys(config, {"d_model", "context", "patch", "width", "heads", "encoder_layers", "encoder_hidden", "mlp_hidden", "n_experts"},
                        "nlp router");
    const auto& lm = dynamic_cast<const LmBaseModel&>(base);
    NlpRouterConfig c;
    c.d_model = config.value("d_model", lm.cfg().width);
    c.context = config.value("context", lm.cfg().context);
    c.patch = config.value("patch", c.patch);
    c.width = config.value("width", c.width);
    c.heads = config.value("heads", c.heads);
    c.encoder_layers = config.value("encoder_layers", c.encoder_layers);
    c.encoder_hidden = config.value("encoder_hidden", c.encoder_hidden);
    c.mlp_hidden = config.value("mlp_hidden", c.mlp_hidden);
    c.n_experts = config.value("n_experts", n_experts);
    if (c.n_experts != n_experts) throw ConfigError("router n_experts does not match the registry");
    return std::make_unique<NlpRouter>(c, lm.embedding(), seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("router config: ") + e.what());
  }
}

Container router_to_container(const Router& router, const Digest& base, const Digest& registry) {
  Container c;
  c.header = {{"kind", "router"},
              {"arch", router.arch()},
              {"config", router.config()},
              {"base_digest", to_hex(base)},
              {"registry_digest", to_hex(registry)},
              {"weights_digest", to_hex(router.weights_digest())}};
  for (const NamedParam& p : router.params()) c.add_f64(p.name, *p.tensor);
  return c;
}

RouterCheckpoint router_from_container(const Container& c, const Model& base) {
  if (c.header.value("kind", "") != "router") throw DataError("container is not a router checkpoint");
  RouterCheckpoint out;
  out.base = digest_from_hex(c.header.at("base_digest").get<std::string>());
  out.registry = digest_from_hex(c.header.at("registry_digest").get<std::string>());
  if (out.base != base_binding_digest(base))
    throw IntegrityError("router was trained against base " + to_hex(out.base) + ", got " + to_hex(base_binding_digest(base)));
  const nlohmann::json cfg = c.header.at("config");
  out.router = make_router(base, cfg, cfg.at("n_experts").get<int>(), 0);
  if (out.router->arch() != c.header.at("arch").get<std::string>()) throw DataError("router architecture mismatch");
  for (const NamedParam& p : out.router->params()) {
    Tensor t = c.tensor(p.name);
    if (t.shape != p.tensor->shape) throw DataError("router entry " + p.name + " has shape " + shape_str(t.shape));
    p.tensor->data = std::move(t.data);
  }
  if (to_hex(out.router->weights_digest()) != c.header.at("weights_digest").get<std::string>())
    throw IntegrityError("router weights digest mismatch");
  return out;
}

}  // namespace moqe
