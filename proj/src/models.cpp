// SPDX-License-Identifier: Apache-2.0
#include "moqe/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "moqe/config.hpp"
#include "moqe/optim.hpp"

namespace moqe {

namespace {

constexpr Index kEvalBatch = 64;

int argmax_row(const Eigen::Ref<const RowMatrixX>& m, Index r) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return static_cast<int>(best);
}

RowMatrixX log_softmax_rows(const Eigen::Ref<const RowMatrixX>& x) {
  RowMatrixX y = x.colwise() - x.rowwise().maxCoeff();
  const VectorX lse = y.array().exp().rowwise().sum().log();
  y.colwise() -= lse;
  return y;
}

template <typename F>
void for_chunks(std::span<const Index> rows, Index chunk, F&& f) {
  for (std::size_t begin = 0; begin < rows.size(); begin += static_cast<std::size_t>(chunk))
    f(rows.subspan(begin, std::min(rows.size() - begin, static_cast<std::size_t>(chunk))));
}

}  // namespace

// ---------------------------------------------------------------------------
// Model

CalibrationStats Model::calibrate(const Dataset& data, std::span<const Index> rows, Index batch) const {
  check_input(data);
  if (rows.empty()) throw ContractError("calibrate: no rows");
  CalibrationStats cal;
  auto* self = const_cast<Model*>(this);
  for_chunks(rows, batch, [&](std::span<const Index> chunk) {
    Graph g;
    self->run_capture(g, data, chunk, cal);
  });
  return cal;
}

Digest Model::weights_digest() const {
  Hasher h;
  h.update(arch());
  h.update(config().dump());
  for (const NamedParam& p : params()) {
    h.update(p.name);
    h.update(std::span<const Real>(p.tensor->data.data(), static_cast<std::size_t>(p.tensor->numel())));
  }
  return h.finish();
}

Container Model::to_container() const {
  Container c;
  c.header = {{"arch", arch()}, {"config", config()}, {"weights_digest", to_hex(weights_digest())}};
  for (const NamedParam& p : params()) c.add_f64(p.name, *p.tensor);
  return c;
}

void Model::load_weights(const Container& c) {
  for (const NamedParam& p : params()) {
    Tensor t = c.tensor(p.name);
    if (t.shape != p.tensor->shape)
      throw DataError("checkpoint entry " + p.name + " has shape " + shape_str(t.shape) + ", model expects " +
                      shape_str(p.tensor->shape));
    p.tensor->data = std::move(t.data);
    p.tensor->grad.reset();
  }
}

// ---------------------------------------------------------------------------
// CV model

RowMatrixX images_to_map(const Dataset& data, std::span<const Index> rows) {
  const Index c = data.channels, h = data.height, w = data.width, plane = h * w;
  RowMatrixX map(static_cast<Index>(rows.size()) * plane, c);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const auto src = data.inputs.row(rows[b]);
    for (Index ch = 0; ch < c; ++ch)
      for (Index p = 0; p < plane; ++p) map(static_cast<Index>(b) * plane + p, ch) = src(ch * plane + p);
  }
  return map;
}

CvBaseModel::CvBaseModel(const CvModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.channels < 1 || cfg.size < 4 || cfg.classes < 2 || cfg.width < 1) throw ConfigError("cv model: bad configuration");
  Rng rng(derive_seed(seed, "init"));
  const Index w = cfg.width;
  stem_ = ConvLayer(cfg.channels, w, 3, 1, rng);
  stem_bn_ = BatchNormLayer(w);
  b1_conv1_ = ConvLayer(w, w, 3, 1, rng);
  b1_bn1_ = BatchNormLayer(w);
  b1_conv2_ = ConvLayer(w, w, 3, 1, rng);
  b1_bn2_ = BatchNormLayer(w);
  b2_conv1_ = ConvLayer(w, 2 * w, 3, 2, rng);
  b2_bn1_ = BatchNormLayer(2 * w);
  b2_conv2_ = ConvLayer(2 * w, 2 * w, 3, 1, rng);
  b2_bn2_ = BatchNormLayer(2 * w);
  b2_proj_ = ConvLayer(w, 2 * w, 1, 2, rng);
  head_ = LinearLayer(2 * w, cfg.classes, rng);
}

nlohmann::json CvBaseModel::config() const {
  return {{"channels", cfg_.channels}, {"size", cfg_.size}, {"classes", cfg_.classes}, {"width", cfg_.width}};
}

ParamList CvBaseModel::params() {
  ParamList out;
  stem_.collect("stem", out);
  stem_bn_.collect("stem_bn", out);
  b1_conv1_.collect("block1.conv1", out);
  b1_bn1_.collect("block1.bn1", out);
  b1_conv2_.collect("block1.conv2", out);
  b1_bn2_.collect("block1.bn2", out);
  b2_conv1_.collect("block2.conv1", out);
  b2_bn1_.collect("block2.bn1", out);
  b2_conv2_.collect("block2.conv2", out);
  b2_bn2_.collect("block2.bn2", out);
  b2_proj_.collect("block2.proj", out);
  head_.collect("head", out);
  return out;
}

void CvBaseModel::check_input(const Dataset& data) const {
  if (data.kind != Modality::cv) throw ContractError("cv model given " + to_string(data.kind) + " data");
  if (data.channels != cfg_.channels || data.height != cfg_.size || data.width != cfg_.size)
    throw ContractError("cv model expects " + std::to_string(cfg_.channels) + "x" + std::to_string(cfg_.size) + "x" +
                        std::to_string(cfg_.size) + " images");
}

Var CvBaseModel::logits(Graph& g, const Dataset& data, std::span<const Index> rows, const ForwardOptions& opt) {
  check_input(data);
  CalibrationStats* cal = opt.capture;
  const bool tr = opt.training;
  MapGeometry m{static_cast<Index>(rows.size()), cfg_.size, cfg_.size, cfg_.channels};
  Var x = g.constant(images_to_map(data, rows));
  x = relu(stem_bn_(g, stem_(g, x, m, calib_slot(cal, "stem.weight")), tr));

  Var h = relu(b1_bn1_(g, b1_conv1_(g, x, m, calib_slot(cal, "block1.conv1.weight")), tr));
  h = b1_bn2_(g, b1_conv2_(g, h, m, calib_slot(cal, "block1.conv2.weight")), tr);
  x = relu(add(x, h));

  MapGeometry skip = m;
  h = relu(b2_bn1_(g, b2_conv1_(g, x, m, calib_slot(cal, "block2.conv1.weight")), tr));
  h = b2_bn2_(g, b2_conv2_(g, h, m, calib_slot(cal, "block2.conv2.weight")), tr);
  Var s = b2_proj_(g, x, skip, calib_slot(cal, "block2.proj.weight"));
  x = relu(add(h, s));

  Var pooled = segment_mean(x, m.height * m.width);
  return head_(g, pooled, calib_slot(cal, "head.weight"));
}

Var CvBaseModel::loss(Graph& g, const Dataset& data, std::span<const Index> rows, const ForwardOptions& opt) {
  std::vector<int> labels;
  for (Index r : rows) labels.push_back(data.labels[static_cast<std::size_t>(r)]);
  return cross_entropy(logits(g, data, rows, opt), labels);
}

SampleEval CvBaseModel::evaluate(const Dataset& data, std::span<const Index> rows) const {
  check_input(data);
  auto* self = const_cast<CvBaseModel*>(this);
  SampleEval out;
  out.loss.resize(static_cast<Index>(rows.size()));
  Index at = 0;
  for_chunks(rows, kEvalBatch, [&](std::span<const Index> chunk) {
    Graph g;
    const RowMatrixX lp = log_softmax_rows(g.mat(self->logits(g, data, chunk, {})));
    for (Index b = 0; b < lp.rows(); ++b, ++at) {
      const int label = data.labels[static_cast<std::size_t>(chunk[static_cast<std::size_t>(b)])];
      if (label < 0 || label >= cfg_.classes) throw IndexError("label " + std::to_string(label) + " outside [0, classes)");
      out.loss[at] = -lp(b, label);
      out.predictions.push_back(argmax_row(lp, b));
      out.tokens.push_back(1);
    }
  });
  out.loss_sum = out.loss;
  return out;
}

Index CvBaseModel::forward_macs() const {
  MapGeometry m{1, cfg_.size, cfg_.size, cfg_.channels};
  Index macs = stem_.macs(m);
  m.channels = cfg_.width;
  macs += b1_conv1_.macs(m) + b1_conv2_.macs(m) + b2_conv1_.macs(m) + b2_proj_.macs(m);
  const MapGeometry half{1, b2_conv1_.geom.out_height(m), b2_conv1_.geom.out_width(m), 2 * cfg_.width};
  macs += b2_conv2_.macs(half) + head_.weight.numel();
  return macs;
}

void CvBaseModel::run_capture(Graph& g, const Dataset& data, std::span<const Index> rows, CalibrationStats& cal) {
  logits(g, data, rows, {false, &cal});
}

// ---------------------------------------------------------------------------
// Language model

LmBaseModel::LmBaseModel(const LmModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.vocab < 2 || cfg.width < 1 || cfg.layers < 1 || cfg.context < 1 || cfg.hidden < 1)
    throw ConfigError("lm: bad configuration");
  Rng rng(derive_seed(seed, "init"));
  token_ = normal_tensor({cfg.vocab, cfg.width}, 0.5, rng);
  position_ = normal_tensor({cfg.context, cfg.width}, 0.1, rng);
  for (Index l = 0; l < cfg.layers; ++l) blocks_.emplace_back(cfg.width, cfg.heads, cfg.hidden, rng);
  final_ln_ = LayerNormLayer(cfg.width);
  head_ = LinearLayer(cfg.width, cfg.vocab, rng);
}

nlohmann::json LmBaseModel::config() const {
  return {{"vocab", cfg_.vocab}, {"width", cfg_.width},   {"heads", cfg_.heads},
          {"hidden", cfg_.hidden}, {"layers", cfg_.layers}, {"context", cfg_.context}};
}

ParamList LmBaseModel::params() {
  ParamList out;
  out.push_back({"token.weight", &token_, ParamRole::embedding});
  out.push_back({"position.weight", &position_, ParamRole::embedding});
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("block" + std::to_string(l), out);
  final_ln_.collect("final_ln", out);
  head_.collect("head", out);
  return out;
}

void LmBaseModel::check_input(const Dataset& data) const {
  if (data.kind != Modality::nlp) throw ContractError("language model given " + to_string(data.kind) + " data");
  if (data.seq_len < 1 || data.seq_len > cfg_.context)
    throw ContractError("sequence length " + std::to_string(data.seq_len) + " outside the model context of " +
                        std::to_string(cfg_.context));
}

void LmBaseModel::batch_tokens(const Dataset& data, std::span<const Index> rows, std::vector<int>& inputs,
                               std::vector<int>& targets) const {
  const Index seq = data.seq_len;
  inputs.assign(rows.size() * static_cast<std::size_t>(seq), 0);
  targets.assign(rows.size() * static_cast<std::size_t>(seq), -1);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const auto row = data.inputs.row(rows[b]);
    for (Index t = 0; t < seq; ++t) {
      const auto at = b * static_cast<std::size_t>(seq) + static_cast<std::size_t>(t);
      const int cur = static_cast<int>(row(t)), next = static_cast<int>(row(t + 1));
      if (cur != kPadToken) inputs[at] = cur;
      if (cur != kPadToken && next != kPadToken) targets[at] = next;
    }
  }
}

RowMatrixX LmBaseModel::embed(std::span<const int> ids) const {
  ++gathers_;
  RowMatrixX out(static_cast<Index>(ids.size()), cfg_.width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= cfg_.vocab)
      throw IndexError("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(cfg_.vocab));
    out.row(static_cast<Index>(i)) = token_.mat().row(ids[i]);
  }
  return out;
}

Var LmBaseModel::logits_from_embeddings(Graph& g, Var embeddings, Index seq, const ForwardOptions& opt) {
  if (seq > cfg_.context) throw ContractError("sequence longer than the model context");
  std::vector<int> positions(static_cast<std::size_t>(seq));
  std::iota(positions.begin(), positions.end(), 0);
  Var x = tile_add(embeddings, gather_rows(g.param(position_), positions));
  for (std::size_t l = 0; l < blocks_.size(); ++l)
    x = blocks_[l](g, x, seq, true, opt.capture, "block" + std::to_string(l));
  return head_(g, final_ln_(g, x), calib_slot(opt.capture, "head.weight"));
}

Var LmBaseModel::loss(Graph& g, const Dataset& data, std::span<const Index> rows, const ForwardOptions& opt) {
  check_input(data);
  std::vector<int> inputs, targets;
  batch_tokens(data, rows, inputs, targets);
  Var emb = gather_rows(g.param(token_), inputs);
  return masked_cross_entropy(logits_from_embeddings(g, emb, data.seq_len, opt), targets, -1);
}

SampleEval LmBaseModel::score(Graph& g, Var logits, std::span<const int> targets, Index batch, Index seq) const {
  const RowMatrixX lp = log_softmax_rows(g.mat(logits));
  SampleEval out;
  out.loss = VectorX::Zero(batch);
  out.loss_sum = VectorX::Zero(batch);
  for (Index b = 0; b < batch; ++b) {
    Index n = 0;
    for (Index t = 0; t < seq; ++t) {
      const int y = targets[static_cast<std::size_t>(b * seq + t)];
      if (y < 0) continue;
      out.loss_sum[b] -= lp(b * seq + t, y);
      ++n;
    }
    out.loss[b] = n > 0 ? out.loss_sum[b] / static_cast<Real>(n) : 0.0;
    out.tokens.push_back(n);
    out.predictions.push_back(-1);
  }
  return out;
}

SampleEval LmBaseModel::evaluate(const Dataset& data, std::span<const Index> rows) const {
  check_input(data);
  SampleEval out;
  out.loss.resize(static_cast<Index>(rows.size()));
  out.loss_sum.resize(static_cast<Index>(rows.size()));
  Index at = 0;
  for_chunks(rows, kEvalBatch / 2, [&](std::span<const Index> chunk) {
    std::vector<int> inputs, targets;
    batch_tokens(data, chunk, inputs, targets);
    const SampleEval part = evaluate_embedded(embed(inputs), targets, data.seq_len);
    const auto n = static_cast<Index>(chunk.size());
    out.loss.segment(at, n) = part.loss;
    out.loss_sum.segment(at, n) = part.loss_sum;
    out.tokens.insert(out.tokens.end(), part.tokens.begin(), part.tokens.end());
    out.predictions.insert(out.predictions.end(), part.predictions.begin(), part.predictions.end());
    at += n;
  });
  return out;
}

SampleEval LmBaseModel::evaluate_embedded(const RowMatrixX& embeddings, std::span<const int> targets, Index seq) const {
  if (embeddings.cols() != cfg_.width || embeddings.rows() % seq != 0 || static_cast<Index>(targets.size()) != embeddings.rows())
    throw DimensionError("evaluate_embedded: embeddings/targets do not match the sequence layout");
  auto* self = const_cast<LmBaseModel*>(this);
  Graph g;
  Var logits = self->logits_from_embeddings(g, g.constant(embeddings), seq, {});
  return score(g, logits, targets, embeddings.rows() / seq, seq);
}

Index LmBaseModel::forward_macs() const {
  Index macs = 0;
  for (const TransformerBlock& b : blocks_) macs += b.macs(cfg_.context);
  return macs + cfg_.context * head_.weight.numel();
}

void LmBaseModel::run_capture(Graph& g, const Dataset& data, std::span<const Index> rows, CalibrationStats& cal) {
  std::vector<int> inputs, targets;
  batch_tokens(data, rows, inputs, targets);
  logits_from_embeddings(g, g.constant(embed(inputs)), data.seq_len, {false, &cal});
}

// ---------------------------------------------------------------------------
// Factories

std::unique_ptr<Model> make_model(const std::string& arch, const nlohmann::json& config, std::uint64_t seed) {
  try {
    if (arch == "cv_resnet") {
      reject_unknown_keys(config, {"channels", "size", "classes", "width"}, "cv model config");
      CvModelConfig c;
      c.channels = config.value("channels", c.channels);
      c.size = config.value("size", c.size);
      c.classes = config.value("classes", c.classes);
      c.width = config.value("width", c.width);
      return std::make_unique<CvBaseModel>(c, seed);
    }
    if (arch == "lm_transformer") {
      reject_unknown_keys(config, {"vocab", "width", "heads", "hidden", "layers", "context"}, "lm config");
      LmModelConfig c;
      c.vocab = config.value("vocab", c.vocab);
      c.width = config.value("width", c.width);
      c.heads = config.value("heads", c.heads);
      c.hidden = config.value("hidden", c.hidden);
      c.layers = config.value("layers", c.layers);
      c.context = config.value("context", c.context);
      return std::make_unique<LmBaseModel>(c, seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  throw ConfigError("unknown model architecture '" + arch + "'");
}

std::unique_ptr<Model> model_from_container(const Container& c) {
  std::unique_ptr<Model> m;
  try {
    m = make_model(c.header.at("arch").get<std::string>(), c.header.at("config"), 0);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model checkpoint header: ") + e.what());
  }
  m->load_weights(c);
  if (c.header.contains("weights_digest") && c.header["weights_digest"].get<std::string>() != to_hex(m->weights_digest()))
    throw IntegrityError("model checkpoint weights do not match their recorded digest");
  return m;
}

// ---------------------------------------------------------------------------
// Training

namespace {

Dataset with_null_inputs(const Dataset& train, Index count, Index classes) {
  Dataset out = train;
  const Index n0 = train.size();
  out.inputs.conservativeResize(n0 + count, train.inputs.cols());
  out.inputs.bottomRows(count).setZero();
  for (Index i = 0; i < count; ++i) {
    out.labels.push_back(static_cast<int>(i % classes));
    out.subsets.push_back(0);
  }
  return out;
}

}  // namespace

TrainBaseHistory train_base(Model& model, const Dataset& data, const TrainBaseConfig& cfg) {
  model.check_input(data);
  if (cfg.epochs < 1 || cfg.batch_size < 2) throw ConfigError("train_base: epochs >= 1 and batch_size >= 2 required");
  if (data.size() < 2) throw ContractError("train_base: need at least 2 samples");
  if (cfg.null_inputs < 0 || (cfg.null_inputs > 0 && model.kind() != Modality::cv))
    throw ConfigError("train_base: null_inputs must be >= 0 and is cv only");
  const Dataset train = cfg.null_inputs > 0
                            ? with_null_inputs(data, cfg.null_inputs, model.config().at("classes").get<Index>())
                            : data;
  const ParamList params = model.params();
  set_requires_grad(params, true);
  AdamW opt(trainable(params), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.max_grad_norm});
  const Index per_epoch = std::max<Index>(1, train.size() / cfg.batch_size);
  const long total = static_cast<long>(per_epoch * cfg.epochs);
  const long warmup = std::lround(cfg.warmup_fraction * static_cast<Real>(total));
  Rng rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<Index> order = all_rows(train);
  TrainBaseHistory hist;
  long step = 0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    Real sum = 0.0;
    for (Index b = 0; b < per_epoch; ++b) {
      // The last batch absorbs the remainder so no batch is smaller than 2.
      const Index begin = b * cfg.batch_size;
      const Index end = b + 1 == per_epoch ? train.size() : begin + cfg.batch_size;
      const std::span<const Index> rows(order.data() + begin, static_cast<std::size_t>(end - begin));
      Graph g;
      Var loss = model.loss(g, train, rows, {true, nullptr});
      const Real value = g.item(loss);
      if (!std::isfinite(value))
        throw TrainingError("base training diverged at step " + std::to_string(step) + " (loss " + std::to_string(value) + ")");
      opt.zero_grad();
      g.backward(loss);
      opt.step(lr_schedule(step + 1, total, warmup, cfg.lr));
      ++step;
      sum += value;
    }
    hist.epoch_loss.push_back(sum / static_cast<Real>(per_epoch));
  }
  set_requires_grad(params, false);
  const std::vector<Index> rows = all_rows(data);
  const SampleEval ev = model.evaluate(data, rows);
  hist.final_loss = ev.loss_sum.sum() / static_cast<Real>(std::accumulate(ev.tokens.begin(), ev.tokens.end(), Index{0}));
  if (model.kind() == Modality::cv) {
    Index hits = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) hits += ev.predictions[i] == data.labels[i];
    hist.final_accuracy = static_cast<Real>(hits) / static_cast<Real>(rows.size());
  }
  hist.threshold_met = hist.final_loss < cfg.loss_threshold;
  return hist;
}

}  // namespace moqe
