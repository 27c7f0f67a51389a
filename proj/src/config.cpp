// SPDX-License-Identifier: Apache-2.0
#include "moqe/config.hpp"

#include <algorithm>
#include <fstream>

namespace moqe {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (std::find_if(keys.begin(), keys.end(), [&](const char* s) { return k == s; }) == keys.end())
      throw ConfigError(what + ": unknown key '" + k + "'");
}

namespace {

nlohmann::json cv_gen_json(const CvGenConfig& c) {
  return {{"classes", c.classes}, {"families", c.families}, {"per_class", c.per_class},
          {"channels", c.channels}, {"size", c.size},         {"noise", c.noise}};
}

CvGenConfig cv_gen_from(const nlohmann::json& j, CvGenConfig c) {
  reject_unknown_keys(j, {"classes", "families", "per_class", "channels", "size", "noise"}, "data.cv");
  c.classes = j.value("classes", c.classes);
  c.families = j.value("families", c.families);
  c.per_class = j.value("per_class", c.per_class);
  c.channels = j.value("channels", c.channels);
  c.size = j.value("size", c.size);
  c.noise = j.value("noise", c.noise);
  return c;
}

nlohmann::json nlp_gen_json(const NlpGenConfig& c) {
  return {{"sources", c.sources},
          {"documents_per_source", c.documents_per_source},
          {"document_bytes", c.document_bytes},
          {"seq_len", c.seq_len}};
}

NlpGenConfig nlp_gen_from(const nlohmann::json& j, NlpGenConfig c) {
  reject_unknown_keys(j, {"sources", "documents_per_source", "document_bytes", "seq_len"}, "data.nlp");
  c.sources = j.value("sources", c.sources);
  c.documents_per_source = j.value("documents_per_source", c.documents_per_source);
  c.document_bytes = j.value("document_bytes", c.document_bytes);
  c.seq_len = j.value("seq_len", c.seq_len);
  return c;
}

nlohmann::json base_train_json(const TrainBaseConfig& c) {
  nlohmann::json j = {{"epochs", c.epochs},
                      {"batch_size", c.batch_size},
                      {"lr", c.lr},
                      {"weight_decay", c.weight_decay},
                      {"warmup_fraction", c.warmup_fraction},
                      {"max_grad_norm", c.max_grad_norm},
                      {"null_inputs", c.null_inputs}};
  j["loss_threshold"] = std::isfinite(c.loss_threshold) ? nlohmann::json(c.loss_threshold) : nlohmann::json(nullptr);
  return j;
}

TrainBaseConfig base_train_from(const nlohmann::json& j, TrainBaseConfig c) {
  reject_unknown_keys(j, {"epochs", "batch_size", "lr", "weight_decay", "warmup_fraction", "max_grad_norm", "null_inputs",
                          "loss_threshold"},
                      "base_model.train");
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.null_inputs = j.value("null_inputs", c.null_inputs);
  if (j.contains("loss_threshold") && !j.at("loss_threshold").is_null()) c.loss_threshold = j.at("loss_threshold").get<Real>();
  return c;
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
  nlohmann::json q = nlohmann::json::array();
  for (const QuantSpec& s : quant) q.push_back(s);
  return {{"seed", seed},
          {"data",
           {{"kind", moqe::to_string(data.kind)},
            {"subsets", data.subsets},
            {"val_fraction", data.val_fraction},
            {"cv", cv_gen_json(data.cv)},
            {"nlp", nlp_gen_json(data.nlp)}}},
          {"base_model", {{"arch", base_model.arch}, {"config", base_model.config}, {"train", base_train_json(base_model.train)}}},
          {"quant", q},
          {"router", router},
          {"train", train},
          {"eval", {{"sweep_counts", eval.sweep_counts}, {"sweep_seeds", eval.sweep_seeds}}},
          {"bench",
           {{"requests", bench.requests},
            {"repetitions", bench.repetitions},
            {"warmup", bench.warmup},
            {"store", bench.store},
            {"fast_capacity_bytes", bench.fast_capacity_bytes}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  try {
    reject_unknown_keys(j, {"seed", "data", "base_model", "quant", "router", "train", "eval", "bench"}, "config");
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    if (j.contains("data")) {
      const nlohmann::json& d = j.at("data");
      reject_unknown_keys(d, {"kind", "subsets", "val_fraction", "cv", "nlp"}, "data");
      if (d.contains("kind")) c.data.kind = parse_modality(d.at("kind").get<std::string>());
      c.data.subsets = d.value("subsets", c.data.subsets);
      c.data.val_fraction = d.value("val_fraction", c.data.val_fraction);
      if (d.contains("cv")) c.data.cv = cv_gen_from(d.at("cv"), c.data.cv);
      if (d.contains("nlp")) c.data.nlp = nlp_gen_from(d.at("nlp"), c.data.nlp);
    }
    if (c.data.kind == Modality::nlp) {
      c.base_model.arch = "lm_transformer";
      c.train = default_train_config(Modality::nlp);
    }
    if (j.contains("base_model")) {
      const nlohmann::json& b = j.at("base_model");
      reject_unknown_keys(b, {"arch", "config", "train"}, "base_model");
      c.base_model.arch = b.value("arch", c.base_model.arch);
      if (b.contains("config")) c.base_model.config = b.at("config");
      if (b.contains("train")) c.base_model.train = base_train_from(b.at("train"), c.base_model.train);
    }
    if (j.contains("quant")) {
      if (!j.at("quant").is_array()) throw ConfigError("quant must be a list of specs");
      for (const nlohmann::json& q : j.at("quant")) {
        QuantSpec s = q.get<QuantSpec>();
        s.validate();
        c.quant.push_back(s);
      }
    }
    if (j.contains("router")) {
      if (!j.at("router").is_object()) throw ConfigError("router must be a JSON object");
      c.router = j.at("router");
    }
    if (j.contains("train")) moqe::from_json(j.at("train"), c.train);
    if (j.contains("eval")) {
      const nlohmann::json& e = j.at("eval");
      reject_unknown_keys(e, {"sweep_counts", "sweep_seeds"}, "eval");
      c.eval.sweep_counts = e.value("sweep_counts", c.eval.sweep_counts);
      c.eval.sweep_seeds = e.value("sweep_seeds", c.eval.sweep_seeds);
    }
    if (j.contains("bench")) {
      const nlohmann::json& b = j.at("bench");
      reject_unknown_keys(b, {"requests", "repetitions", "warmup", "store", "fast_capacity_bytes"}, "bench");
      c.bench.requests = b.value("requests", c.bench.requests);
      c.bench.repetitions = b.value("repetitions", c.bench.repetitions);
      c.bench.warmup = b.value("warmup", c.bench.warmup);
      c.bench.store = b.value("store", c.bench.store);
      c.bench.fast_capacity_bytes = b.value("fast_capacity_bytes", c.bench.fast_capacity_bytes);
      if (c.bench.store != "disk" && c.bench.store != "memory") throw ConfigError("bench.store must be 'disk' or 'memory'");
      if (c.bench.requests < 1 || c.bench.repetitions < 1 || c.bench.warmup < 0) throw ConfigError("bench: bad counts");
    }
    if (c.data.subsets < 2) throw ConfigError("data.subsets must be >= 2");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

namespace {

QuantSpec spec(QuantScheme scheme, int bits, int calib_subset = -1, Index block = 0) {
  QuantSpec s;
  s.scheme = scheme;
  s.bits = bits;
  s.block_size = block;
  s.calib_subset = calib_subset;
  s.calib_samples = s.needs_calibration() ? 64 : 0;
  return s;
}

}  // namespace

RunConfig default_cv_config() {
  RunConfig c;
  c.base_model.arch = "cv_resnet";
  c.base_model.config = {{"channels", 3}, {"size", 16}, {"classes", 10}, {"width", 24}};
  c.base_model.train.epochs = 8;
  c.base_model.train.lr = 3e-3;
  c.base_model.train.null_inputs = 60;
  c.quant = {spec(QuantScheme::rtn_per_tensor, 4), spec(QuantScheme::activation_aware, 8, 0),
             spec(QuantScheme::activation_aware, 8, 1), spec(QuantScheme::activation_aware, 8, 2),
             spec(QuantScheme::blockwise, 4, -1, 8)};
  c.train.epochs = 40;
  c.train.base_lr = 1e-3;
  return c;
}

RunConfig default_nlp_config() {
  RunConfig c;
  c.data.kind = Modality::nlp;
  c.base_model.arch = "lm_transformer";
  c.base_model.config = {{"vocab", 256}, {"width", 32}, {"heads", 4}, {"hidden", 128}, {"layers", 2}, {"context", 32}};
  c.base_model.train.epochs = 6;
  c.base_model.train.lr = 3e-3;
  c.quant = {spec(QuantScheme::rtn_per_tensor, 4), spec(QuantScheme::affine_per_channel, 4),
             spec(QuantScheme::blockwise, 4, -1, 8), spec(QuantScheme::error_feedback, 4),
             spec(QuantScheme::affine_per_channel, 8)};
  c.train = default_train_config(Modality::nlp);
  c.train.epochs = 20;
  c.train.base_lr = 1e-3;
  c.train.warmup_steps = 5;
  return c;
}

}  // namespace moqe
