// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/checkpoint.hpp"
#include "moqe/data.hpp"
#include "moqe/nn.hpp"
#include "moqe/quant.hpp"

namespace moqe {

struct ForwardOptions {
  bool training = false;
  // When set, every quantizable weight records the statistics of its input.
  CalibrationStats* capture = nullptr;
};

// Per-sample results of a frozen forward pass.
struct SampleEval {
  VectorX loss;               // cv: cross-entropy; nlp: mean next-token cross-entropy
  VectorX loss_sum;           // summed token loss (equals loss for cv)
  std::vector<Index> tokens;  // scored targets per sample (1 for cv)
  std::vector<int> predictions;  // cv: argmax class, nlp: -1
};

// A base network. Experts are copies whose matrix weights were replaced by
// dequantized values, so every model-level operation applies to both.
class Model {
 public:
  virtual ~Model() = default;

  virtual Modality kind() const = 0;
  virtual std::string arch() const = 0;
  virtual nlohmann::json config() const = 0;
  virtual ParamList params() = 0;
  virtual std::unique_ptr<Model> clone() const = 0;

  // Mean training loss of a batch: cross-entropy over images or over all
  // non-pad next-token targets.
  virtual Var loss(Graph& g, const Dataset& data, std::span<const Index> rows, const ForwardOptions& opt) = 0;
  // Per-sample losses; no gradients are recorded and weights are not touched.
  virtual SampleEval evaluate(const Dataset& data, std::span<const Index> rows) const = 0;
  // Multiply-accumulate count of one sample's forward pass.
  virtual Index forward_macs() const = 0;
  // Throws ContractError when `data` does not match the model's modality or
  // input geometry.
  virtual void check_input(const Dataset& data) const = 0;

  ParamList params() const { return const_cast<Model*>(this)->params(); }
  Index parameter_count() const { return count_elements(params()); }
  // Captures calibration statistics over `rows`, using inference-mode norms.
  CalibrationStats calibrate(const Dataset& data, std::span<const Index> rows, Index batch = 64) const;

  Digest weights_digest() const;
  Container to_container() const;
  // Copies every named tensor from `c`; names and shapes must match.
  void load_weights(const Container& c);

 protected:
  virtual void run_capture(Graph& g, const Dataset& data, std::span<const Index> rows, CalibrationStats& cal) = 0;
};

struct CvModelConfig {
  Index channels = 3;
  Index size = 32;
  Index classes = 10;
  Index width = 24;
};

// Conv stem, two residual blocks (the second halves resolution and doubles
// width through a 1x1 projection), global average pool, linear head.
class CvBaseModel final : public Model {
 public:
  CvBaseModel(const CvModelConfig& cfg, std::uint64_t seed);

  Modality kind() const override { return Modality::cv; }
  std::string arch() const override { return "cv_resnet"; }
  nlohmann::json config() const override;
  ParamList params() override;
  std::unique_ptr<Model> clone() const override { return std::make_unique<CvBaseModel>(*this); }
  Var loss(Graph& g, const Dataset& data, std::span<const Index> rows, const ForwardOptions& opt) override;
  SampleEval evaluate(const Dataset& data, std::span<const Index> rows) const override;
  Index forward_macs() const override;
  void check_input(const Dataset& data) const override;

  // Logits [batch x classes].
  Var logits(Graph& g, const Dataset& data, std::span<const Index> rows, const ForwardOptions& opt);
  const CvModelConfig& cfg() const { return cfg_; }
  LinearLayer& head() { return head_; }

 protected:
  void run_capture(Graph& g, const Dataset& data, std::span<const Index> rows, CalibrationStats& cal) override;

 private:
  CvModelConfig cfg_;
  ConvLayer stem_;
  BatchNormLayer stem_bn_;
  ConvLayer b1_conv1_, b1_conv2_;
  BatchNormLayer b1_bn1_, b1_bn2_;
  ConvLayer b2_conv1_, b2_conv2_, b2_proj_;
  BatchNormLayer b2_bn1_, b2_bn2_;
  LinearLayer head_;
};

// Images of `rows` as a [B*H*W x C] feature map (rows ordered sample, y, x).
RowMatrixX images_to_map(const Dataset& data, std::span<const Index> rows);

struct LmModelConfig {
  Index vocab = 256;
  Index width = 32;
  Index heads = 4;
  Index hidden = 128;
  Index layers = 2;
  Index context = 128;
};

// Causal byte-level language model: token + learned positional embedding,
// pre-norm Transformer blocks, final norm, untied output head.
class LmBaseModel final : public Model {
 public:
  LmBaseModel(const LmModelConfig& cfg, std::uint64_t seed);

  Modality kind() const override { return Modality::nlp; }
  std::string arch() const override { return "lm_transformer"; }
  nlohmann::json config() const override;
  ParamList params() override;
  std::unique_ptr<Model> clone() const override { return std::make_unique<LmBaseModel>(*this); }
  Var loss(Graph& g, const Dataset& data, std::span<const Index> rows, const ForwardOptions& opt) override;
  SampleEval evaluate(const Dataset& data, std::span<const Index> rows) const override;
  Index forward_macs() const override;
  void check_input(const Dataset& data) const override;

  // Row gather from the full-precision token table; counts calls.
  RowMatrixX embed(std::span<const int> ids) const;
  long gather_count() const { return gathers_; }
  void reset_gather_count() { gathers_ = 0; }
  const Tensor& embedding() const { return token_; }

  // Logits [B*seq x vocab] from token embeddings [B*seq x width].
  Var logits_from_embeddings(Graph& g, Var embeddings, Index seq, const ForwardOptions& opt);
  // Per-sample losses when the token embeddings were gathered by the caller
  // (serving path shares one gather between router and expert).
  SampleEval evaluate_embedded(const RowMatrixX& embeddings, std::span<const int> targets, Index seq) const;

  // Input ids (pad mapped to 0) and next-token targets (pad = -1) of rows.
  void batch_tokens(const Dataset& data, std::span<const Index> rows, std::vector<int>& inputs,
                    std::vector<int>& targets) const;
  const LmModelConfig& cfg() const { return cfg_; }

 protected:
  void run_capture(Graph& g, const Dataset& data, std::span<const Index> rows, CalibrationStats& cal) override;

 private:
  SampleEval score(Graph& g, Var logits, std::span<const int> targets, Index batch, Index seq) const;

  LmModelConfig cfg_;
  Tensor token_;     // [vocab x width]
  Tensor position_;  // [context x width]
  std::vector<TransformerBlock> blocks_;
  LayerNormLayer final_ln_;
  LinearLayer head_;
  mutable long gathers_ = 0;
};

std::unique_ptr<Model> make_model(const std::string& arch, const nlohmann::json& config, std::uint64_t seed);
std::unique_ptr<Model> model_from_container(const Container& c);

struct TrainBaseConfig {
  Index epochs = 10;
  Index batch_size = 32;
  Real lr = 3e-3;
  Real weight_decay = 0.0;
  Real warmup_fraction = 0.05;
  Real max_grad_norm = 1.0;
  std::uint64_t seed = 0;
  Real loss_threshold = std::numeric_limits<Real>::infinity();
  // cv only: all-zero images, labels cycling through the classes, appended to
  // the training set so that an input without signal maps to a flat
  // prediction. Not part of the final evaluation.
  Index null_inputs = 0;
};

struct TrainBaseHistory {
  std::vector<Real> epoch_loss;  // mean training-mode batch loss
  Real final_loss = 0.0;         // inference-mode loss over the training set
  Real final_accuracy = 0.0;     // cv: top-1 over the training set
  bool threshold_met = false;    // final_loss < loss_threshold
};

// Deterministic given the seed. NaN or Inf loss aborts with TrainingError
// naming the step.
TrainBaseHistory train_base(Model& model, const Dataset& train, const TrainBaseConfig& cfg);

}  // namespace moqe
