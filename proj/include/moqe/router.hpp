// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/checkpoint.hpp"
#include "moqe/data.hpp"
#include "moqe/models.hpp"
#include "moqe/nn.hpp"

namespace moqe {

// What a router consumes for a batch of samples.
//   cv:  raw images, one CHW row per sample       [batch x C*H*W]
//   nlp: shared token embeddings, rows (sample, position)  [batch*seq x d]
struct RouterInput {
  RowMatrixX values;
  Index batch = 0;
  Index seq = 1;
};

struct RoutingRecord {
  VectorX probs;
  int chosen = 0;
  std::optional<int> oracle;
  Real entropy = 0.0;
};

class Router {
 public:
  virtual ~Router() = default;

  virtual Modality kind() const = 0;
  virtual std::string arch() const = 0;
  virtual nlohmann::json config() const = 0;
  virtual ParamList params() = 0;
  virtual std::unique_ptr<Router> clone() const = 0;
  // Logits [batch x n_experts].
  virtual Var logits(Graph& g, const RouterInput& in) = 0;
  // Multiply-accumulate count for one sample.
  virtual Index forward_macs() const = 0;
  virtual LinearLayer& head() = 0;

  virtual int n_experts() const = 0;
  ParamList params() const { return const_cast<Router*>(this)->params(); }
  Index parameter_count() const { return count_elements(params()); }
  Digest weights_digest() const;

  // Zero head: every input routes uniformly.
  void zero_head();
};

struct CvRouterConfig {
  Index channels = 3;
  Index image_size = 16;
  // Images are average-pooled to pool_size x pool_size before the trunk.
  Index pool_size = 4;
  std::array<Index, 3> mlp{32, 32, 16};
  std::array<Index, 3> se_channels{16, 32, 64};
  std::array<Index, 3> se_strides{1, 2, 2};
  Index se_reduction = 4;
  Index attention_heads = 8;
  int n_experts = 4;

  void validate() const;
};

// Global-feature MLP (per-channel mean and standard deviation) whose output is
// added as a bias field after the stem, three squeeze-excitation residual
// stages, multi-head self-attention over the remaining positions, mean pool,
// linear head.
class CvRouter final : public Router {
 public:
  CvRouter(const CvRouterConfig& cfg, std::uint64_t seed);

  Modality kind() const override { return Modality::cv; }
  std::string arch() const override { return "cv_se_router"; }
  nlohmann::json config() const override;
  ParamList params() override;
  std::unique_ptr<Router> clone() const override { return std::make_unique<CvRouter>(*this); }
  Var logits(Graph& g, const RouterInput& in) override;
  Index forward_macs() const override;
  LinearLayer& head() override { return head_; }
  int n_experts() const override { return cfg_.n_experts; }
  const CvRouterConfig& cfg() const { return cfg_; }

  // Trunk input [B*P*P x C] and global features [B x 2C] of an image batch.
  RowMatrixX pooled(const RouterInput& in) const;
  RowMatrixX global_features(const RouterInput& in) const;

 private:
  struct SeStage {
    ConvLayer conv1, conv2;
    LinearLayer squeeze, excite;
    std::optional<ConvLayer> proj;
  };
  Var stage(Graph& g, SeStage& s, Var x, MapGeometry& map);

  CvRouterConfig cfg_;
  std::array<LinearLayer, 3> mlp_;
  ConvLayer stem_;
  std::array<SeStage, 3> stages_;
  AttentionLayer attn_;
  LinearLayer head_;
};

struct NlpRouterConfig {
  Index d_model = 32;
  Index context = 128;
  // Consecutive positions merged by one learned projection before the
  // encoder; the encoder runs at `width` over context / patch positions.
  Index patch = 4;
  Index width = 16;
  Index heads = 4;
  Index encoder_layers = 1;
  Index encoder_hidden = 64;
  Index mlp_hidden = 32;
  int n_experts = 4;

  void validate() const;
};

// Learned positions added to the shared embeddings, patch merge, non-causal
// encoder blocks, one refinement attention block, mean pool over positions,
// MLP.
// The token table is referenced, never copied or trained.
class NlpRouter final : public Router {
 public:
  NlpRouter(const NlpRouterConfig& cfg, const Tensor& shared_embedding, std::uint64_t seed);

  Modality kind() const override { return Modality::nlp; }
  std::string arch() const override { return "nlp_encoder_router"; }
  nlohmann::json config() const override;
  ParamList params() override;
  std::unique_ptr<Router> clone() const override { return std::make_unique<NlpRouter>(*this); }
  Var logits(Graph& g, const RouterInput& in) override;
  Index forward_macs() const override;
  LinearLayer& head() override { return out_; }
  int n_experts() const override { return cfg_.n_experts; }
  const NlpRouterConfig& cfg() const { return cfg_; }
  const Tensor& shared_embedding() const { return *embedding_; }

  // Convenience path for callers holding raw ids: one gather from the shared
  // table. Pads (< 0) read row 0.
  RouterInput embed(std::span<const int> ids, Index seq) const;

 private:
  NlpRouterConfig cfg_;
  const Tensor* embedding_;
  Tensor position_;
  LinearLayer merge_;
  std::vector<TransformerBlock> encoder_;
  LayerNormLayer refine_ln_;
  AttentionLayer refine_;
  LinearLayer hidden_, out_;
};

// Router input for `rows` of `data`. The nlp path performs one embedding
// gather through `base` (an LmBaseModel).
RouterInput router_input(const Dataset& data, std::span<const Index> rows, const Model& base);

// Softmax probabilities, argmax choice (ties -> lowest index) and entropy per
// sample. Pure function of weights and input.
std::vector<RoutingRecord> route(Router& router, const RouterInput& in);
RoutingRecord make_record(const Eigen::Ref<const VectorX>& logits);
// Lowest index among the maxima.
int argmax_lowest(const Eigen::Ref<const VectorX>& v);

// Digest a router is bound to: the token table for nlp bases, the full weight
// set for cv bases.
Digest base_binding_digest(const Model& base);

std::unique_ptr<Router> make_router(const Model& base, const nlohmann::json& config, int n_experts, std::uint64_t seed);

struct RouterCheckpoint {
  std::unique_ptr<Router> router;
  Digest base{};
  Digest registry{};
};

// Header: arch, config, base binding digest, registry set digest, weights digest.
Container router_to_container(const Router& router, const Digest& base, const Digest& registry);
// Refuses a base whose binding digest differs from the header (IntegrityError).
RouterCheckpoint router_from_container(const Container& c, const Model& base);

}  // namespace moqe
