// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "moqe/autodiff.hpp"
#include "moqe/quant.hpp"

namespace moqe {

using Rng = std::mt19937_64;

// Seed of a named random substream ("data", "init", "shuffle", ...).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

// What a parameter is, as far as quantization and checkpointing care.
enum class ParamRole {
  matrix,     // linear / conv weight, quantized in experts
  bias,
  norm,       // normalization gain / bias
  embedding,  // token / positional tables, kept full precision
  buffer,     // running statistics, never trained
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
  ParamRole role;
};
using ParamList = std::vector<NamedParam>;

std::vector<Tensor*> trainable(const ParamList& params);
void set_requires_grad(const ParamList& params, bool on);
Index count_elements(const ParamList& params, bool include_buffers = false);

Tensor normal_tensor(Shape shape, Real stddev, Rng& rng);

struct LinearLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [1 x out]

  LinearLayer() = default;
  LinearLayer(Index in, Index out, Rng& rng, Real gain = 1.0);
  Index in() const { return weight.shape[1]; }
  Index out() const { return weight.shape[0]; }
  // `cal`, when given, accumulates the statistics of the layer input.
  Var operator()(Graph& g, Var x, ColumnStats* cal = nullptr) {
    if (cal != nullptr) cal->add(g.mat(x));
    return linear(x, g.param(weight), g.param(bias));
  }
  void collect(const std::string& prefix, ParamList& out);
};

struct BatchNormLayer {
  Tensor gain;
  Tensor bias;
  NormStats stats;

  BatchNormLayer() = default;
  explicit BatchNormLayer(Index features);
  Var operator()(Graph& g, Var x, bool training) {
    return batch_norm(x, g.param(gain), g.param(bias), stats, training);
  }
  void collect(const std::string& prefix, ParamList& out);
};

struct LayerNormLayer {
  Tensor gain;
  Tensor bias;

  LayerNormLayer() = default;
  explicit LayerNormLayer(Index features);
  Var operator()(Graph& g, Var x) { return layer_norm(x, g.param(gain), g.param(bias)); }
  void collect(const std::string& prefix, ParamList& out);
};

// k x k convolution with zero padding over [B*H*W x C] feature maps.
struct ConvLayer {
  Tensor weight;  // [out x k*k*in], columns ordered (ky, kx, in)
  Tensor bias;    // [1 x out]
  ConvGeometry geom;

  ConvLayer() = default;
  ConvLayer(Index in, Index out, Index kernel, Index stride, Rng& rng);
  Index in_channels() const { return weight.shape[1] / (geom.kernel * geom.kernel); }
  Index out_channels() const { return weight.shape[0]; }
  // Updates `map` to the output geometry.
  Var operator()(Graph& g, Var x, MapGeometry& map, ColumnStats* cal = nullptr);
  // Multiply-accumulate count for one sample at input geometry `map`.
  Index macs(const MapGeometry& map) const;
  void collect(const std::string& prefix, ParamList& out);
};

struct AttentionLayer {
  LinearLayer query, key, value, output;
  Index heads = 1;

  AttentionLayer() = default;
  AttentionLayer(Index width, Index heads, Rng& rng);
  Index width() const { return query.in(); }
  // `cal`, when given, receives the input statistics of every projection
  // under the names collect(prefix) reports.
  Var operator()(Graph& g, Var x, Index seq, bool causal, CalibrationStats* cal = nullptr, const std::string& prefix = {});
  Index macs(Index seq) const;
  void collect(const std::string& prefix, ParamList& out);
};

// Pre-norm Transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
struct TransformerBlock {
  LayerNormLayer ln1, ln2;
  AttentionLayer attn;
  LinearLayer fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(Index width, Index heads, Index hidden, Rng& rng);
  Var operator()(Graph& g, Var x, Index seq, bool causal, CalibrationStats* cal = nullptr, const std::string& prefix = {});
  Index macs(Index seq) const;
  void collect(const std::string& prefix, ParamList& out);
};

// Calibration slot for weight `name`, or nullptr when not capturing.
inline ColumnStats* calib_slot(CalibrationStats* cal, const std::string& name) {
  return cal == nullptr ? nullptr : &(*cal)[name];
}

}  // namespace moqe
