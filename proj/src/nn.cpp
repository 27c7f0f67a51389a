// SPDX-License-Identifier: Apache-2.0
#include "moqe/nn.hpp"

#include <cmath>

namespace moqe {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  // FNV-1a over the stream name, mixed with splitmix64.
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  std::uint64_t z = seed ^ h;
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<Tensor*> trainable(const ParamList& params) {
  std::vector<Tensor*> out;
  for (const NamedParam& p : params)
    if (p.role != ParamRole::buffer && p.tensor->requires_grad) out.push_back(p.tensor);
  return out;
}

void set_requires_grad(const ParamList& params, bool on) {
  for (const NamedParam& p : params) {
    p.tensor->requires_grad = on && p.role != ParamRole::buffer;
    if (!p.tensor->requires_grad) p.tensor->grad.reset();
  }
}

Index count_elements(const ParamList& params, bool include_buffers) {
  Index n = 0;
  for (const NamedParam& p : params)
    if (include_buffers || p.role != ParamRole::buffer) n += p.tensor->numel();
  return n;
}

Tensor normal_tensor(Shape shape, Real stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<Real> dist(0.0, stddev);
  for (Index i = 0; i < t.numel(); ++i) t.data[i] = dist(rng);
  return t;
}

LinearLayer::LinearLayer(Index in, Index out, Rng& rng, Real gain)
    : weight(normal_tensor({out, in}, gain / std::sqrt(static_cast<Real>(in)), rng)), bias(Tensor::zeros({1, out})) {}

void LinearLayer::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight, ParamRole::matrix});
  out.push_back({prefix + ".bias", &bias, ParamRole::bias});
}

BatchNormLayer::BatchNormLayer(Index features)
    : gain({1, features}, VectorX::Ones(features)),
      bias(Tensor::zeros({1, features})),
      stats{Tensor::zeros({1, features}), Tensor({1, features}, VectorX::Ones(features))} {}

void BatchNormLayer::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".gain", &gain, ParamRole::norm});
  out.push_back({prefix + ".bias", &bias, ParamRole::norm});
  out.push_back({prefix + ".running_mean", &stats.running_mean, ParamRole::buffer});
  out.push_back({prefix + ".running_var", &stats.running_var, ParamRole::buffer});
}

LayerNormLayer::LayerNormLayer(Index features)
    : gain({1, features}, VectorX::Ones(features)), bias(Tensor::zeros({1, features})) {}

void LayerNormLayer::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".gain", &gain, ParamRole::norm});
  out.push_back({prefix + ".bias", &bias, ParamRole::norm});
}

ConvLayer::ConvLayer(Index in, Index out, Index kernel, Index stride, Rng& rng)
    : weight(normal_tensor({out, kernel * kernel * in}, std::sqrt(2.0 / static_cast<Real>(kernel * kernel * in)), rng)),
      bias(Tensor::zeros({1, out})),
      geom{kernel, stride, kernel / 2} {}

Var ConvLayer::operator()(Graph& g, Var x, MapGeometry& map, ColumnStats* cal) {
  if (map.channels != in_channels())
    throw DimensionError("conv expects " + std::to_string(in_channels()) + " channels, got " + std::to_string(map.channels));
  Var cols = geom.kernel == 1 && geom.stride == 1 ? x : im2col(x, map, geom);
  if (cal != nullptr) cal->add(g.mat(cols));
  Var y = linear(cols, g.param(weight), g.param(bias));
  map = {map.batch, geom.out_height(map), geom.out_width(map), out_channels()};
  return y;
}

Index ConvLayer::macs(const MapGeometry& map) const {
  return geom.out_height(map) * geom.out_width(map) * weight.numel();
}

void ConvLayer::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight, ParamRole::matrix});
  out.push_back({prefix + ".bias", &bias, ParamRole::bias});
}

AttentionLayer::AttentionLayer(Index width, Index heads_, Rng& rng)
    : query(width, width, rng), key(width, width, rng), value(width, width, rng), output(width, width, rng), heads(heads_) {
  if (heads <= 0 || width % heads != 0)
    throw ConfigError("attention width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) + " heads");
}

Var AttentionLayer::operator()(Graph& g, Var x, Index seq, bool causal, CalibrationStats* cal, const std::string& prefix) {
  Var q = query(g, x, calib_slot(cal, prefix + ".query.weight"));
  Var k = key(g, x, calib_slot(cal, prefix + ".key.weight"));
  Var v = value(g, x, calib_slot(cal, prefix + ".value.weight"));
  return output(g, attention(q, k, v, seq, heads, causal), calib_slot(cal, prefix + ".output.weight"));
}

Index AttentionLayer::macs(Index seq) const { return 4 * seq * width() * width() + 2 * seq * seq * width(); }

void AttentionLayer::collect(const std::string& prefix, ParamList& out) {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

TransformerBlock::TransformerBlock(Index width, Index heads, Index hidden, Rng& rng)
    : ln1(width), ln2(width), attn(width, heads, rng), fc1(width, hidden, rng, std::sqrt(2.0)), fc2(hidden, width, rng) {}

Var TransformerBlock::operator()(Graph& g, Var x, Index seq, bool causal, CalibrationStats* cal, const std::string& prefix) {
  Var h = add(x, attn(g, ln1(g, x), seq, causal, cal, prefix + ".attn"));
  Var hidden = relu(fc1(g, ln2(g, h), calib_slot(cal, prefix + ".fc1.weight")));
  return add(h, fc2(g, hidden, calib_slot(cal, prefix + ".fc2.weight")));
}

Index TransformerBlock::macs(Index seq) const { return attn.macs(seq) + seq * (fc1.weight.numel() + fc2.weight.numel()); }

void TransformerBlock::collect(const std::string& prefix, ParamList& out) {
  ln1.collect(prefix + ".ln1", out);
  attn.collect(prefix + ".attn", out);
  ln2.collect(prefix + ".ln2", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

}  // namespace moqe
