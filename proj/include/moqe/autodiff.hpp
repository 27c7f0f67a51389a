// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "moqe/tensor.hpp"

namespace moqe {

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;
};

// Running statistics of a batch normalization layer. Not trainable; persisted
// alongside the gain and bias.
struct NormStats {
  Tensor running_mean;
  Tensor running_var;
};

struct NormConfig {
  Real eps = 1e-5;
  Real momentum = 0.1;
};

// Define-by-run tape. Nodes are appended in evaluation order, so every input of
// node k has an id below k and reverse iteration over ids is a valid
// topological order for the backward sweep.
class Graph {
 public:
  struct Node {
    Shape shape;
    VectorX value;
    VectorX grad;  // empty until something flows into it
    std::vector<int> inputs;
    std::function<void(Graph&, int)> backward;
    Tensor* param = nullptr;
    bool requires_grad = false;
  };

  Graph() = default;
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaf holding a copy of `t`. Gradients are accumulated into t.grad when
  // t.requires_grad is set; otherwise the leaf is a constant.
  Var param(Tensor& t);
  Var constant(const Tensor& t);
  Var constant(Shape shape, VectorX values);
  Var constant(const RowMatrixX& m);

  // Populates the grad field of every parameter reachable from `loss`.
  // Parameter gradients accumulate across calls until zeroed by the caller.
  void backward(Var loss);

  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  const Shape& shape(Var v) const { return node(v).shape; }
  const VectorX& value(Var v) const { return node(v).value; }
  Eigen::Map<const RowMatrixX> mat(Var v) const;
  Real item(Var v) const;
  Tensor to_tensor(Var v) const { return Tensor(node(v).shape, node(v).value); }

  // Accumulates `g` into the gradient buffer of node `id`.
  void accumulate(int id, const Eigen::Ref<const VectorX>& g);
  Eigen::Map<RowMatrixX> grad_mat(int id);

  // Bytes held by node values, and the high-water mark since construction.
  std::size_t live_bytes() const { return live_bytes_; }
  std::size_t peak_bytes() const { return peak_bytes_; }

  Var push(Shape shape, VectorX value, std::vector<int> inputs, std::function<void(Graph&, int)> backward);

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, int> param_ids_;
  std::size_t live_bytes_ = 0;
  std::size_t peak_bytes_ = 0;
};

// Process-wide high-water mark of node-value bytes held by all live graphs.
std::size_t activation_high_water();
void reset_activation_high_water();

enum class ElementwiseOp { add, sub, mul, relu, scale };

Var elementwise(ElementwiseOp op, Var a, Var b);
Var elementwise(ElementwiseOp op, Var a, Real b);

Var matmul(Var a, Var b);
// a * b^T, the layout used by weight matrices stored [out x in].
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real s);
Var add_scalar(Var a, Real s);
Var relu(Var a);
Var sigmoid(Var a);
Var reshape(Var a, Shape shape);

// x[R x C] + b[1 x C], broadcast over rows.
Var add_row(Var x, Var b);
// Affine layer: x * W^T + b with W stored [out x in].
Var linear(Var x, Var weight, Var bias);

Var sum(Var a);
Var mean(Var a);
// Column means of a matrix: [R x C] -> [1 x C].
Var mean_rows(Var a);

Var softmax(Var x);
Var log_softmax(Var x);
// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels);
// As cross_entropy, but rows labelled `ignore` contribute nothing and the mean
// runs over the remaining rows.
Var masked_cross_entropy(Var logits, std::span<const int> labels, int ignore = -1);

Var layer_norm(Var x, Var gain, Var bias, const NormConfig& cfg = {});
// Normalizes each column over the rows of x. In training mode the batch
// statistics are used and `stats` is updated; otherwise `stats` is used.
Var batch_norm(Var x, Var gain, Var bias, NormStats& stats, bool training, const NormConfig& cfg = {});

// Feature maps are stored as [batch*h*w x channels] matrices, rows ordered by
// (sample, y, x).
struct MapGeometry {
  Index batch = 1;
  Index height = 1;
  Index width = 1;
  Index channels = 1;
};

struct ConvGeometry {
  Index kernel = 3;
  Index stride = 1;
  Index pad = 1;
  Index out_height(const MapGeometry& in) const { return (in.height + 2 * pad - kernel) / stride + 1; }
  Index out_width(const MapGeometry& in) const { return (in.width + 2 * pad - kernel) / stride + 1; }
};

// Patch extraction: [B*H*W x C] -> [B*Ho*Wo x k*k*C], columns ordered (ky, kx, c).
Var im2col(Var x, const MapGeometry& in, const ConvGeometry& conv);

// Mean over consecutive groups of `group` rows: [B*S x C] -> [B x C].
Var segment_mean(Var x, Index group);
// x[B*S x C] scaled row-wise by g[B x C] of its group.
Var segment_mul(Var x, Var g, Index group);
// x[B*S x C] + g[B x C] of its group.
Var segment_add(Var x, Var g, Index group);
// x[B*S x C] + p[S x C] repeated for every group.
Var tile_add(Var x, Var p);

// Scaled dot-product attention over `heads` column groups of q, k, v, each
// [B*S x d]. Scale is 1/sqrt(d/heads).
Var attention(Var q, Var k, Var v, Index seq, Index heads, bool causal);

// Row gather from an embedding table [V x d].
Var gather_rows(Var table, std::span<const int> ids);

}  // namespace moqe
