// SPDX-License-Identifier: Apache-2.0
#include "moqe/autodiff.hpp"

#include <cmath>
#include <limits>

namespace moqe {

namespace {

using ConstMap = Eigen::Map<const RowMatrixX>;

Graph& same_graph(Var a, Var b) {
  if (a.graph == nullptr || a.graph != b.graph) throw ContractError("operands belong to different graphs");
  return *a.graph;
}

void require_2d(const Graph& g, Var v, const char* op) {
  if (g.shape(v).size() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(g.shape(v)));
}

VectorX flatten(const RowMatrixX& m) { return Eigen::Map<const VectorX>(m.data(), m.size()); }

// Single logical context; graphs are not shared across threads.
std::size_t g_live_bytes = 0;
std::size_t g_high_water = 0;

}  // namespace

std::size_t activation_high_water() { return g_high_water; }
void reset_activation_high_water() { g_high_water = g_live_bytes; }

Graph::~Graph() { g_live_bytes -= live_bytes_; }

Var Graph::push(Shape shape, VectorX value, std::vector<int> inputs, std::function<void(Graph&, int)> backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  for (int in : n.inputs) n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(in)].requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  const std::size_t bytes = static_cast<std::size_t>(n.value.size()) * sizeof(Real);
  live_bytes_ += bytes;
  peak_bytes_ = std::max(peak_bytes_, live_bytes_);
  g_live_bytes += bytes;
  g_high_water = std::max(g_high_water, g_live_bytes);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::param(Tensor& t) {
  if (auto it = param_ids_.find(&t); it != param_ids_.end()) return {this, it->second};
  Var v = push(t.shape, t.data, {}, nullptr);
  Node& n = nodes_.back();
  n.requires_grad = t.requires_grad;
  n.param = t.requires_grad ? &t : nullptr;
  param_ids_[&t] = v.id;
  return v;
}

Var Graph::constant(const Tensor& t) { return push(t.shape, t.data, {}, nullptr); }
Var Graph::constant(Shape shape, VectorX values) { return push(std::move(shape), std::move(values), {}, nullptr); }
Var Graph::constant(const RowMatrixX& m) { return push({m.rows(), m.cols()}, flatten(m), {}, nullptr); }

Eigen::Map<const RowMatrixX> Graph::mat(Var v) const {
  const Node& n = node(v);
  const Index rows = n.shape.size() == 1 ? 1 : n.shape.front();
  return {n.value.data(), rows, n.value.size() / rows};
}

Real Graph::item(Var v) const {
  if (node(v).value.size() != 1) throw ContractError("item() on a non-scalar " + shape_str(node(v).shape));
  return node(v).value[0];
}

void Graph::accumulate(int id, const Eigen::Ref<const VectorX>& g) {
  Node& n = node(id);
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) n.grad = VectorX::Zero(n.value.size());
  n.grad += g;
}

Eigen::Map<RowMatrixX> Graph::grad_mat(int id) {
  Node& n = node(id);
  if (n.grad.size() == 0) n.grad = VectorX::Zero(n.value.size());
  const Index rows = n.shape.size() == 1 ? 1 : n.shape.front();
  return {n.grad.data(), rows, n.grad.size() / rows};
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw ContractError("loss does not belong to this graph");
  if (node(loss).value.size() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(node(loss).shape));
  for (Node& n : nodes_) n.grad.resize(0);
  if (!node(loss).requires_grad) return;
  node(loss).grad = VectorX::Ones(1);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      if (!n.param->grad || n.param->grad->size() != n.grad.size()) n.param->grad = VectorX::Zero(n.grad.size());
      *n.param->grad += n.grad;
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var elementwise(ElementwiseOp op, Var a, Var b) {
  Graph& g = same_graph(a, b);
  if (g.shape(a) != g.shape(b)) {
    if (g.value(b).size() == 1 && op != ElementwiseOp::relu) {
      // A one-element tensor broadcasts like a scalar.
      const Real s = g.item(b);
      if (op == ElementwiseOp::mul) {
        const int ia = a.id, ib = b.id;
        return g.push(g.shape(a), g.value(a) * s, {ia, ib}, [ia, ib](Graph& gr, int self) {
          const VectorX& up = gr.node(self).grad;
          gr.accumulate(ia, up * gr.node(ib).value[0]);
          gr.accumulate(ib, VectorX::Constant(1, up.dot(gr.node(ia).value)));
        });
      }
      if (op == ElementwiseOp::add || op == ElementwiseOp::sub) {
        const Real sign = op == ElementwiseOp::add ? 1.0 : -1.0;
        const int ia = a.id, ib = b.id;
        return g.push(g.shape(a), (g.value(a).array() + sign * s).matrix(), {ia, ib}, [ia, ib, sign](Graph& gr, int self) {
          const VectorX& up = gr.node(self).grad;
          gr.accumulate(ia, up);
          gr.accumulate(ib, VectorX::Constant(1, sign * up.sum()));
        });
      }
    }
    throw DimensionError("elementwise operands " + shape_str(g.shape(a)) + " and " + shape_str(g.shape(b)) +
                         " are neither equal nor scalar-broadcastable");
  }
  const int ia = a.id, ib = b.id;
  switch (op) {
    case ElementwiseOp::add:
      return g.push(g.shape(a), g.value(a) + g.value(b), {ia, ib}, [ia, ib](Graph& gr, int self) {
        gr.accumulate(ia, gr.node(self).grad);
        gr.accumulate(ib, gr.node(self).grad);
      });
    case ElementwiseOp::sub:
      return g.push(g.shape(a), g.value(a) - g.value(b), {ia, ib}, [ia, ib](Graph& gr, int self) {
        gr.accumulate(ia, gr.node(self).grad);
        gr.accumulate(ib, -gr.node(self).grad);
      });
    case ElementwiseOp::mul:
      return g.push(g.shape(a), g.value(a).cwiseProduct(g.value(b)), {ia, ib}, [ia, ib](Graph& gr, int self) {
        const VectorX& up = gr.node(self).grad;
        gr.accumulate(ia, up.cwiseProduct(gr.node(ib).value));
        gr.accumulate(ib, up.cwiseProduct(gr.node(ia).value));
      });
    case ElementwiseOp::relu:
    case ElementwiseOp::scale:
      break;
  }
  throw ContractError("elementwise op needs a scalar operand");
}

Var elementwise(ElementwiseOp op, Var a, Real b) {
  Graph& g = *a.graph;
  const int ia = a.id;
  switch (op) {
    case ElementwiseOp::add:
      return g.push(g.shape(a), (g.value(a).array() + b).matrix(), {ia},
                    [ia](Graph& gr, int self) { gr.accumulate(ia, gr.node(self).grad); });
    case ElementwiseOp::sub:
      return elementwise(ElementwiseOp::add, a, -b);
    case ElementwiseOp::mul:
    case ElementwiseOp::scale:
      return g.push(g.shape(a), g.value(a) * b, {ia},
                    [ia, b](Graph& gr, int self) { gr.accumulate(ia, gr.node(self).grad * b); });
    case ElementwiseOp::relu:
      return g.push(g.shape(a), g.value(a).cwiseMax(0.0), {ia}, [ia](Graph& gr, int self) {
        const VectorX mask = (gr.node(ia).value.array() > 0.0).cast<Real>();
        gr.accumulate(ia, gr.node(self).grad.cwiseProduct(mask));
      });
  }
  throw ContractError("unknown elementwise op");
}

Var add(Var a, Var b) { return elementwise(ElementwiseOp::add, a, b); }
Var sub(Var a, Var b) { return elementwise(ElementwiseOp::sub, a, b); }
Var mul(Var a, Var b) { return elementwise(ElementwiseOp::mul, a, b); }
Var scale(Var a, Real s) { return elementwise(ElementwiseOp::scale, a, s); }
Var add_scalar(Var a, Real s) { return elementwise(ElementwiseOp::add, a, s); }
Var relu(Var a) { return elementwise(ElementwiseOp::relu, a, 0.0); }

Var sigmoid(Var a) {
  Graph& g = *a.graph;
  const int ia = a.id;
  VectorX y = (1.0 / (1.0 + (-g.value(a).array()).exp())).matrix();
  return g.push(g.shape(a), std::move(y), {ia}, [ia](Graph& gr, int self) {
    const VectorX& s = gr.node(self).value;
    gr.accumulate(ia, gr.node(self).grad.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
  });
}

Var reshape(Var a, Shape shape) {
  Graph& g = *a.graph;
  if (shape_numel(shape) != g.value(a).size())
    throw DimensionError("cannot reshape " + shape_str(g.shape(a)) + " to " + shape_str(shape));
  const int ia = a.id;
  return g.push(std::move(shape), g.value(a), {ia}, [ia](Graph& gr, int self) { gr.accumulate(ia, gr.node(self).grad); });
}

// ---------------------------------------------------------------------------
// Products

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require_2d(g, a, "matmul");
  require_2d(g, b, "matmul");
  if (g.shape(a)[1] != g.shape(b)[0])
    throw DimensionError("matmul inner extents differ: " + shape_str(g.shape(a)) + " x " + shape_str(g.shape(b)));
  RowMatrixX c = g.mat(a) * g.mat(b);
  const int ia = a.id, ib = b.id;
  return g.push({c.rows(), c.cols()}, flatten(c), {ia, ib}, [ia, ib](Graph& gr, int self) {
    auto up = gr.grad_mat(self);
    if (gr.node(ia).requires_grad) gr.grad_mat(ia).noalias() += up * gr.mat({&gr, ib}).transpose();
    if (gr.node(ib).requires_grad) gr.grad_mat(ib).noalias() += gr.mat({&gr, ia}).transpose() * up;
  });
}

Var matmul_nt(Var a, Var b) {
  Graph& g = same_graph(a, b);
  require_2d(g, a, "matmul_nt");
  require_2d(g, b, "matmul_nt");
  if (g.shape(a)[1] != g.shape(b)[1])
    throw DimensionError("matmul_nt inner extents differ: " + shape_str(g.shape(a)) + " x " + shape_str(g.shape(b)) + "^T");
  RowMatrixX c = g.mat(a) * g.mat(b).transpose();
  const int ia = a.id, ib = b.id;
  return g.push({c.rows(), c.cols()}, flatten(c), {ia, ib}, [ia, ib](Graph& gr, int self) {
    auto up = gr.grad_mat(self);
    if (gr.node(ia).requires_grad) gr.grad_mat(ia).noalias() += up * gr.mat({&gr, ib});
    if (gr.node(ib).requires_grad) gr.grad_mat(ib).noalias() += up.transpose() * gr.mat({&gr, ia});
  });
}

Var transpose(Var a) {
  Graph& g = *a.graph;
  require_2d(g, a, "transpose");
  RowMatrixX t = g.mat(a).transpose();
  const int ia = a.id;
  return g.push({t.rows(), t.cols()}, flatten(t), {ia},
                [ia](Graph& gr, int self) { gr.grad_mat(ia) += gr.grad_mat(self).transpose(); });
}

Var add_row(Var x, Var b) {
  Graph& g = same_graph(x, b);
  require_2d(g, x, "add_row");
  if (g.value(b).size() != g.shape(x)[1])
    throw DimensionError("row bias " + shape_str(g.shape(b)) + " does not match " + shape_str(g.shape(x)));
  RowMatrixX y = g.mat(x).rowwise() + g.mat(b).row(0);
  const int ix = x.id, ib = b.id;
  return g.push(g.shape(x), flatten(y), {ix, ib}, [ix, ib](Graph& gr, int self) {
    gr.accumulate(ix, gr.node(self).grad);
    if (gr.node(ib).requires_grad) {
      RowMatrixX colsum = gr.grad_mat(self).colwise().sum();
      gr.accumulate(ib, flatten(colsum));
    }
  });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul_nt(x, weight), bias); }

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  Graph& g = *a.graph;
  const int ia = a.id;
  const Index n = g.value(a).size();
  return g.push({1}, VectorX::Constant(1, g.value(a).sum()), {ia},
                [ia, n](Graph& gr, int self) { gr.accumulate(ia, VectorX::Constant(n, gr.node(self).grad[0])); });
}

Var mean(Var a) {
  const Index n = a.graph->value(a).size();
  return scale(sum(a), 1.0 / static_cast<Real>(n));
}

Var mean_rows(Var a) {
  Graph& g = *a.graph;
  require_2d(g, a, "mean_rows");
  const Index rows = g.shape(a)[0];
  RowMatrixX m = g.mat(a).colwise().mean();
  const int ia = a.id;
  return g.push({1, m.cols()}, flatten(m), {ia}, [ia, rows](Graph& gr, int self) {
    auto up = gr.grad_mat(self);
    gr.grad_mat(ia).rowwise() += up.row(0) / static_cast<Real>(rows);
  });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace {

RowMatrixX row_softmax(const ConstMap& x) {
  RowMatrixX y = x.colwise() - x.rowwise().maxCoeff();
  y = y.array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

RowMatrixX row_log_softmax(const ConstMap& x) {
  RowMatrixX y = x.colwise() - x.rowwise().maxCoeff();
  const VectorX lse = y.array().exp().rowwise().sum().log().matrix();
  y.colwise() -= lse;
  return y;
}

}  // namespace

Var softmax(Var x) {
  Graph& g = *x.graph;
  require_2d(g, x, "softmax");
  RowMatrixX y = row_softmax(g.mat(x));
  const int ix = x.id;
  return g.push(g.shape(x), flatten(y), {ix}, [ix](Graph& gr, int self) {
    auto up = gr.grad_mat(self);
    auto s = gr.mat({&gr, self});
    const VectorX dots = up.cwiseProduct(s).rowwise().sum();
    RowMatrixX dx = s.array() * (up.colwise() - dots).array();
    gr.accumulate(ix, flatten(dx));
  });
}

Var log_softmax(Var x) {
  Graph& g = *x.graph;
  require_2d(g, x, "log_softmax");
  RowMatrixX y = row_log_softmax(g.mat(x));
  const int ix = x.id;
  return g.push(g.shape(x), flatten(y), {ix}, [ix](Graph& gr, int self) {
    auto up = gr.grad_mat(self);
    RowMatrixX p = gr.mat({&gr, self}).array().exp();
    RowMatrixX dx = up - (p.array().colwise() * up.rowwise().sum().array()).matrix();
    gr.accumulate(ix, flatten(dx));
  });
}

Var masked_cross_entropy(Var logits, std::span<const int> labels, int ignore) {
  Graph& g = *logits.graph;
  require_2d(g, logits, "cross_entropy");
  const Index rows = g.shape(logits)[0], n = g.shape(logits)[1];
  if (static_cast<Index>(labels.size()) != rows)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  std::vector<int> lab(labels.begin(), labels.end());
  Index counted = 0;
  for (int l : lab) {
    if (l == ignore) continue;
    if (l < 0 || l >= n) throw IndexError("cross_entropy label " + std::to_string(l) + " outside [0, " + std::to_string(n) + ")");
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy: every row is ignored");
  RowMatrixX logp = row_log_softmax(g.mat(logits));
  Real total = 0.0;
  for (Index r = 0; r < rows; ++r)
    if (lab[r] != ignore) total -= logp(r, lab[r]);
  const Real inv = 1.0 / static_cast<Real>(counted);
  const int il = logits.id;
  return g.push({1}, VectorX::Constant(1, total * inv), {il},
                [il, lab = std::move(lab), logp = std::move(logp), inv, ignore](Graph& gr, int self) {
                  const Real up = gr.node(self).grad[0];
                  RowMatrixX dx = logp.array().exp();
                  for (Index r = 0; r < dx.rows(); ++r) {
                    if (lab[r] == ignore) {
                      dx.row(r).setZero();
                      continue;
                    }
                    dx(r, lab[r]) -= 1.0;
                  }
                  dx *= up * inv;
                  gr.accumulate(il, flatten(dx));
                });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  for (int l : labels)
    if (l < 0) throw IndexError("cross_entropy label " + std::to_string(l) + " is negative");
  return masked_cross_entropy(logits, labels, std::numeric_limits<int>::min());
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

// Shared backward of a normalization whose statistics were taken along one
// axis: given xhat, inv_std and dxhat along that axis, returns dx.
VectorX norm_backward(const Eigen::Ref<const VectorX>& xhat, const Eigen::Ref<const VectorX>& dxhat, Real inv_std) {
  const Real n = static_cast<Real>(xhat.size());
  return inv_std / n * (n * dxhat.array() - dxhat.sum() - xhat.array() * dxhat.dot(xhat)).matrix();
}

}  // namespace

Var layer_norm(Var x, Var gain, Var bias, const NormConfig& cfg) {
  Graph& g = same_graph(x, gain);
  require_2d(g, x, "layer_norm");
  const Index rows = g.shape(x)[0], cols = g.shape(x)[1];
  if (g.value(gain).size() != cols || g.value(bias).size() != cols)
    throw DimensionError("layer_norm parameters do not match " + shape_str(g.shape(x)));
  auto xm = g.mat(x);
  RowMatrixX xhat(rows, cols);
  VectorX inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const Real mu = xm.row(r).mean();
    const Real var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + cfg.eps);
    xhat.row(r) = (xm.row(r).array() - mu) * inv_std[r];
  }
  auto gm = g.mat(gain).row(0);
  auto bm = g.mat(bias).row(0);
  RowMatrixX y = (xhat.array().rowwise() * gm.array()).rowwise() + bm.array();
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return g.push(g.shape(x), flatten(y), {ix, ig, ib},
                [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, int self) {
                  auto up = gr.grad_mat(self);
                  const RowMatrixX gr_gain = gr.mat({&gr, ig});
                  if (gr.node(ig).requires_grad) {
                    RowMatrixX dg = (up.array() * xhat.array()).colwise().sum();
                    gr.accumulate(ig, flatten(dg));
                  }
                  if (gr.node(ib).requires_grad) {
                    RowMatrixX db = up.colwise().sum();
                    gr.accumulate(ib, flatten(db));
                  }
                  if (gr.node(ix).requires_grad) {
                    auto dx = gr.grad_mat(ix);
                    for (Index r = 0; r < xhat.rows(); ++r) {
                      const VectorX dxhat = (up.row(r).array() * gr_gain.row(0).array()).transpose().matrix();
                      dx.row(r) += norm_backward(xhat.row(r).transpose(), dxhat, inv_std[r]).transpose();
                    }
                  }
                });
}

Var batch_norm(Var x, Var gain, Var bias, NormStats& stats, bool training, const NormConfig& cfg) {
  Graph& g = same_graph(x, gain);
  require_2d(g, x, "batch_norm");
  const Index rows = g.shape(x)[0], cols = g.shape(x)[1];
  if (g.value(gain).size() != cols || g.value(bias).size() != cols || stats.running_mean.numel() != cols)
    throw DimensionError("batch_norm parameters do not match " + shape_str(g.shape(x)));
  if (training && rows < 2) throw ContractError("batch_norm in training mode needs a batch extent >= 2");
  auto xm = g.mat(x);
  VectorX mu(cols), inv_std(cols);
  if (training) {
    mu = xm.colwise().mean().transpose();
    const VectorX var = (xm.rowwise() - mu.transpose()).array().square().colwise().mean().transpose();
    inv_std = (var.array() + cfg.eps).rsqrt().matrix();
    const Real unbias = static_cast<Real>(rows) / static_cast<Real>(rows - 1);
    stats.running_mean.data = (1.0 - cfg.momentum) * stats.running_mean.data + cfg.momentum * mu;
    stats.running_var.data = (1.0 - cfg.momentum) * stats.running_var.data + cfg.momentum * unbias * var;
  } else {
    mu = stats.running_mean.data;
    inv_std = (stats.running_var.data.array() + cfg.eps).rsqrt().matrix();
  }
  RowMatrixX xhat = (xm.rowwise() - mu.transpose()).array().rowwise() * inv_std.transpose().array();
  auto gm = g.mat(gain).row(0);
  auto bm = g.mat(bias).row(0);
  RowMatrixX y = (xhat.array().rowwise() * gm.array()).rowwise() + bm.array();
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return g.push(g.shape(x), flatten(y), {ix, ig, ib},
                [ix, ig, ib, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, int self) {
                  auto up = gr.grad_mat(self);
                  const RowMatrixX gr_gain = gr.mat({&gr, ig});
                  if (gr.node(ig).requires_grad) {
                    RowMatrixX dg = (up.array() * xhat.array()).colwise().sum();
                    gr.accumulate(ig, flatten(dg));
                  }
                  if (gr.node(ib).requires_grad) {
                    RowMatrixX db = up.colwise().sum();
                    gr.accumulate(ib, flatten(db));
                  }
                  if (!gr.node(ix).requires_grad) return;
                  auto dx = gr.grad_mat(ix);
                  for (Index c = 0; c < xhat.cols(); ++c) {
                    const VectorX dxhat = up.col(c) * gr_gain(0, c);
                    if (training)
                      dx.col(c) += norm_backward(xhat.col(c), dxhat, inv_std[c]);
                    else
                      dx.col(c) += dxhat * inv_std[c];
                  }
                });
}

// ---------------------------------------------------------------------------
// Convolution support and grouped ops

Var im2col(Var x, const MapGeometry& in, const ConvGeometry& conv) {
  Graph& g = *x.graph;
  if (g.value(x).size() != in.batch * in.height * in.width * in.channels)
    throw DimensionError("im2col geometry does not match " + shape_str(g.shape(x)));
  const Index ho = conv.out_height(in), wo = conv.out_width(in);
  if (ho <= 0 || wo <= 0) throw DimensionError("convolution output would be empty");
  const Index k = conv.kernel, c = in.channels;
  const Index out_rows = in.batch * ho * wo, out_cols = k * k * c;
  // Source row for every (output row, tap), -1 for padding.
  std::vector<Index> src(static_cast<std::size_t>(out_rows * k * k), -1);
  for (Index b = 0; b < in.batch; ++b)
    for (Index oy = 0; oy < ho; ++oy)
      for (Index ox = 0; ox < wo; ++ox) {
        const Index r = (b * ho + oy) * wo + ox;
        for (Index ky = 0; ky < k; ++ky)
          for (Index kx = 0; kx < k; ++kx) {
            const Index iy = oy * conv.stride + ky - conv.pad, ix = ox * conv.stride + kx - conv.pad;
            if (iy < 0 || iy >= in.height || ix < 0 || ix >= in.width) continue;
            src[static_cast<std::size_t>(r * k * k + ky * k + kx)] = (b * in.height + iy) * in.width + ix;
          }
      }
  auto xm = g.mat(x);
  Eigen::Map<const RowMatrixX> xs(xm.data(), in.batch * in.height * in.width, c);
  RowMatrixX cols = RowMatrixX::Zero(out_rows, out_cols);
  for (Index r = 0; r < out_rows; ++r)
    for (Index t = 0; t < k * k; ++t) {
      const Index s = src[static_cast<std::size_t>(r * k * k + t)];
      if (s >= 0) cols.block(r, t * c, 1, c) = xs.row(s);
    }
  const int xid = x.id;
  const Index in_rows = in.batch * in.height * in.width;
  return g.push({out_rows, out_cols}, flatten(cols), {xid},
                [xid, src = std::move(src), k, c, in_rows](Graph& gr, int self) {
                  auto up = gr.grad_mat(self);
                  Graph::Node& n = gr.node(xid);
                  if (n.grad.size() == 0) n.grad = VectorX::Zero(n.value.size());
                  Eigen::Map<RowMatrixX> dx(n.grad.data(), in_rows, c);
                  for (Index r = 0; r < up.rows(); ++r)
                    for (Index t = 0; t < k * k; ++t) {
                      const Index s = src[static_cast<std::size_t>(r * k * k + t)];
                      if (s >= 0) dx.row(s) += up.block(r, t * c, 1, c);
                    }
                });
}

Var segment_mean(Var x, Index group) {
  Graph& g = *x.graph;
  require_2d(g, x, "segment_mean");
  const Index rows = g.shape(x)[0], cols = g.shape(x)[1];
  if (group <= 0 || rows % group != 0)
    throw DimensionError("segment_mean: " + std::to_string(rows) + " rows not divisible by " + std::to_string(group));
  const Index segments = rows / group;
  auto xm = g.mat(x);
  RowMatrixX y(segments, cols);
  for (Index s = 0; s < segments; ++s) y.row(s) = xm.middleRows(s * group, group).colwise().mean();
  const int ix = x.id;
  return g.push({segments, cols}, flatten(y), {ix}, [ix, group](Graph& gr, int self) {
    auto up = gr.grad_mat(self);
    auto dx = gr.grad_mat(ix);
    for (Index s = 0; s < up.rows(); ++s)
      dx.middleRows(s * group, group).rowwise() += up.row(s) / static_cast<Real>(group);
  });
}

Var segment_mul(Var x, Var gate, Index group) {
  Graph& g = same_graph(x, gate);
  const Index rows = g.shape(x)[0], cols = g.shape(x)[1];
  if (group <= 0 || rows % group != 0 || g.shape(gate)[0] != rows / group || g.shape(gate)[1] != cols)
    throw DimensionError("segment_mul: " + shape_str(g.shape(x)) + " vs gate " + shape_str(g.shape(gate)));
  auto xm = g.mat(x);
  auto gm = g.mat(gate);
  RowMatrixX y(rows, cols);
  for (Index s = 0; s < gm.rows(); ++s)
    y.middleRows(s * group, group) = xm.middleRows(s * group, group).array().rowwise() * gm.row(s).array();
  const int ix = x.id, ig = gate.id;
  return g.push(g.shape(x), flatten(y), {ix, ig}, [ix, ig, group](Graph& gr, int self) {
    auto up = gr.grad_mat(self);
    const RowMatrixX xv = gr.mat({&gr, ix});
    const RowMatrixX gv = gr.mat({&gr, ig});
    if (gr.node(ix).requires_grad) {
      auto dx = gr.grad_mat(ix);
      for (Index s = 0; s < gv.rows(); ++s)
        dx.middleRows(s * group, group).array() += up.middleRows(s * group, group).array().rowwise() * gv.row(s).array();
    }
    if (gr.node(ig).requires_grad) {
      auto dg = gr.grad_mat(ig);
      for (Index s = 0; s < gv.rows(); ++s)
        dg.row(s) += (up.middleRows(s * group, group).array() * xv.middleRows(s * group, group).array()).colwise().sum().matrix();
    }
  });
}

Var segment_add(Var x, Var bias, Index group) {
  Graph& g = same_graph(x, bias);
  const Index rows = g.shape(x)[0], cols = g.shape(x)[1];
  if (group <= 0 || rows % group != 0 || g.shape(bias)[0] != rows / group || g.shape(bias)[1] != cols)
    throw DimensionError("segment_add: " + shape_str(g.shape(x)) + " vs " + shape_str(g.shape(bias)));
  RowMatrixX y = g.mat(x);
  auto bm = g.mat(bias);
  for (Index s = 0; s < bm.rows(); ++s) y.middleRows(s * group, group).rowwise() += bm.row(s);
  const int ix = x.id, ib = bias.id;
  return g.push(g.shape(x), flatten(y), {ix, ib}, [ix, ib, group](Graph& gr, int self) {
    gr.accumulate(ix, gr.node(self).grad);
    if (!gr.node(ib).requires_grad) return;
    auto up = gr.grad_mat(self);
    auto db = gr.grad_mat(ib);
    for (Index s = 0; s < db.rows(); ++s) db.row(s) += up.middleRows(s * group, group).colwise().sum();
  });
}

Var tile_add(Var x, Var p) {
  Graph& g = same_graph(x, p);
  const Index rows = g.shape(x)[0], cols = g.shape(x)[1];
  const Index group = g.shape(p)[0];
  if (g.shape(p)[1] != cols || rows % group != 0)
    throw DimensionError("tile_add: " + shape_str(g.shape(x)) + " vs " + shape_str(g.shape(p)));
  RowMatrixX y = g.mat(x);
  auto pm = g.mat(p);
  for (Index s = 0; s < rows / group; ++s) y.middleRows(s * group, group) += pm;
  const int ix = x.id, ip = p.id;
  return g.push(g.shape(x), flatten(y), {ix, ip}, [ix, ip, group](Graph& gr, int self) {
    gr.accumulate(ix, gr.node(self).grad);
    if (!gr.node(ip).requires_grad) return;
    auto up = gr.grad_mat(self);
    auto dp = gr.grad_mat(ip);
    for (Index s = 0; s < up.rows() / group; ++s) dp += up.middleRows(s * group, group);
  });
}

// ---------------------------------------------------------------------------
// Attention

Var attention(Var q, Var k, Var v, Index seq, Index heads, bool causal) {
  Graph& g = same_graph(q, k);
  same_graph(q, v);
  const Index rows = g.shape(q)[0], d = g.shape(q)[1];
  if (g.shape(k) != g.shape(q) || g.shape(v) != g.shape(q))
    throw DimensionError("attention: q, k, v shapes differ");
  if (heads <= 0 || d % heads != 0)
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  if (seq <= 0 || rows % seq != 0) throw DimensionError("attention: rows not divisible by sequence length");
  const Index batch = rows / seq, dh = d / heads;
  const Real scl = 1.0 / std::sqrt(static_cast<Real>(dh));
  auto qm = g.mat(q);
  auto km = g.mat(k);
  auto vm = g.mat(v);
  RowMatrixX out(rows, d);
  std::vector<RowMatrixX> probs(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h) {
      RowMatrixX s = qm.block(b * seq, h * dh, seq, dh) * km.block(b * seq, h * dh, seq, dh).transpose() * scl;
      if (causal)
        for (Index i = 0; i < seq; ++i)
          for (Index j = i + 1; j < seq; ++j) s(i, j) = -std::numeric_limits<Real>::infinity();
      RowMatrixX a = s.colwise() - s.rowwise().maxCoeff();
      a = a.array().exp();
      a.array().colwise() /= a.rowwise().sum().array();
      out.block(b * seq, h * dh, seq, dh) = a * vm.block(b * seq, h * dh, seq, dh);
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(a);
    }
  const int iq = q.id, ik = k.id, iv = v.id;
  return g.push(g.shape(q), flatten(out), {iq, ik, iv},
                [iq, ik, iv, seq, heads, dh, scl, batch, probs = std::move(probs)](Graph& gr, int self) {
                  auto up = gr.grad_mat(self);
                  const RowMatrixX qv = gr.mat({&gr, iq}), kv = gr.mat({&gr, ik}), vv = gr.mat({&gr, iv});
                  RowMatrixX dq = RowMatrixX::Zero(qv.rows(), qv.cols());
                  RowMatrixX dk = dq, dv = dq;
                  for (Index b = 0; b < batch; ++b)
                    for (Index h = 0; h < heads; ++h) {
                      const RowMatrixX& a = probs[static_cast<std::size_t>(b * heads + h)];
                      const RowMatrixX dout = up.block(b * seq, h * dh, seq, dh);
                      dv.block(b * seq, h * dh, seq, dh) = a.transpose() * dout;
                      const RowMatrixX da = dout * vv.block(b * seq, h * dh, seq, dh).transpose();
                      const VectorX dots = da.cwiseProduct(a).rowwise().sum();
                      const RowMatrixX ds = a.array() * (da.colwise() - dots).array();
                      dq.block(b * seq, h * dh, seq, dh) = ds * kv.block(b * seq, h * dh, seq, dh) * scl;
                      dk.block(b * seq, h * dh, seq, dh) = ds.transpose() * qv.block(b * seq, h * dh, seq, dh) * scl;
                    }
                  gr.accumulate(iq, flatten(dq));
                  gr.accumulate(ik, flatten(dk));
                  gr.accumulate(iv, flatten(dv));
                });
}

Var gather_rows(Var table, std::span<const int> ids) {
  Graph& g = *table.graph;
  require_2d(g, table, "gather_rows");
  const Index vocab = g.shape(table)[0], d = g.shape(table)[1];
  std::vector<int> idx(ids.begin(), ids.end());
  auto tm = g.mat(table);
  RowMatrixX y(static_cast<Index>(idx.size()), d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= vocab)
      throw IndexError("token id " + std::to_string(idx[r]) + " outside vocabulary of " + std::to_string(vocab));
    y.row(static_cast<Index>(r)) = tm.row(idx[r]);
  }
  const int it = table.id;
  return g.push({y.rows(), d}, flatten(y), {it}, [it, idx = std::move(idx)](Graph& gr, int self) {
    auto up = gr.grad_mat(self);
    auto dt = gr.grad_mat(it);
    for (std::size_t r = 0; r < idx.size(); ++r) dt.row(idx[r]) += up.row(static_cast<Index>(r));
  });
}

}  // namespace moqe
