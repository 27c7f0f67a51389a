// SPDX-License-Identifier: Apache-2.0
#include "moqe/quant.hpp"

#include <algorithm>

namespace moqe {

std::string to_string(QuantScheme s) {
  switch (s) {
    case QuantScheme::rtn_per_tensor:
      return "rtn_per_tensor";
    case QuantScheme::affine_per_channel:
      return "affine_per_channel";
    case QuantScheme::blockwise:
      return "blockwise";
    case QuantScheme::activation_aware:
      return "activation_aware";
    case QuantScheme::error_feedback:
      return "error_feedback";
  }
  return "?";
}

QuantScheme parse_scheme(const std::string& s) {
  for (auto v : {QuantScheme::rtn_per_tensor, QuantScheme::affine_per_channel, QuantScheme::blockwise,
                 QuantScheme::activation_aware, QuantScheme::error_feedback})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown quantization scheme '" + s + "'");
}

void QuantSpec::validate() const {
  if (bits != 4 && bits != 8) throw ConfigError("quant spec: bits must be 4 or 8, got " + std::to_string(bits));
  if (scheme == QuantScheme::blockwise && block_size < 2) throw ConfigError("quant spec: blockwise needs block_size >= 2");
  if (needs_calibration() && calib_samples <= 0) throw ConfigError("quant spec: " + to_string(scheme) + " needs calib_samples > 0");
}

std::string QuantSpec::label() const {
  std::string s = to_string(scheme) + "-int" + std::to_string(bits);
  if (scheme == QuantScheme::blockwise) s += "-b" + std::to_string(block_size);
  if (needs_calibration() && calib_subset >= 0) s += "-s" + std::to_string(calib_subset);
  return s;
}

void to_json(nlohmann::json& j, const QuantSpec& s) {
  j = nlohmann::json{{"scheme", to_string(s.scheme)}, {"bits", s.bits}, {"block_size", s.block_size},
                     {"calib_samples", s.calib_samples}, {"calib_subset", s.calib_subset}};
}

void from_json(const nlohmann::json& j, QuantSpec& s) {
  if (!j.is_object()) throw ConfigError("quant spec must be an object");
  for (const auto& [key, _] : j.items())
    if (key != "scheme" && key != "bits" && key != "block_size" && key != "calib_samples" && key != "calib_subset")
      throw ConfigError("quant spec: unknown key '" + key + "'");
  s = QuantSpec{};
  s.scheme = parse_scheme(j.at("scheme").get<std::string>());
  s.bits = j.value("bits", 8);
  s.block_size = j.value("block_size", Index{0});
  s.calib_samples = j.value("calib_samples", Index{0});
  s.calib_subset = j.value("calib_subset", -1);
  s.validate();
}

void QuantizedTensor::validate() const {
  if (static_cast<Index>(codes.size()) != rows * cols) throw DataError("quantized tensor: code count mismatch");
  for (std::int8_t c : codes)
    if (c < code_min(bits) || c > code_max(bits)) throw DataError("quantized tensor: code outside the " + std::to_string(bits) + "-bit range");
  for (Index i = 0; i < scale.size(); ++i)
    if (!(scale[i] > 0.0) || !std::isfinite(scale[i])) throw DataError("quantized tensor: scale must be positive and finite");
  for (Index i = 0; i < column_scale.size(); ++i)
    if (!(column_scale[i] > 0.0) || !std::isfinite(column_scale[i])) throw DataError("quantized tensor: bad column scale");
  if (zero_point.size() != static_cast<std::size_t>(scale.size())) throw DataError("quantized tensor: zero point count mismatch");
  for (std::int8_t z : zero_point)
    if (z < code_min(bits) || z > code_max(bits)) throw DataError("quantized tensor: zero point outside code range");
  if (shape_numel(original_shape) != rows * cols) throw DataError("quantized tensor: original shape mismatch");
}

void ColumnStats::add(const Eigen::Ref<const RowMatrixX>& a) {
  const Index n = a.rows();
  if (n == 0) return;
  if (count == 0) {
    mean_abs = VectorX::Zero(a.cols());
    mean = VectorX::Zero(a.cols());
    mean_sq = VectorX::Zero(a.cols());
  }
  if (mean.size() != a.cols()) throw DimensionError("calibration activations change width");
  const Real w_old = static_cast<Real>(count) / static_cast<Real>(count + n);
  const Real w_new = 1.0 / static_cast<Real>(count + n);
  mean_abs = w_old * mean_abs + w_new * a.cwiseAbs().colwise().sum().transpose();
  mean = w_old * mean + w_new * a.colwise().sum().transpose();
  mean_sq = w_old * mean_sq + w_new * a.cwiseAbs2().colwise().sum().transpose();
  count += n;
}

namespace {

void check_finite(const RowMatrixX& w) {
  if (!w.allFinite()) throw DataError("quantize: weights contain NaN or Inf");
}

void fill_codes(QuantizedTensor& q, const RowMatrixX& w) {
  q.codes.resize(static_cast<std::size_t>(w.size()));
  for (Index r = 0; r < w.rows(); ++r)
    for (Index c = 0; c < w.cols(); ++c) {
      const Index g = q.group(r, c);
      const AffineParams p{q.scale[g], q.zero_point[static_cast<std::size_t>(g)]};
      q.codes[static_cast<std::size_t>(r * w.cols() + c)] = static_cast<std::int8_t>(quantize_value(w(r, c), p, q.bits));
    }
}

void set_params(QuantizedTensor& q, Index g, const AffineParams& p) {
  q.scale[g] = p.scale;
  q.zero_point[static_cast<std::size_t>(g)] = static_cast<std::int8_t>(p.zero_point);
}

std::span<const Real> row_span(const RowMatrixX& w, Index r, Index begin = 0, Index len = -1) {
  if (len < 0) len = w.cols() - begin;
  return {w.data() + r * w.cols() + begin, static_cast<std::size_t>(len)};
}

void per_row_params(QuantizedTensor& q, const RowMatrixX& w, bool symmetric) {
  q.granularity = Granularity::channel;
  q.scale.resize(w.rows());
  q.zero_point.resize(static_cast<std::size_t>(w.rows()));
  for (Index r = 0; r < w.rows(); ++r) set_params(q, r, affine_params(row_span(w, r), q.bits, symmetric));
}

}  // namespace

QuantizedTensor quantize(const Tensor& weights, const QuantSpec& spec, const ColumnStats* calib, Tensor* compensated) {
  spec.validate();
  if (spec.needs_calibration() && (calib == nullptr || calib->count == 0))
    throw ConfigError("quantize: scheme " + to_string(spec.scheme) + " requires calibration activations");
  RowMatrixX w = weights.mat();
  check_finite(w);
  QuantizedTensor q;
  q.bits = spec.bits;
  q.rows = w.rows();
  q.cols = w.cols();
  q.original_shape = weights.shape;
  if (calib != nullptr && spec.needs_calibration() && calib->mean.size() != q.cols)
    throw DimensionError("quantize: calibration width " + std::to_string(calib->mean.size()) + " does not match " +
                         std::to_string(q.cols) + " weight columns");

  switch (spec.scheme) {
    case QuantScheme::rtn_per_tensor: {
      q.granularity = Granularity::tensor;
      q.scale.resize(1);
      q.zero_point.resize(1);
      set_params(q, 0, affine_params(std::span<const Real>(w.data(), static_cast<std::size_t>(w.size())), q.bits, true));
      fill_codes(q, w);
      break;
    }
    case QuantScheme::affine_per_channel:
      per_row_params(q, w, false);
      fill_codes(q, w);
      break;
    case QuantScheme::blockwise: {
      if (spec.block_size > q.cols)
        throw ConfigError("quantize: block_size " + std::to_string(spec.block_size) + " exceeds row length " + std::to_string(q.cols));
      q.granularity = Granularity::block;
      q.block_size = spec.block_size;
      const Index nb = q.blocks_per_row();
      q.scale.resize(q.rows * nb);
      q.zero_point.resize(static_cast<std::size_t>(q.rows * nb));
      for (Index r = 0; r < q.rows; ++r)
        for (Index b = 0; b < nb; ++b) {
          const Index begin = b * q.block_size, len = std::min(q.block_size, q.cols - begin);
          set_params(q, r * nb + b, affine_params(row_span(w, r, begin, len), q.bits, true));
        }
      fill_codes(q, w);
      break;
    }
    case QuantScheme::activation_aware: {
      const VectorX s = calib->mean_abs.cwiseSqrt().cwiseMax(kEqualizeMin).cwiseMin(kEqualizeMax);
      RowMatrixX ws = w.array().rowwise() * s.transpose().array();
      per_row_params(q, ws, false);
      fill_codes(q, ws);
      q.column_scale = s.cwiseInverse();
      break;
    }
    case QuantScheme::error_feedback: {
      per_row_params(q, w, false);
      q.codes.resize(static_cast<std::size_t>(w.size()));
      // Second moments modelled as diag(v) + m m^T (v: damped per-column
      // variance). The residual of column j moves onto columns k > j as
      //   dw_k = r m_j (m_k / v_k) / (1 + sum_{l>j} m_l^2 / v_l),
      // the least-squares optimum under that model.
      const VectorX& m = calib->mean;
      const VectorX& h = calib->mean_sq;
      VectorX v(q.cols);
      for (Index k = 0; k < q.cols; ++k) v[k] = std::max(h[k] - m[k] * m[k], kFeedbackDamp * h[k]) + 1e-12;
      const VectorX u = m.cwiseQuotient(v);
      // tail[j] = sum over k > j of m_k^2 / v_k
      VectorX tail = VectorX::Zero(q.cols);
      for (Index j = q.cols - 2; j >= 0; --j) tail[j] = tail[j + 1] + m[j + 1] * u[j + 1];
      for (Index r = 0; r < q.rows; ++r) {
        const AffineParams p{q.scale[r], q.zero_point[static_cast<std::size_t>(r)]};
        const Real lo = (code_min(q.bits) - p.zero_point) * p.scale;
        const Real hi = (code_max(q.bits) - p.zero_point) * p.scale;
        for (Index j = 0; j < q.cols; ++j) {
          const int code = quantize_value(w(r, j), p, q.bits);
          q.codes[static_cast<std::size_t>(r * q.cols + j)] = static_cast<std::int8_t>(code);
          const Real residual = w(r, j) - (code - p.zero_point) * p.scale;
          if (j + 1 == q.cols) continue;
          const Real gain = residual * m[j] / (1.0 + tail[j]);
          for (Index k = j + 1; k < q.cols; ++k) w(r, k) = std::clamp(w(r, k) + gain * u[k], lo, hi);
        }
      }
      if (compensated != nullptr) *compensated = Tensor(weights.shape, Eigen::Map<const VectorX>(w.data(), w.size()));
      break;
    }
  }
  q.validate();
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  VectorX out(q.rows * q.cols);
  for (Index r = 0; r < q.rows; ++r)
    for (Index c = 0; c < q.cols; ++c) {
      const Index g = q.group(r, c);
      const std::size_t i = static_cast<std::size_t>(r * q.cols + c);
      Real v = (static_cast<Real>(q.codes[i]) - q.zero_point[static_cast<std::size_t>(g)]) * q.scale[g];
      if (q.column_scale.size()) v *= q.column_scale[c];
      out[static_cast<Index>(i)] = v;
    }
  return Tensor(q.original_shape, std::move(out));
}

}  // namespace moqe
