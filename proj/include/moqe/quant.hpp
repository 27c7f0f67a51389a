// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moqe/tensor.hpp"

namespace moqe {

// Desk-scale stand-ins for the usual PTQ families:
//   rtn_per_tensor      one symmetric scale per matrix
//   affine_per_channel  asymmetric parameters per output row
//   blockwise           symmetric parameters per block of columns (K-quants-like)
//   activation_aware    per-input-column equalization from calibration (SmoothQuant/AWQ-like)
//   error_feedback      left-to-right residual compensation from calibration (GPTQ-like)
enum class QuantScheme { rtn_per_tensor, affine_per_channel, blockwise, activation_aware, error_feedback };

std::string to_string(QuantScheme s);
QuantScheme parse_scheme(const std::string& s);

struct QuantSpec {
  QuantScheme scheme = QuantScheme::rtn_per_tensor;
  int bits = 8;
  Index block_size = 0;      // blockwise only
  Index calib_samples = 0;   // activation_aware / error_feedback only
  int calib_subset = -1;     // subset the calibration samples are drawn from, -1 = any

  bool needs_calibration() const {
    return scheme == QuantScheme::activation_aware || scheme == QuantScheme::error_feedback;
  }
  void validate() const;
  std::string label() const;
};

void to_json(nlohmann::json& j, const QuantSpec& s);
void from_json(const nlohmann::json& j, QuantSpec& s);

struct AffineParams {
  Real scale = 1.0;
  int zero_point = 0;
};

inline int code_min(int bits) { return -(1 << (bits - 1)); }
inline int code_max(int bits) { return (1 << (bits - 1)) - 1; }

// Scale and zero point for one slice. Symmetric: scale = max|v| / qmax and a
// zero point of 0. Asymmetric: the range [min(v, 0), max(v, 0)] spans all
// 2^bits codes and the zero point sends its lower end to the lowest code. A
// slice of zeros gets scale 1, zero point 0.
template <typename Scalar>
AffineParams affine_params(std::span<const Scalar> values, int bits, bool symmetric) {
  if (values.empty()) throw ContractError("affine_params: empty slice");
  if (bits != 4 && bits != 8) throw ConfigError("affine_params: bits must be 4 or 8");
  Scalar lo = 0, hi = 0, amax = 0;
  for (Scalar v : values) {
    if (!std::isfinite(static_cast<double>(v))) throw DataError("affine_params: non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    amax = std::max<Scalar>(amax, std::abs(v));
  }
  if (amax == 0) return {1.0, 0};
  if (symmetric) return {static_cast<Real>(amax) / code_max(bits), 0};
  const Real scale = static_cast<Real>(hi - lo) / static_cast<Real>((1 << bits) - 1);
  const int zp = code_min(bits) - static_cast<int>(std::nearbyint(static_cast<Real>(lo) / scale));
  return {scale, std::clamp(zp, code_min(bits), code_max(bits))};
}

// Round to nearest (ties to even) and clamp to the code range.
inline int quantize_value(Real v, const AffineParams& p, int bits) {
  const Real c = std::nearbyint(v / p.scale) + p.zero_point;
  return static_cast<int>(std::clamp(c, static_cast<Real>(code_min(bits)), static_cast<Real>(code_max(bits))));
}

enum class Granularity { tensor, channel, block };

// Integer codes plus affine parameters for one weight matrix [rows x cols].
// Element (r, c) dequantizes to (code - zero_point[g]) * scale[g] * column_scale[c]
// where g is its parameter group and column_scale is all ones unless the
// matrix was equalized.
struct QuantizedTensor {
  int bits = 8;
  Granularity granularity = Granularity::tensor;
  Index rows = 0;
  Index cols = 0;
  Index block_size = 0;
  Shape original_shape;
  std::vector<std::int8_t> codes;
  VectorX scale;
  std::vector<std::int8_t> zero_point;
  VectorX column_scale;  // empty when unused

  Index blocks_per_row() const { return block_size > 0 ? (cols + block_size - 1) / block_size : 1; }
  Index group(Index r, Index c) const {
    switch (granularity) {
      case Granularity::tensor:
        return 0;
      case Granularity::channel:
        return r;
      case Granularity::block:
        return r * blocks_per_row() + c / block_size;
    }
    return 0;
  }
  // Dequantization step of element (r, c).
  Real step(Index r, Index c) const {
    const Real s = scale[group(r, c)];
    return column_scale.size() ? s * column_scale[c] : s;
  }
  // Throws DataError when a code, scale or zero point is out of contract.
  void validate() const;
};

// Per-column statistics of the activations feeding a weight matrix.
struct ColumnStats {
  VectorX mean_abs;
  VectorX mean;
  VectorX mean_sq;
  Index count = 0;

  void add(const Eigen::Ref<const RowMatrixX>& activations);
};
using CalibrationStats = std::map<std::string, ColumnStats>;

// Range of the activation-aware equalization factors.
inline constexpr Real kEqualizeMin = 1e-3;
inline constexpr Real kEqualizeMax = 1e3;
// Variance floor of error_feedback, relative to the second moment.
inline constexpr Real kFeedbackDamp = 0.01;

// Quantizes a weight matrix (shape [out x ...], flattened to [out x in]).
// `calib` is required exactly for the calibrated schemes. For error_feedback
// the residual-compensated matrix that the codes round is written to
// `compensated` when given.
QuantizedTensor quantize(const Tensor& weights, const QuantSpec& spec, const ColumnStats* calib = nullptr,
                         Tensor* compensated = nullptr);
Tensor dequantize(const QuantizedTensor& q);

}  // namespace moqe
