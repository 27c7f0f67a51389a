// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "moqe/tensor.hpp"

namespace moqe {

struct AdamWConfig {
  Real lr = 5e-5;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 0.0;
  // Global gradient norm is clipped to this before the update; <= 0 disables.
  Real max_grad_norm = 1.0;
};

// Adam with decoupled weight decay over a fixed parameter list.
class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, AdamWConfig config);

  // Applies one update from the gradients currently stored in the parameters.
  // Parameters without a gradient are left untouched. Returns the global
  // gradient norm before clipping.
  Real step();
  // As step(), with a scheduled rate in place of the configured one.
  Real step(Real lr);
  void zero_grad();

  long steps() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  void set_lr(Real lr);

 private:
  Real update(Real lr);

  std::vector<Tensor*> params_;
  std::vector<VectorX> m_;
  std::vector<VectorX> v_;
  AdamWConfig config_;
  long step_ = 0;
};

// Global L2 norm over the gradients of `params`.
Real global_grad_norm(const std::vector<Tensor*>& params);
// Scales every gradient so that the global norm is at most max_norm. Returns
// the factor applied (1 when no clipping happened).
Real clip_grad_norm(const std::vector<Tensor*>& params, Real max_norm);

// Linear warmup from 0 to base_lr, then half-cosine decay reaching 0 at
// total_steps.
Real lr_schedule(long step, long total_steps, long warmup_steps, Real base_lr);

}  // namespace moqe
