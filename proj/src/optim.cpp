// SPDX-License-Identifier: Apache-2.0
#include "moqe/optim.hpp"

#include <cmath>
#include <numbers>

namespace moqe {

AdamW::AdamW(std::vector<Tensor*> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  if (config_.lr <= 0.0) throw ConfigError("AdamW: learning rate must be positive");
  for (Tensor* p : params_) {
    m_.push_back(VectorX::Zero(p->numel()));
    v_.push_back(VectorX::Zero(p->numel()));
  }
}

void AdamW::set_lr(Real lr) {
  if (lr <= 0.0) throw ConfigError("AdamW: learning rate must be positive");
  config_.lr = lr;
}

Real global_grad_norm(const std::vector<Tensor*>& params) {
  Real sq = 0.0;
  for (const Tensor* p : params)
    if (p->grad) sq += p->grad->squaredNorm();
  return std::sqrt(sq);
}

Real clip_grad_norm(const std::vector<Tensor*>& params, Real max_norm) {
  const Real norm = global_grad_norm(params);
  if (max_norm <= 0.0 || norm <= max_norm) return 1.0;
  const Real factor = max_norm / norm;
  for (Tensor* p : params)
    if (p->grad) *p->grad *= factor;
  return factor;
}

Real AdamW::step() { return update(config_.lr); }

Real AdamW::step(Real lr) {
  // A schedule may reach 0 at its endpoints; only negative rates are invalid.
  if (!(lr >= 0.0)) throw ConfigError("AdamW: scheduled learning rate must be non-negative");
  return update(lr);
}

Real AdamW::update(Real lr) {
  const Real norm = global_grad_norm(params_);
  clip_grad_norm(params_, config_.max_grad_norm);
  ++step_;
  const Real bc1 = 1.0 - std::pow(config_.beta1, static_cast<Real>(step_));
  const Real bc2 = 1.0 - std::pow(config_.beta2, static_cast<Real>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    if (!p.grad) continue;
    const VectorX& grad = *p.grad;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grad;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grad.cwiseAbs2();
    if (config_.weight_decay != 0.0) p.data *= 1.0 - lr * config_.weight_decay;
    p.data.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
  return norm;
}

void AdamW::zero_grad() {
  for (Tensor* p : params_)
    if (p->grad) p->grad->setZero();
}

Real lr_schedule(long step, long total_steps, long warmup_steps, Real base_lr) {
  if (warmup_steps < 0 || warmup_steps > total_steps)
    throw ConfigError("lr_schedule: warmup_steps must lie in [0, total_steps]");
  if (step < 0 || step > total_steps) throw ConfigError("lr_schedule: step outside [0, total_steps]");
  if (step < warmup_steps) return base_lr * static_cast<Real>(step) / static_cast<Real>(warmup_steps);
  const long decay = total_steps - warmup_steps;
  if (decay == 0) return base_lr;
  const Real progress = static_cast<Real>(step - warmup_steps) / static_cast<Real>(decay);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace moqe
