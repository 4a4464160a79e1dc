#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "ase/nn.hpp"

namespace ase {

/// Linear warmup to `peak`, then cosine annealing to zero at total_steps.
struct Schedule {
  double peak = 1e-3;
  double warmup_ratio = 0.03;
  Index total_steps = 300;

  /// ceil(warmup_ratio * total_steps).
  Index warmup_steps() const {
    return static_cast<Index>(std::ceil(warmup_ratio * static_cast<double>(total_steps) - 1e-12));
  }
};

namespace schedule_detail {
inline double warmup_branch(double step, double warmup, double peak) { return peak * step / warmup; }
inline double cosine_branch(double step, double warmup, double total, double peak) {
  const double progress = (step - warmup) / (total - warmup);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}
}  // namespace schedule_detail

inline double lr_at(Index step, const Schedule& s) {
  if (s.total_steps <= 0) throw ContractError("lr_at: total_steps must be positive");
  if (!(s.peak > 0.0)) throw ContractError("lr_at: learning rate must be positive");
  if (s.warmup_ratio < 0.0 || s.warmup_ratio >= 1.0) throw ContractError("lr_at: warmup_ratio must lie in [0, 1)");
  if (step < 0 || step > s.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  const Index warmup = s.warmup_steps();
  if (step < warmup) return schedule_detail::warmup_branch(double(step), double(warmup), s.peak);
  return schedule_detail::cosine_branch(double(step), double(warmup), double(s.total_steps), s.peak);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <typename S>
class AdamW {
 public:
  AdamW(ParameterList<S> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    for (auto* p : params_) {
      m_.push_back(MatrixX<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(MatrixX<S>::Zero(p->value.rows(), p->value.cols()));
    }
    trainable_.assign(params_.size(), true);
  }

  void set_trainable(std::size_t index, bool on) { trainable_.at(index) = on; }
  bool trainable(std::size_t index) const { return trainable_.at(index); }
  const ParameterList<S>& parameters() const { return params_; }
  Index steps_taken() const { return t_; }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, double(t_));
    const S b1 = S(config_.beta1), b2 = S(config_.beta2);
    const S step_size = S(lr / bc1);
    const S inv_bc2 = S(1.0 / bc2);
    const S eps = S(config_.eps);
    const S decay = S(1.0 - lr * config_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!trainable_[i]) continue;
      Parameter<S>& p = params_[i];
      m_[i] = b1 * m_[i] + (S(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (S(1) - b2) * p.grad.cwiseProduct(p.grad);
      p.value *= decay;
      p.value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
    }
  }

 private:
  ParameterList<S> params_;
  AdamWConfig config_;
  std::vector<MatrixX<S>> m_, v_;
  std::vector<bool> trainable_;
  Index t_ = 0;
};

}  // namespace ase
