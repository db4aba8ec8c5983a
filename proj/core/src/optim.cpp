#include "scenforge/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace scenforge::nn {

const char* optim_kind_name(OptimKind kind) {
  return kind == OptimKind::kAdam ? "adam" : "adabelief";
}

OptimKind optim_kind_from(const std::string& name) {
  if (name == "adam") return OptimKind::kAdam;
  if (name == "adabelief") return OptimKind::kAdaBelief;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected adam or adabelief)");
}

Optimizer::Optimizer(OptimKind kind, double lr, double beta1, double beta2, double eps)
    : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("optimizer: betas must lie in (0,1)");
}

void Optimizer::step(const std::vector<Parameter*>& params) {
  if (slots_.size() < params.size()) slots_.resize(params.size());
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    if (!p.trainable) continue;
    Slot& slot = slots_[pi];
    if (!slot.initialized) {
      slot.m = Tensor::zeros(p.value.shape());
      slot.s = Tensor::zeros(p.value.shape());
      slot.initialized = true;
    }
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      double g = p.grad[i];
      double m = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
      slot.m[i] = m;
      double second;
      if (kind_ == OptimKind::kAdam) {
        second = beta2_ * slot.s[i] + (1.0 - beta2_) * g * g;
      } else {
        double diff = g - m;
        second = beta2_ * slot.s[i] + (1.0 - beta2_) * diff * diff;
      }
      slot.s[i] = second;
      double m_hat = m / bc1;
      double s_hat = second / bc2;
      p.value[i] -= lr_ * m_hat / (std::sqrt(s_hat) + eps_);
    }
  }
}

}  // namespace scenforge::nn
