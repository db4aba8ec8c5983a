#pragma once

#include <string>
#include <vector>

#include "scenforge/tape.hpp"

namespace scenforge::nn {

enum class OptimKind { kAdam, kAdaBelief };

const char* optim_kind_name(OptimKind kind);
OptimKind optim_kind_from(const std::string& name);

/// Adam / AdaBelief with bias correction. Moments are allocated lazily on the
/// first step and keyed by parameter registration order. The caller zeroes
/// gradients; step() leaves them untouched.
class Optimizer {
 public:
  Optimizer(OptimKind kind, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(const std::vector<Parameter*>& params);

  OptimKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  std::size_t step_count() const { return t_; }
  void set_step_count(std::size_t t) { t_ = t; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }

  /// Per-parameter moment slots, aligned to the param list passed to step().
  struct Slot {
    Tensor m;  // first moment
    Tensor s;  // second moment: v for Adam, belief s for AdaBelief
    bool initialized = false;
  };
  std::vector<Slot>& slots() { return slots_; }

 private:
  OptimKind kind_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace scenforge::nn
