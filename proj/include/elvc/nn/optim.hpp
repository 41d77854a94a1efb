#pragma once

#include <string>
#include <vector>

#include "elvc/nn/parameters.hpp"

namespace elvc::nn {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double clip_norm = 1.0;  ///< <= 0 disables global-norm clipping
  int warmup_steps = 0;
};

/// Adam over a store; parameters in any frozen scope never change.
class Adam {
 public:
  Adam(ParameterStore& store, AdamOptions options, std::vector<std::string> frozen_scopes = {});

  /// Applies accumulated gradients and zeroes them. Returns the pre-clip gradient norm.
  double step();
  void set_lr(double lr) { options_.lr = lr; }
  long steps() const { return t_; }

 private:
  struct Slot {
    Parameter* param;
    Matrix m;
    Matrix v;
  };
  ParameterStore& store_;
  AdamOptions options_;
  std::vector<Slot> slots_;
  long t_ = 0;
};

}  // namespace elvc::nn
