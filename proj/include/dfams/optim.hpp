#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace dfams {

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::size_t n, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(std::span<double> params, std::span<const double> grad, double lr);
  long steps() const { return t_; }

 private:
  std::vector<double> m_, v_;
  double wd_, b1_, b2_, eps_;
  long t_ = 0;
};

/// Cosine decay from base_lr to zero over total_steps.
double cosine_lr(double base_lr, long step, long total_steps);

}  // namespace dfams
