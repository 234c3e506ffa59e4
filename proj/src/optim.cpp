#include "dfams/optim.hpp"

#include <cmath>

namespace dfams {

AdamW::AdamW(std::size_t n, double weight_decay, double beta1, double beta2, double eps)
    : m_(n, 0.0), v_(n, 0.0), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(std::span<double> params, std::span<const double> grad, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * params[i]);
  }
}

double cosine_lr(double base_lr, long step, long total_steps) {
  if (total_steps <= 1) return base_lr;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * base_lr * (1.0 + std::cos(M_PI * progress));
}

}  // namespace dfams
