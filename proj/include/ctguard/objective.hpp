#pragma once

// Loss terms of the protection game. The discriminator separates original
// slices (real) from protected ones (fake); the generator fools it while
// pushing the manipulator's output away from the protected image.

#include <vector>

#include "ctguard/tensor.hpp"

namespace ctguard {

inline constexpr double kLossEps = 1e-7;

struct LossWeights {
  double alpha = 1.0;
  /// Throws InvariantError unless alpha is finite and non-negative.
  void validate() const;
};

struct LossBreakdown {
  double d_loss = 0.0;
  double g_adv = 0.0;
  double l_m = 0.0;
  double g_total = 0.0;
};

/// -mean[log d_real + log(1 - d_fake)], inputs clamped to [eps, 1 - eps].
double discriminator_loss(const std::vector<double>& d_real, const std::vector<double>& d_fake);
/// -mean log d_fake, clamped.
double generator_adversarial_loss(const std::vector<double>& d_fake);
/// mean((x_hat_p - x_p)^2) over every pixel.
double manipulation_loss(const std::vector<double>& x_p, const std::vector<double>& x_hat_p);
/// g_adv - alpha * l_m
double generator_total_loss(double g_adv, double l_m, const LossWeights& w);

/// Derivatives of the batch-mean losses with respect to each likelihood.
/// Clamped entries get zero gradient.
std::vector<double> discriminator_loss_grad_real(const std::vector<double>& d_real);
std::vector<double> discriminator_loss_grad_fake(const std::vector<double>& d_fake);
std::vector<double> generator_adversarial_loss_grad(const std::vector<double>& d_fake);

template <typename T>
double manipulation_loss(const Tensor<T>& x_p, const Tensor<T>& x_hat_p);

}  // namespace ctguard
