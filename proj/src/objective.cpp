#include "ctguard/objective.hpp"

#include <algorithm>
#include <cmath>

#include "ctguard/error.hpp"

namespace ctguard {

namespace {

double clamp_prob(double p) { return std::clamp(p, kLossEps, 1.0 - kLossEps); }
bool inside(double p) { return p > kLossEps && p < 1.0 - kLossEps; }

void require_nonempty(const std::vector<double>& v, const char* what) {
  if (v.empty()) throw InvariantError(std::string(what) + ": empty batch");
}

}  // namespace

void LossWeights::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) throw ConfigError("alpha must be finite and non-negative");
}

double discriminator_loss(const std::vector<double>& d_real, const std::vector<double>& d_fake) {
  require_nonempty(d_real, "discriminator_loss");
  if (d_real.size() != d_fake.size()) throw InvariantError("discriminator_loss: real and fake batch sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < d_real.size(); ++i) {
    s += std::log(clamp_prob(d_real[i])) + std::log(1.0 - clamp_prob(d_fake[i]));
  }
  return -s / static_cast<double>(d_real.size());
}

double generator_adversarial_loss(const std::vector<double>& d_fake) {
  require_nonempty(d_fake, "generator_adversarial_loss");
  double s = 0.0;
  for (double d : d_fake) s += std::log(clamp_prob(d));
  return -s / static_cast<double>(d_fake.size());
}

double manipulation_loss(const std::vector<double>& x_p, const std::vector<double>& x_hat_p) {
  if (x_p.size() != x_hat_p.size()) {
    throw InvariantError("manipulation_loss: " + std::to_string(x_p.size()) + " vs " +
                         std::to_string(x_hat_p.size()) + " pixels");
  }
  if (x_p.empty()) throw InvariantError("manipulation_loss: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < x_p.size(); ++i) {
    const double d = x_hat_p[i] - x_p[i];
    s += d * d;
  }
  return s / static_cast<double>(x_p.size());
}

template <typename T>
double manipulation_loss(const Tensor<T>& x_p, const Tensor<T>& x_hat_p) {
  if (!x_p.same_shape(x_hat_p)) {
    throw InvariantError("manipulation_loss: shape " + x_p.shape_str() + " vs " + x_hat_p.shape_str());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x_p.size(); ++i) {
    const double d = static_cast<double>(x_hat_p.data[i]) - static_cast<double>(x_p.data[i]);
    s += d * d;
  }
  return s / static_cast<double>(x_p.size());
}

double generator_total_loss(double g_adv, double l_m, const LossWeights& w) { return g_adv - w.alpha * l_m; }

std::vector<double> discriminator_loss_grad_real(const std::vector<double>& d_real) {
  const double n = static_cast<double>(d_real.size());
  std::vector<double> g(d_real.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (inside(d_real[i])) g[i] = -1.0 / (n * d_real[i]);
  return g;
}

std::vector<double> discriminator_loss_grad_fake(const std::vector<double>& d_fake) {
  const double n = static_cast<double>(d_fake.size());
  std::vector<double> g(d_fake.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (inside(d_fake[i])) g[i] = 1.0 / (n * (1.0 - d_fake[i]));
  return g;
}

std::vector<double> generator_adversarial_loss_grad(const std::vector<double>& d_fake) {
  const double n = static_cast<double>(d_fake.size());
  std::vector<double> g(d_fake.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (inside(d_fake[i])) g[i] = -1.0 / (n * d_fake[i]);
  return g;
}

template double manipulation_loss<float>(const Tensor<float>&, const Tensor<float>&);
template double manipulation_loss<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace ctguard
