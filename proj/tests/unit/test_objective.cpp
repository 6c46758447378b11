#include <cmath>

#include "doctest.h"
#include "ctguard/error.hpp"
#include "ctguard/objective.hpp"

using namespace ctguard;

TEST_CASE("discriminator loss examples") {
  CHECK(discriminator_loss({0.5}, {0.5}) == doctest::Approx(2.0 * std::log(2.0)));
  CHECK(discriminator_loss({0.5}, {0.5}) == doctest::Approx(1.3863).epsilon(1e-4));
  CHECK(discriminator_loss({1.0 - 1e-12}, {1e-12}) < 1e-6);
  CHECK(std::isfinite(discriminator_loss({0.0}, {1.0})));
}

TEST_CASE("generator adversarial loss examples") {
  CHECK(generator_adversarial_loss({0.5}) == doctest::Approx(0.6931).epsilon(1e-4));
  CHECK(generator_adversarial_loss({1.0 - 1e-7}) < 1e-6);
  CHECK(std::isfinite(generator_adversarial_loss({0.0})));
}

TEST_CASE("manipulation loss examples") {
  std::vector<double> a(512 * 512, 0.1), b = a;
  CHECK(manipulation_loss(a, b) == 0.0);
  for (double& v : b) v += 0.25;
  CHECK(manipulation_loss(a, b) == doctest::Approx(0.0625));
  b = a;
  for (int y = 100; y < 132; ++y)
    for (int x = 200; x < 232; ++x) b[y * 512 + x] += 0.25;
  CHECK(manipulation_loss(a, b) == doctest::Approx(0.0625 * 1024.0 / 262144.0));
  CHECK_THROWS_AS(manipulation_loss(a, std::vector<double>(3)), InvariantError);
}

TEST_CASE("total loss and weights") {
  CHECK(generator_total_loss(0.7, 0.2, {1.0}) == doctest::Approx(0.5));
  CHECK(generator_total_loss(0.7, 0.2, {0.0}) == 0.7);
  CHECK_THROWS_AS(LossWeights{-1.0}.validate(), ConfigError);
  CHECK_THROWS_AS(LossWeights{std::nan("")}.validate(), ConfigError);
}

TEST_CASE("loss gradients match central differences") {
  const std::vector<double> real = {0.3, 0.8, 0.55}, fake = {0.1, 0.6, 0.45};
  const double h = 1e-6;
  const auto gr = discriminator_loss_grad_real(real);
  const auto gf = discriminator_loss_grad_fake(fake);
  const auto ga = generator_adversarial_loss_grad(fake);
  for (std::size_t i = 0; i < 3; ++i) {
    auto up = real, down = real;
    up[i] += h;
    down[i] -= h;
    CHECK(gr[i] == doctest::Approx((discriminator_loss(up, fake) - discriminator_loss(down, fake)) / (2 * h)));
    auto fu = fake, fd = fake;
    fu[i] += h;
    fd[i] -= h;
    CHECK(gf[i] == doctest::Approx((discriminator_loss(real, fu) - discriminator_loss(real, fd)) / (2 * h)));
    CHECK(ga[i] == doctest::Approx((generator_adversarial_loss(fu) - generator_adversarial_loss(fd)) / (2 * h)));
  }
}
