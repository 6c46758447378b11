#pragma once

// Generator G(x, delta) = tanh(trunk(concat(x, noise_net(delta)))) and the
// single-image discriminator D(x) in (0, 1).

#include <cstdint>
#include <string>
#include <vector>

#include "ctguard/archive.hpp"
#include "ctguard/image.hpp"
#include "ctguard/nn.hpp"

namespace ctguard {

struct NoiseNetSpec {
  std::vector<int> layer_channels{1, 16, 32, 32, 16, 1};
  int kernel = 3;
};

struct ResidualBlockSpec {
  int width = 64;
  int kernel = 3;
};

struct GeneratorSpec {
  NoiseNetSpec noise;
  int trunk_width = 64;
  int residual_blocks = 3;
  int kernel = 3;
};

struct DiscriminatorSpec {
  std::vector<int> channels{1, 32, 64, 64, 128, 128, 256, 256, 512};
  double leaky_slope = 0.2;
  int kernel = 3;
  /// Smallest accepted input edge. Four stride-2 stages need 64 for real
  /// use; tiny gradient-check configurations lower it.
  int min_input = 64;

  /// [1, b, 2b, 2b, 4b, 4b, 8b, 8b, 16b]
  static DiscriminatorSpec with_base_width(int base);
};

/// Exact trainable parameter counts (conv weights and biases, batch-norm
/// gamma and beta, discriminator head). Running statistics are not counted.
std::int64_t count_parameters(const NoiseNetSpec& spec);
std::int64_t count_parameters(const ResidualBlockSpec& spec);
std::int64_t count_parameters(const GeneratorSpec& spec);
std::int64_t count_parameters(const DiscriminatorSpec& spec);

template <typename T>
class Generator {
 public:
  explicit Generator(const GeneratorSpec& spec);

  /// x and delta are [N,1,H,W]; the result is the protected batch in [-1,1].
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& delta);
  /// Back-propagates d(loss)/d(x^p); returns d(loss)/dx.
  Tensor<T> backward(const Tensor<T>& grad_out);
  /// Noise branch alone.
  Tensor<T> noise_forward(const Tensor<T>& delta);

  nn::ParamList<T> parameters();
  void set_training(bool t);
  void init(Rng& rng);

  nn::Sequential<T>& noise_net() { return noise_; }
  nn::Sequential<T>& trunk() { return trunk_; }
  [[nodiscard]] const GeneratorSpec& spec() const { return spec_; }
  [[nodiscard]] int noise_conv_layers() const { return nn::count_kind<T>(noise_, "conv2d"); }
  /// Channel count of the trunk's first convolution input.
  [[nodiscard]] int trunk_input_channels() const { return trunk_in_channels_; }
  [[nodiscard]] int trunk_stages() const { return static_cast<int>(stage_count_); }

 private:
  GeneratorSpec spec_;
  nn::Sequential<T> noise_;
  nn::Sequential<T> trunk_;
  int trunk_in_channels_ = 0;
  std::size_t stage_count_ = 0;
  bool shared_delta_ = false;
};

template <typename T>
class Discriminator {
 public:
  explicit Discriminator(const DiscriminatorSpec& spec);

  /// Likelihood of being an unprotected slice, one value per sample.
  std::vector<T> forward(const Tensor<T>& images);
  /// Takes d(loss)/d(likelihood) per sample; returns d(loss)/d(images).
  Tensor<T> backward(const std::vector<T>& grad_likelihood);

  nn::ParamList<T> parameters();
  void set_training(bool t);
  void set_requires_grad(bool r);
  [[nodiscard]] bool requires_grad() const { return requires_grad_; }
  void init(Rng& rng);

  [[nodiscard]] int conv_layers() const { return nn::count_kind<T>(body_, "conv2d"); }
  [[nodiscard]] const DiscriminatorSpec& spec() const { return spec_; }

 private:
  DiscriminatorSpec spec_;
  nn::Sequential<T> body_;
  std::vector<T> last_out_;
  bool requires_grad_ = true;
};

/// Copy parameter values (and running statistics) to / from an archive.
template <typename T>
void store_parameters(const nn::ParamList<T>& params, ArrayArchive& archive);
template <typename T>
void load_parameters(const nn::ParamList<T>& params, const ArrayArchive& archive);

/// Wraps a list of equal-shape images as an [N,1,H,W] tensor.
template <typename T>
Tensor<T> stack_images(const std::vector<const Image*>& images);

}  // namespace ctguard
