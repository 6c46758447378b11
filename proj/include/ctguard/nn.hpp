#pragma once

// Minimal layer library with hand-written backward passes. Every layer caches
// what its backward needs from the most recent forward, so forward/backward
// calls on one layer must pair up in LIFO order.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctguard/rng.hpp"
#include "ctguard/tensor.hpp"

namespace ctguard::nn {

template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  Buffer<T> value;
  Buffer<T> grad;
  /// false for running statistics (serialized but never optimized)
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s, bool train = true);
  [[nodiscard]] std::size_t numel() const { return value.size(); }
  void zero_grad();
};

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void collect(ParamList<T>& /*out*/) {}
  virtual void set_training(bool /*training*/) {}
  /// When false, backward still propagates input gradients but leaves
  /// parameter gradients untouched.
  virtual void set_requires_grad(bool r) { requires_grad_ = r; }
  /// Visit this layer and every nested layer (pre-order).
  virtual void visit(const std::function<void(const Layer<T>&)>& f) const { f(*this); }
  [[nodiscard]] virtual std::string kind() const = 0;

 protected:
  bool requires_grad_ = true;
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

/// 2D convolution, square kernel, zero padding. Weights are [out][in*k*k].
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad);

  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect(ParamList<T>& out) override;
  [[nodiscard]] std::string kind() const override { return "conv2d"; }

  [[nodiscard]] int in_channels() const { return in_; }
  [[nodiscard]] int out_channels() const { return out_; }
  [[nodiscard]] int kernel() const { return k_; }
  [[nodiscard]] int stride() const { return stride_; }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  int in_, out_, k_, stride_, pad_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  Tensor<T> input_;
};

/// Per-channel batch normalization with running statistics for inference.
template <typename T>
class BatchNorm2d final : public Layer<T> {
 public:
  BatchNorm2d(const std::string& name, int channels, T momentum = T(0.1), T eps = T(1e-5));

  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect(ParamList<T>& out) override;
  void set_training(bool t) override { training_ = t; }
  [[nodiscard]] std::string kind() const override { return "batchnorm2d"; }

  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }

 private:
  int channels_;
  T momentum_, eps_;
  bool training_ = true;
  Parameter<T> gamma_, beta_, running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
  bool used_batch_stats_ = true;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  [[nodiscard]] std::string kind() const override { return "relu"; }

 private:
  Tensor<T> out_;
};

template <typename T>
class LeakyReLU final : public Layer<T> {
 public:
  explicit LeakyReLU(T slope) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  [[nodiscard]] std::string kind() const override { return "leaky_relu"; }

 private:
  T slope_;
  Tensor<T> in_;
};

template <typename T>
class Tanh final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  [[nodiscard]] std::string kind() const override { return "tanh"; }

 private:
  Tensor<T> out_;
};

/// Nearest-neighbour 2x upsampling.
template <typename T>
class Upsample2x final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  [[nodiscard]] std::string kind() const override { return "upsample2x"; }
};

/// Spatial mean per channel followed by a dense projection to one logit.
/// Output shape is [N,1,1,1].
template <typename T>
class PoolLinearHead final : public Layer<T> {
 public:
  PoolLinearHead(const std::string& name, int channels);
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect(ParamList<T>& out) override;
  [[nodiscard]] std::string kind() const override { return "pool_linear"; }

 private:
  int channels_;
  Parameter<T> weight_, bias_;
  Tensor<T> pooled_;
  int h_ = 0, w_ = 0;
};

template <typename T>
class Sequential final : public Layer<T> {
 public:
  Sequential() = default;
  void add(LayerPtr<T> layer) { layers_.push_back(std::move(layer)); }
  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }

  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect(ParamList<T>& out) override;
  void set_training(bool t) override;
  void set_requires_grad(bool r) override;
  void visit(const std::function<void(const Layer<T>&)>& f) const override;
  [[nodiscard]] std::string kind() const override { return "sequential"; }
  [[nodiscard]] std::size_t size() const { return layers_.size(); }
  Layer<T>& operator[](std::size_t i) { return *layers_[i]; }

 private:
  std::vector<LayerPtr<T>> layers_;
};

/// conv-bn-relu-conv-bn, identity skip added before the final ReLU.
template <typename T>
class ResidualBlock final : public Layer<T> {
 public:
  ResidualBlock(const std::string& name, int channels);
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect(ParamList<T>& out) override;
  void set_training(bool t) override;
  void set_requires_grad(bool r) override;
  void visit(const std::function<void(const Layer<T>&)>& f) const override;
  [[nodiscard]] std::string kind() const override { return "residual_block"; }

 private:
  Conv2d<T> conv1_, conv2_;
  BatchNorm2d<T> bn1_, bn2_;
  ReLU<T> relu1_, relu_out_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for conv and dense weights and
/// biases; gamma = 1, beta = 0 for batch norm; running stats reset.
template <typename T>
void init_default(Layer<T>& root, Rng& rng);

/// Number of layers whose kind() equals `kind`.
template <typename T>
int count_kind(const Layer<T>& root, const std::string& kind);

template <typename T>
ParamList<T> parameters_of(Layer<T>& root) {
  ParamList<T> out;
  root.collect(out);
  return out;
}

/// Adam with bias correction, matching the common deep learning formulation.
template <typename T>
class Adam {
 public:
  Adam(T lr, T beta1, T beta2, T eps = T(1e-8)) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  /// Binds moment buffers to the trainable entries of `params`.
  void attach(const ParamList<T>& params);
  void step();
  void zero_grad();

  [[nodiscard]] std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }
  /// Moment buffers, same order as the trainable parameters.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  [[nodiscard]] const ParamList<T>& params() const { return params_; }

 private:
  T lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  ParamList<T> params_;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace ctguard::nn
