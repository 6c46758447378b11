#include "ctguard/nn.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>

namespace ctguard::nn {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void im2col(const T* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            Mat<T>& col) {
  col.resize(static_cast<Eigen::Index>(c) * k * k, static_cast<Eigen::Index>(ho) * wo);
  for (int ic = 0; ic < c; ++ic) {
    const T* plane = x + static_cast<std::size_t>(ic) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col.data() + ((static_cast<std::size_t>(ic) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const Mat<T>& col, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            T* x) {
  std::fill(x, x + static_cast<std::size_t>(c) * h * w, T(0));
  for (int ic = 0; ic < c; ++ic) {
    T* plane = x + static_cast<std::size_t>(ic) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col.data() + ((static_cast<std::size_t>(ic) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * wo;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

std::size_t product(const std::vector<int>& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return s.empty() ? 0 : n;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename T>
Parameter<T>::Parameter(std::string n, std::vector<int> s, bool train)
    : name(std::move(n)), shape(std::move(s)), value(product(shape), T(0)),
      grad(train ? product(shape) : 0, T(0)), trainable(train) {}

template <typename T>
void Parameter<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad)
    : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad),
      weight_(name + ".weight", {out_ch, in_ch, kernel, kernel}),
      bias_(name + ".bias", {out_ch}) {}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) {
  if (x.c != in_) {
    throw std::invalid_argument(weight_.name + ": expected " + std::to_string(in_) +
                                " input channels, got " + x.shape_str());
  }
  const int ho = (x.h + 2 * pad_ - k_) / stride_ + 1;
  const int wo = (x.w + 2 * pad_ - k_) / stride_ + 1;
  if (ho <= 0 || wo <= 0) {
    throw std::invalid_argument(weight_.name + ": input " + x.shape_str() + " too small");
  }
  input_ = x;
  Tensor<T> y(x.n, out_, ho, wo);
  const Eigen::Map<const Mat<T>> wm(weight_.value.data(), out_, static_cast<Eigen::Index>(in_) * k_ * k_);
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_.value.data(), out_);
  Mat<T> col;
  for (int i = 0; i < x.n; ++i) {
    im2col(x.sample(i).data(), in_, x.h, x.w, k_, stride_, pad_, ho, wo, col);
    Eigen::Map<Mat<T>> ym(y.sample(i).data(), out_, static_cast<Eigen::Index>(ho) * wo);
    ym.noalias() = wm * col;
    ym.colwise() += b;
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& gy) {
  const Tensor<T>& x = input_;
  const int ho = gy.h, wo = gy.w;
  const Eigen::Index kk = static_cast<Eigen::Index>(in_) * k_ * k_;
  const Eigen::Map<const Mat<T>> wm(weight_.value.data(), out_, kk);
  Eigen::Map<Mat<T>> gw(weight_.grad.data(), out_, kk);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(bias_.grad.data(), out_);
  Tensor<T> gx(x.n, x.c, x.h, x.w);
  Mat<T> col, gcol;
  for (int i = 0; i < x.n; ++i) {
    const Eigen::Map<const Mat<T>> gym(gy.sample(i).data(), out_, static_cast<Eigen::Index>(ho) * wo);
    if (this->requires_grad_) {
      im2col(x.sample(i).data(), in_, x.h, x.w, k_, stride_, pad_, ho, wo, col);
      gw.noalias() += gym * col.transpose();
      // Fixed summation order; Eigen's vectorized reduction depends on the
      // buffer's alignment and would make training address-dependent.
      for (Eigen::Index c = 0; c < gym.cols(); ++c)
        for (Eigen::Index r = 0; r < gym.rows(); ++r) gb[r] += gym(r, c);
    }
    gcol.noalias() = wm.transpose() * gym;
    col2im(gcol, in_, x.h, x.w, k_, stride_, pad_, ho, wo, gx.sample(i).data());
  }
  return gx;
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ----------------------------------------------------------- BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(const std::string& name, int channels, T momentum, T eps)
    : channels_(channels), momentum_(momentum), eps_(eps),
      gamma_(name + ".gamma", {channels}), beta_(name + ".beta", {channels}),
      running_mean_(name + ".running_mean", {channels}, false),
      running_var_(name + ".running_var", {channels}, false) {
  std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
  std::fill(running_var_.value.begin(), running_var_.value.end(), T(1));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) {
  if (x.c != channels_) {
    throw std::invalid_argument(gamma_.name + ": channel mismatch " + x.shape_str());
  }
  const std::size_t p = x.plane_size();
  const std::size_t count = static_cast<std::size_t>(x.n) * p;
  xhat_ = Tensor<T>(x.n, x.c, x.h, x.w);
  inv_std_.assign(channels_, T(0));
  used_batch_stats_ = training_;
  Tensor<T> y(x.n, x.c, x.h, x.w);
  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (training_) {
      double s = 0.0;
      for (int i = 0; i < x.n; ++i)
        for (T v : x.plane(i, c)) s += static_cast<double>(v);
      mean = s / static_cast<double>(count);
      double ss = 0.0;
      for (int i = 0; i < x.n; ++i)
        for (T v : x.plane(i, c)) {
          const double d = static_cast<double>(v) - mean;
          ss += d * d;
        }
      var = ss / static_cast<double>(count);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      running_mean_.value[c] = static_cast<T>((1.0 - momentum_) * running_mean_.value[c] + momentum_ * mean);
      running_var_.value[c] = static_cast<T>((1.0 - momentum_) * running_var_.value[c] + momentum_ * unbiased);
    } else {
      mean = running_mean_.value[c];
      var = running_var_.value[c];
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps_)));
    inv_std_[c] = inv;
    const T m = static_cast<T>(mean);
    const T g = gamma_.value[c], b = beta_.value[c];
    for (int i = 0; i < x.n; ++i) {
      auto src = x.plane(i, c);
      auto xh = xhat_.plane(i, c);
      auto dst = y.plane(i, c);
      for (std::size_t j = 0; j < p; ++j) {
        xh[j] = (src[j] - m) * inv;
        dst[j] = g * xh[j] + b;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& gy) {
  const std::size_t p = gy.plane_size();
  const double count = static_cast<double>(gy.n) * static_cast<double>(p);
  Tensor<T> gx(gy.n, gy.c, gy.h, gy.w);
  for (int c = 0; c < channels_; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int i = 0; i < gy.n; ++i) {
      auto g = gy.plane(i, c);
      auto xh = xhat_.plane(i, c);
      for (std::size_t j = 0; j < p; ++j) {
        sum_g += static_cast<double>(g[j]);
        sum_gx += static_cast<double>(g[j]) * static_cast<double>(xh[j]);
      }
    }
    if (this->requires_grad_) {
      gamma_.grad[c] += static_cast<T>(sum_gx);
      beta_.grad[c] += static_cast<T>(sum_g);
    }
    const T gamma = gamma_.value[c];
    const T inv = inv_std_[c];
    for (int i = 0; i < gy.n; ++i) {
      auto g = gy.plane(i, c);
      auto xh = xhat_.plane(i, c);
      auto dst = gx.plane(i, c);
      if (used_batch_stats_) {
        const T mg = static_cast<T>(sum_g / count);
        const T mgx = static_cast<T>(sum_gx / count);
        for (std::size_t j = 0; j < p; ++j) dst[j] = gamma * inv * (g[j] - mg - xh[j] * mgx);
      } else {
        for (std::size_t j = 0; j < p; ++j) dst[j] = gamma * inv * g[j];
      }
    }
  }
  return gx;
}

template <typename T>
void BatchNorm2d<T>::collect(ParamList<T>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

// ----------------------------------------------------------- activations

template <typename T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x) {
  out_ = x;
  for (T& v : out_.data) v = v > T(0) ? v : T(0);
  return out_;
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& gy) {
  Tensor<T> gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i)
    if (!(out_.data[i] > T(0))) gx.data[i] = T(0);
  return gx;
}

template <typename T>
Tensor<T> LeakyReLU<T>::forward(const Tensor<T>& x) {
  in_ = x;
  Tensor<T> y = x;
  for (T& v : y.data) v = v > T(0) ? v : slope_ * v;
  return y;
}

template <typename T>
Tensor<T> LeakyReLU<T>::backward(const Tensor<T>& gy) {
  Tensor<T> gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i)
    if (!(in_.data[i] > T(0))) gx.data[i] *= slope_;
  return gx;
}

template <typename T>
Tensor<T> Tanh<T>::forward(const Tensor<T>& x) {
  out_ = x;
  for (T& v : out_.data) v = std::tanh(v);
  return out_;
}

template <typename T>
Tensor<T> Tanh<T>::backward(const Tensor<T>& gy) {
  Tensor<T> gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] *= T(1) - out_.data[i] * out_.data[i];
  return gx;
}

template <typename T>
Tensor<T> Upsample2x<T>::forward(const Tensor<T>& x) {
  Tensor<T> y(x.n, x.c, x.h * 2, x.w * 2);
  for (int i = 0; i < x.n; ++i)
    for (int c = 0; c < x.c; ++c)
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx) y.at(i, c, yy, xx) = x.at(i, c, yy / 2, xx / 2);
  return y;
}

template <typename T>
Tensor<T> Upsample2x<T>::backward(const Tensor<T>& gy) {
  Tensor<T> gx(gy.n, gy.c, gy.h / 2, gy.w / 2);
  for (int i = 0; i < gy.n; ++i)
    for (int c = 0; c < gy.c; ++c)
      for (int yy = 0; yy < gy.h; ++yy)
        for (int xx = 0; xx < gy.w; ++xx) gx.at(i, c, yy / 2, xx / 2) += gy.at(i, c, yy, xx);
  return gx;
}

// --------------------------------------------------------- PoolLinearHead

template <typename T>
PoolLinearHead<T>::PoolLinearHead(const std::string& name, int channels)
    : channels_(channels), weight_(name + ".weight", {1, channels}), bias_(name + ".bias", {1}) {}

template <typename T>
Tensor<T> PoolLinearHead<T>::forward(const Tensor<T>& x) {
  if (x.c != channels_) throw std::invalid_argument(weight_.name + ": channel mismatch");
  h_ = x.h;
  w_ = x.w;
  pooled_ = Tensor<T>(x.n, x.c, 1, 1);
  Tensor<T> y(x.n, 1, 1, 1);
  const double inv = 1.0 / static_cast<double>(x.plane_size());
  for (int i = 0; i < x.n; ++i) {
    double logit = bias_.value[0];
    for (int c = 0; c < x.c; ++c) {
      double s = 0.0;
      for (T v : x.plane(i, c)) s += static_cast<double>(v);
      pooled_.at(i, c, 0, 0) = static_cast<T>(s * inv);
      logit += static_cast<double>(weight_.value[c]) * static_cast<double>(pooled_.at(i, c, 0, 0));
    }
    y.data[i] = static_cast<T>(logit);
  }
  return y;
}

template <typename T>
Tensor<T> PoolLinearHead<T>::backward(const Tensor<T>& gy) {
  Tensor<T> gx(gy.n, channels_, h_, w_);
  const T inv = T(1) / static_cast<T>(static_cast<std::size_t>(h_) * w_);
  for (int i = 0; i < gy.n; ++i) {
    const T g = gy.data[i];
    if (this->requires_grad_) {
      bias_.grad[0] += g;
      for (int c = 0; c < channels_; ++c) weight_.grad[c] += g * pooled_.at(i, c, 0, 0);
    }
    for (int c = 0; c < channels_; ++c) {
      const T v = g * weight_.value[c] * inv;
      for (T& d : gx.plane(i, c)) d = v;
    }
  }
  return gx;
}

template <typename T>
void PoolLinearHead<T>::collect(ParamList<T>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ------------------------------------------------------------- Sequential

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x) {
  Tensor<T> cur = x;
  for (auto& l : layers_) cur = l->forward(cur);
  return cur;
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& gy) {
  Tensor<T> cur = gy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
  return cur;
}

template <typename T>
void Sequential<T>::collect(ParamList<T>& out) {
  for (auto& l : layers_) l->collect(out);
}

template <typename T>
void Sequential<T>::set_training(bool t) {
  for (auto& l : layers_) l->set_training(t);
}

template <typename T>
void Sequential<T>::set_requires_grad(bool r) {
  this->requires_grad_ = r;
  for (auto& l : layers_) l->set_requires_grad(r);
}

template <typename T>
void Sequential<T>::visit(const std::function<void(const Layer<T>&)>& f) const {
  f(*this);
  for (const auto& l : layers_) l->visit(f);
}

// ---------------------------------------------------------- ResidualBlock

template <typename T>
ResidualBlock<T>::ResidualBlock(const std::string& name, int channels)
    : conv1_(name + ".conv1", channels, channels, 3, 1, 1),
      conv2_(name + ".conv2", channels, channels, 3, 1, 1),
      bn1_(name + ".bn1", channels), bn2_(name + ".bn2", channels) {}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x) {
  Tensor<T> h = relu1_.forward(bn1_.forward(conv1_.forward(x)));
  h = bn2_.forward(conv2_.forward(h));
  for (std::size_t i = 0; i < h.size(); ++i) h.data[i] += x.data[i];
  return relu_out_.forward(h);
}

template <typename T>
Tensor<T> ResidualBlock<T>::backward(const Tensor<T>& gy) {
  Tensor<T> g = relu_out_.backward(gy);
  Tensor<T> gx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(g)))));
  for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += g.data[i];
  return gx;
}

template <typename T>
void ResidualBlock<T>::collect(ParamList<T>& out) {
  conv1_.collect(out);
  bn1_.collect(out);
  conv2_.collect(out);
  bn2_.collect(out);
}

template <typename T>
void ResidualBlock<T>::set_training(bool t) {
  bn1_.set_training(t);
  bn2_.set_training(t);
}

template <typename T>
void ResidualBlock<T>::set_requires_grad(bool r) {
  this->requires_grad_ = r;
  conv1_.set_requires_grad(r);
  conv2_.set_requires_grad(r);
  bn1_.set_requires_grad(r);
  bn2_.set_requires_grad(r);
}

template <typename T>
void ResidualBlock<T>::visit(const std::function<void(const Layer<T>&)>& f) const {
  f(*this);
  conv1_.visit(f);
  bn1_.visit(f);
  relu1_.visit(f);
  conv2_.visit(f);
  bn2_.visit(f);
  relu_out_.visit(f);
}

// ------------------------------------------------------------------ init

template <typename T>
void init_default(Layer<T>& root, Rng& rng) {
  ParamList<T> params = parameters_of(root);
  double bound = 0.0;
  for (Parameter<T>* p : params) {
    if (ends_with(p->name, ".weight")) {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < p->shape.size(); ++d) fan_in *= static_cast<std::size_t>(p->shape[d]);
      bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (T& v : p->value) v = static_cast<T>(rng.uniform(-bound, bound));
    } else if (ends_with(p->name, ".bias")) {
      for (T& v : p->value) v = static_cast<T>(rng.uniform(-bound, bound));
    } else if (ends_with(p->name, ".gamma") || ends_with(p->name, ".running_var")) {
      std::fill(p->value.begin(), p->value.end(), T(1));
    } else {
      std::fill(p->value.begin(), p->value.end(), T(0));
    }
  }
}

template <typename T>
int count_kind(const Layer<T>& root, const std::string& kind) {
  int n = 0;
  root.visit([&](const Layer<T>& l) {
    if (l.kind() == kind) ++n;
  });
  return n;
}

// ------------------------------------------------------------------ Adam

template <typename T>
void Adam<T>::attach(const ParamList<T>& params) {
  params_.clear();
  m_.clear();
  v_.clear();
  for (Parameter<T>* p : params) {
    if (!p->trainable) continue;
    params_.push_back(p);
    m_.emplace_back(p->numel(), T(0));
    v_.emplace_back(p->numel(), T(0));
  }
  t_ = 0;
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const T c1 = T(1) - static_cast<T>(std::pow(static_cast<double>(b1_), static_cast<double>(t_)));
  const T c2 = T(1) - static_cast<T>(std::pow(static_cast<double>(b2_), static_cast<double>(t_)));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter<T>& p = *params_[k];
    std::vector<T>& m = m_[k];
    std::vector<T>& v = v_[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T g = p.grad[i];
      m[i] = b1_ * m[i] + (T(1) - b1_) * g;
      v[i] = b2_ * v[i] + (T(1) - b2_) * g * g;
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (Parameter<T>* p : params_) p->zero_grad();
}

#define CTGUARD_INSTANTIATE(T)                                   \
  template struct Parameter<T>;                                  \
  template class Conv2d<T>;                                      \
  template class BatchNorm2d<T>;                                 \
  template class ReLU<T>;                                        \
  template class LeakyReLU<T>;                                   \
  template class Tanh<T>;                                        \
  template class Upsample2x<T>;                                  \
  template class PoolLinearHead<T>;                              \
  template class Sequential<T>;                                  \
  template class ResidualBlock<T>;                               \
  template class Adam<T>;                                        \
  template void init_default<T>(Layer<T>&, Rng&);    \
  template int count_kind<T>(const Layer<T>&, const std::string&);

CTGUARD_INSTANTIATE(float)
CTGUARD_INSTANTIATE(double)

#undef CTGUARD_INSTANTIATE

}  // namespace ctguard::nn
