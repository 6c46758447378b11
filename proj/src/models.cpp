#include "ctguard/models.hpp"

#include <algorithm>
#include <cmath>
#include <type_traits>
#include <variant>

#include "ctguard/error.hpp"

namespace ctguard {

namespace {

std::int64_t conv_count(std::int64_t k, std::int64_t in, std::int64_t out) { return k * k * in * out + out; }
std::int64_t bn_count(std::int64_t ch) { return 2 * ch; }

void check_noise_spec(const NoiseNetSpec& s) {
  if (s.layer_channels.size() < 2 || s.layer_channels.front() != 1 || s.layer_channels.back() != 1) {
    throw InvariantError("noise net channels must start and end at 1");
  }
}

}  // namespace

DiscriminatorSpec DiscriminatorSpec::with_base_width(int b) {
  DiscriminatorSpec s;
  s.channels = {1, b, 2 * b, 2 * b, 4 * b, 4 * b, 8 * b, 8 * b, 16 * b};
  return s;
}

std::int64_t count_parameters(const NoiseNetSpec& spec) {
  std::int64_t n = 0;
  for (std::size_t i = 1; i < spec.layer_channels.size(); ++i) {
    n += conv_count(spec.kernel, spec.layer_channels[i - 1], spec.layer_channels[i]) +
         bn_count(spec.layer_channels[i]);
  }
  return n;
}

std::int64_t count_parameters(const ResidualBlockSpec& spec) {
  return 2 * conv_count(spec.kernel, spec.width, spec.width) + 2 * bn_count(spec.width);
}

std::int64_t count_parameters(const GeneratorSpec& spec) {
  if (spec.trunk_width <= 0) return count_parameters(spec.noise);
  const std::int64_t w = spec.trunk_width;
  std::int64_t n = count_parameters(spec.noise);
  n += conv_count(spec.kernel, 2, w) + bn_count(w);
  n += spec.residual_blocks * count_parameters(ResidualBlockSpec{spec.trunk_width, spec.kernel});
  n += conv_count(spec.kernel, w, 1);
  return n;
}

std::int64_t count_parameters(const DiscriminatorSpec& spec) {
  if (spec.channels.size() < 2) return 0;
  std::int64_t n = 0;
  for (std::size_t i = 1; i < spec.channels.size(); ++i) {
    n += conv_count(spec.kernel, spec.channels[i - 1], spec.channels[i]) + bn_count(spec.channels[i]);
  }
  return n + spec.channels.back() + 1;
}

// -------------------------------------------------------------- Generator

template <typename T>
Generator<T>::Generator(const GeneratorSpec& spec) : spec_(spec) {
  check_noise_spec(spec.noise);
  if (spec.kernel != 3) throw InvariantError("only 3x3 kernels are supported");
  const auto& ch = spec.noise.layer_channels;
  for (std::size_t i = 1; i < ch.size(); ++i) {
    const std::string name = "g_noise.conv" + std::to_string(i - 1);
    noise_.template emplace<nn::Conv2d<T>>(name, ch[i - 1], ch[i], 3, 1, 1);
    noise_.template emplace<nn::BatchNorm2d<T>>("g_noise.bn" + std::to_string(i - 1), ch[i]);
    noise_.template emplace<nn::ReLU<T>>();
  }
  const int w = spec.trunk_width;
  trunk_in_channels_ = 1 + ch.back();
  trunk_.template emplace<nn::Conv2d<T>>("g_trunk.conv_in", trunk_in_channels_, w, 3, 1, 1);
  trunk_.template emplace<nn::BatchNorm2d<T>>("g_trunk.bn_in", w);
  trunk_.template emplace<nn::ReLU<T>>();
  for (int b = 0; b < spec.residual_blocks; ++b) {
    trunk_.template emplace<nn::ResidualBlock<T>>("g_trunk.res" + std::to_string(b), w);
  }
  trunk_.template emplace<nn::Conv2d<T>>("g_trunk.conv_out", w, 1, 3, 1, 1);
  trunk_.template emplace<nn::Tanh<T>>();
  stage_count_ = 2 + static_cast<std::size_t>(spec.residual_blocks);
}

template <typename T>
Tensor<T> Generator<T>::noise_forward(const Tensor<T>& delta) {
  if (delta.c != 1) throw InvariantError("perturbation must have one channel, got " + delta.shape_str());
  if (delta.h < 8 || delta.w < 8) {
    throw InvariantError("noise net input " + delta.shape_str() + " is below the 8x8 minimum");
  }
  for (T v : delta.data) {
    if (!std::isfinite(static_cast<double>(v))) throw InvariantError("perturbation contains non-finite values");
  }
  return noise_.forward(delta);
}

template <typename T>
Tensor<T> Generator<T>::forward(const Tensor<T>& x, const Tensor<T>& delta) {
  if (x.c != 1 || !x.same_shape(delta)) {
    throw InvariantError("generator input " + x.shape_str() + " and perturbation " + delta.shape_str() +
                         " must both be [N,1,H,W] with equal shape");
  }
  // A universal perturbation repeats one field across the batch; run the
  // noise branch once and broadcast. Batch statistics are unchanged.
  shared_delta_ = delta.n > 1;
  for (int i = 1; i < delta.n && shared_delta_; ++i) {
    shared_delta_ = std::equal(delta.sample(i).begin(), delta.sample(i).end(), delta.sample(0).begin());
  }
  if (!shared_delta_) return trunk_.forward(concat_channels(x, noise_forward(delta)));
  Tensor<T> one(1, 1, delta.h, delta.w);
  std::copy(delta.sample(0).begin(), delta.sample(0).end(), one.data.begin());
  const Tensor<T> n1 = noise_forward(one);
  Tensor<T> nb(delta.n, 1, delta.h, delta.w);
  for (int i = 0; i < delta.n; ++i) std::copy(n1.data.begin(), n1.data.end(), nb.sample(i).begin());
  return trunk_.forward(concat_channels(x, nb));
}

template <typename T>
Tensor<T> Generator<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g = trunk_.backward(grad_out);
  Tensor<T> gx, gnoise;
  split_channels(g, 1, gx, gnoise);
  if (shared_delta_) {
    Tensor<T> sum(1, 1, gnoise.h, gnoise.w);
    for (int i = 0; i < gnoise.n; ++i) {
      auto src = gnoise.sample(i);
      for (std::size_t k = 0; k < src.size(); ++k) sum.data[k] += src[k];
    }
    noise_.backward(sum);
  } else {
    noise_.backward(gnoise);
  }
  return gx;
}

template <typename T>
nn::ParamList<T> Generator<T>::parameters() {
  nn::ParamList<T> out;
  noise_.collect(out);
  trunk_.collect(out);
  return out;
}

template <typename T>
void Generator<T>::set_training(bool t) {
  noise_.set_training(t);
  trunk_.set_training(t);
}

template <typename T>
void Generator<T>::init(Rng& rng) {
  nn::init_default<T>(noise_, rng);
  nn::init_default<T>(trunk_, rng);
}

// ---------------------------------------------------------- Discriminator

template <typename T>
Discriminator<T>::Discriminator(const DiscriminatorSpec& spec) : spec_(spec) {
  if (spec.channels.size() < 2 || spec.channels.front() != 1) {
    throw InvariantError("discriminator channels must start at 1");
  }
  if (spec.kernel != 3) throw InvariantError("only 3x3 kernels are supported");
  for (std::size_t i = 1; i < spec.channels.size(); ++i) {
    const int stride = (i % 2 == 0) ? 2 : 1;
    const std::string idx = std::to_string(i - 1);
    body_.template emplace<nn::Conv2d<T>>("d.conv" + idx, spec.channels[i - 1], spec.channels[i], 3, stride, 1);
    body_.template emplace<nn::BatchNorm2d<T>>("d.bn" + idx, spec.channels[i]);
    body_.template emplace<nn::LeakyReLU<T>>(static_cast<T>(spec.leaky_slope));
  }
  body_.template emplace<nn::PoolLinearHead<T>>("d.head", spec.channels.back());
}

template <typename T>
std::vector<T> Discriminator<T>::forward(const Tensor<T>& images) {
  if (images.c != 1) throw InvariantError("discriminator expects one channel, got " + images.shape_str());
  if (images.h < spec_.min_input || images.w < spec_.min_input) {
    throw InvariantError("discriminator input " + images.shape_str() + " is below the " +
                         std::to_string(spec_.min_input) + "x" + std::to_string(spec_.min_input) + " minimum");
  }
  const Tensor<T> logits = body_.forward(images);
  last_out_.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = static_cast<double>(logits.data[i]);
    last_out_[i] = static_cast<T>(1.0 / (1.0 + std::exp(-z)));
  }
  return last_out_;
}

template <typename T>
Tensor<T> Discriminator<T>::backward(const std::vector<T>& grad_likelihood) {
  if (grad_likelihood.size() != last_out_.size()) throw InvariantError("discriminator backward: batch mismatch");
  Tensor<T> g(static_cast<int>(last_out_.size()), 1, 1, 1);
  for (std::size_t i = 0; i < last_out_.size(); ++i) {
    g.data[i] = grad_likelihood[i] * last_out_[i] * (T(1) - last_out_[i]);
  }
  return body_.backward(g);
}

template <typename T>
nn::ParamList<T> Discriminator<T>::parameters() {
  return nn::parameters_of<T>(body_);
}

template <typename T>
void Discriminator<T>::set_training(bool t) {
  body_.set_training(t);
}

template <typename T>
void Discriminator<T>::set_requires_grad(bool r) {
  requires_grad_ = r;
  body_.set_requires_grad(r);
}

template <typename T>
void Discriminator<T>::init(Rng& rng) {
  nn::init_default<T>(body_, rng);
}

// ---------------------------------------------------------------- helpers

template <typename T>
void store_parameters(const nn::ParamList<T>& params, ArrayArchive& archive) {
  for (const nn::Parameter<T>* p : params) {
    std::vector<std::int64_t> shape(p->shape.begin(), p->shape.end());
    archive.put(p->name, shape, std::vector<T>(p->value.begin(), p->value.end()));
  }
}

template <typename T>
void load_parameters(const nn::ParamList<T>& params, const ArrayArchive& archive) {
  for (nn::Parameter<T>* p : params) {
    if (!archive.contains(p->name)) throw ArchiveError("arrays", "missing parameter '" + p->name + "'");
    const NamedArray& a = archive.at(p->name);
    if (a.numel() != p->numel()) {
      throw ArchiveError("arrays", "parameter '" + p->name + "' has " + std::to_string(a.numel()) +
                                       " values, model expects " + std::to_string(p->numel()));
    }
    if constexpr (std::is_same_v<T, float>) {
      if (const auto* v = std::get_if<std::vector<float>>(&a.data)) {
        p->value.assign(v->begin(), v->end());
        continue;
      }
    }
    if (const auto* v = std::get_if<std::vector<double>>(&a.data)) {
      for (std::size_t i = 0; i < v->size(); ++i) p->value[i] = static_cast<T>((*v)[i]);
    } else if (const auto* f = std::get_if<std::vector<float>>(&a.data)) {
      for (std::size_t i = 0; i < f->size(); ++i) p->value[i] = static_cast<T>((*f)[i]);
    } else {
      throw ArchiveError("arrays", "parameter '" + p->name + "' is not a real array");
    }
  }
}

template <typename T>
Tensor<T> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw InvariantError("cannot stack an empty image list");
  const int h = images.front()->h, w = images.front()->w;
  Tensor<T> t(static_cast<int>(images.size()), 1, h, w);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->h != h || images[i]->w != w) {
      throw InvariantError("image " + std::to_string(i) + " is " + images[i]->shape_str() + ", expected " +
                           images.front()->shape_str());
    }
    auto dst = t.sample(static_cast<int>(i));
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(images[i]->px[k]);
  }
  return t;
}

template class Generator<float>;
template class Generator<double>;
template class Discriminator<float>;
template class Discriminator<double>;
template void store_parameters<float>(const nn::ParamList<float>&, ArrayArchive&);
template void store_parameters<double>(const nn::ParamList<double>&, ArrayArchive&);
template void load_parameters<float>(const nn::ParamList<float>&, const ArrayArchive&);
template void load_parameters<double>(const nn::ParamList<double>&, const ArrayArchive&);
template Tensor<float> stack_images<float>(const std::vector<const Image*>&);
template Tensor<double> stack_images<double>(const std::vector<const Image*>&);

}  // namespace ctguard
