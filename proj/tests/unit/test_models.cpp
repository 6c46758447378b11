#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "ctguard/error.hpp"
#include "ctguard/models.hpp"
#include "oracles.hpp"

using namespace ctguard;

namespace {

Tensor<double> random_tensor(int n, int c, int h, int w, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<double> t(n, c, h, w);
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

template <typename T>
void zero_all(nn::ParamList<T> params) {
  for (auto* p : params) std::fill(p->value.begin(), p->value.end(), T(0));
}

std::int64_t trainable_numel(const nn::ParamList<double>& ps) {
  std::int64_t n = 0;
  for (auto* p : ps)
    if (p->trainable) n += static_cast<std::int64_t>(p->numel());
  return n;
}

// Sum of out * weights as a scalar loss, for layer-level checks.
double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

}  // namespace

TEST_CASE("parameter counts agree with the closed forms and with enumeration") {
  const NoiseNetSpec noise;
  std::int64_t expected = 0;
  const int ch[6] = {1, 16, 32, 32, 16, 1};
  for (int i = 1; i < 6; ++i) expected += 3 * 3 * ch[i - 1] * ch[i] + ch[i] + 2 * ch[i];
  CHECK(count_parameters(noise) == expected);
  CHECK(count_parameters(ResidualBlockSpec{64, 3}) == 2 * (3 * 3 * 64 * 64 + 64) + 2 * (2 * 64));
  CHECK(count_parameters(DiscriminatorSpec{{}, 0.2, 3, 64}) == 0);

  GeneratorSpec gs;
  gs.trunk_width = 8;
  gs.residual_blocks = 2;
  Generator<double> g(gs);
  CHECK(count_parameters(gs) == trainable_numel(g.parameters()));

  const DiscriminatorSpec ds = DiscriminatorSpec::with_base_width(4);
  Discriminator<double> d(ds);
  CHECK(count_parameters(ds) == trainable_numel(d.parameters()));
}

TEST_CASE("introspected layer counts") {
  Generator<double> g(GeneratorSpec{});
  CHECK(g.noise_conv_layers() == 5);
  CHECK(g.trunk_input_channels() == 2);
  Discriminator<double> d(DiscriminatorSpec::with_base_width(2));
  CHECK(d.conv_layers() == 8);
}

TEST_CASE("noise net layers match a straight-line convolution") {
  GeneratorSpec gs;
  gs.trunk_width = 4;
  Generator<double> g(gs);
  Rng rng(3);
  g.init(rng);
  g.set_training(false);
  Tensor<double> x = random_tensor(1, 1, 8, 8, 4);
  int checked = 0;
  for (std::size_t i = 0; i < g.noise_net().size(); ++i) {
    auto& layer = g.noise_net()[i];
    const Tensor<double> y = layer.forward(x);
    if (auto* conv = dynamic_cast<nn::Conv2d<double>*>(&layer)) {
      int oh = 0, ow = 0;
      const auto ref = oracle::conv2d(x.data, x.c, x.h, x.w, conv->weight().value, conv->bias().value,
                                      conv->out_channels(), 3, 1, 1, oh, ow);
      REQUIRE(ref.size() == y.size());
      for (std::size_t k = 0; k < ref.size(); ++k) CHECK(y.data[k] == doctest::Approx(ref[k]).epsilon(1e-4));
      ++checked;
    }
    x = y;
  }
  CHECK(checked == 5);
}

TEST_CASE("generator preserves shape and stays in [-1, 1]") {
  for (int size : {64, 512}) {
    GeneratorSpec gs;
    gs.trunk_width = size == 512 ? 2 : 8;
    gs.residual_blocks = size == 512 ? 1 : 3;
    if (size == 512) gs.noise.layer_channels = {1, 2, 2, 2, 2, 1};
    Generator<float> g(gs);
    Rng rng(5);
    g.init(rng);
    Tensor<float> x(2, 1, size, size), delta(2, 1, size, size);
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : delta.data) v = static_cast<float>(3 * rng.normal());
    const Tensor<float> y = g.forward(x, delta);
    CHECK(y.same_shape(x));
    for (float v : y.data) {
      REQUIRE(v >= -1.0f);
      REQUIRE(v <= 1.0f);
    }
  }
}

TEST_CASE("all-zero parameters give a zero generator and a neutral discriminator") {
  GeneratorSpec gs;
  gs.trunk_width = 4;
  Generator<double> g(gs);
  zero_all(g.parameters());
  const Tensor<double> y = g.forward(random_tensor(2, 1, 64, 64, 1), random_tensor(2, 1, 64, 64, 2));
  for (double v : y.data) CHECK(v == 0.0);

  Discriminator<double> d(DiscriminatorSpec::with_base_width(2));
  zero_all(d.parameters());
  for (double p : d.forward(random_tensor(3, 1, 64, 64, 3))) CHECK(p == 0.5);
}

TEST_CASE("discriminator output is a probability and small inputs are rejected") {
  Discriminator<float> d(DiscriminatorSpec::with_base_width(2));
  Rng rng(9);
  d.init(rng);
  for (int size : {64, 512}) {
    Tensor<float> x(2, 1, size, size);
    for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1, 1));
    for (float p : d.forward(x)) {
      CHECK(p > 0.0f);
      CHECK(p < 1.0f);
    }
  }
  CHECK_THROWS_AS(d.forward(Tensor<float>(1, 1, 32, 32)), InvariantError);
}

TEST_CASE("noise net rejects tiny or non-finite perturbations") {
  Generator<double> g(GeneratorSpec{});
  CHECK_THROWS_AS(g.noise_forward(Tensor<double>(1, 1, 4, 4)), InvariantError);
  Tensor<double> bad(1, 1, 8, 8);
  bad.data[3] = std::nan("");
  CHECK_THROWS_AS(g.noise_forward(bad), InvariantError);
}

TEST_CASE("layer gradients match central differences") {
  Rng rng(21);
  const Tensor<double> x = random_tensor(3, 2, 6, 6, 22);

  auto check_layer = [&](nn::Layer<double>& layer) {
    nn::ParamList<double> params;
    layer.collect(params);
    for (auto* p : params)
      for (auto& v : p->value) v = p->trainable ? 0.5 * rng.normal() + (p->name.find("gamma") != std::string::npos) : v;
    const Tensor<double> probe = layer.forward(x);
    const Tensor<double> wts = random_tensor(probe.n, probe.c, probe.h, probe.w, 23);
    auto loss = [&] { return dot(layer.forward(x), wts); };
    auto analytic = [&] {
      for (auto* p : params) p->zero_grad();
      layer.forward(x);
      layer.backward(wts);
    };
    // Central differences at step 1e-5 carry ~1e-10 of roundoff, so entries
    // whose true gradient is zero (conv biases ahead of batch norm) are judged
    // against a 1e-4 floor rather than relative to themselves.
    const auto r = gradcheck::against_central_differences(params, loss, analytic, 1e-5, 1e-4);
    CHECK(r.worst_entry < 1e-5);

    // Input gradient.
    layer.forward(x);
    const Tensor<double> gx = layer.backward(wts);
    Tensor<double> xx = x;
    for (std::size_t i = 0; i < xx.size(); i += 7) {
      const double keep = xx.data[i];
      xx.data[i] = keep + 1e-5;
      const double up = dot(layer.forward(xx), wts);
      xx.data[i] = keep - 1e-5;
      const double down = dot(layer.forward(xx), wts);
      xx.data[i] = keep;
      CHECK(gx.data[i] == doctest::Approx((up - down) / 2e-5).epsilon(1e-5));
    }
  };

  SUBCASE("conv stride 1") {
    nn::Conv2d<double> l("c", 2, 3, 3, 1, 1);
    check_layer(l);
  }
  SUBCASE("conv stride 2") {
    nn::Conv2d<double> l("c", 2, 3, 3, 2, 1);
    check_layer(l);
  }
  SUBCASE("batch norm") {
    nn::BatchNorm2d<double> l("bn", 2);
    check_layer(l);
  }
  SUBCASE("leaky relu") {
    nn::LeakyReLU<double> l(0.2);
    check_layer(l);
  }
  SUBCASE("tanh") {
    nn::Tanh<double> l;
    check_layer(l);
  }
  SUBCASE("upsample") {
    nn::Upsample2x<double> l;
    check_layer(l);
  }
  SUBCASE("pooled linear head") {
    nn::PoolLinearHead<double> l("h", 2);
    check_layer(l);
  }
  SUBCASE("residual block") {
    nn::ResidualBlock<double> l("r", 2);
    check_layer(l);
  }
}

TEST_CASE("parameters round trip through an archive") {
  GeneratorSpec gs;
  gs.trunk_width = 4;
  Generator<float> a(gs), b(gs);
  Rng r1(1), r2(2);
  a.init(r1);
  b.init(r2);
  ArrayArchive arc;
  store_parameters(a.parameters(), arc);
  load_parameters(b.parameters(), arc);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  ArrayArchive empty;
  CHECK_THROWS_AS(load_parameters(b.parameters(), empty), ArchiveError);
}
