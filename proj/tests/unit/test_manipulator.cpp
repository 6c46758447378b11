#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "ctguard/error.hpp"
#include "ctguard/manipulator.hpp"
#include "ctguard/metrics.hpp"

using namespace ctguard;

namespace {

int reflect101(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

// Direct 2D convolution with the outer product of a 9-tap Gaussian (sigma 2),
// mirrored borders, then the 0.7 / 0.3 blend with the patch mean.
Image blur_blend_reference(const Image& p) {
  double k[9], total = 0;
  for (int i = 0; i < 9; ++i) total += k[i] = std::exp(-(i - 4) * (i - 4) / 8.0);
  for (double& v : k) v /= total;
  double mean = 0;
  for (double v : p.px) mean += v;
  mean /= p.size();
  Image out(p.h, p.w);
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      double s = 0;
      for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j) s += k[i] * k[j] * p.at(reflect101(y + i - 4, p.h), reflect101(x + j - 4, p.w));
      out.at(y, x) = 0.7 * s + 0.3 * mean;
    }
  return out;
}

std::size_t changed(const Image& a, const Image& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a.px[i] != b.px[i] ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("region arithmetic on a 512x512 image") {
  const TamperRegion r{256, 256, 32};
  CHECK(r.y0() == 240);
  CHECK(r.y0() + r.size - 1 == 271);
  CHECK(r.x0() == 240);
  CHECK_NOTHROW(check_region(r, 512, 512));
  CHECK_THROWS_AS(check_region({8, 8, 32}, 512, 512), InvariantError);
  CHECK_THROWS_AS(extract_square(Image(512, 512), {8, 8, 32}), InvariantError);
  CHECK_THROWS_AS(paste_square(Image(64, 64), Image(32, 32), {60, 30, 32}), InvariantError);
  CHECK_THROWS_AS(paste_square(Image(64, 64), Image(16, 16), {32, 32, 32}), InvariantError);
}

TEST_CASE("random regions always fit") {
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    const TamperRegion r = random_region(64, 80, 32, rng);
    CHECK_NOTHROW(check_region(r, 64, 80));
  }
}

TEST_CASE("extract and paste are inverse and local") {
  const Image img = fixtures::random_image(96, 80, 0.1, 1.0, 3);
  const TamperRegion r{40, 50, 32};
  const Image q = extract_square(img, r);
  CHECK(q.at(0, 0) == img.at(34, 24));
  CHECK(paste_square(img, q, r) == img);
  const Image zeroed = paste_square(img, Image(32, 32, 0.0), r);
  CHECK(changed(img, zeroed) == 1024);
}

TEST_CASE("tamper touches only the region, for every manipulator kind") {
  const Image img = fixtures::random_image(64, 64, -1.0, 1.0, 5);
  const TamperRegion r{30, 36, 32};
  const std::vector<ManipulatorHandle> kinds = {
      ManipulatorHandle::blur_blend(), ManipulatorHandle::identity(),
      train_inpaint_surrogate(fixtures::phantom_slices(2, 1), 0, 7)};
  for (const auto& m : kinds) {
    const Image t = tamper(img, r, m);
    CHECK(changed(img, t) <= 1024);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const bool inside = y >= r.y0() && y < r.y0() + 32 && x >= r.x0() && x < r.x0() + 32;
        if (!inside) REQUIRE(t.at(y, x) == img.at(y, x));
      }
    CHECK(tamper(img, r, m) == t);
  }
  CHECK(tamper(img, r, ManipulatorHandle::identity()) == img);
}

TEST_CASE("whole-image MSE of a local change is the square MSE scaled by 1024/(H*W)") {
  const Image a = fixtures::random_image(64, 96, -1, 1, 8);
  const TamperRegion r{40, 30, 32};
  const Image b = tamper(a, r, ManipulatorHandle::blur_blend());
  const double whole = rmse(a, b) * rmse(a, b);
  const double roi = rmse(extract_square(a, r), extract_square(b, r));
  CHECK(whole == doctest::Approx(roi * roi * 1024.0 / (64.0 * 96.0)).epsilon(1e-12));
}

TEST_CASE("blur blend matches a direct 2D convolution") {
  const Image p = fixtures::random_image(32, 32, -1, 1, 4);
  const Image got = blur_blend_manipulate(p);
  const Image ref = blur_blend_reference(p);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.px[i] == doctest::Approx(ref.px[i]).epsilon(1e-12));
  for (double v : got.px) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }

  const Image c = blur_blend_manipulate(Image(32, 32, 0.37));
  for (double v : c.px) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));

  Image spike(32, 32, 0.0);
  spike.at(16, 16) = 1.0;
  const Image spread = blur_blend_manipulate(spike);
  CHECK(*std::max_element(spread.px.begin(), spread.px.end()) < 1.0);
  CHECK(spread.at(16, 17) > 0.0);
}

TEST_CASE("differentiable blur agrees with the image path and its adjoint") {
  const Image p = fixtures::random_image(32, 32, -1, 1, 6);
  DifferentiableManipulator<double> m(ManipulatorHandle::blur_blend());
  Tensor<double> t(1, 1, 32, 32);
  t.data.assign(p.px.begin(), p.px.end());
  const Tensor<double> y = m.forward(t);
  const Image ref = blur_blend_manipulate(p);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref.px[i]).epsilon(1e-12));

  // <M u, v> = <u, M^T v> for a linear map.
  const Image v = fixtures::random_image(32, 32, -1, 1, 7);
  Tensor<double> tv(1, 1, 32, 32);
  tv.data.assign(v.px.begin(), v.px.end());
  const Tensor<double> mt_v = m.backward(tv);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    lhs += y.data[i] * v.px[i];
    rhs += p.px[i] * mt_v.data[i];
  }
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("inpainting surrogate beats blur on held-out squares and stays frozen") {
  CHECK_THROWS_AS(train_inpaint_surrogate({}, 1, 0), InvariantError);

  const auto train = fixtures::phantom_slices(24, 101);
  const auto held_out = fixtures::phantom_slices(8, 202);
  const ManipulatorHandle m = train_inpaint_surrogate(train, 6, 3);
  CHECK(m.kind() == ManipulatorKind::kInpaintSurrogate);

  Rng rng(9);
  double surrogate = 0, blur = 0;
  int n = 0;
  for (const Image& s : held_out) {
    for (int k = 0; k < 4; ++k) {
      const TamperRegion r = random_region(s.h, s.w, 32, rng);
      const Image q = extract_square(s, r);
      surrogate += rmse(m.apply(q), q);
      blur += rmse(blur_blend_manipulate(q), q);
      ++n;
    }
  }
  MESSAGE("held-out square RMSE: surrogate " << surrogate / n << ", blur " << blur / n);
  CHECK(surrogate / n < blur / n);

  const Image q = extract_square(held_out[0], {32, 32, 32});
  CHECK(m.apply(q) == m.apply(q));
  CHECK(train_inpaint_surrogate(train, 1, 3).weights() == train_inpaint_surrogate(train, 1, 3).weights());

  const ManipulatorHandle untrained = train_inpaint_surrogate(train, 0, 3);
  const Image u = untrained.apply(q);
  CHECK(u.same_shape(q));
}

TEST_CASE("manipulator weights survive a file round trip") {
  const auto dir = fixtures::scratch_dir("manip");
  const ManipulatorHandle m = train_inpaint_surrogate(fixtures::phantom_slices(2, 1), 0, 4);
  m.weights().save(dir / "m.mca");
  const ManipulatorHandle back = ManipulatorHandle::load((dir / "m.mca").string());
  CHECK(back.kind() == ManipulatorKind::kInpaintSurrogate);
  const Image q = fixtures::random_image(32, 32, -1, 1, 2);
  CHECK(back.apply(q) == m.apply(q));
  CHECK_THROWS_AS(parse_manipulator_kind("ctgan"), ConfigError);
  std::filesystem::remove_all(dir);
}
