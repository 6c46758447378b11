#include <cmath>
#include <limits>

#include "doctest.h"
#include "fixtures.hpp"
#include "metric_pairs.hpp"
#include "ctguard/error.hpp"
#include "ctguard/manipulator.hpp"
#include "ctguard/metrics.hpp"
#include "oracles.hpp"

using namespace ctguard;

TEST_CASE("rmse and psnr hand examples") {
  Image a(1, 2, 0.0), b(1, 2);
  b.px = {3.0, 4.0};
  CHECK(rmse(a, b) == doctest::Approx(3.5355339059).epsilon(1e-10));

  const Image x = fixtures::random_image(8, 8, 0, 200, 1);
  Image y = x;
  for (double& v : y.px) v += 10.0;
  MetricConfig c8;
  c8.max_intensity = 255.0;
  CHECK(psnr(x, y, c8) == doctest::Approx(28.1308).epsilon(1e-5));
  CHECK(std::isinf(psnr(x, x)));
  CHECK_THROWS_AS(rmse(Image(2, 2), Image(2, 3)), InvariantError);
}

TEST_CASE("metrics agree with brute-force references") {
  const MetricConfig cfg;
  for (const auto& p : fixtures::crafted_metric_pairs()) {
    CAPTURE(p.name);
    CHECK(std::abs(rmse(p.a, p.b) - oracle::rmse(p.a, p.b)) <= 1e-6);
    CHECK(std::abs(psnr(p.a, p.b) - oracle::psnr(p.a, p.b, 4095.0)) <= 1e-6);
    CHECK(std::abs(ssim(p.a, p.b) - oracle::ssim(p.a, p.b, 4095.0, 11, 1.5)) <= 1e-4);
    CHECK(std::abs(ssim(p.a, p.b, cfg, 7) - oracle::ssim(p.a, p.b, 4095.0, 7, 1.5)) <= 1e-4);
  }
}

TEST_CASE("ssim properties") {
  const auto pairs = fixtures::crafted_metric_pairs();
  const auto& cb = pairs[2];
  CHECK(ssim(cb.a, cb.b) < 0.1);
  for (const auto& p : pairs) {
    CHECK(ssim(p.a, p.b) == doctest::Approx(ssim(p.b, p.a)).epsilon(1e-12));
    CHECK(ssim(p.a, p.a) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(ssim(Image(10, 10), Image(10, 10)), InvariantError);
}

TEST_CASE("psnr decomposes into the log of the peak minus the log of the rmse") {
  const MetricConfig cfg;
  for (int i = 0; i < 100; ++i) {
    const Image a = fixtures::random_image(16, 16, 0, 4095, 1000 + i);
    const Image b = fixtures::random_image(16, 16, 0, 4095, 5000 + i);
    CHECK(psnr(a, b) == 20.0 * std::log10(cfg.max_intensity) - 20.0 * std::log10(rmse(a, b)));
  }
}

TEST_CASE("lpips is zero on identity, symmetric and monotone in noise") {
  const auto slices = fixtures::phantom_slices(1, 3);
  const Image x = to_metric_scale(slices[0]);
  CHECK(lpips(x, x) == 0.0);

  Rng rng(4);
  const Image noise = fixtures::random_image(64, 64, -1, 1, 5);
  double previous = 0.0;
  for (double std_dev : {0.05, 0.1, 0.2}) {
    Image n = slices[0];
    Rng g(17);
    for (double& v : n.px) v = std::clamp(v + std_dev * g.normal(), -1.0, 1.0);
    const double d = lpips(x, to_metric_scale(n));
    CHECK(d > previous);
    previous = d;
  }
  const Image y = to_metric_scale(noise);
  CHECK(lpips(x, y) == doctest::Approx(lpips(y, x)).epsilon(1e-12));

  MetricConfig pre;
  pre.lpips_backbone = LpipsBackbone::kSqueezePretrained;
  CHECK_THROWS_WITH_AS(lpips(x, y, pre), doctest::Contains("lpips_weights"), ConfigError);
}

TEST_CASE("roi metrics on identical and equal-content squares") {
  const Image a = fixtures::random_image(64, 64, 0, 4095, 1);
  const TamperRegion r{32, 32, 32};
  const MetricRow same = roi_metrics(a, a, r, "p");
  CHECK(same.rmse == 0.0);
  CHECK(same.ssim == doctest::Approx(1.0));
  CHECK(same.lpips == 0.0);
  CHECK(same.scope == MetricScope::kTamperSquare);

  // Moving identical content elsewhere gives the same numbers.
  const Image b = fixtures::random_image(64, 64, 0, 4095, 2);
  const TamperRegion r2{20, 44, 32};
  const Image a2 = paste_square(Image(64, 64, 7.0), extract_square(a, r), r2);
  const Image b2 = paste_square(Image(64, 64, 9.0), extract_square(b, r), r2);
  const MetricRow m1 = roi_metrics(a, b, r, "p"), m2 = roi_metrics(a2, b2, r2, "p");
  CHECK(m1.rmse == m2.rmse);
  CHECK(m1.ssim == m2.ssim);
  CHECK(m1.lpips == m2.lpips);
  CHECK_THROWS_AS(roi_metrics(a, b, {5, 5, 32}, "p"), InvariantError);
}

TEST_CASE("heatmaps") {
  const Image a = fixtures::random_image(64, 64, 0, 4095, 1);
  for (auto v : heatmap(a, a)) CHECK(v == 0);

  const TamperRegion r{30, 34, 32};
  Image patch = extract_square(a, r);
  Rng rng(2);
  for (double& v : patch.px) v += rng.uniform(50, 100);
  const Image b = paste_square(a, patch, r);
  const auto h = heatmap(a, b);
  int nonzero = 0;
  for (auto v : h) nonzero += v != 0;
  CHECK(nonzero == 1024);
  const Image d = abs_difference(a, b);
  CHECK(d.at(r.y0(), r.x0()) > 0.0);

  const auto dir = fixtures::scratch_dir("png");
  write_png_gray(dir / "h.png", h, 64, 64);
  int hh = 0, ww = 0;
  CHECK(read_png_gray(dir / "h.png", hh, ww) == h);
  CHECK(hh == 64);
  std::filesystem::remove_all(dir);
}

TEST_CASE("metric formatting and report schema") {
  CHECK(format_metric(std::numeric_limits<double>::infinity()) == "inf");
  MetricReport rep;
  rep.rows.push_back(whole_image_metrics(fixtures::random_image(16, 16, 0, 4095, 1),
                                         fixtures::random_image(16, 16, 0, 4095, 2), "pair_a"));
  const std::string csv = rep.to_csv();
  CHECK(csv.rfind("pair,scope,RMSE,PSNR,LPIPS,SSIM\n", 0) == 0);
  CHECK(csv.find("pair_a") != std::string::npos);
}
