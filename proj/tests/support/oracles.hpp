#pragma once

// Deliberately naive reference implementations. They share no code with the
// library so that agreement is evidence of correctness.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ctguard/image.hpp"

namespace oracle {

inline double mse(const ctguard::Image& a, const ctguard::Image& b) {
  double s = 0.0;
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x) {
      const double d = a.at(y, x) - b.at(y, x);
      s += d * d;
    }
  return s / (a.h * a.w);
}

inline double rmse(const ctguard::Image& a, const ctguard::Image& b) { return std::sqrt(mse(a, b)); }

inline double psnr(const ctguard::Image& a, const ctguard::Image& b, double max_i) {
  return 10.0 * std::log10(max_i * max_i / mse(a, b));
}

// Full 2D Gaussian window, weighted statistics evaluated directly at every
// valid window position.
inline double ssim(const ctguard::Image& a, const ctguard::Image& b, double max_i, int win, double sigma,
                   double k1 = 0.01, double k2 = 0.03) {
  std::vector<double> g(static_cast<std::size_t>(win) * win);
  double total = 0.0;
  const double c = (win - 1) / 2.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double v = std::exp(-((i - c) * (i - c) + (j - c) * (j - c)) / (2 * sigma * sigma));
      g[i * win + j] = v;
      total += v;
    }
  for (double& v : g) v /= total;
  const double c1 = (k1 * max_i) * (k1 * max_i);
  const double c2 = (k2 * max_i) * (k2 * max_i);
  double acc = 0.0;
  int count = 0;
  for (int y = 0; y + win <= a.h; ++y)
    for (int x = 0; x + win <= a.w; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          ma += g[i * win + j] * a.at(y + i, x + j);
          mb += g[i * win + j] * b.at(y + i, x + j);
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double da = a.at(y + i, x + j) - ma;
          const double db = b.at(y + i, x + j) - mb;
          va += g[i * win + j] * da * da;
          vb += g[i * win + j] * db * db;
          cov += g[i * win + j] * da * db;
        }
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return acc / count;
}

// Direct 2D convolution, zero padding, one sample. Weights laid out [out][in][ky][kx].
inline std::vector<double> conv2d(std::span<const double> in, int cin, int h, int w, std::span<const double> wt,
                                  std::span<const double> bias, int cout, int k, int stride, int pad, int& oh,
                                  int& ow) {
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(cout) * oh * ow);
  for (int o = 0; o < cout; ++o)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = bias[o];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = y * stride - pad + ky, ix = x * stride - pad + kx;
              if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
              s += wt[((o * cin + ci) * k + ky) * k + kx] * in[(ci * h + iy) * w + ix];
            }
        out[(o * oh + y) * ow + x] = s;
      }
  return out;
}

}  // namespace oracle
