#include "ctguard/metrics.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>

#include "ctguard/archive.hpp"
#include "ctguard/error.hpp"
#include "ctguard/nn.hpp"
#include "ctguard/rng.hpp"

namespace ctguard {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b) || a.px.empty()) {
    throw InvariantError(std::string(what) + ": shapes " + a.shape_str() + " and " + b.shape_str() + " differ");
  }
}

double mse(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.px[i] - b.px[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  double s = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

// Valid-mode separable filtering.
Image filter_valid(const Image& in, const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  const int ho = in.h - k + 1, wo = in.w - k + 1;
  Image tmp(in.h, wo);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += g[t] * in.at(y, x + t);
      tmp.at(y, x) = s;
    }
  Image out(ho, wo);
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += g[t] * tmp.at(y + t, x);
      out.at(y, x) = s;
    }
  return out;
}

// ----------------------------------------------------------------- LPIPS

// Max pooling, kernel 3, stride 2, ceil mode.
Tensor<double> max_pool(const Tensor<double>& x) {
  const auto out_dim = [](int n) { return std::max(1, (n - 3 + 1) / 2 + 1); };
  Tensor<double> y(x.n, x.c, out_dim(x.h), out_dim(x.w));
  for (int i = 0; i < x.n; ++i)
    for (int c = 0; c < x.c; ++c)
      for (int oy = 0; oy < y.h; ++oy)
        for (int ox = 0; ox < y.w; ++ox) {
          double m = -std::numeric_limits<double>::infinity();
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy * 2 + ky, ix = ox * 2 + kx;
              if (iy < x.h && ix < x.w) m = std::max(m, x.at(i, c, iy, ix));
            }
          y.at(i, c, oy, ox) = m;
        }
  return y;
}

Tensor<double> relu(Tensor<double> x) {
  for (double& v : x.data) v = std::max(v, 0.0);
  return x;
}

struct Fire {
  std::unique_ptr<nn::Conv2d<double>> squeeze, expand1, expand3;

  Fire(const std::string& name, int in, int sq, int e1, int e3)
      : squeeze(std::make_unique<nn::Conv2d<double>>(name + ".squeeze", in, sq, 1, 1, 0)),
        expand1(std::make_unique<nn::Conv2d<double>>(name + ".expand1x1", sq, e1, 1, 1, 0)),
        expand3(std::make_unique<nn::Conv2d<double>>(name + ".expand3x3", sq, e3, 3, 1, 1)) {}

  Tensor<double> forward(const Tensor<double>& x) {
    const Tensor<double> s = relu(squeeze->forward(x));
    return relu(concat_channels(expand1->forward(s), expand3->forward(s)));
  }
  void collect(nn::ParamList<double>& out) {
    squeeze->collect(out);
    expand1->collect(out);
    expand3->collect(out);
  }
};

class SqueezeLpips {
 public:
  static constexpr int kTaps = 7;

  SqueezeLpips() : conv1_(std::make_unique<nn::Conv2d<double>>("lpips.conv1", 3, 64, 3, 2, 0)) {
    const int spec[8][4] = {{64, 16, 64, 64},   {128, 16, 64, 64},   {128, 32, 128, 128}, {256, 32, 128, 128},
                            {256, 48, 192, 192}, {384, 48, 192, 192}, {384, 64, 256, 256}, {512, 64, 256, 256}};
    for (int i = 0; i < 8; ++i) {
      fires_.emplace_back("lpips.fire" + std::to_string(i + 2), spec[i][0], spec[i][1], spec[i][2], spec[i][3]);
    }
    const int tap_ch[kTaps] = {64, 128, 256, 384, 384, 512, 512};
    for (int t = 0; t < kTaps; ++t) lin_.emplace_back("lpips.lin" + std::to_string(t) + ".weight",
                                                      std::vector<int>{1, tap_ch[t], 1, 1});
  }

  void init_random(std::uint64_t seed) {
    Rng rng(seed);
    for (nn::Parameter<double>* p : params()) {
      if (p->name.size() > 5 && p->name.compare(p->name.size() - 5, 5, ".bias") == 0) {
        std::fill(p->value.begin(), p->value.end(), 0.0);
        continue;
      }
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < p->shape.size(); ++d) fan_in *= static_cast<std::size_t>(p->shape[d]);
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (double& v : p->value) v = sd * rng.normal();
    }
    // Linear heads are non-negative and sum to one per tap.
    for (auto& l : lin_) {
      double s = 0.0;
      for (double& v : l.value) s += (v = rng.unit() + 1e-3);
      for (double& v : l.value) v /= s;
    }
  }

  void load(const std::filesystem::path& path) {
    const ArrayArchive a = ArrayArchive::load(path);
    for (nn::Parameter<double>* p : params()) {
      if (!a.contains(p->name)) throw ArchiveError("arrays", "LPIPS weight '" + p->name + "' missing in " + path.string());
      const NamedArray& arr = a.at(p->name);
      if (arr.numel() != p->numel()) throw ArchiveError("arrays", "LPIPS weight '" + p->name + "' has wrong size");
      std::visit([&](const auto& v) {
        for (std::size_t i = 0; i < v.size(); ++i) p->value[i] = static_cast<double>(v[i]);
      }, arr.data);
    }
  }

  // Input in [-1, 1], one channel.
  std::vector<Tensor<double>> taps(const Image& img) {
    constexpr double shift[3] = {-0.030, -0.088, -0.188};
    constexpr double scale[3] = {0.458, 0.448, 0.450};
    Tensor<double> x(1, 3, img.h, img.w);
    for (int c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < img.size(); ++k) x.plane(0, c)[k] = (img.px[k] - shift[c]) / scale[c];
    std::vector<Tensor<double>> out;
    Tensor<double> h = relu(conv1_->forward(x));
    out.push_back(h);
    h = max_pool(h);
    h = fires_[0].forward(h);
    h = fires_[1].forward(h);
    out.push_back(h);
    h = max_pool(h);
    h = fires_[2].forward(h);
    h = fires_[3].forward(h);
    out.push_back(h);
    h = max_pool(h);
    for (int f = 4; f < 8; ++f) {
      h = fires_[static_cast<std::size_t>(f)].forward(h);
      out.push_back(h);
    }
    return out;
  }

  double distance(const Image& a, const Image& b) {
    const auto fa = taps(a);
    const auto fb = taps(b);
    double total = 0.0;
    for (int t = 0; t < kTaps; ++t) {
      const Tensor<double>& x = fa[static_cast<std::size_t>(t)];
      const Tensor<double>& y = fb[static_cast<std::size_t>(t)];
      const std::size_t p = x.plane_size();
      double acc = 0.0;
      for (std::size_t j = 0; j < p; ++j) {
        double na = 0.0, nb = 0.0;
        for (int c = 0; c < x.c; ++c) {
          na += x.plane(0, c)[j] * x.plane(0, c)[j];
          nb += y.plane(0, c)[j] * y.plane(0, c)[j];
        }
        na = std::sqrt(na) + 1e-10;
        nb = std::sqrt(nb) + 1e-10;
        double s = 0.0;
        for (int c = 0; c < x.c; ++c) {
          const double d = x.plane(0, c)[j] / na - y.plane(0, c)[j] / nb;
          s += lin_[static_cast<std::size_t>(t)].value[static_cast<std::size_t>(c)] * d * d;
        }
        acc += s;
      }
      total += acc / static_cast<double>(p);
    }
    return total;
  }

 private:
  nn::ParamList<double> params() {
    nn::ParamList<double> out;
    conv1_->collect(out);
    for (Fire& f : fires_) f.collect(out);
    for (auto& l : lin_) out.push_back(&l);
    return out;
  }

  std::unique_ptr<nn::Conv2d<double>> conv1_;
  std::vector<Fire> fires_;
  std::vector<nn::Parameter<double>> lin_;
};

std::shared_ptr<SqueezeLpips> lpips_model(const MetricConfig& cfg) {
  static std::mutex mu;
  static std::map<std::string, std::shared_ptr<SqueezeLpips>> cache;
  const std::string key = cfg.lpips_backbone == LpipsBackbone::kFixedRandom
                              ? "random:" + std::to_string(cfg.lpips_seed)
                              : "file:" + cfg.lpips_weights;
  std::lock_guard<std::mutex> lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  auto m = std::make_shared<SqueezeLpips>();
  if (cfg.lpips_backbone == LpipsBackbone::kFixedRandom) {
    m->init_random(cfg.lpips_seed);
  } else {
    if (cfg.lpips_weights.empty() || !std::filesystem::exists(cfg.lpips_weights)) {
      throw ConfigError("LPIPS backbone squeeze_pretrained needs converted SqueezeNet weights; set lpips_weights to "
                        "an archive path (got '" + cfg.lpips_weights + "') or use lpips_backbone = fixed_random");
    }
    m->load(cfg.lpips_weights);
  }
  cache.emplace(key, m);
  return m;
}

}  // namespace

LpipsBackbone parse_lpips_backbone(const std::string& s) {
  if (s == "squeeze_pretrained") return LpipsBackbone::kSqueezePretrained;
  if (s == "fixed_random") return LpipsBackbone::kFixedRandom;
  throw ConfigError("unknown LPIPS backbone '" + s + "'");
}

std::string to_string(LpipsBackbone b) {
  return b == LpipsBackbone::kFixedRandom ? "fixed_random" : "squeeze_pretrained";
}

void MetricConfig::validate() const {
  if (!(max_intensity > 0.0)) throw ConfigError("max_intensity must be positive");
  if (!(ssim_k1 > 0.0) || !(ssim_k2 > 0.0)) throw ConfigError("SSIM constants must be positive");
  if (ssim_window < 1 || ssim_window % 2 == 0 || roi_ssim_window < 1 || roi_ssim_window % 2 == 0) {
    throw ConfigError("SSIM windows must be odd and positive");
  }
  if (!(ssim_sigma > 0.0)) throw ConfigError("SSIM sigma must be positive");
}

double rmse(const Image& a, const Image& b) {
  require_same_shape(a, b, "rmse");
  return std::sqrt(mse(a, b));
}

double psnr(const Image& a, const Image& b, const MetricConfig& cfg) {
  const double r = rmse(a, b);
  if (r == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(cfg.max_intensity) - 20.0 * std::log10(r);
}

double ssim(const Image& a, const Image& b, const MetricConfig& cfg) { return ssim(a, b, cfg, cfg.ssim_window); }

double ssim(const Image& a, const Image& b, const MetricConfig& cfg, int window) {
  require_same_shape(a, b, "ssim");
  if (a.h < window || a.w < window) {
    throw InvariantError("ssim: image " + a.shape_str() + " is smaller than the " + std::to_string(window) + "x" +
                         std::to_string(window) + " window");
  }
  const auto g = gaussian_window(window, cfg.ssim_sigma);
  Image aa(a.h, a.w), bb(a.h, a.w), ab(a.h, a.w);
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa.px[i] = a.px[i] * a.px[i];
    bb.px[i] = b.px[i] * b.px[i];
    ab.px[i] = a.px[i] * b.px[i];
  }
  const Image mu_a = filter_valid(a, g), mu_b = filter_valid(b, g);
  const Image e_aa = filter_valid(aa, g), e_bb = filter_valid(bb, g), e_ab = filter_valid(ab, g);
  const double c1 = std::pow(cfg.ssim_k1 * cfg.max_intensity, 2);
  const double c2 = std::pow(cfg.ssim_k2 * cfg.max_intensity, 2);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a.px[i], mb = mu_b.px[i];
    const double va = e_aa.px[i] - ma * ma, vb = e_bb.px[i] - mb * mb, cov = e_ab.px[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

double lpips(const Image& a, const Image& b, const MetricConfig& cfg) {
  require_same_shape(a, b, "lpips");
  if (a == b) return 0.0;
  // The backbone expects [-1, 1] inputs.
  const double half = cfg.max_intensity / 2.0;
  Image na(a.h, a.w), nb(b.h, b.w);
  for (std::size_t i = 0; i < a.size(); ++i) {
    na.px[i] = a.px[i] / half - 1.0;
    nb.px[i] = b.px[i] / half - 1.0;
  }
  auto model = lpips_model(cfg);
  static std::mutex run_mu;  // the layers cache activations
  std::lock_guard<std::mutex> lock(run_mu);
  // Average both argument orders so the distance is exactly symmetric.
  return 0.5 * (model->distance(na, nb) + model->distance(nb, na));
}

std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

std::string to_string(MetricScope s) { return s == MetricScope::kWholeImage ? "whole_image" : "tamper_square"; }

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << "pair,scope,RMSE,PSNR,LPIPS,SSIM\n";
  for (const MetricRow& r : rows) {
    out << r.pair << ',' << to_string(r.scope) << ',' << format_metric(r.rmse) << ',' << format_metric(r.psnr) << ','
        << format_metric(r.lpips) << ',' << format_metric(r.ssim) << '\n';
  }
  out << "# intensity scale: HU + 1024 (12-bit, MAX_I = 4095), an assumption; per-slice metrics averaged\n";
  return out.str();
}

MetricRow whole_image_metrics(const Image& a, const Image& b, const std::string& pair, const MetricConfig& cfg) {
  MetricRow r;
  r.pair = pair;
  r.scope = MetricScope::kWholeImage;
  r.rmse = rmse(a, b);
  r.psnr = psnr(a, b, cfg);
  r.lpips = lpips(a, b, cfg);
  r.ssim = ssim(a, b, cfg);
  return r;
}

MetricRow roi_metrics(const Image& a, const Image& b, const TamperRegion& region, const std::string& pair,
                      const MetricConfig& cfg) {
  const Image qa = extract_square(a, region), qb = extract_square(b, region);
  MetricRow r;
  r.pair = pair;
  r.scope = MetricScope::kTamperSquare;
  r.rmse = rmse(qa, qb);
  r.psnr = psnr(qa, qb, cfg);
  r.lpips = lpips(qa, qb, cfg);
  r.ssim = ssim(qa, qb, cfg, cfg.roi_ssim_window);
  return r;
}

Image abs_difference(const Image& a, const Image& b) {
  require_same_shape(a, b, "heatmap");
  Image d(a.h, a.w);
  for (std::size_t i = 0; i < a.size(); ++i) d.px[i] = std::abs(a.px[i] - b.px[i]);
  return d;
}

std::vector<std::uint8_t> heatmap(const Image& a, const Image& b) {
  const Image d = abs_difference(a, b);
  const auto [lo_it, hi_it] = std::minmax_element(d.px.begin(), d.px.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<std::uint8_t> out(d.size(), 0);
  if (hi == 0.0) return out;
  if (hi == lo) {
    std::fill(out.begin(), out.end(), 255);
    return out;
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (d.px[i] - lo) / (hi - lo)));
  }
  return out;
}

void write_png_gray(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, int h, int w) {
  if (pixels.size() != static_cast<std::size_t>(h) * w) throw InvariantError("png: pixel count does not match dims");
  FILE* f = std::fopen(path.string().c_str(), "wb");
  if (!f) throw Error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * w));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path, int& h, int& w) {
  FILE* f = std::fopen(path.string().c_str(), "rb");
  if (!f) throw IngestError("cannot read " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    throw IngestError("libpng failed reading " + path.string());
  }
  png_init_io(png, f);
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(f);
    throw IngestError(path.string() + " is not an 8-bit grayscale PNG");
  }
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) png_read_row(png, out.data() + static_cast<std::size_t>(y) * w, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(f);
  return out;
}

Image to_metric_scale(const Image& normalized) {
  Image out(normalized.h, normalized.w);
  for (std::size_t i = 0; i < out.size(); ++i) out.px[i] = (normalized.px[i] + 1.0) * 2047.5;
  return out;
}

}  // namespace ctguard
