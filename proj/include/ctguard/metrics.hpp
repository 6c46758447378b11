#pragma once

// Image fidelity metrics. Inputs are real-valued images on a common intensity
// scale; reported numbers use the 12-bit scale (HU + 1024, MAX_I = 4095).

#include <filesystem>
#include <string>
#include <vector>

#include "ctguard/image.hpp"
#include "ctguard/manipulator.hpp"

namespace ctguard {

enum class LpipsBackbone { kSqueezePretrained, kFixedRandom };

LpipsBackbone parse_lpips_backbone(const std::string& s);
std::string to_string(LpipsBackbone b);

struct MetricConfig {
  double max_intensity = 4095.0;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  /// Window used for the 32x32 tamper-square scope.
  int roi_ssim_window = 7;
  LpipsBackbone lpips_backbone = LpipsBackbone::kFixedRandom;
  std::uint64_t lpips_seed = 20240;
  /// Archive holding converted SqueezeNet + LPIPS linear weights.
  std::string lpips_weights;

  void validate() const;
};

/// sqrt(mean((a - b)^2))
double rmse(const Image& a, const Image& b);
/// 20 log10(MAX_I) - 20 log10(rmse); +infinity when the images are identical.
double psnr(const Image& a, const Image& b, const MetricConfig& cfg = {});
/// Mean SSIM over all valid Gaussian windows of size cfg.ssim_window.
double ssim(const Image& a, const Image& b, const MetricConfig& cfg = {});
double ssim(const Image& a, const Image& b, const MetricConfig& cfg, int window);
/// Learned perceptual distance with the squeeze topology.
double lpips(const Image& a, const Image& b, const MetricConfig& cfg = {});

/// "inf" for the identical-image sentinel, shortest round-trip text otherwise.
std::string format_metric(double v);

enum class MetricScope { kWholeImage, kTamperSquare };
std::string to_string(MetricScope s);

struct MetricRow {
  std::string pair;
  MetricScope scope = MetricScope::kWholeImage;
  double rmse = 0.0;
  double psnr = 0.0;
  double lpips = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  /// Comma-separated table with a header row and a scale footnote.
  [[nodiscard]] std::string to_csv() const;
};

MetricRow whole_image_metrics(const Image& a, const Image& b, const std::string& pair, const MetricConfig& cfg = {});
/// All four metrics on the extracted squares, SSIM with cfg.roi_ssim_window.
MetricRow roi_metrics(const Image& a, const Image& b, const TamperRegion& r, const std::string& pair,
                      const MetricConfig& cfg = {});

/// |a - b| per pixel.
Image abs_difference(const Image& a, const Image& b);
/// Min-max scaled to 0..255; an all-zero difference stays all-zero.
std::vector<std::uint8_t> heatmap(const Image& a, const Image& b);
void write_png_gray(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, int h, int w);
std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path, int& h, int& w);

/// Normalized [-1, 1] pixels to the 12-bit metric scale.
Image to_metric_scale(const Image& normalized);

}  // namespace ctguard
