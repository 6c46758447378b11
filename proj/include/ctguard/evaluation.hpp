#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ctguard/manipulator.hpp"
#include "ctguard/metrics.hpp"
#include "ctguard/trainer.hpp"

namespace ctguard {

inline const char* const kPairProtected = "real_vs_protected";
inline const char* const kPairProtectedTampered = "real_vs_protected_tampered";
inline const char* const kPairUnprotectedTampered = "real_vs_unprotected_tampered";

struct EvaluationPlan {
  std::string checkpoint;
  /// "checkpoint" uses the manipulator stored with the checkpoint; otherwise
  /// a kind name ("blur_blend") or a weight archive path.
  std::string manipulator = "checkpoint";
  int regions_per_slice = 1;
  std::uint64_t region_seed = 0;
  bool whole_image = true;
  bool tamper_square = true;
  int heatmap_samples = 4;
  MetricConfig metrics;
  std::string output_dir;

  void validate() const;
  void set(const std::string& key, const std::string& value);
  [[nodiscard]] std::map<std::string, std::string> fields() const;
  static EvaluationPlan parse(const std::string& text);
  static EvaluationPlan load(const std::filesystem::path& path);
};

struct HeatmapImage {
  std::string name;
  int h = 0, w = 0;
  std::vector<std::uint8_t> pixels;
};

struct EvaluationResult {
  MetricReport whole_image;
  MetricReport tamper_square;
  /// One row per (slice, region, pair, scope), in evaluation order.
  std::vector<MetricRow> samples;
  std::vector<HeatmapImage> heatmaps;

  /// Per-sample values of one metric for a pair and scope.
  [[nodiscard]] std::vector<double> column(const std::string& pair, MetricScope scope,
                                           double MetricRow::*field) const;
  /// Averaged row for a pair and scope; throws if absent.
  [[nodiscard]] const MetricRow& row(const std::string& pair, MetricScope scope) const;
};

/// Tamper regions used for slice `index`; a pure function of (seed, index).
std::vector<TamperRegion> evaluation_regions(int h, int w, int size, int count, std::uint64_t seed,
                                             std::size_t index);

/// Quantizes normalized pixels to integer HU and returns them on the 12-bit
/// metric scale.
Image stored_metric_image(const Image& normalized);

/// Core protocol on normalized test slices.
EvaluationResult evaluate(const std::vector<Image>& test, const Checkpoint& c, const ManipulatorHandle& m,
                          const EvaluationPlan& plan);
/// Same protocol with any protection function (normalized in, normalized out).
using Protector = std::function<std::vector<Image>(const std::vector<Image>&)>;
EvaluationResult evaluate(const std::vector<Image>& test, const Protector& protector, int region_size,
                          const ManipulatorHandle& m, const EvaluationPlan& plan);
/// Loads the checkpoint and its test split, resolves the manipulator, and
/// writes reports when plan.output_dir is set.
EvaluationResult evaluate(const EvaluationPlan& plan);

struct AblationRow {
  double alpha = 0.0;
  MetricRow square;  // real_vs_protected_tampered, tamper-square scope
  MetricRow whole;   // real_vs_protected, whole-image scope
  std::string config_text;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // ascending alpha
  [[nodiscard]] std::string to_csv() const;
};

std::vector<double> default_alpha_grid();

/// One fit + evaluate per alpha; everything but alpha is shared.
AblationResult ablation_sweep(const TrainingConfig& base, const std::vector<double>& grid,
                              const std::vector<Image>& train, const std::vector<Image>& test,
                              const ManipulatorHandle& m, const EvaluationPlan& plan);

/// tables/whole_image.csv, tables/tamper_square.csv, heatmaps/*.png, manifest.txt
void render_reports(const EvaluationResult& r, const EvaluationPlan& plan, const std::filesystem::path& dir);
/// tables/ablation.csv
void render_ablation(const AblationResult& r, const std::filesystem::path& dir);

}  // namespace ctguard
