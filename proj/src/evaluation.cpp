#include "ctguard/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ctguard/error.hpp"
#include "ctguard/rng.hpp"
#include "ctguard/volume_io.hpp"

#ifndef CTGUARD_VERSION
#define CTGUARD_VERSION "dev"
#endif

namespace ctguard {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <typename N>
N parse_num(const std::string& key, const std::string& v) {
  N out{};
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("plan key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("plan key '" + key + "': expected true/false, got '" + v + "'");
}

MetricRow average(const std::vector<const MetricRow*>& rows) {
  MetricRow m = *rows.front();
  m.rmse = m.psnr = m.lpips = m.ssim = 0.0;
  for (const MetricRow* r : rows) {
    m.rmse += r->rmse;
    m.psnr += r->psnr;
    m.lpips += r->lpips;
    m.ssim += r->ssim;
  }
  const double n = static_cast<double>(rows.size());
  m.rmse /= n;
  m.psnr /= n;
  m.lpips /= n;
  m.ssim /= n;
  return m;
}

MetricReport aggregate(const std::vector<MetricRow>& samples, MetricScope scope) {
  MetricReport rep;
  for (const char* pair : {kPairProtected, kPairProtectedTampered, kPairUnprotectedTampered}) {
    std::vector<const MetricRow*> sel;
    for (const MetricRow& r : samples)
      if (r.scope == scope && r.pair == pair) sel.push_back(&r);
    if (!sel.empty()) rep.rows.push_back(average(sel));
  }
  return rep;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f << text;
  if (!f) throw Error("failed writing " + p.string());
}

std::string fmt(double v) { return format_metric(v); }

}  // namespace

// ------------------------------------------------------------------- plan

void EvaluationPlan::validate() const {
  if (regions_per_slice < 1) throw ConfigError("regions_per_slice must be at least 1");
  if (heatmap_samples < 0) throw ConfigError("heatmap_samples must be non-negative");
  if (!whole_image && !tamper_square) throw ConfigError("at least one metric scope is required");
  metrics.validate();
}

void EvaluationPlan::set(const std::string& key_in, const std::string& value_in) {
  const std::string key = trim(key_in), v = trim(value_in);
  if (key == "checkpoint") checkpoint = v;
  else if (key == "manipulator") manipulator = v;
  else if (key == "regions_per_slice") regions_per_slice = parse_num<int>(key, v);
  else if (key == "region_seed") region_seed = parse_num<std::uint64_t>(key, v);
  else if (key == "whole_image") whole_image = parse_bool(key, v);
  else if (key == "tamper_square") tamper_square = parse_bool(key, v);
  else if (key == "heatmap_samples") heatmap_samples = parse_num<int>(key, v);
  else if (key == "max_intensity") metrics.max_intensity = parse_num<double>(key, v);
  else if (key == "lpips_backbone") metrics.lpips_backbone = parse_lpips_backbone(v);
  else if (key == "lpips_weights") metrics.lpips_weights = v;
  else if (key == "lpips_seed") metrics.lpips_seed = parse_num<std::uint64_t>(key, v);
  else if (key == "output_dir") output_dir = v;
  else throw ConfigError("unknown plan key '" + key + "'");
}

std::map<std::string, std::string> EvaluationPlan::fields() const {
  return {{"checkpoint", checkpoint},
          {"manipulator", manipulator},
          {"regions_per_slice", std::to_string(regions_per_slice)},
          {"region_seed", std::to_string(region_seed)},
          {"whole_image", whole_image ? "true" : "false"},
          {"tamper_square", tamper_square ? "true" : "false"},
          {"heatmap_samples", std::to_string(heatmap_samples)},
          {"max_intensity", fmt(metrics.max_intensity)},
          {"lpips_backbone", to_string(metrics.lpips_backbone)},
          {"lpips_weights", metrics.lpips_weights},
          {"lpips_seed", std::to_string(metrics.lpips_seed)},
          {"output_dir", output_dir}};
}

EvaluationPlan EvaluationPlan::parse(const std::string& text) {
  EvaluationPlan p;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("plan line '" + line + "': expected key = value");
    p.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return p;
}

EvaluationPlan EvaluationPlan::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read plan file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

// ---------------------------------------------------------------- results

std::vector<double> EvaluationResult::column(const std::string& pair, MetricScope scope,
                                             double MetricRow::*field) const {
  std::vector<double> out;
  for (const MetricRow& r : samples)
    if (r.pair == pair && r.scope == scope) out.push_back(r.*field);
  return out;
}

const MetricRow& EvaluationResult::row(const std::string& pair, MetricScope scope) const {
  const MetricReport& rep = scope == MetricScope::kWholeImage ? whole_image : tamper_square;
  for (const MetricRow& r : rep.rows)
    if (r.pair == pair) return r;
  throw InvariantError("no '" + pair + "' row at scope " + to_string(scope));
}

std::vector<TamperRegion> evaluation_regions(int h, int w, int size, int count, std::uint64_t seed,
                                             std::size_t index) {
  Rng rng(mix_seed(seed, index));
  std::vector<TamperRegion> out;
  for (int i = 0; i < count; ++i) out.push_back(random_region(h, w, size, rng));
  return out;
}

Image stored_metric_image(const Image& normalized) {
  Image out(normalized.h, normalized.w);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double hu = std::round((normalized.px[i] + 1.0) * 2047.5 - 1024.0);
    out.px[i] = std::clamp(hu, static_cast<double>(kHuMin), static_cast<double>(kHuMax)) + 1024.0;
  }
  return out;
}

EvaluationResult evaluate(const std::vector<Image>& test, const Checkpoint& c, const ManipulatorHandle& m,
                          const EvaluationPlan& plan) {
  return evaluate(
      test, [&c](const std::vector<Image>& s) { return protect_slices(s, c); }, c.config.region_size, m, plan);
}

EvaluationResult evaluate(const std::vector<Image>& test, const Protector& protector, int size,
                          const ManipulatorHandle& m, const EvaluationPlan& plan) {
  plan.validate();
  if (test.empty()) throw InvariantError("evaluation needs at least one test slice");
  const std::vector<Image> protected_slices = protector(test);
  if (protected_slices.size() != test.size()) throw InvariantError("protector changed the number of slices");
  EvaluationResult res;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Image& x = test[i];
    // The protected scan as it would be stored: integer HU.
    Image xp = protected_slices[i];
    {
      const Image q = stored_metric_image(xp);
      for (std::size_t k = 0; k < xp.size(); ++k) xp.px[k] = q.px[k] / 2047.5 - 1.0;
    }
    const Image real = stored_metric_image(x);
    const Image prot = stored_metric_image(xp);
    if (plan.whole_image) res.samples.push_back(whole_image_metrics(real, prot, kPairProtected, plan.metrics));
    for (const TamperRegion& r : evaluation_regions(x.h, x.w, size, plan.regions_per_slice, plan.region_seed, i)) {
      const Image prot_t = stored_metric_image(tamper(xp, r, m));
      const Image unprot_t = stored_metric_image(tamper(x, r, m));
      if (plan.whole_image) {
        res.samples.push_back(whole_image_metrics(real, prot_t, kPairProtectedTampered, plan.metrics));
        res.samples.push_back(whole_image_metrics(real, unprot_t, kPairUnprotectedTampered, plan.metrics));
      }
      if (plan.tamper_square) {
        res.samples.push_back(roi_metrics(real, prot, r, kPairProtected, plan.metrics));
        res.samples.push_back(roi_metrics(real, prot_t, r, kPairProtectedTampered, plan.metrics));
        res.samples.push_back(roi_metrics(real, unprot_t, r, kPairUnprotectedTampered, plan.metrics));
      }
    }
    // One heatmap pair per sampled slice, at its first region.
    if (static_cast<int>(i) < plan.heatmap_samples) {
      const TamperRegion r = evaluation_regions(x.h, x.w, size, 1, plan.region_seed, i).front();
      const std::string stem = "slice_" + std::to_string(i);
      res.heatmaps.push_back({stem + "_protected", x.h, x.w, heatmap(real, prot)});
      res.heatmaps.push_back({stem + "_protected_tampered", x.h, x.w, heatmap(real, stored_metric_image(tamper(xp, r, m)))});
    }
  }
  if (plan.whole_image) res.whole_image = aggregate(res.samples, MetricScope::kWholeImage);
  if (plan.tamper_square) res.tamper_square = aggregate(res.samples, MetricScope::kTamperSquare);
  return res;
}

EvaluationResult evaluate(const EvaluationPlan& plan) {
  plan.validate();
  if (plan.checkpoint.empty()) throw ConfigError("evaluation plan needs a checkpoint");
  const Checkpoint c = load_checkpoint(plan.checkpoint);
  const TrainingData data = load_training_data(c.config);
  std::vector<Image> test;
  for (const SliceRecord& r : data.test) test.push_back(r.pixels);
  ManipulatorHandle m;
  if (plan.manipulator == "checkpoint") m = c.manipulator();
  else if (plan.manipulator == "blur_blend") m = ManipulatorHandle::blur_blend();
  else m = ManipulatorHandle::load(plan.manipulator);
  EvaluationResult res = evaluate(test, c, m, plan);
  if (!plan.output_dir.empty()) render_reports(res, plan, plan.output_dir);
  return res;
}

// --------------------------------------------------------------- ablation

std::vector<double> default_alpha_grid() { return {0.2, 0.4, 0.6, 0.8, 1.0}; }

std::string AblationResult::to_csv() const {
  std::ostringstream out;
  out << "alpha,RMSE,PSNR,LPIPS,SSIM,whole_SSIM\n";
  for (const AblationRow& r : rows) {
    out << fmt(r.alpha) << ',' << fmt(r.square.rmse) << ',' << fmt(r.square.psnr) << ',' << fmt(r.square.lpips) << ','
        << fmt(r.square.ssim) << ',' << fmt(r.whole.ssim) << '\n';
  }
  out << "# tamper-square metrics of real vs tampered-protected; whole_SSIM is real vs protected\n";
  return out.str();
}

AblationResult ablation_sweep(const TrainingConfig& base, const std::vector<double>& grid,
                              const std::vector<Image>& train, const std::vector<Image>& test,
                              const ManipulatorHandle& m, const EvaluationPlan& plan) {
  if (grid.empty()) throw ConfigError("alpha grid is empty");
  std::vector<double> alphas = grid;
  std::sort(alphas.begin(), alphas.end());
  AblationResult res;
  for (double a : alphas) {
    TrainingConfig cfg = base;
    cfg.alpha = a;
    if (!base.output_dir.empty()) cfg.output_dir = base.output_dir + "/alpha_" + fmt(a);
    Checkpoint c;
    try {
      c = fit(train, cfg, m);
    } catch (const Error& e) {
      throw TrainingError("ablation at alpha " + fmt(a) + ": " + e.what());
    }
    const EvaluationResult ev = evaluate(test, c, m, plan);
    AblationRow row;
    row.alpha = a;
    row.square = ev.row(kPairProtectedTampered, MetricScope::kTamperSquare);
    row.whole = ev.row(kPairProtected, MetricScope::kWholeImage);
    row.config_text = cfg.to_text();
    res.rows.push_back(std::move(row));
  }
  return res;
}

// ---------------------------------------------------------------- reports

void render_reports(const EvaluationResult& r, const EvaluationPlan& plan, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "tables", ec);
  if (ec) throw Error("cannot create " + (dir / "tables").string() + ": " + ec.message());
  if (!r.whole_image.rows.empty()) write_text(dir / "tables" / "whole_image.csv", r.whole_image.to_csv());
  if (!r.tamper_square.rows.empty()) write_text(dir / "tables" / "tamper_square.csv", r.tamper_square.to_csv());
  if (!r.heatmaps.empty()) {
    std::filesystem::create_directories(dir / "heatmaps", ec);
    if (ec) throw Error("cannot create " + (dir / "heatmaps").string() + ": " + ec.message());
    for (const HeatmapImage& h : r.heatmaps) write_png_gray(dir / "heatmaps" / (h.name + ".png"), h.pixels, h.h, h.w);
  }
  std::string manifest = "code_version = " + std::string(CTGUARD_VERSION) + "\n";
  for (const auto& [k, v] : plan.fields()) manifest += "plan." + k + " = " + v + "\n";
  manifest += "slices = " + std::to_string(r.column(kPairProtectedTampered, MetricScope::kTamperSquare,
                                                    &MetricRow::ssim).size()) + "\n";
  write_text(dir / "manifest.txt", manifest);
}

void render_ablation(const AblationResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "tables", ec);
  if (ec) throw Error("cannot create " + (dir / "tables").string() + ": " + ec.message());
  write_text(dir / "tables" / "ablation.csv", r.to_csv());
  std::string snap;
  for (const AblationRow& row : r.rows) snap += "[alpha " + fmt(row.alpha) + "]\n" + row.config_text;
  write_text(dir / "tables" / "ablation_configs.txt", snap);
}

}  // namespace ctguard
