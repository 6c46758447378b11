#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "ctguard/error.hpp"
#include "ctguard/evaluation.hpp"

using namespace ctguard;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

EvaluationPlan small_plan() {
  EvaluationPlan p;
  p.heatmap_samples = 1;
  return p;
}

}  // namespace

TEST_CASE("a passthrough protector leaves real-vs-protected at zero error") {
  const auto test = fixtures::phantom_slices(3, 5);
  const Protector passthrough = [](const std::vector<Image>& s) { return s; };
  const EvaluationResult r = evaluate(test, passthrough, 32, ManipulatorHandle::blur_blend(), small_plan());
  CHECK(r.row(kPairProtected, MetricScope::kWholeImage).rmse == 0.0);
  CHECK(r.row(kPairProtected, MetricScope::kTamperSquare).rmse == 0.0);
  // Without protection both tampered pairs coincide.
  CHECK(r.row(kPairProtectedTampered, MetricScope::kTamperSquare).ssim ==
        r.row(kPairUnprotectedTampered, MetricScope::kTamperSquare).ssim);
}

TEST_CASE("evaluation rows carry four finite or infinite values") {
  const auto slices = fixtures::phantom_slices(4, 6);
  const Checkpoint c = fit(slices, fixtures::tiny_config());
  EvaluationPlan plan = small_plan();
  plan.regions_per_slice = 2;
  const EvaluationResult r = evaluate(slices, c, c.manipulator(), plan);
  CHECK(r.whole_image.rows.size() == 3);
  CHECK(r.tamper_square.rows.size() == 3);
  CHECK(r.samples.size() == 4 * (1 + 2 * 2 + 2 * 3));
  for (const MetricRow& row : r.samples) {
    CHECK(!std::isnan(row.rmse));
    CHECK(!std::isnan(row.psnr));
    CHECK(std::isfinite(row.lpips));
    CHECK(std::isfinite(row.ssim));
  }
  CHECK(r.heatmaps.size() == 2);
}

TEST_CASE("evaluation regions are a pure function of seed and index") {
  CHECK(evaluation_regions(64, 64, 32, 3, 1, 4) == evaluation_regions(64, 64, 32, 3, 1, 4));
  CHECK(evaluation_regions(64, 64, 32, 3, 1, 4) != evaluation_regions(64, 64, 32, 3, 1, 5));
}

TEST_CASE("plan parsing") {
  const EvaluationPlan p = EvaluationPlan::parse("checkpoint = runs/a.mca\nregions_per_slice = 3\n# note\n");
  CHECK(p.checkpoint == "runs/a.mca");
  CHECK(p.regions_per_slice == 3);
  CHECK_THROWS_AS(EvaluationPlan::parse("colour = red\n"), ConfigError);
  EvaluationPlan bad;
  bad.regions_per_slice = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  EvaluationPlan missing;
  missing.checkpoint = "/nonexistent/c.mca";
  CHECK_THROWS_AS(evaluate(missing), IngestError);
}

TEST_CASE("reports render deterministically") {
  const auto test = fixtures::phantom_slices(2, 7);
  const Protector passthrough = [](const std::vector<Image>& s) { return s; };
  EvaluationPlan plan = small_plan();
  const EvaluationResult r = evaluate(test, passthrough, 32, ManipulatorHandle::blur_blend(), plan);
  const auto a = fixtures::scratch_dir("render_a"), b = fixtures::scratch_dir("render_b");
  render_reports(r, plan, a);
  render_reports(r, plan, b);
  for (const char* f : {"tables/whole_image.csv", "tables/tamper_square.csv", "manifest.txt",
                        "heatmaps/slice_0_protected_tampered.png"}) {
    CAPTURE(f);
    REQUIRE(std::filesystem::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }

  plan.heatmap_samples = 0;
  const auto c = fixtures::scratch_dir("render_c");
  render_reports(evaluate(test, passthrough, 32, ManipulatorHandle::blur_blend(), plan), plan, c);
  int pngs = 0;
  if (std::filesystem::exists(c / "heatmaps"))
    for (const auto& e : std::filesystem::directory_iterator(c / "heatmaps")) pngs += e.path().extension() == ".png";
  CHECK(pngs == 0);
  for (const auto& d : {a, b, c}) std::filesystem::remove_all(d);
}

TEST_CASE("ablation over the default grid yields one row per alpha") {
  const auto train = fixtures::phantom_slices(4, 8);
  const auto test = fixtures::phantom_slices(2, 9);
  TrainingConfig base = fixtures::tiny_config();
  const ManipulatorHandle m = resolve_manipulator(base, train);
  EvaluationPlan plan = small_plan();
  plan.heatmap_samples = 0;
  const AblationResult r = ablation_sweep(base, default_alpha_grid(), train, test, m, plan);
  REQUIRE(r.rows.size() == 5);
  CHECK(r.rows.front().alpha == 0.2);
  CHECK(r.rows.back().alpha == 1.0);

  const auto dir = fixtures::scratch_dir("ablation");
  render_ablation(r, dir);
  std::ifstream f(dir / "tables/ablation.csv");
  std::string line;
  int data_rows = 0;
  std::getline(f, line);
  CHECK(line.rfind("alpha,", 0) == 0);
  while (std::getline(f, line))
    if (!line.empty() && line[0] != '#') ++data_rows;
  CHECK(data_rows == 5);
  std::filesystem::remove_all(dir);
}
