#include <cmath>
#include <fstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "ctguard/error.hpp"
#include "ctguard/trainer.hpp"

using namespace ctguard;

namespace {

std::vector<const Image*> pointers(const std::vector<Image>& v, std::size_t n) {
  std::vector<const Image*> out;
  for (std::size_t i = 0; i < n && i < v.size(); ++i) out.push_back(&v[i]);
  return out;
}

template <typename T>
std::vector<Buffer<T>> snapshot(const nn::ParamList<T>& ps) {
  std::vector<Buffer<T>> out;
  for (auto* p : ps) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_CASE("config text round trip and validation") {
  TrainingConfig c = fixtures::tiny_config();
  c.alpha = 0.6;
  c.learning_rate = 2e-4;
  c.output_dir = "runs/x";
  CHECK(TrainingConfig::parse(c.to_text()) == c);

  TrainingConfig d;
  d.set("adam_betas", "0.5, 0.999");
  CHECK(d.beta1 == 0.5);
  CHECK(d.beta2 == 0.999);
  CHECK_THROWS_AS(d.set("alpah", "1"), ConfigError);
  CHECK_THROWS_AS(d.set("epochs", "two"), ConfigError);
  d.epochs = 0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = {};
  d.beta1 = 1.0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = {};
  d.learning_rate = 0.0;
  CHECK_THROWS_AS(d.validate(), ConfigError);

  const TrainingConfig defaults;
  CHECK(defaults.batch_size == 16);
  CHECK(defaults.learning_rate == 2e-4);
  CHECK(defaults.beta1 == 0.5);
  CHECK(defaults.beta2 == 0.999);
  CHECK(defaults.epochs == 20);
}

TEST_CASE("epoch bookkeeping") {
  CHECK(steps_per_epoch(200, 16) == 13);
  CHECK(steps_per_epoch(16, 16) == 1);
  CHECK(epoch_order(50, 3, 2) == epoch_order(50, 3, 2));
  CHECK(epoch_order(50, 3, 2) != epoch_order(50, 3, 1));
}

TEST_CASE("a training step updates D and G and leaves M untouched") {
  const auto slices = fixtures::phantom_slices(4, 1);
  const TrainingConfig cfg = fixtures::tiny_config();
  const ManipulatorHandle m = resolve_manipulator(cfg, slices);
  Trainer t(cfg, m, 64, 64);
  const auto d0 = snapshot(t.discriminator().parameters());
  const auto g0 = snapshot(t.generator().parameters());
  const auto m0 = snapshot(t.manipulator_net().parameters());
  const LossBreakdown lb = t.train_step(pointers(slices, 4), 0);
  CHECK(std::isfinite(lb.d_loss));
  CHECK(lb.g_total == doctest::Approx(lb.g_adv - cfg.alpha * lb.l_m));
  CHECK(snapshot(t.discriminator().parameters()) != d0);
  CHECK(snapshot(t.generator().parameters()) != g0);
  CHECK(snapshot(t.manipulator_net().parameters()) == m0);

  Trainer u(cfg, m, 64, 64);
  const LossBreakdown lb2 = u.train_step(pointers(slices, 4), 0);
  CHECK(lb2.d_loss == lb.d_loss);
  CHECK(lb2.g_total == lb.g_total);
}

TEST_CASE("non-finite losses abort with the offending term") {
  const auto slices = fixtures::phantom_slices(2, 1);
  const TrainingConfig cfg = fixtures::tiny_config();
  Trainer t(cfg, ManipulatorHandle::blur_blend(), 64, 64);
  for (auto* p : t.generator().parameters())
    for (auto& v : p->value) v = std::nanf("");
  CHECK_THROWS_WITH_AS(t.train_step(pointers(slices, 2), 0), doctest::Contains("non-finite"), TrainingError);
}

TEST_CASE("fit writes per-epoch checkpoints and a log") {
  const auto dir = fixtures::scratch_dir("fit");
  const auto slices = fixtures::phantom_slices(8, 2);
  TrainingConfig cfg = fixtures::tiny_config();
  cfg.output_dir = dir.string();
  int epochs_seen = 0;
  std::int64_t steps_seen = 0;
  FitHooks hooks;
  hooks.on_epoch = [&](int, const Checkpoint&) { ++epochs_seen; };
  hooks.on_step = [&](std::int64_t, const LossBreakdown&) { ++steps_seen; };
  const Checkpoint c = fit(slices, cfg, hooks);
  CHECK(epochs_seen == 1);
  CHECK(steps_seen == 2);
  CHECK(c.epoch == 1);
  CHECK(std::filesystem::exists(dir / "checkpoint_epoch_1.mca"));
  CHECK(std::filesystem::exists(dir / "checkpoint_final.mca"));
  std::ifstream log(dir / "train_log.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header == "step,d_loss,g_adv,l_m,g_total");
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoints round trip bit-exactly and protect identically") {
  const auto dir = fixtures::scratch_dir("ckpt");
  const auto slices = fixtures::phantom_slices(4, 3);
  const Checkpoint c = fit(slices, fixtures::tiny_config());
  save_checkpoint(c, dir / "c.mca");
  const Checkpoint back = load_checkpoint(dir / "c.mca");
  CHECK(back == c);
  CHECK(back.config == c.config);
  CHECK(protect_slices(slices, back) == protect_slices(slices, c));

  // Truncation is detected.
  const auto size = std::filesystem::file_size(dir / "c.mca");
  std::filesystem::resize_file(dir / "c.mca", size / 2);
  CHECK_THROWS_AS(load_checkpoint(dir / "c.mca"), ArchiveError);
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "absent.mca"), doctest::Contains("checkpoint not found"), IngestError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("protect keeps shape, range and determinism") {
  const auto slices = fixtures::phantom_slices(4, 4);
  const Checkpoint c = fit(slices, fixtures::tiny_config());
  const CtVolume vol = generate_phantom({64, 3, 0.5, 8});
  const CtVolume p1 = protect(vol, c);
  CHECK(p1.n == 3);
  CHECK(p1.h == 64);
  CHECK(p1.w == 64);
  CHECK(protect(vol, c) == p1);
  for (auto v : p1.voxels) {
    CHECK(v >= kHuMin);
    CHECK(v <= kHuMax);
  }
}

TEST_CASE("phantom training data splits by volume") {
  TrainingConfig cfg;
  cfg.phantom_volumes = 5;
  cfg.phantom_slices = 3;
  const TrainingData d = load_training_data(cfg);
  CHECK(d.train.size() == 12);
  CHECK(d.test.size() == 3);
  for (const auto& tr : d.train)
    for (const auto& te : d.test) REQUIRE(tr.volume_id != te.volume_id);
}
