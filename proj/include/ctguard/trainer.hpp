#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ctguard/archive.hpp"
#include "ctguard/manipulator.hpp"
#include "ctguard/models.hpp"
#include "ctguard/objective.hpp"
#include "ctguard/perturbation.hpp"
#include "ctguard/volume_io.hpp"

namespace ctguard {

struct TrainingConfig {
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double alpha = 1.0;
  std::uint64_t seed = 0;
  ManipulatorKind manipulator_kind = ManipulatorKind::kInpaintSurrogate;
  /// Weight archive for network manipulators; empty means train a surrogate.
  std::string manipulator_weights;
  PerturbationMode perturbation_mode = PerturbationMode::kFixedUniversal;
  double perturbation_sigma = 1.0;
  std::string device_hint = "cpu";

  int trunk_width = 64;
  int residual_blocks = 3;
  int disc_base_width = 32;
  int region_size = 32;

  /// Identity pre-fit of the generator before adversarial training.
  int warmup_steps = 0;
  double warmup_lr = 1e-3;

  int surrogate_epochs = 20;
  int surrogate_mask = 16;
  int surrogate_patches = 1024;

  /// "phantom" or a slice-cache index file.
  std::string data = "phantom";
  int phantom_volumes = 10;
  int phantom_slices = 25;
  int phantom_size = 64;
  double train_ratio = 0.8;
  std::string output_dir;

  /// Throws ConfigError naming the first bad field.
  void validate() const;
  /// Sets one field from text. Unknown keys and malformed values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  /// Ordered key -> value text; parse(to_text()) reproduces the config exactly.
  [[nodiscard]] std::map<std::string, std::string> fields() const;
  [[nodiscard]] std::string to_text() const;
  static TrainingConfig parse(const std::string& text);
  static TrainingConfig load(const std::filesystem::path& path);

  [[nodiscard]] GeneratorSpec generator_spec() const;
  [[nodiscard]] DiscriminatorSpec discriminator_spec() const;
  [[nodiscard]] LossWeights loss_weights() const { return {alpha}; }

  bool operator==(const TrainingConfig&) const = default;
};

/// Generator-side loss on a protected batch: g_adv from D, L_m from tampering
/// each sample's region with M. When `grad_xp` is given it receives
/// d(g_total)/d(x^p); neither D nor M accumulates parameter gradients.
template <typename T>
LossBreakdown generator_objective(Discriminator<T>& d, DifferentiableManipulator<T>& m, const Tensor<T>& xp,
                                  const std::vector<TamperRegion>& regions, double alpha, Tensor<T>* grad_xp);

/// Everything needed to resume training or protect scans.
struct Checkpoint {
  TrainingConfig config;
  int epoch = 0;
  /// Generator, discriminator, optimizer moments, perturbation and
  /// manipulator arrays.
  ArrayArchive state;

  [[nodiscard]] ArrayArchive to_archive() const;
  static Checkpoint from_archive(const ArrayArchive& a);
  [[nodiscard]] ManipulatorHandle manipulator() const;
  [[nodiscard]] Perturbation perturbation() const;

  bool operator==(const Checkpoint& o) const { return to_archive() == o.to_archive(); }
};

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
/// Throws ArchiveError naming the failing section; IngestError if absent.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Owns the networks, optimizers and perturbation stream of one training run.
class Trainer {
 public:
  Trainer(const TrainingConfig& cfg, const ManipulatorHandle& m, int height, int width);
  explicit Trainer(const Checkpoint& c);

  /// One discriminator update followed by one generator update.
  /// `step` seeds the per-sample tamper regions.
  LossBreakdown train_step(const std::vector<const Image*>& batch, std::uint64_t step);

  /// Identity regression MSE(G(x, delta), x) for cfg.warmup_steps steps.
  void warm_start(const std::vector<Image>& slices);

  [[nodiscard]] Checkpoint checkpoint(int epoch);

  Generator<float>& generator() { return *g_; }
  Discriminator<float>& discriminator() { return *d_; }
  DifferentiableManipulator<float>& manipulator_net() { return *m_net_; }
  [[nodiscard]] const ManipulatorHandle& manipulator() const { return m_; }
  [[nodiscard]] const TrainingConfig& config() const { return cfg_; }

 private:
  void build(int height, int width);

  TrainingConfig cfg_;
  ManipulatorHandle m_;
  Perturbation perturbation_;
  std::unique_ptr<Generator<float>> g_;
  std::unique_ptr<Discriminator<float>> d_;
  std::unique_ptr<DifferentiableManipulator<float>> m_net_;
  std::unique_ptr<nn::Adam<float>> opt_g_, opt_d_;
};

struct FitHooks {
  std::function<void(std::int64_t step, const LossBreakdown&)> on_step;
  std::function<void(int epoch, const Checkpoint&)> on_epoch;
};

/// Steps per epoch: ceil(n / batch_size).
int steps_per_epoch(std::size_t n, int batch_size);
/// Order of the training set in a given epoch; a pure function of (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

/// Builds the manipulator a config asks for (training the surrogate on
/// `slices` when no weights are given).
ManipulatorHandle resolve_manipulator(const TrainingConfig& cfg, const std::vector<Image>& slices);

/// Full training run. When cfg.output_dir is set, writes one checkpoint per
/// epoch, the final checkpoint and the per-step loss log there.
Checkpoint fit(const std::vector<Image>& slices, const TrainingConfig& cfg, const FitHooks& hooks = {});
/// Same, with a manipulator supplied by the caller.
Checkpoint fit(const std::vector<Image>& slices, const TrainingConfig& cfg, const ManipulatorHandle& m,
               const FitHooks& hooks = {});

/// Loads the slices named by cfg.data and splits them by volume id.
struct TrainingData {
  std::vector<SliceRecord> train;
  std::vector<SliceRecord> test;
};
TrainingData load_training_data(const TrainingConfig& cfg);

/// Protection of normalized slices; the result stays normalized.
std::vector<Image> protect_slices(const std::vector<Image>& normalized, const Checkpoint& c);
/// Slice-by-slice protection of a HU volume.
CtVolume protect(const CtVolume& scan, const Checkpoint& c);

}  // namespace ctguard
