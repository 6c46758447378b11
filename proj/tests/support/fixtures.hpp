#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ctguard/image.hpp"
#include "ctguard/rng.hpp"
#include "ctguard/trainer.hpp"
#include "ctguard/volume_io.hpp"

namespace fixtures {

// Fresh, empty directory under the system temp dir, unique per name.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("ctguard_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline ctguard::Image random_image(int h, int w, double lo, double hi, std::uint64_t seed) {
  ctguard::Rng rng(seed);
  ctguard::Image img(h, w);
  for (double& v : img.px) v = rng.uniform(lo, hi);
  return img;
}

// Normalized phantom slices.
inline std::vector<ctguard::Image> phantom_slices(int n, std::uint64_t seed, int size = 64) {
  const ctguard::CtVolume v = ctguard::generate_phantom({size, n, 0.5, seed});
  std::vector<ctguard::Image> out;
  for (const auto& r : ctguard::volume_to_slices(v)) out.push_back(r.pixels);
  return out;
}

// Smallest configuration the trainer accepts on 64x64 slices.
inline ctguard::TrainingConfig tiny_config() {
  ctguard::TrainingConfig c;
  c.epochs = 1;
  c.batch_size = 4;
  c.trunk_width = 4;
  c.residual_blocks = 1;
  c.disc_base_width = 2;
  c.surrogate_epochs = 1;
  c.surrogate_patches = 16;
  c.seed = 11;
  return c;
}

}  // namespace fixtures
