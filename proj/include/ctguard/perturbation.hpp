#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctguard/image.hpp"

namespace ctguard {

enum class PerturbationMode { kFixedUniversal, kResampledPerBatch };

PerturbationMode parse_perturbation_mode(const std::string& s);
std::string to_string(PerturbationMode m);

/// Image-agnostic Gaussian field fed to the generator's noise branch.
/// In resampled mode, draw k of the stream is a pure function of (seed, k),
/// so `draws` is the whole stream state.
struct Perturbation {
  Image field;
  double sigma = 1.0;
  std::uint64_t seed = 0;
  PerturbationMode mode = PerturbationMode::kFixedUniversal;
  std::uint64_t draws = 0;
};

/// I.i.d. Normal(0, sigma^2) entries, deterministic in (h, w, sigma, seed).
Perturbation sample_perturbation(int h, int w, double sigma, std::uint64_t seed,
                                 PerturbationMode mode = PerturbationMode::kFixedUniversal);

/// Fixed mode: `batch_size` copies of the stored field. Resampled mode: fresh
/// fields from the stream (advances `p.draws`).
std::vector<Image> perturbation_for_batch(Perturbation& p, int batch_size);

}  // namespace ctguard
