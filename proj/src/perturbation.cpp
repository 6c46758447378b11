#include "ctguard/perturbation.hpp"

#include "ctguard/error.hpp"
#include "ctguard/rng.hpp"

namespace ctguard {

namespace {

Image gaussian_field(int h, int w, double sigma, std::uint64_t seed) {
  Image f(h, w);
  Rng rng(seed);
  for (double& v : f.px) v = sigma * rng.normal();
  return f;
}

}  // namespace

PerturbationMode parse_perturbation_mode(const std::string& s) {
  if (s == "fixed_universal") return PerturbationMode::kFixedUniversal;
  if (s == "resampled_per_batch") return PerturbationMode::kResampledPerBatch;
  throw ConfigError("unknown perturbation mode '" + s + "'");
}

std::string to_string(PerturbationMode m) {
  return m == PerturbationMode::kFixedUniversal ? "fixed_universal" : "resampled_per_batch";
}

Perturbation sample_perturbation(int h, int w, double sigma, std::uint64_t seed, PerturbationMode mode) {
  if (h < 1 || w < 1) throw InvariantError("perturbation dims must be positive");
  if (!(sigma > 0.0)) throw InvariantError("perturbation sigma must be positive");
  Perturbation p;
  p.field = gaussian_field(h, w, sigma, seed);
  p.sigma = sigma;
  p.seed = seed;
  p.mode = mode;
  return p;
}

std::vector<Image> perturbation_for_batch(Perturbation& p, int batch_size) {
  if (batch_size < 1) throw InvariantError("batch size must be at least 1");
  std::vector<Image> out;
  out.reserve(batch_size);
  if (p.mode == PerturbationMode::kFixedUniversal) {
    out.assign(batch_size, p.field);
    return out;
  }
  for (int i = 0; i < batch_size; ++i) {
    out.push_back(gaussian_field(p.field.h, p.field.w, p.sigma, mix_seed(p.seed, p.draws)));
    ++p.draws;
  }
  return out;
}

}  // namespace ctguard
