#include <fstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "ctguard/archive.hpp"
#include "ctguard/error.hpp"
#include "ctguard/perturbation.hpp"

using namespace ctguard;

TEST_CASE("archive round trip is exact") {
  ArrayArchive a;
  a.manifest["k"] = "v = w";
  a.put("f", {2, 2}, std::vector<float>{1.5f, -0.0f, 3e-38f, 7.f});
  a.put("d", {3}, std::vector<double>{0.1, 1e300, -2.5});
  a.put_i64("i", {1, -2, 1LL << 60});
  const ArrayArchive b = ArrayArchive::deserialize(a.serialize());
  CHECK(a == b);
  CHECK(b.manifest.at("k") == "v = w");
}

TEST_CASE("truncated or corrupt archives raise ArchiveError") {
  ArrayArchive a;
  a.put("x", {4}, std::vector<float>{1, 2, 3, 4});
  const std::string bytes = a.serialize();
  CHECK_THROWS_AS(ArrayArchive::deserialize(bytes.substr(0, bytes.size() - 3)), ArchiveError);
  std::string flipped = bytes;
  flipped[flipped.size() - 2] ^= 0x5a;
  CHECK_THROWS_AS(ArrayArchive::deserialize(flipped), ArchiveError);
  CHECK_THROWS_AS((void)a.f64("x"), ArchiveError);
  CHECK_THROWS_AS((void)a.f32("missing"), ArchiveError);
}

TEST_CASE("perturbation sampling is seeded") {
  const Perturbation a = sample_perturbation(512, 512, 1.0, 3);
  const Perturbation b = sample_perturbation(512, 512, 1.0, 3);
  CHECK(a.field == b.field);
  CHECK_FALSE(sample_perturbation(64, 64, 1.0, 4).field == sample_perturbation(64, 64, 1.0, 3).field);
  CHECK_THROWS_AS(sample_perturbation(64, 64, 0.0, 3), InvariantError);

  // Empirical moments of 262144 draws.
  double mean = 0, var = 0;
  for (double v : a.field.px) mean += v;
  mean /= a.field.size();
  for (double v : a.field.px) var += (v - mean) * (v - mean);
  var /= a.field.size();
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("batch fields follow the perturbation mode") {
  Perturbation fixed = sample_perturbation(64, 64, 1.0, 5);
  const auto batch = perturbation_for_batch(fixed, 16);
  REQUIRE(batch.size() == 16);
  for (const auto& f : batch) CHECK(f == fixed.field);
  CHECK(perturbation_for_batch(fixed, 1).front() == fixed.field);

  Perturbation resampled = sample_perturbation(64, 64, 1.0, 5, PerturbationMode::kResampledPerBatch);
  const auto two = perturbation_for_batch(resampled, 2);
  CHECK_FALSE(two[0] == two[1]);
  CHECK(parse_perturbation_mode(to_string(PerturbationMode::kResampledPerBatch)) ==
        PerturbationMode::kResampledPerBatch);
  CHECK_THROWS_AS(parse_perturbation_mode("sometimes"), ConfigError);
}
