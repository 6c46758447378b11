#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fixtures.hpp"
#include "ctguard/image.hpp"

namespace fixtures {

struct NamedPair {
  std::string name;
  ctguard::Image a, b;
};

// Five small image pairs on the 12-bit metric scale.
inline std::vector<NamedPair> crafted_metric_pairs() {
  using ctguard::Image;
  std::vector<NamedPair> out;
  out.push_back({"uniform noise 16x16", random_image(16, 16, 0, 4095, 1), random_image(16, 16, 0, 4095, 2)});

  Image ramp(16, 16), ramp_off(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      ramp.at(y, x) = 100.0 * x + 37.0 * y;
      ramp_off.at(y, x) = ramp.at(y, x) + 25.0;
    }
  out.push_back({"ramp vs offset ramp", ramp, ramp_off});

  Image cb(12, 12), inv(12, 12);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) {
      cb.at(y, x) = ((x + y) % 2) ? 4095.0 : 0.0;
      inv.at(y, x) = 4095.0 - cb.at(y, x);
    }
  out.push_back({"checkerboard vs inverse", cb, inv});

  Image blob(13, 15, 1024.0);
  for (int y = 4; y < 9; ++y)
    for (int x = 5; x < 11; ++x) blob.at(y, x) = 1100.0 + 10.0 * x;
  Image noisy = blob;
  ctguard::Rng rng(3);
  for (double& v : noisy.px) v += 20.0 * rng.normal();
  out.push_back({"blob vs noisy blob", blob, noisy});

  Image lo(11, 11, 300.0), hi = random_image(11, 11, 2000, 2100, 4);
  out.push_back({"constant vs band noise 11x11", lo, hi});
  return out;
}

}  // namespace fixtures
