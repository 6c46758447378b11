#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ctguard {

/// Row-major 2D real array. Used for normalized slices, HU-scale slices and
/// metric inputs alike.
struct Image {
  int h = 0;
  int w = 0;
  std::vector<double> px;

  Image() = default;
  Image(int h_, int w_, double fill = 0.0)
      : h(h_), w(w_), px(static_cast<std::size_t>(h_) * w_, fill) {}

  double& at(int y, int x) { return px[static_cast<std::size_t>(y) * w + x]; }
  [[nodiscard]] double at(int y, int x) const { return px[static_cast<std::size_t>(y) * w + x]; }
  [[nodiscard]] std::size_t size() const { return px.size(); }
  [[nodiscard]] bool same_shape(const Image& o) const { return h == o.h && w == o.w; }
  [[nodiscard]] std::string shape_str() const {
    return std::to_string(h) + "x" + std::to_string(w);
  }
  bool operator==(const Image&) const = default;
};

}  // namespace ctguard
