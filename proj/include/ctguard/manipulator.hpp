#pragma once

// The frozen manipulation model and the square cut/paste geometry around it.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ctguard/archive.hpp"
#include "ctguard/image.hpp"
#include "ctguard/nn.hpp"
#include "ctguard/rng.hpp"

namespace ctguard {

/// Square [cx - size/2, cx + size/2) x [cy - size/2, cy + size/2).
struct TamperRegion {
  int cx = 0;
  int cy = 0;
  int size = 32;

  [[nodiscard]] int x0() const { return cx - size / 2; }
  [[nodiscard]] int y0() const { return cy - size / 2; }
  bool operator==(const TamperRegion&) const = default;
};

/// Throws InvariantError unless the whole square lies inside an h x w image.
void check_region(const TamperRegion& r, int h, int w);
/// Uniform over all valid centers.
TamperRegion random_region(int h, int w, int size, Rng& rng);

Image extract_square(const Image& image, const TamperRegion& r);
Image paste_square(const Image& image, const Image& patch, const TamperRegion& r);

enum class ManipulatorKind { kBlurBlend, kInpaintSurrogate, kExternal };

ManipulatorKind parse_manipulator_kind(const std::string& s);
std::string to_string(ManipulatorKind k);

/// Gaussian blur (sigma 2, 9x9, reflect-101 border) blended 0.7 / 0.3 with
/// the patch mean.
Image blur_blend_manipulate(const Image& patch);

/// Immutable manipulator: a kind plus (for network kinds) a weight archive.
/// Network archives carry a "topology" manifest entry, for example
/// "conv(2,32,3,1,1);relu;conv(32,1,3,1,1);tanh", and "mask_input" (0/1).
/// With mask_input = 1 the network sees the patch with its central
/// mask_size x mask_size square zeroed plus the binary mask as a second channel.
class ManipulatorHandle {
 public:
  ManipulatorHandle() = default;

  static ManipulatorHandle blur_blend();
  static ManipulatorHandle network(ManipulatorKind kind, ArrayArchive weights);
  /// Reads a network archive from disk; the kind is taken from its manifest
  /// when present, otherwise `external`.
  static ManipulatorHandle load(const std::string& path);
  /// 1 -> 1 channel 3x3 conv with a unit center tap: returns its input.
  static ManipulatorHandle identity();

  [[nodiscard]] ManipulatorKind kind() const { return kind_; }
  [[nodiscard]] bool has_weights() const { return static_cast<bool>(weights_); }
  /// Throws InvariantError for blur_blend handles.
  [[nodiscard]] const ArrayArchive& weights() const;

  /// m(patch) for every patch; patches must be size x size.
  [[nodiscard]] std::vector<Image> apply(const std::vector<Image>& patches) const;
  [[nodiscard]] Image apply(const Image& patch) const;

 private:
  ManipulatorKind kind_ = ManipulatorKind::kBlurBlend;
  std::shared_ptr<const ArrayArchive> weights_;
};

/// paste_square(image, m(extract_square(image, r)), r)
Image tamper(const Image& image, const TamperRegion& r, const ManipulatorHandle& m);

/// Batched, differentiable view of a handle used inside training. Its
/// parameters never receive gradients; backward returns d/d(patch) only.
template <typename T>
class DifferentiableManipulator {
 public:
  explicit DifferentiableManipulator(const ManipulatorHandle& handle);

  /// patches: [N,1,S,S]
  Tensor<T> forward(const Tensor<T>& patches);
  Tensor<T> backward(const Tensor<T>& grad_out);

  /// Network parameters (empty for blur_blend).
  nn::ParamList<T> parameters() { return nn::parameters_of<T>(net_); }
  [[nodiscard]] ManipulatorKind kind() const { return kind_; }

 private:
  ManipulatorKind kind_;
  nn::Sequential<T> net_;
  bool mask_input_ = false;
  int mask_size_ = 0;
  int patch_h_ = 0, patch_w_ = 0;
};

struct SurrogateOptions {
  int patch_size = 32;
  int mask_size = 16;
  int batch_size = 16;
  double learning_rate = 1e-3;
  /// Random patches drawn per epoch.
  int patches_per_epoch = 1024;
};

/// Encoder-decoder trained to rebuild a patch whose centre is masked, from
/// its surrounding ring. Slices are normalized images.
ManipulatorHandle train_inpaint_surrogate(const std::vector<Image>& slices, int epochs, std::uint64_t seed,
                                          const SurrogateOptions& opt = {});

/// Topology string of the default inpainting surrogate.
std::string inpaint_surrogate_topology();

}  // namespace ctguard
