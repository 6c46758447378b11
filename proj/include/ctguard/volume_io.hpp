#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctguard/image.hpp"

namespace ctguard {

inline constexpr int kHuMin = -1024;
inline constexpr int kHuMax = 3071;

/// Stack of CT slices in Hounsfield units, clamped to [kHuMin, kHuMax].
struct CtVolume {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::int16_t> voxels;  // slice-major, row-major within a slice
  /// (slice, row, column) spacing in mm, when known.
  std::optional<std::array<double, 3>> spacing;
  std::string source_id;

  [[nodiscard]] std::span<const std::int16_t> slice(int i) const {
    return {voxels.data() + static_cast<std::size_t>(i) * h * w, static_cast<std::size_t>(h) * w};
  }
  std::span<std::int16_t> slice(int i) {
    return {voxels.data() + static_cast<std::size_t>(i) * h * w, static_cast<std::size_t>(h) * w};
  }
  /// Throws InvariantError when dims or values break the volume contract.
  void validate() const;
  bool operator==(const CtVolume&) const = default;
};

struct SliceRecord {
  Image pixels;  // normalized, every value in [-1, 1]
  std::string volume_id;
  int slice_index = 0;
};

struct DatasetSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::uint64_t seed = 0;
};

struct PhantomSpec {
  int size = 64;
  int n_slices = 1;
  double nodule_probability = 0.5;
  std::uint64_t seed = 0;
};

enum class RawDtype { kInt16, kUInt16, kInt32, kFloat32, kUInt8 };

RawDtype parse_raw_dtype(const std::string& code);
std::size_t bytes_per_voxel(RawDtype d);

/// Reads a directory holding one uncompressed DICOM series (Part-10 files,
/// implicit or explicit little-endian). Slices are ordered by their position
/// along the slice normal, ties broken by instance number.
CtVolume load_dicom_series(const std::filesystem::path& directory);

/// Headerless little-endian dump, slice-major.
CtVolume load_raw_volume(const std::filesystem::path& file, int n, int h, int w, RawDtype dtype);

/// Writes the volume as int16 little-endian, slice-major.
void save_raw_volume(const CtVolume& vol, const std::filesystem::path& file);

/// p -> (p + 1024) / 2047.5 - 1
Image normalize_slice(std::span<const std::int16_t> hu, int h, int w);
Image normalize_slice(const Image& hu);
/// Exact inverse of normalize_slice.
Image denormalize_slice(const Image& pixels);

std::vector<SliceRecord> volume_to_slices(const CtVolume& vol);
/// Rounds HU-scale slices back into a volume (clamped), keeping metadata from `like`.
CtVolume slices_to_volume(const std::vector<Image>& hu_slices, const CtVolume& like);

DatasetSplit split_dataset(const std::vector<std::string>& volume_ids, double ratio, std::uint64_t seed);

CtVolume generate_phantom(const PhantomSpec& spec);

/// One float32 file per slice plus a plain-text index
/// ("volume_id, slice_index, path" per line).
void write_slice_cache(const std::filesystem::path& dir, const std::vector<SliceRecord>& slices);
std::vector<SliceRecord> read_slice_cache(const std::filesystem::path& index_file);

}  // namespace ctguard
