#pragma once

// Just enough DICOM Part-10 to ingest uncompressed single-frame CT slices:
// implicit / explicit VR little endian, monochrome, 8 or 16 bits allocated.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ctguard::dicom {

struct Slice {
  int rows = 0;
  int columns = 0;
  int bits_allocated = 16;
  int pixel_representation = 1;  // 1 = signed
  int samples_per_pixel = 1;
  double rescale_slope = 1.0;
  double rescale_intercept = 0.0;
  std::optional<std::array<double, 3>> image_position;
  std::optional<std::array<double, 6>> image_orientation;
  std::optional<int> instance_number;
  std::optional<std::array<double, 2>> pixel_spacing;
  std::optional<double> slice_thickness;
  std::string series_uid;
  std::vector<std::int32_t> stored;  // stored values, row-major
};

/// Throws IngestError naming the file on any decoding problem.
Slice read_file(const std::filesystem::path& path);

/// True when the file carries the "DICM" marker after the 128-byte preamble.
bool looks_like_dicom(const std::filesystem::path& path);

/// Writes an explicit-VR little-endian Part-10 file (16-bit stored values).
void write_file(const std::filesystem::path& path, const Slice& slice);

}  // namespace ctguard::dicom
