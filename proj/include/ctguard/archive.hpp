#pragma once

// Flat named-array container used for model weights, manipulator weights and
// checkpoints. Layout (little-endian):
//
//   "MITSARC1"  u32 section_count
//   per section: u32 name_len, name, u64 payload_len, u32 crc32(payload), payload
//
// Two sections are written: "manifest" (key = value text lines) and "arrays".
// The arrays payload is u32 count, then per array: u32 name_len, name,
// u8 dtype (0 = f32, 1 = f64, 2 = i64), u32 ndim, i64 dims[ndim], raw data.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace ctguard {

struct NamedArray {
  std::vector<std::int64_t> shape;
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>> data;

  [[nodiscard]] std::size_t numel() const;
  bool operator==(const NamedArray&) const = default;
};

class ArrayArchive {
 public:
  std::map<std::string, std::string> manifest;

  void put(const std::string& name, std::vector<std::int64_t> shape, std::vector<float> values);
  void put(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> values);
  void put_i64(const std::string& name, std::vector<std::int64_t> values);

  [[nodiscard]] bool contains(const std::string& name) const { return arrays_.count(name) != 0; }
  /// Throws ArchiveError("arrays", ...) on a missing name or wrong dtype.
  [[nodiscard]] const std::vector<float>& f32(const std::string& name) const;
  [[nodiscard]] const std::vector<double>& f64(const std::string& name) const;
  [[nodiscard]] const std::vector<std::int64_t>& i64(const std::string& name) const;
  [[nodiscard]] const NamedArray& at(const std::string& name) const;
  [[nodiscard]] const std::map<std::string, NamedArray>& arrays() const { return arrays_; }
  /// Names beginning with `prefix`, in sorted order.
  [[nodiscard]] std::vector<std::string> names_with_prefix(const std::string& prefix) const;

  [[nodiscard]] std::string serialize() const;
  static ArrayArchive deserialize(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static ArrayArchive load(const std::filesystem::path& path);

  bool operator==(const ArrayArchive&) const = default;

 private:
  std::map<std::string, NamedArray> arrays_;
};

}  // namespace ctguard
