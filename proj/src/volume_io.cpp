#include "ctguard/volume_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "ctguard/dicom.hpp"
#include "ctguard/error.hpp"
#include "ctguard/rng.hpp"

namespace ctguard {

namespace {

constexpr double kHalfRange = 2047.5;  // (kHuMax - kHuMin) / 2

std::int16_t clamp_hu(double v) {
  const double r = std::round(v);
  return static_cast<std::int16_t>(std::clamp(r, static_cast<double>(kHuMin), static_cast<double>(kHuMax)));
}

double dot3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

}  // namespace

void CtVolume::validate() const {
  if (n < 1) throw InvariantError("volume must hold at least one slice");
  if (h < 64 || w < 64) {
    throw InvariantError("volume slices must be at least 64x64, got " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  if (voxels.size() != static_cast<std::size_t>(n) * h * w) {
    throw InvariantError("voxel buffer size does not match dims");
  }
  for (auto v : voxels) {
    if (v < kHuMin || v > kHuMax) throw InvariantError("voxel value outside calibrated range");
  }
}

RawDtype parse_raw_dtype(const std::string& code) {
  static const std::map<std::string, RawDtype> kCodes = {
      {"int16", RawDtype::kInt16},     {"i16", RawDtype::kInt16},   {"uint16", RawDtype::kUInt16},
      {"u16", RawDtype::kUInt16},      {"int32", RawDtype::kInt32}, {"i32", RawDtype::kInt32},
      {"float32", RawDtype::kFloat32}, {"f32", RawDtype::kFloat32}, {"uint8", RawDtype::kUInt8},
      {"u8", RawDtype::kUInt8},
  };
  auto it = kCodes.find(code);
  if (it == kCodes.end()) throw ConfigError("unknown raw dtype '" + code + "'");
  return it->second;
}

std::size_t bytes_per_voxel(RawDtype d) {
  switch (d) {
    case RawDtype::kInt16:
    case RawDtype::kUInt16: return 2;
    case RawDtype::kInt32:
    case RawDtype::kFloat32: return 4;
    case RawDtype::kUInt8: return 1;
  }
  return 0;
}

CtVolume load_dicom_series(const std::filesystem::path& directory) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(directory)) {
    throw IngestError("DICOM directory '" + directory.string() + "' does not exist");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(directory)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IngestError("no DICOM slices found in '" + directory.string() + "'");

  struct Loaded {
    dicom::Slice slice;
    fs::path path;
    double position = 0.0;
  };
  std::vector<Loaded> loaded;
  loaded.reserve(files.size());
  for (const auto& f : files) loaded.push_back({dicom::read_file(f), f, 0.0});

  const auto& first = loaded.front().slice;
  for (const auto& l : loaded) {
    if (l.slice.rows != first.rows || l.slice.columns != first.columns) {
      throw IngestError("inconsistent slice geometry in '" + l.path.string() + "': " +
                        std::to_string(l.slice.rows) + "x" + std::to_string(l.slice.columns) +
                        " vs " + std::to_string(first.rows) + "x" + std::to_string(first.columns));
    }
    if (l.slice.series_uid != first.series_uid) {
      throw IngestError("file '" + l.path.string() + "' belongs to a different series");
    }
  }

  std::array<double, 3> normal{0.0, 0.0, 1.0};
  if (first.image_orientation) {
    const auto& o = *first.image_orientation;
    normal = {o[1] * o[5] - o[2] * o[4], o[2] * o[3] - o[0] * o[5], o[0] * o[4] - o[1] * o[3]};
  }
  for (auto& l : loaded) {
    l.position = l.slice.image_position ? dot3(*l.slice.image_position, normal) : 0.0;
  }
  std::stable_sort(loaded.begin(), loaded.end(), [](const Loaded& a, const Loaded& b) {
    if (a.position != b.position) return a.position < b.position;
    return a.slice.instance_number.value_or(0) < b.slice.instance_number.value_or(0);
  });

  CtVolume vol;
  vol.n = static_cast<int>(loaded.size());
  vol.h = first.rows;
  vol.w = first.columns;
  vol.source_id = directory.filename().string();
  if (vol.source_id.empty()) vol.source_id = directory.parent_path().filename().string();
  vol.voxels.reserve(static_cast<std::size_t>(vol.n) * vol.h * vol.w);
  for (const auto& l : loaded) {
    for (auto sv : l.slice.stored) {
      vol.voxels.push_back(clamp_hu(sv * l.slice.rescale_slope + l.slice.rescale_intercept));
    }
  }
  if (first.pixel_spacing) {
    double dz = first.slice_thickness.value_or(0.0);
    if (loaded.size() > 1 && loaded[1].position != loaded[0].position) {
      dz = std::abs(loaded[1].position - loaded[0].position);
    }
    vol.spacing = std::array<double, 3>{dz, (*first.pixel_spacing)[0], (*first.pixel_spacing)[1]};
  }
  return vol;
}

CtVolume load_raw_volume(const std::filesystem::path& file, int n, int h, int w, RawDtype dtype) {
  if (n < 1 || h < 1 || w < 1) throw ConfigError("raw volume dims must be positive");
  std::ifstream f(file, std::ios::binary);
  if (!f) throw IngestError("cannot open raw volume '" + file.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  const std::size_t count = static_cast<std::size_t>(n) * h * w;
  const std::size_t expected = count * bytes_per_voxel(dtype);
  if (bytes.size() != expected) {
    throw IngestError("raw volume '" + file.string() + "' size mismatch: expected " + std::to_string(expected) +
                      " bytes, got " + std::to_string(bytes.size()));
  }
  CtVolume vol;
  vol.n = n;
  vol.h = h;
  vol.w = w;
  vol.source_id = file.stem().string();
  vol.voxels.resize(count);
  const char* p = bytes.data();
  for (std::size_t i = 0; i < count; ++i) {
    double v = 0.0;
    switch (dtype) {
      case RawDtype::kInt16: { std::int16_t x; std::memcpy(&x, p + 2 * i, 2); v = x; break; }
      case RawDtype::kUInt16: { std::uint16_t x; std::memcpy(&x, p + 2 * i, 2); v = x; break; }
      case RawDtype::kInt32: { std::int32_t x; std::memcpy(&x, p + 4 * i, 4); v = x; break; }
      case RawDtype::kFloat32: {
        float x;
        std::memcpy(&x, p + 4 * i, 4);
        if (!std::isfinite(x)) throw IngestError("raw volume '" + file.string() + "' holds a non-finite voxel");
        v = x;
        break;
      }
      case RawDtype::kUInt8: v = static_cast<std::uint8_t>(p[i]); break;
    }
    vol.voxels[i] = clamp_hu(v);
  }
  return vol;
}

void save_raw_volume(const CtVolume& vol, const std::filesystem::path& file) {
  std::ofstream f(file, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + file.string() + "'");
  f.write(reinterpret_cast<const char*>(vol.voxels.data()),
          static_cast<std::streamsize>(vol.voxels.size() * sizeof(std::int16_t)));
}

Image normalize_slice(std::span<const std::int16_t> hu, int h, int w) {
  if (hu.size() != static_cast<std::size_t>(h) * w) throw InvariantError("slice buffer does not match dims");
  Image out(h, w);
  for (std::size_t i = 0; i < hu.size(); ++i) {
    if (hu[i] < kHuMin || hu[i] > kHuMax) throw InvariantError("HU value outside calibrated range");
    out.px[i] = (static_cast<double>(hu[i]) + 1024.0) / kHalfRange - 1.0;
  }
  return out;
}

Image normalize_slice(const Image& hu) {
  Image out(hu.h, hu.w);
  for (std::size_t i = 0; i < hu.size(); ++i) {
    const double v = hu.px[i];
    if (!std::isfinite(v)) throw InvariantError("non-finite HU value");
    if (v < kHuMin || v > kHuMax) throw InvariantError("HU value outside calibrated range");
    out.px[i] = (v + 1024.0) / kHalfRange - 1.0;
  }
  return out;
}

Image denormalize_slice(const Image& pixels) {
  Image out(pixels.h, pixels.w);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double v = pixels.px[i];
    if (!(v >= -1.0 && v <= 1.0)) throw InvariantError("normalized value outside [-1, 1]");
    out.px[i] = (v + 1.0) * kHalfRange - 1024.0;
  }
  return out;
}

std::vector<SliceRecord> volume_to_slices(const CtVolume& vol) {
  std::vector<SliceRecord> out;
  out.reserve(vol.n);
  for (int i = 0; i < vol.n; ++i) out.push_back({normalize_slice(vol.slice(i), vol.h, vol.w), vol.source_id, i});
  return out;
}

CtVolume slices_to_volume(const std::vector<Image>& hu_slices, const CtVolume& like) {
  if (static_cast<int>(hu_slices.size()) != like.n) throw InvariantError("slice count mismatch");
  CtVolume out = like;
  for (int i = 0; i < like.n; ++i) {
    const Image& s = hu_slices[i];
    if (s.h != like.h || s.w != like.w) throw InvariantError("slice shape mismatch");
    auto dst = out.slice(i);
    for (std::size_t j = 0; j < s.size(); ++j) dst[j] = clamp_hu(s.px[j]);
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<std::string>& volume_ids, double ratio, std::uint64_t seed) {
  if (volume_ids.empty()) throw InvariantError("cannot split an empty id list");
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvariantError("split ratio must lie in (0, 1)");
  std::vector<std::string> order = volume_ids;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(order.size())));
  DatasetSplit s;
  s.seed = seed;
  s.train_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return s;
}

CtVolume generate_phantom(const PhantomSpec& spec) {
  if (spec.size < 32) throw InvariantError("phantom size must be at least 32");
  if (spec.n_slices < 1) throw InvariantError("phantom needs at least one slice");
  if (!(spec.nodule_probability >= 0.0 && spec.nodule_probability <= 1.0)) {
    throw InvariantError("nodule probability must lie in [0, 1]");
  }
  const int s = spec.size;
  const double sz = s;
  CtVolume vol;
  vol.n = spec.n_slices;
  vol.h = s;
  vol.w = s;
  vol.spacing = std::array<double, 3>{1.0, 1.0, 1.0};
  vol.source_id = "phantom-" + std::to_string(spec.seed);
  vol.voxels.resize(static_cast<std::size_t>(vol.n) * s * s);

  Rng rng(spec.seed);
  auto uniform = [&](double lo, double hi) { return rng.uniform(lo, hi); };

  for (int k = 0; k < vol.n; ++k) {
    const double jitter = sz / 32.0;
    const double cx = sz / 2.0 + uniform(-jitter, jitter) * 0.75;
    const double cy = sz / 2.0 + uniform(-jitter, jitter) * 0.75;
    const double ax = sz * 0.44 + uniform(-jitter, jitter);
    const double ay = sz * 0.34 + uniform(-jitter, jitter);
    struct Ellipse {
      double cx, cy, rx, ry;
      [[nodiscard]] bool inside(double x, double y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return dx * dx + dy * dy <= 1.0;
      }
    };
    const Ellipse body{cx, cy, ax, ay};
    Ellipse lungs[2];
    for (int side = 0; side < 2; ++side) {
      const double sign = side == 0 ? -1.0 : 1.0;
      lungs[side] = {cx + sign * ax * 0.46, cy + uniform(-jitter, jitter) * 0.5,
                     ax * 0.30 + uniform(-jitter, jitter) * 0.5, ay * 0.68 + uniform(-jitter, jitter) * 0.5};
    }
    bool nodule = rng.unit() < spec.nodule_probability;
    double nx = 0, ny = 0, nr = 0;
    if (nodule) {
      const Ellipse& lung = lungs[rng.next() & 1];
      const double max_r = std::min(lung.rx, lung.ry) - 1.0;
      nr = std::min(uniform(6.0, 12.0) / 2.0, max_r);
      if (nr < 1.0) {
        nodule = false;
      } else {
        // Centre within the lung shrunk by the radius keeps the disc inside it.
        const double t = uniform(0.0, 6.283185307179586);
        const double rho = std::sqrt(rng.unit()) * 0.8;
        nx = lung.cx + std::cos(t) * rho * (lung.rx - nr);
        ny = lung.cy + std::sin(t) * rho * (lung.ry - nr);
      }
    }
    auto dst = vol.slice(k);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        double v = -1000.0;
        if (body.inside(px, py)) v = 40.0;
        if (lungs[0].inside(px, py) || lungs[1].inside(px, py)) v = -700.0;
        if (nodule) {
          const double dx = px - nx, dy = py - ny;
          if (dx * dx + dy * dy <= nr * nr) v = 60.0;
        }
        v += 10.0 * rng.normal();
        dst[static_cast<std::size_t>(y) * s + x] = clamp_hu(v);
      }
    }
  }
  return vol;
}

void write_slice_cache(const std::filesystem::path& dir, const std::vector<SliceRecord>& slices) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream index(dir / "index.txt", std::ios::trunc);
  if (!index) throw Error("cannot write slice index in '" + dir.string() + "'");
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const SliceRecord& r = slices[i];
    const std::string name = "slice_" + std::to_string(i) + ".f32";
    std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
    const std::int32_t dims[2] = {r.pixels.h, r.pixels.w};
    f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    for (double v : r.pixels.px) {
      const auto x = static_cast<float>(v);
      f.write(reinterpret_cast<const char*>(&x), sizeof(x));
    }
    if (!f) throw Error("cannot write slice file '" + (dir / name).string() + "'");
    index << r.volume_id << ", " << r.slice_index << ", " << name << "\n";
  }
}

std::vector<SliceRecord> read_slice_cache(const std::filesystem::path& index_file) {
  std::ifstream index(index_file);
  if (!index) throw IngestError("cannot open slice index '" + index_file.string() + "'");
  std::vector<SliceRecord> out;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, idx, path;
    if (!std::getline(ss, id, ',') || !std::getline(ss, idx, ',') || !std::getline(ss, path)) {
      throw IngestError("malformed slice index line '" + line + "'");
    }
    auto trim = [](std::string v) {
      const auto b = v.find_first_not_of(' ');
      const auto e = v.find_last_not_of(' ');
      return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
    };
    SliceRecord r;
    r.volume_id = trim(id);
    r.slice_index = std::stoi(trim(idx));
    std::filesystem::path p = trim(path);
    if (p.is_relative()) p = index_file.parent_path() / p;
    std::ifstream f(p, std::ios::binary);
    std::int32_t dims[2];
    if (!f.read(reinterpret_cast<char*>(dims), sizeof(dims)) || dims[0] < 1 || dims[1] < 1) {
      throw IngestError("unreadable slice file '" + p.string() + "'");
    }
    r.pixels = Image(dims[0], dims[1]);
    for (double& v : r.pixels.px) {
      float x;
      if (!f.read(reinterpret_cast<char*>(&x), sizeof(x))) throw IngestError("truncated slice file '" + p.string() + "'");
      v = x;
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ctguard
