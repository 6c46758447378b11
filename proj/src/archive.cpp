#include "ctguard/archive.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ctguard/error.hpp"

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

namespace ctguard {

namespace {

constexpr char kMagic[8] = {'M', 'I', 'T', 'S', 'A', 'R', 'C', '1'};

class Writer {
 public:
  template <typename V>
  void pod(V v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::string section) : buf_(buf), section_(std::move(section)) {}

  template <typename V>
  V pod() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool done() const { return pos_ == buf_.size(); }
  [[nodiscard]] std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw ArchiveError(section_, "truncated data");
  }
  const std::string& buf_;
  std::string section_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& s) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

std::string encode_manifest(const std::map<std::string, std::string>& m) {
  std::string out;
  for (const auto& [k, v] : m) out += k + " = " + v + "\n";
  return out;
}

std::map<std::string, std::string> decode_manifest(const std::string& text) {
  std::map<std::string, std::string> m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw ArchiveError("manifest", "malformed line '" + line + "'");
    m[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return m;
}

std::string encode_arrays(const std::map<std::string, NamedArray>& arrays) {
  Writer w;
  w.pod(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, arr] : arrays) {
    w.str(name);
    w.pod(static_cast<std::uint8_t>(arr.data.index()));
    w.pod(static_cast<std::uint32_t>(arr.shape.size()));
    for (auto d : arr.shape) w.pod(d);
    std::visit([&](const auto& vec) { w.bytes(vec.data(), vec.size() * sizeof(vec[0])); }, arr.data);
  }
  return w.take();
}

template <typename V>
std::vector<V> read_vec(Reader& r, std::size_t n) {
  if (n > r.remaining() / sizeof(V)) throw ArchiveError("arrays", "truncated data");
  std::vector<V> v(n);
  r.bytes(v.data(), n * sizeof(V));
  return v;
}

std::map<std::string, NamedArray> decode_arrays(const std::string& payload) {
  Reader r(payload, "arrays");
  std::map<std::string, NamedArray> out;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto dtype = r.pod<std::uint8_t>();
    const auto ndim = r.pod<std::uint32_t>();
    if (ndim > 8) throw ArchiveError("arrays", "array '" + name + "' has implausible rank");
    NamedArray a;
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto dim = r.pod<std::int64_t>();
      if (dim < 0) throw ArchiveError("arrays", "array '" + name + "' has a negative dimension");
      a.shape.push_back(dim);
      n *= static_cast<std::size_t>(dim);
    }
    switch (dtype) {
      case 0: a.data = read_vec<float>(r, n); break;
      case 1: a.data = read_vec<double>(r, n); break;
      case 2: a.data = read_vec<std::int64_t>(r, n); break;
      default: throw ArchiveError("arrays", "array '" + name + "' has unknown dtype");
    }
    out.emplace(std::move(name), std::move(a));
  }
  if (!r.done()) throw ArchiveError("arrays", "trailing bytes");
  return out;
}

std::size_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace

std::size_t NamedArray::numel() const {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

void ArrayArchive::put(const std::string& name, std::vector<std::int64_t> shape, std::vector<float> values) {
  if (shape_numel(shape) != values.size()) throw ArchiveError("arrays", "shape/size mismatch for '" + name + "'");
  arrays_[name] = NamedArray{std::move(shape), std::move(values)};
}

void ArrayArchive::put(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) throw ArchiveError("arrays", "shape/size mismatch for '" + name + "'");
  arrays_[name] = NamedArray{std::move(shape), std::move(values)};
}

void ArrayArchive::put_i64(const std::string& name, std::vector<std::int64_t> values) {
  const auto n = static_cast<std::int64_t>(values.size());
  arrays_[name] = NamedArray{{n}, std::move(values)};
}

const NamedArray& ArrayArchive::at(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw ArchiveError("arrays", "missing array '" + name + "'");
  return it->second;
}

const std::vector<float>& ArrayArchive::f32(const std::string& name) const {
  const auto* v = std::get_if<std::vector<float>>(&at(name).data);
  if (v == nullptr) throw ArchiveError("arrays", "array '" + name + "' is not f32");
  return *v;
}

const std::vector<double>& ArrayArchive::f64(const std::string& name) const {
  const auto* v = std::get_if<std::vector<double>>(&at(name).data);
  if (v == nullptr) throw ArchiveError("arrays", "array '" + name + "' is not f64");
  return *v;
}

const std::vector<std::int64_t>& ArrayArchive::i64(const std::string& name) const {
  const auto* v = std::get_if<std::vector<std::int64_t>>(&at(name).data);
  if (v == nullptr) throw ArchiveError("arrays", "array '" + name + "' is not i64");
  return *v;
}

std::vector<std::string> ArrayArchive::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (auto it = arrays_.lower_bound(prefix); it != arrays_.end() && it->first.rfind(prefix, 0) == 0; ++it)
    out.push_back(it->first);
  return out;
}

std::string ArrayArchive::serialize() const {
  const std::pair<std::string, std::string> sections[] = {
      {"manifest", encode_manifest(manifest)},
      {"arrays", encode_arrays(arrays_)},
  };
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod(static_cast<std::uint32_t>(std::size(sections)));
  for (const auto& [name, payload] : sections) {
    w.str(name);
    w.pod(static_cast<std::uint64_t>(payload.size()));
    w.pod(crc_of(payload));
    w.bytes(payload.data(), payload.size());
  }
  return w.take();
}

ArrayArchive ArrayArchive::deserialize(const std::string& bytes) {
  Reader r(bytes, "header");
  char magic[sizeof(kMagic)];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ArchiveError("header", "bad magic");
  const auto count = r.pod<std::uint32_t>();
  ArrayArchive out;
  bool have_manifest = false, have_arrays = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name;
    std::uint64_t len = 0;
    std::uint32_t crc = 0;
    try {
      name = r.str();
      len = r.pod<std::uint64_t>();
      crc = r.pod<std::uint32_t>();
    } catch (const ArchiveError&) {
      throw ArchiveError(name.empty() ? "header" : name, "truncated section header");
    }
    if (len > r.remaining()) throw ArchiveError(name, "truncated payload");
    std::string payload(len, '\0');
    r.bytes(payload.data(), len);
    if (crc_of(payload) != crc) throw ArchiveError(name, "checksum mismatch");
    if (name == "manifest") {
      out.manifest = decode_manifest(payload);
      have_manifest = true;
    } else if (name == "arrays") {
      out.arrays_ = decode_arrays(payload);
      have_arrays = true;
    } else {
      throw ArchiveError(name, "unknown section");
    }
  }
  if (!have_manifest) throw ArchiveError("manifest", "section missing");
  if (!have_arrays) throw ArchiveError("arrays", "section missing");
  if (!r.done()) throw ArchiveError("trailer", "unexpected trailing bytes");
  return out;
}

void ArrayArchive::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

ArrayArchive ArrayArchive::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArchiveError("header", "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

}  // namespace ctguard
