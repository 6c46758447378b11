#include "ctguard/dicom.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "ctguard/error.hpp"

namespace ctguard::dicom {

namespace {

constexpr std::uint32_t tag(std::uint16_t g, std::uint16_t e) {
  return (static_cast<std::uint32_t>(g) << 16) | e;
}

constexpr std::uint32_t kTransferSyntax = tag(0x0002, 0x0010);
constexpr std::uint32_t kSamplesPerPixel = tag(0x0028, 0x0002);
constexpr std::uint32_t kRows = tag(0x0028, 0x0010);
constexpr std::uint32_t kColumns = tag(0x0028, 0x0011);
constexpr std::uint32_t kPixelSpacing = tag(0x0028, 0x0030);
constexpr std::uint32_t kBitsAllocated = tag(0x0028, 0x0100);
constexpr std::uint32_t kPixelRepresentation = tag(0x0028, 0x0103);
constexpr std::uint32_t kRescaleIntercept = tag(0x0028, 0x1052);
constexpr std::uint32_t kRescaleSlope = tag(0x0028, 0x1053);
constexpr std::uint32_t kSliceThickness = tag(0x0018, 0x0050);
constexpr std::uint32_t kSeriesUid = tag(0x0020, 0x000E);
constexpr std::uint32_t kInstanceNumber = tag(0x0020, 0x0013);
constexpr std::uint32_t kImagePosition = tag(0x0020, 0x0032);
constexpr std::uint32_t kImageOrientation = tag(0x0020, 0x0037);
constexpr std::uint32_t kPixelData = tag(0x7FE0, 0x0010);
constexpr std::uint32_t kItem = tag(0xFFFE, 0xE000);
constexpr std::uint32_t kItemDelim = tag(0xFFFE, 0xE00D);
constexpr std::uint32_t kSeqDelim = tag(0xFFFE, 0xE0DD);
constexpr std::uint32_t kUndefined = 0xFFFFFFFFu;

const char* const kImplicitLE = "1.2.840.10008.1.2";
const char* const kExplicitLE = "1.2.840.10008.1.2.1";

bool long_form_vr(const std::string& vr) {
  static const char* const kLong[] = {"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "SV", "UC", "UN", "UR", "UT", "UV"};
  for (const char* v : kLong)
    if (vr == v) return true;
  return false;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == ' ' || s.back() == '\0')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && s[i] == ' ') ++i;
  return s.substr(i);
}

std::vector<double> parse_numbers(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, '\\')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(std::stod(item));
  }
  return out;
}

class Parser {
 public:
  Parser(const std::string& buf, std::string file) : buf_(buf), file_(std::move(file)) {}

  Slice run() {
    if (buf_.size() < 132 || std::memcmp(buf_.data() + 128, "DICM", 4) != 0) {
      fail("missing DICM marker (not a Part-10 file)");
    }
    pos_ = 132;
    std::string syntax;
    // File meta group is always explicit VR little endian.
    while (pos_ + 4 <= buf_.size() && peek_group() == 0x0002) {
      Element e = next(true);
      if (e.tag == kTransferSyntax) syntax = trim(value_string(e));
    }
    bool explicit_vr;
    if (syntax == kExplicitLE || syntax.empty()) {
      explicit_vr = true;
    } else if (syntax == kImplicitLE) {
      explicit_vr = false;
    } else {
      fail("unsupported transfer syntax " + syntax);
    }
    Slice s;
    bool have_pixels = false;
    while (pos_ < buf_.size()) {
      Element e = next(explicit_vr);
      if (e.length == kUndefined) {
        if (e.tag == kPixelData) fail("encapsulated pixel data is not supported");
        skip_sequence(explicit_vr);
        continue;
      }
      switch (e.tag) {
        case kSamplesPerPixel: s.samples_per_pixel = u16(e); break;
        case kRows: s.rows = u16(e); break;
        case kColumns: s.columns = u16(e); break;
        case kBitsAllocated: s.bits_allocated = u16(e); break;
        case kPixelRepresentation: s.pixel_representation = u16(e); break;
        case kRescaleIntercept: s.rescale_intercept = number(e); break;
        case kRescaleSlope: s.rescale_slope = number(e); break;
        case kSliceThickness: s.slice_thickness = number(e); break;
        case kInstanceNumber: s.instance_number = static_cast<int>(number(e)); break;
        case kSeriesUid: s.series_uid = trim(value_string(e)); break;
        case kImagePosition: s.image_position = numbers<3>(e); break;
        case kImageOrientation: s.image_orientation = numbers<6>(e); break;
        case kPixelSpacing: s.pixel_spacing = numbers<2>(e); break;
        case kPixelData:
          decode_pixels(e, s);
          have_pixels = true;
          break;
        default: break;
      }
    }
    if (!have_pixels) fail("no pixel data element");
    return s;
  }

 private:
  struct Element {
    std::uint32_t tag = 0;
    std::string vr;
    std::uint32_t length = 0;
    std::size_t offset = 0;
  };

  [[noreturn]] void fail(const std::string& why) const {
    throw IngestError("cannot read DICOM file '" + file_ + "': " + why);
  }

  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) fail("unexpected end of file");
  }
  std::uint16_t rd16() {
    need(2);
    std::uint16_t v;
    std::memcpy(&v, buf_.data() + pos_, 2);
    pos_ += 2;
    return v;
  }
  std::uint32_t rd32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  [[nodiscard]] std::uint16_t peek_group() const {
    std::uint16_t g;
    std::memcpy(&g, buf_.data() + pos_, 2);
    return g;
  }

  Element next(bool explicit_vr) {
    Element e;
    const std::uint16_t g = rd16();
    const std::uint16_t el = rd16();
    e.tag = tag(g, el);
    if (g == 0xFFFE) {  // item / delimiter tags never carry a VR
      e.length = rd32();
    } else if (explicit_vr) {
      need(2);
      e.vr = buf_.substr(pos_, 2);
      pos_ += 2;
      if (long_form_vr(e.vr)) {
        rd16();
        e.length = rd32();
      } else {
        e.length = rd16();
      }
    } else {
      e.length = rd32();
    }
    e.offset = pos_;
    if (e.length != kUndefined) {
      need(e.length);
      pos_ += e.length;
    }
    return e;
  }

  // Skips nested items until the matching sequence delimiter.
  void skip_sequence(bool explicit_vr) {
    while (true) {
      const std::uint16_t g = rd16();
      const std::uint16_t el = rd16();
      const std::uint32_t t = tag(g, el);
      const std::uint32_t len = rd32();
      if (t == kSeqDelim) return;
      if (t != kItem) fail("malformed sequence");
      if (len != kUndefined) {
        need(len);
        pos_ += len;
        continue;
      }
      while (true) {
        need(4);
        std::uint16_t gg, ee;
        std::memcpy(&gg, buf_.data() + pos_, 2);
        std::memcpy(&ee, buf_.data() + pos_ + 2, 2);
        if (tag(gg, ee) == kItemDelim) {
          pos_ += 4;
          rd32();
          break;
        }
        Element inner = next(explicit_vr);
        if (inner.length == kUndefined) skip_sequence(explicit_vr);
      }
    }
  }

  [[nodiscard]] std::string value_string(const Element& e) const { return buf_.substr(e.offset, e.length); }

  int u16(const Element& e) const {
    if (e.length < 2) fail("short US value");
    std::uint16_t v;
    std::memcpy(&v, buf_.data() + e.offset, 2);
    return v;
  }

  double number(const Element& e) const {
    const auto v = parse_numbers(value_string(e));
    if (v.empty()) fail("empty numeric value");
    return v.front();
  }

  template <std::size_t N>
  std::array<double, N> numbers(const Element& e) const {
    const auto v = parse_numbers(value_string(e));
    if (v.size() < N) fail("expected " + std::to_string(N) + " numeric values");
    std::array<double, N> out{};
    for (std::size_t i = 0; i < N; ++i) out[i] = v[i];
    return out;
  }

  void decode_pixels(const Element& e, Slice& s) const {
    if (s.samples_per_pixel != 1) fail("only single-sample (monochrome) images are supported");
    if (s.rows <= 0 || s.columns <= 0) fail("pixel data precedes rows/columns");
    const std::size_t n = static_cast<std::size_t>(s.rows) * s.columns;
    const std::size_t bpp = s.bits_allocated == 16 ? 2 : (s.bits_allocated == 8 ? 1 : 0);
    if (bpp == 0) fail("unsupported bits allocated " + std::to_string(s.bits_allocated));
    if (e.length < n * bpp) fail("pixel data shorter than rows*columns");
    s.stored.resize(n);
    const char* p = buf_.data() + e.offset;
    for (std::size_t i = 0; i < n; ++i) {
      if (bpp == 2) {
        std::uint16_t raw;
        std::memcpy(&raw, p + 2 * i, 2);
        s.stored[i] = s.pixel_representation == 1 ? static_cast<std::int16_t>(raw) : raw;
      } else {
        const auto raw = static_cast<std::uint8_t>(p[i]);
        s.stored[i] = s.pixel_representation == 1 ? static_cast<std::int8_t>(raw) : raw;
      }
    }
  }

  const std::string& buf_;
  std::string file_;
  std::size_t pos_ = 0;
};

std::string read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IngestError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ------------------------------------------------------------- writing

class ElementWriter {
 public:
  void element(std::uint16_t g, std::uint16_t e, const char* vr, const std::string& value) {
    std::string v = value;
    if (v.size() % 2 == 1) v.push_back(std::string(vr) == "UI" ? '\0' : ' ');
    put16(g);
    put16(e);
    out_.append(vr, 2);
    if (long_form_vr(vr)) {
      put16(0);
      put32(static_cast<std::uint32_t>(v.size()));
    } else {
      put16(static_cast<std::uint16_t>(v.size()));
    }
    out_ += v;
  }
  void us(std::uint16_t g, std::uint16_t e, std::uint16_t v) {
    std::string s(2, '\0');
    std::memcpy(s.data(), &v, 2);
    element(g, e, "US", s);
  }
  void ul(std::uint16_t g, std::uint16_t e, std::uint32_t v) {
    std::string s(4, '\0');
    std::memcpy(s.data(), &v, 4);
    element(g, e, "UL", s);
  }
  std::string& bytes() { return out_; }

 private:
  void put16(std::uint16_t v) { out_.append(reinterpret_cast<const char*>(&v), 2); }
  void put32(std::uint32_t v) { out_.append(reinterpret_cast<const char*>(&v), 4); }
  std::string out_;
};

std::string ds(double v) {
  std::ostringstream s;
  s.precision(10);
  s << v;
  return s.str();
}

template <std::size_t N>
std::string ds_multi(const std::array<double, N>& a) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) {
    if (i) out += '\\';
    out += ds(a[i]);
  }
  return out;
}

}  // namespace

Slice read_file(const std::filesystem::path& path) {
  const std::string buf = read_all(path);
  return Parser(buf, path.string()).run();
}

bool looks_like_dicom(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  char head[132];
  if (!f.read(head, sizeof(head))) return false;
  return std::memcmp(head + 128, "DICM", 4) == 0;
}

void write_file(const std::filesystem::path& path, const Slice& s) {
  ElementWriter meta;
  meta.element(0x0002, 0x0001, "OB", std::string("\0\1", 2));
  meta.element(0x0002, 0x0002, "UI", "1.2.840.10008.5.1.4.1.1.2");
  meta.element(0x0002, 0x0003, "UI", "1.2.826.0.1.3680043.2.1125." + std::to_string(s.instance_number.value_or(0)));
  meta.element(0x0002, 0x0010, "UI", kExplicitLE);
  ElementWriter group_len;
  group_len.ul(0x0002, 0x0000, static_cast<std::uint32_t>(meta.bytes().size()));

  ElementWriter ds_;
  if (s.slice_thickness) ds_.element(0x0018, 0x0050, "DS", ds(*s.slice_thickness));
  ds_.element(0x0020, 0x000E, "UI", s.series_uid);
  if (s.instance_number) ds_.element(0x0020, 0x0013, "IS", std::to_string(*s.instance_number));
  if (s.image_position) ds_.element(0x0020, 0x0032, "DS", ds_multi(*s.image_position));
  if (s.image_orientation) ds_.element(0x0020, 0x0037, "DS", ds_multi(*s.image_orientation));
  ds_.us(0x0028, 0x0002, 1);
  ds_.element(0x0028, 0x0004, "CS", "MONOCHROME2");
  ds_.us(0x0028, 0x0010, static_cast<std::uint16_t>(s.rows));
  ds_.us(0x0028, 0x0011, static_cast<std::uint16_t>(s.columns));
  if (s.pixel_spacing) ds_.element(0x0028, 0x0030, "DS", ds_multi(*s.pixel_spacing));
  ds_.us(0x0028, 0x0100, 16);
  ds_.us(0x0028, 0x0101, 16);
  ds_.us(0x0028, 0x0102, 15);
  ds_.us(0x0028, 0x0103, static_cast<std::uint16_t>(s.pixel_representation));
  ds_.element(0x0028, 0x1052, "DS", ds(s.rescale_intercept));
  ds_.element(0x0028, 0x1053, "DS", ds(s.rescale_slope));
  std::string pixels(s.stored.size() * 2, '\0');
  for (std::size_t i = 0; i < s.stored.size(); ++i) {
    const auto v = static_cast<std::uint16_t>(s.stored[i]);
    std::memcpy(pixels.data() + 2 * i, &v, 2);
  }
  ds_.element(0x7FE0, 0x0010, "OW", pixels);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IngestError("cannot write '" + path.string() + "'");
  const std::string preamble(128, '\0');
  f << preamble << "DICM" << group_len.bytes() << meta.bytes() << ds_.bytes();
}

}  // namespace ctguard::dicom
