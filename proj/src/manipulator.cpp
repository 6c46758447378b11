#include "ctguard/manipulator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <regex>
#include <sstream>

#include "ctguard/error.hpp"

namespace ctguard {

namespace {

constexpr int kBlurTaps = 9;
constexpr double kBlurSigma = 2.0;
constexpr double kBlurWeight = 0.7;

std::array<double, kBlurTaps> blur_kernel() {
  std::array<double, kBlurTaps> k{};
  double s = 0.0;
  for (int i = 0; i < kBlurTaps; ++i) {
    const double d = i - kBlurTaps / 2;
    k[i] = std::exp(-d * d / (2.0 * kBlurSigma * kBlurSigma));
    s += k[i];
  }
  for (double& v : k) v /= s;
  return k;
}

// Reflect-101: -1 -> 1, n -> n - 2.
int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

// Separable blur (horizontal then vertical) or its adjoint.
template <typename T>
void blur_plane(const T* in, T* out, int h, int w, bool adjoint) {
  static const auto k = blur_kernel();
  const int r = kBlurTaps / 2;
  std::vector<double> tmp(static_cast<std::size_t>(h) * w, 0.0);
  std::fill(out, out + static_cast<std::size_t>(h) * w, T(0));
  if (!adjoint) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int t = -r; t <= r; ++t) s += k[t + r] * static_cast<double>(in[y * w + reflect(x + t, w)]);
        tmp[y * w + x] = s;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int t = -r; t <= r; ++t) s += k[t + r] * tmp[reflect(y + t, h) * w + x];
        out[y * w + x] = static_cast<T>(s);
      }
    return;
  }
  // Scatter form of the transpose: vertical pass first, then horizontal.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int t = -r; t <= r; ++t) tmp[reflect(y + t, h) * w + x] += k[t + r] * static_cast<double>(in[y * w + x]);
  std::vector<double> acc(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int t = -r; t <= r; ++t) acc[y * w + reflect(x + t, w)] += k[t + r] * tmp[y * w + x];
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);
}

// One parsed layer of a topology string.
struct LayerDesc {
  std::string op;
  std::vector<double> args;
};

std::vector<LayerDesc> parse_topology(const std::string& topo) {
  std::vector<LayerDesc> out;
  static const std::regex re(R"(\s*([a-z0-9_]+)\s*(?:\(([^)]*)\))?\s*)");
  std::stringstream ss(topo);
  std::string tok;
  while (std::getline(ss, tok, ';')) {
    if (tok.find_first_not_of(" \t") == std::string::npos) continue;
    std::smatch m;
    if (!std::regex_match(tok, m, re)) throw ArchiveError("manifest", "bad topology token '" + tok + "'");
    LayerDesc d{m[1].str(), {}};
    std::stringstream as(m[2].str());
    std::string a;
    while (std::getline(as, a, ',')) d.args.push_back(std::stod(a));
    out.push_back(std::move(d));
  }
  if (out.empty()) throw ArchiveError("manifest", "empty topology");
  return out;
}

template <typename T>
void build_network(const std::vector<LayerDesc>& layers, nn::Sequential<T>& net) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerDesc& d = layers[i];
    const std::string name = "m.l" + std::to_string(i);
    if (d.op == "conv") {
      if (d.args.size() != 5) throw ArchiveError("manifest", "conv needs (in,out,k,stride,pad)");
      const auto a = [&](int j) { return static_cast<int>(d.args[j]); };
      net.template emplace<nn::Conv2d<T>>(name, a(0), a(1), a(2), a(3), a(4));
    } else if (d.op == "relu") {
      net.template emplace<nn::ReLU<T>>();
    } else if (d.op == "lrelu") {
      net.template emplace<nn::LeakyReLU<T>>(static_cast<T>(d.args.empty() ? 0.2 : d.args[0]));
    } else if (d.op == "tanh") {
      net.template emplace<nn::Tanh<T>>();
    } else if (d.op == "up2") {
      net.template emplace<nn::Upsample2x<T>>();
    } else {
      throw ArchiveError("manifest", "unknown topology op '" + d.op + "'");
    }
  }
}

int manifest_int(const ArrayArchive& a, const std::string& key, int fallback) {
  auto it = a.manifest.find(key);
  return it == a.manifest.end() ? fallback : std::stoi(it->second);
}

template <typename T>
Tensor<T> images_to_tensor(const std::vector<Image>& imgs) {
  std::vector<const Image*> ptrs;
  for (const Image& im : imgs) ptrs.push_back(&im);
  const int h = imgs.front().h, w = imgs.front().w;
  Tensor<T> t(static_cast<int>(imgs.size()), 1, h, w);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    if (!imgs[i].same_shape(imgs.front())) throw InvariantError("patch shapes differ within a batch");
    auto dst = t.sample(static_cast<int>(i));
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(imgs[i].px[k]);
  }
  return t;
}

bool in_center_mask(int y, int x, int h, int w, int m) {
  const int y0 = (h - m) / 2, x0 = (w - m) / 2;
  return y >= y0 && y < y0 + m && x >= x0 && x < x0 + m;
}

}  // namespace

// --------------------------------------------------------------- geometry

void check_region(const TamperRegion& r, int h, int w) {
  if (r.size < 1) throw InvariantError("tamper region size must be positive");
  if (r.x0() < 0 || r.y0() < 0 || r.x0() + r.size > w || r.y0() + r.size > h) {
    throw InvariantError("tamper region centered at (" + std::to_string(r.cx) + "," + std::to_string(r.cy) +
                         ") of size " + std::to_string(r.size) + " crosses the border of a " + std::to_string(h) +
                         "x" + std::to_string(w) + " image");
  }
}

TamperRegion random_region(int h, int w, int size, Rng& rng) {
  if (h < size || w < size) throw InvariantError("image smaller than the tamper region");
  const int half = size / 2;
  TamperRegion r;
  r.size = size;
  r.cx = rng.between(half, w - size + half);
  r.cy = rng.between(half, h - size + half);
  return r;
}

Image extract_square(const Image& image, const TamperRegion& r) {
  check_region(r, image.h, image.w);
  Image patch(r.size, r.size);
  for (int y = 0; y < r.size; ++y)
    for (int x = 0; x < r.size; ++x) patch.at(y, x) = image.at(r.y0() + y, r.x0() + x);
  return patch;
}

Image paste_square(const Image& image, const Image& patch, const TamperRegion& r) {
  check_region(r, image.h, image.w);
  if (patch.h != r.size || patch.w != r.size) {
    throw InvariantError("patch is " + patch.shape_str() + ", region needs " + std::to_string(r.size) + "x" +
                         std::to_string(r.size));
  }
  Image out = image;
  for (int y = 0; y < r.size; ++y)
    for (int x = 0; x < r.size; ++x) out.at(r.y0() + y, r.x0() + x) = patch.at(y, x);
  return out;
}

ManipulatorKind parse_manipulator_kind(const std::string& s) {
  if (s == "blur_blend") return ManipulatorKind::kBlurBlend;
  if (s == "inpaint_surrogate") return ManipulatorKind::kInpaintSurrogate;
  if (s == "external") return ManipulatorKind::kExternal;
  throw ConfigError("unknown manipulator kind '" + s + "'");
}

std::string to_string(ManipulatorKind k) {
  switch (k) {
    case ManipulatorKind::kBlurBlend: return "blur_blend";
    case ManipulatorKind::kInpaintSurrogate: return "inpaint_surrogate";
    case ManipulatorKind::kExternal: return "external";
  }
  return "unknown";
}

Image blur_blend_manipulate(const Image& patch) {
  Image blurred(patch.h, patch.w);
  blur_plane(patch.px.data(), blurred.px.data(), patch.h, patch.w, false);
  double mean = 0.0;
  for (double v : patch.px) mean += v;
  mean /= static_cast<double>(patch.size());
  Image out(patch.h, patch.w);
  for (std::size_t i = 0; i < out.size(); ++i) out.px[i] = kBlurWeight * blurred.px[i] + (1.0 - kBlurWeight) * mean;
  return out;
}

// ----------------------------------------------------------------- handle

ManipulatorHandle ManipulatorHandle::blur_blend() { return {}; }

ManipulatorHandle ManipulatorHandle::network(ManipulatorKind kind, ArrayArchive weights) {
  if (kind == ManipulatorKind::kBlurBlend) throw InvariantError("blur_blend takes no weights");
  if (!weights.manifest.count("topology")) throw ArchiveError("manifest", "manipulator weights lack a topology");
  weights.manifest["kind"] = to_string(kind);
  ManipulatorHandle h;
  h.kind_ = kind;
  h.weights_ = std::make_shared<const ArrayArchive>(std::move(weights));
  // Fail early on a topology / weight mismatch.
  DifferentiableManipulator<double> probe(h);
  (void)probe;
  return h;
}

ManipulatorHandle ManipulatorHandle::load(const std::string& path) {
  ArrayArchive a = ArrayArchive::load(path);
  ManipulatorKind kind = ManipulatorKind::kExternal;
  if (auto it = a.manifest.find("kind"); it != a.manifest.end()) kind = parse_manipulator_kind(it->second);
  return network(kind, std::move(a));
}

ManipulatorHandle ManipulatorHandle::identity() {
  ArrayArchive a;
  a.manifest["topology"] = "conv(1,1,3,1,1)";
  a.manifest["mask_input"] = "0";
  std::vector<double> w(9, 0.0);
  w[4] = 1.0;
  a.put("m.l0.weight", {1, 1, 3, 3}, w);
  a.put("m.l0.bias", {1}, std::vector<double>{0.0});
  return network(ManipulatorKind::kExternal, std::move(a));
}

const ArrayArchive& ManipulatorHandle::weights() const {
  if (!weights_) throw InvariantError("manipulator '" + to_string(kind_) + "' has no weights");
  return *weights_;
}

std::vector<Image> ManipulatorHandle::apply(const std::vector<Image>& patches) const {
  if (patches.empty()) return {};
  if (kind_ == ManipulatorKind::kBlurBlend) {
    std::vector<Image> out;
    out.reserve(patches.size());
    for (const Image& p : patches) out.push_back(blur_blend_manipulate(p));
    return out;
  }
  DifferentiableManipulator<double> net(*this);
  const Tensor<double> y = net.forward(images_to_tensor<double>(patches));
  std::vector<Image> out;
  for (int i = 0; i < y.n; ++i) {
    Image im(y.h, y.w);
    auto s = y.sample(i);
    std::copy(s.begin(), s.end(), im.px.begin());
    out.push_back(std::move(im));
  }
  return out;
}

Image ManipulatorHandle::apply(const Image& patch) const { return apply(std::vector<Image>{patch}).front(); }

Image tamper(const Image& image, const TamperRegion& r, const ManipulatorHandle& m) {
  return paste_square(image, m.apply(extract_square(image, r)), r);
}

// ------------------------------------------------------ differentiable M

template <typename T>
DifferentiableManipulator<T>::DifferentiableManipulator(const ManipulatorHandle& handle) : kind_(handle.kind()) {
  if (kind_ == ManipulatorKind::kBlurBlend) return;
  const ArrayArchive& a = handle.weights();
  build_network<T>(parse_topology(a.manifest.at("topology")), net_);
  mask_input_ = manifest_int(a, "mask_input", 0) != 0;
  mask_size_ = manifest_int(a, "mask_size", 0);
  nn::ParamList<T> params = nn::parameters_of<T>(net_);
  for (nn::Parameter<T>* p : params) {
    if (!a.contains(p->name)) throw ArchiveError("arrays", "manipulator weight '" + p->name + "' missing");
    const NamedArray& arr = a.at(p->name);
    if (arr.numel() != p->numel()) throw ArchiveError("arrays", "manipulator weight '" + p->name + "' has wrong size");
    std::visit(
        [&](const auto& v) {
          for (std::size_t i = 0; i < v.size(); ++i) p->value[i] = static_cast<T>(v[i]);
        },
        arr.data);
  }
  net_.set_training(false);
  net_.set_requires_grad(false);
}

template <typename T>
Tensor<T> DifferentiableManipulator<T>::forward(const Tensor<T>& patches) {
  patch_h_ = patches.h;
  patch_w_ = patches.w;
  if (kind_ == ManipulatorKind::kBlurBlend) {
    Tensor<T> out(patches.n, patches.c, patches.h, patches.w);
    for (int i = 0; i < patches.n; ++i) {
      auto src = patches.sample(i);
      auto dst = out.sample(i);
      blur_plane(src.data(), dst.data(), patches.h, patches.w, false);
      double mean = 0.0;
      for (T v : src) mean += static_cast<double>(v);
      mean /= static_cast<double>(src.size());
      for (T& v : dst) v = static_cast<T>(kBlurWeight * static_cast<double>(v) + (1.0 - kBlurWeight) * mean);
    }
    return out;
  }
  if (!mask_input_) return net_.forward(patches);
  Tensor<T> in(patches.n, 2, patches.h, patches.w);
  for (int i = 0; i < patches.n; ++i)
    for (int y = 0; y < patches.h; ++y)
      for (int x = 0; x < patches.w; ++x) {
        const bool m = in_center_mask(y, x, patches.h, patches.w, mask_size_);
        in.at(i, 0, y, x) = m ? T(0) : patches.at(i, 0, y, x);
        in.at(i, 1, y, x) = m ? T(1) : T(0);
      }
  return net_.forward(in);
}

template <typename T>
Tensor<T> DifferentiableManipulator<T>::backward(const Tensor<T>& grad_out) {
  if (kind_ == ManipulatorKind::kBlurBlend) {
    Tensor<T> gx(grad_out.n, grad_out.c, grad_out.h, grad_out.w);
    for (int i = 0; i < grad_out.n; ++i) {
      auto g = grad_out.sample(i);
      auto dst = gx.sample(i);
      blur_plane(g.data(), dst.data(), grad_out.h, grad_out.w, true);
      double sum = 0.0;
      for (T v : g) sum += static_cast<double>(v);
      const double mean_term = (1.0 - kBlurWeight) * sum / static_cast<double>(g.size());
      for (T& v : dst) v = static_cast<T>(kBlurWeight * static_cast<double>(v) + mean_term);
    }
    return gx;
  }
  Tensor<T> g = net_.backward(grad_out);
  if (!mask_input_) return g;
  Tensor<T> gx(g.n, 1, g.h, g.w);
  for (int i = 0; i < g.n; ++i)
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x)
        gx.at(i, 0, y, x) = in_center_mask(y, x, g.h, g.w, mask_size_) ? T(0) : g.at(i, 0, y, x);
  return gx;
}

template class DifferentiableManipulator<float>;
template class DifferentiableManipulator<double>;

// ------------------------------------------------------ inpaint surrogate

std::string inpaint_surrogate_topology() {
  return "conv(2,32,3,1,1);relu;conv(32,64,3,2,1);relu;conv(64,64,3,1,1);relu;up2;"
         "conv(64,32,3,1,1);relu;conv(32,1,3,1,1);tanh";
}

ManipulatorHandle train_inpaint_surrogate(const std::vector<Image>& slices, int epochs, std::uint64_t seed,
                                          const SurrogateOptions& opt) {
  if (slices.empty()) throw InvariantError("cannot train the inpainting surrogate on an empty dataset");
  if (epochs < 0) throw InvariantError("surrogate epochs must be non-negative");
  if (opt.mask_size < 1 || opt.mask_size >= opt.patch_size) throw InvariantError("mask must be smaller than the patch");

  ArrayArchive a;
  a.manifest["topology"] = inpaint_surrogate_topology();
  a.manifest["mask_input"] = "1";
  a.manifest["mask_size"] = std::to_string(opt.mask_size);
  a.manifest["train_seed"] = std::to_string(seed);
  a.manifest["train_epochs"] = std::to_string(epochs);

  nn::Sequential<float> net;
  build_network<float>(parse_topology(a.manifest["topology"]), net);
  Rng init_rng(mix_seed(seed, 0xA11CE));
  nn::init_default<float>(net, init_rng);
  nn::ParamList<float> params = nn::parameters_of<float>(net);
  nn::Adam<float> adam(static_cast<float>(opt.learning_rate), 0.9f, 0.999f);
  adam.attach(params);

  const int s = opt.patch_size;
  for (int e = 0; e < epochs; ++e) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(e) + 1));
    for (int done = 0; done < opt.patches_per_epoch; done += opt.batch_size) {
      const int b = std::min(opt.batch_size, opt.patches_per_epoch - done);
      Tensor<float> in(b, 2, s, s), target(b, 1, s, s);
      for (int i = 0; i < b; ++i) {
        const Image& img = slices[rng.below(slices.size())];
        const TamperRegion r = random_region(img.h, img.w, s, rng);
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x) {
            const float v = static_cast<float>(img.at(r.y0() + y, r.x0() + x));
            const bool m = in_center_mask(y, x, s, s, opt.mask_size);
            target.at(i, 0, y, x) = v;
            in.at(i, 0, y, x) = m ? 0.0f : v;
            in.at(i, 1, y, x) = m ? 1.0f : 0.0f;
          }
      }
      adam.zero_grad();
      const Tensor<float> out = net.forward(in);
      Tensor<float> grad(out.n, out.c, out.h, out.w);
      const float scale = 2.0f / static_cast<float>(out.size());
      for (std::size_t k = 0; k < out.size(); ++k) grad.data[k] = scale * (out.data[k] - target.data[k]);
      net.backward(grad);
      adam.step();
    }
  }

  for (const nn::Parameter<float>* p : params) {
    a.put(p->name, std::vector<std::int64_t>(p->shape.begin(), p->shape.end()), std::vector<float>(p->value.begin(), p->value.end()));
  }
  return ManipulatorHandle::network(ManipulatorKind::kInpaintSurrogate, std::move(a));
}

}  // namespace ctguard
