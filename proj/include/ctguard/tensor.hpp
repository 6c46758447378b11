#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctguard {

/// 64-byte aligned storage. Vectorized kernels choose their peeling from the
/// runtime address, so without a fixed alignment the same computation could
/// round differently from one allocation to the next.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense NCHW array. Shapes are small and always known at runtime, so this
/// is a plain value type over a contiguous buffer.
template <typename T>
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  Buffer<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] std::size_t plane_size() const {
    return static_cast<std::size_t>(h) * w;
  }
  [[nodiscard]] bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  [[nodiscard]] std::string shape_str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + "]";
  }

  T& at(int in, int ic, int y, int x) {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x];
  }
  const T& at(int in, int ic, int y, int x) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x];
  }

  std::span<T> plane(int in, int ic) {
    return {data.data() + (static_cast<std::size_t>(in) * c + ic) * plane_size(),
            plane_size()};
  }
  std::span<const T> plane(int in, int ic) const {
    return {data.data() + (static_cast<std::size_t>(in) * c + ic) * plane_size(),
            plane_size()};
  }
  /// All channels of one sample.
  std::span<T> sample(int in) {
    const std::size_t s = static_cast<std::size_t>(c) * plane_size();
    return {data.data() + in * s, s};
  }
  std::span<const T> sample(int in) const {
    const std::size_t s = static_cast<std::size_t>(c) * plane_size();
    return {data.data() + in * s, s};
  }
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.n, t.c, t.h, t.w);
  for (std::size_t i = 0; i < t.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

/// Concatenate along the channel axis. Batch and spatial dims must agree.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w) {
    throw std::invalid_argument("concat_channels: shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  }
  Tensor<T> out(a.n, a.c + b.c, a.h, a.w);
  for (int i = 0; i < a.n; ++i) {
    auto dst = out.sample(i);
    auto sa = a.sample(i);
    auto sb = b.sample(i);
    std::copy(sa.begin(), sa.end(), dst.begin());
    std::copy(sb.begin(), sb.end(), dst.begin() + static_cast<std::ptrdiff_t>(sa.size()));
  }
  return out;
}

/// Inverse of concat_channels: first `c_first` channels go to `first`.
template <typename T>
void split_channels(const Tensor<T>& in, int c_first, Tensor<T>& first, Tensor<T>& second) {
  first = Tensor<T>(in.n, c_first, in.h, in.w);
  second = Tensor<T>(in.n, in.c - c_first, in.h, in.w);
  const std::size_t p = in.plane_size();
  for (int i = 0; i < in.n; ++i) {
    auto src = in.sample(i);
    auto f = first.sample(i);
    auto s = second.sample(i);
    std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(c_first * p), f.begin());
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(c_first * p), src.end(), s.begin());
  }
}

}  // namespace ctguard
