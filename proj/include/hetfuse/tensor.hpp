#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hetfuse/errors.hpp"

namespace hetfuse {

/// Dense NCHW batch of feature maps.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : shape_{n, c, h, w}, data_(n * c * h * w, fill) {}
  Tensor(std::array<std::size_t, 4> shape, std::vector<T> data)
      : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_[0] * shape_[1] * shape_[2] * shape_[3]) {
      throw ShapeError("tensor data length does not match shape");
    }
  }

  std::size_t n() const noexcept { return shape_[0]; }
  std::size_t c() const noexcept { return shape_[1]; }
  std::size_t h() const noexcept { return shape_[2]; }
  std::size_t w() const noexcept { return shape_[3]; }
  const std::array<std::size_t, 4>& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t plane() const noexcept { return shape_[2] * shape_[3]; }
  std::size_t sample_size() const noexcept { return shape_[1] * plane(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T* sample(std::size_t i) noexcept { return data_.data() + i * sample_size(); }
  const T* sample(std::size_t i) const noexcept { return data_.data() + i * sample_size(); }
  std::span<T> channel(std::size_t i, std::size_t ch) noexcept {
    return {sample(i) + ch * plane(), plane()};
  }
  std::span<const T> channel(std::size_t i, std::size_t ch) const noexcept {
    return {sample(i) + ch * plane(), plane()};
  }

  T& operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) noexcept {
    return data_[((i * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
  }
  T operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const noexcept {
    return data_[((i * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw ShapeError("tensor += with mismatched shapes");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::array<std::size_t, 4> shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

template <typename T>
std::string shape_string(const Tensor<T>& t) {
  return std::to_string(t.n()) + "x" + std::to_string(t.c()) + "x" + std::to_string(t.h()) +
         "x" + std::to_string(t.w());
}

/// Concatenates along the channel axis.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const auto& f = *parts.front();
  std::size_t ch = 0;
  for (const auto* p : parts) {
    if (p->n() != f.n() || p->h() != f.h() || p->w() != f.w()) {
      throw ShapeError("concat: " + shape_string(*p) + " vs " + shape_string(f));
    }
    ch += p->c();
  }
  Tensor<T> out(f.n(), ch, f.h(), f.w());
  for (std::size_t i = 0; i < f.n(); ++i) {
    T* dst = out.sample(i);
    for (const auto* p : parts) {
      dst = std::copy(p->sample(i), p->sample(i) + p->sample_size(), dst);
    }
  }
  return out;
}

/// Channels [first, first + count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& t, std::size_t first, std::size_t count) {
  if (first + count > t.c()) throw ShapeError("slice_channels out of range");
  Tensor<T> out(t.n(), count, t.h(), t.w());
  for (std::size_t i = 0; i < t.n(); ++i) {
    const T* src = t.sample(i) + first * t.plane();
    std::copy(src, src + count * t.plane(), out.sample(i));
  }
  return out;
}

/// Adds `part` into channels [first, first + part.c()) of `t`.
template <typename T>
void add_into_channels(Tensor<T>& t, std::size_t first, const Tensor<T>& part) {
  if (first + part.c() > t.c() || part.n() != t.n() || part.plane() != t.plane()) {
    throw ShapeError("add_into_channels out of range");
  }
  for (std::size_t i = 0; i < t.n(); ++i) {
    T* dst = t.sample(i) + first * t.plane();
    const T* src = part.sample(i);
    for (std::size_t k = 0; k < part.sample_size(); ++k) dst[k] += src[k];
  }
}

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> d(t.storage().begin(), t.storage().end());
  return Tensor<To>(t.shape(), std::move(d));
}

}  // namespace hetfuse
