#pragma once

// Explicit degradation operators: Gaussian blur + decimation, Catmull-Rom
// upsampling, thick-cloud masking, and their composition used to regenerate
// the low-resolution observation from a fusion result. Each linear operator
// also has an adjoint so gradients can flow back through it during training.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hetfuse/errors.hpp"
#include "hetfuse/imagery.hpp"

namespace hetfuse {

struct SpatialDegradeSpec {
  int ratio = 1;
  double blur_sigma = 0.0;

  /// Blur width defaults to half the ratio.
  static SpatialDegradeSpec with_default_blur(int ratio) { return {ratio, 0.5 * ratio}; }

  void validate() const {
    if (ratio < 1) throw Error("spatial ratio must be >= 1, got " + std::to_string(ratio));
    if (!(blur_sigma >= 0.0) || !std::isfinite(blur_sigma)) {
      throw Error("blur sigma must be finite and >= 0");
    }
  }
};

struct CloudSpec {
  RasterImage mask;  // MASK kind, 1 = cloud
  double fill_value = 1.0;
};

namespace detail {

/// Reflect-101 index: -1 -> 1, n -> n - 2, repeated for far-out indices.
inline std::ptrdiff_t mirror_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i = std::abs(i) % period;
  return i < n ? i : period - i;
}

inline std::ptrdiff_t clamp_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  return i < 0 ? 0 : (i >= n ? n - 1 : i);
}

/// Normalized 1-D Gaussian taps over [-radius, radius], radius = ceil(3 sigma).
inline std::vector<double> gaussian_taps(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    taps[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += taps[i + radius];
  }
  for (double& t : taps) t /= sum;
  return taps;
}

/// Catmull-Rom cubic convolution kernel (a = -0.5).
inline double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

/// Four-tap sampling table for upsampling a length-n axis by `ratio`, pixel
/// centres aligned (source coordinate (i + 0.5) / ratio - 0.5).
struct CubicAxis {
  std::vector<std::array<std::ptrdiff_t, 4>> index;
  std::vector<std::array<double, 4>> weight;

  CubicAxis(std::size_t n, int ratio) {
    const std::size_t out = n * static_cast<std::size_t>(ratio);
    index.resize(out);
    weight.resize(out);
    for (std::size_t i = 0; i < out; ++i) {
      const double src = (static_cast<double>(i) + 0.5) / ratio - 0.5;
      const double base = std::floor(src);
      const double t = src - base;
      for (int k = 0; k < 4; ++k) {
        index[i][k] = clamp_index(static_cast<std::ptrdiff_t>(base) + k - 1,
                                  static_cast<std::ptrdiff_t>(n));
        weight[i][k] = cubic_weight(t - (k - 1));
      }
    }
  }
};

}  // namespace detail

/// Blur + decimate on one H x W plane, and its adjoint. Reusable across
/// planes of the same geometry.
class BlurDecimate {
 public:
  BlurDecimate(std::size_t height, std::size_t width, const SpatialDegradeSpec& spec)
      : h_(height), w_(width), ratio_(spec.ratio),
        taps_(detail::gaussian_taps((spec.validate(), spec.blur_sigma))) {
    if (h_ % ratio_ != 0 || w_ % ratio_ != 0) {
      throw NotDivisible(std::to_string(h_) + "x" + std::to_string(w_) +
                         " is not divisible by ratio " + std::to_string(ratio_));
    }
    radius_ = static_cast<std::ptrdiff_t>(taps_.size() / 2);
    offset_ = ratio_ / 2;
  }

  std::size_t out_height() const noexcept { return h_ / ratio_; }
  std::size_t out_width() const noexcept { return w_ / ratio_; }

  template <typename T>
  void apply(std::span<const T> in, std::span<T> out) const {
    const std::size_t oh = out_height(), ow = out_width();
    std::vector<double> rows(oh * w_, 0.0);
    for (std::size_t r = 0; r < oh; ++r) {
      const auto centre = static_cast<std::ptrdiff_t>(r * ratio_ + offset_);
      for (std::ptrdiff_t d = -radius_; d <= radius_; ++d) {
        const double k = taps_[d + radius_];
        const auto src = static_cast<std::size_t>(
            detail::mirror_index(centre + d, static_cast<std::ptrdiff_t>(h_)));
        const T* row = in.data() + src * w_;
        double* acc = rows.data() + r * w_;
        for (std::size_t x = 0; x < w_; ++x) acc[x] += k * static_cast<double>(row[x]);
      }
    }
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t c = 0; c < ow; ++c) {
        const auto centre = static_cast<std::ptrdiff_t>(c * ratio_ + offset_);
        double acc = 0.0;
        for (std::ptrdiff_t d = -radius_; d <= radius_; ++d) {
          acc += taps_[d + radius_] *
                 rows[r * w_ + detail::mirror_index(centre + d, static_cast<std::ptrdiff_t>(w_))];
        }
        out[r * ow + c] = static_cast<T>(acc);
      }
    }
  }

  /// Adds the adjoint of `apply` applied to `grad_out` into `grad_in`.
  template <typename T>
  void adjoint_add(std::span<const T> grad_out, std::span<T> grad_in) const {
    const std::size_t oh = out_height(), ow = out_width();
    std::vector<double> rows(oh * w_, 0.0);
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t c = 0; c < ow; ++c) {
        const auto centre = static_cast<std::ptrdiff_t>(c * ratio_ + offset_);
        const double g = static_cast<double>(grad_out[r * ow + c]);
        for (std::ptrdiff_t d = -radius_; d <= radius_; ++d) {
          rows[r * w_ + detail::mirror_index(centre + d, static_cast<std::ptrdiff_t>(w_))] +=
              taps_[d + radius_] * g;
        }
      }
    }
    std::vector<double> acc(h_ * w_, 0.0);
    for (std::size_t r = 0; r < oh; ++r) {
      const auto centre = static_cast<std::ptrdiff_t>(r * ratio_ + offset_);
      for (std::ptrdiff_t d = -radius_; d <= radius_; ++d) {
        const double k = taps_[d + radius_];
        const auto dst = static_cast<std::size_t>(
            detail::mirror_index(centre + d, static_cast<std::ptrdiff_t>(h_)));
        for (std::size_t x = 0; x < w_; ++x) acc[dst * w_ + x] += k * rows[r * w_ + x];
      }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) grad_in[i] += static_cast<T>(acc[i]);
  }

 private:
  std::size_t h_, w_;
  int ratio_;
  std::vector<double> taps_;
  std::ptrdiff_t radius_ = 0;
  int offset_ = 0;
};

/// Catmull-Rom upsampling of one m x n plane by an integer ratio, and its adjoint.
class CubicUpsample {
 public:
  CubicUpsample(std::size_t height, std::size_t width, int ratio)
      : h_(height), w_(width), ratio_(ratio), rows_(height, check(ratio)), cols_(width, ratio) {}

  std::size_t out_height() const noexcept { return h_ * ratio_; }
  std::size_t out_width() const noexcept { return w_ * ratio_; }

  template <typename T>
  void apply(std::span<const T> in, std::span<T> out) const {
    const std::size_t oh = out_height(), ow = out_width();
    std::vector<double> tmp(oh * w_, 0.0);
    for (std::size_t i = 0; i < oh; ++i) {
      for (int k = 0; k < 4; ++k) {
        const double wk = rows_.weight[i][k];
        if (wk == 0.0) continue;
        const T* src = in.data() + rows_.index[i][k] * w_;
        for (std::size_t x = 0; x < w_; ++x) tmp[i * w_ + x] += wk * static_cast<double>(src[x]);
      }
    }
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += cols_.weight[j][k] * tmp[i * w_ + cols_.index[j][k]];
        out[i * ow + j] = static_cast<T>(acc);
      }
    }
  }

  template <typename T>
  void adjoint_add(std::span<const T> grad_out, std::span<T> grad_in) const {
    const std::size_t oh = out_height(), ow = out_width();
    std::vector<double> tmp(oh * w_, 0.0);
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const double g = static_cast<double>(grad_out[i * ow + j]);
        for (int k = 0; k < 4; ++k) tmp[i * w_ + cols_.index[j][k]] += cols_.weight[j][k] * g;
      }
    }
    std::vector<double> acc(h_ * w_, 0.0);
    for (std::size_t i = 0; i < oh; ++i) {
      for (int k = 0; k < 4; ++k) {
        const double wk = rows_.weight[i][k];
        if (wk == 0.0) continue;
        double* dst = acc.data() + rows_.index[i][k] * w_;
        for (std::size_t x = 0; x < w_; ++x) dst[x] += wk * tmp[i * w_ + x];
      }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) grad_in[i] += static_cast<T>(acc[i]);
  }

 private:
  static std::size_t check(int ratio) {
    if (ratio < 1) throw Error("upsampling ratio must be >= 1, got " + std::to_string(ratio));
    return static_cast<std::size_t>(ratio);
  }

  std::size_t h_, w_;
  int ratio_;
  detail::CubicAxis rows_, cols_;
};

/// The Resize branch on one UNIT_SIGNED HR plane: blur + decimate, upsample
/// back to HR, clamp to [-1, 1], then (optionally) overwrite cloud pixels
/// with the fill value.
class ResizeOperator {
 public:
  ResizeOperator(std::size_t height, std::size_t width, const SpatialDegradeSpec& spec)
      : down_(height, width, spec),
        up_(down_.out_height(), down_.out_width(), spec.ratio),
        lr_size_(down_.out_height() * down_.out_width()),
        hr_size_(height * width) {}

  std::size_t plane_size() const noexcept { return hr_size_; }

  /// `mask` may be empty (no cloud); otherwise one entry per HR pixel.
  /// `passed`, when given, receives 1 for every pixel whose value depends on
  /// `in` (not clamped, not clouded); `adjoint_add` needs it.
  template <typename T>
  void apply(std::span<const T> in, std::span<T> out, std::span<const double> mask = {},
             double fill = 0.0, std::vector<unsigned char>* passed = nullptr) const {
    std::vector<T> lr(lr_size_);
    down_.apply<T>(in, lr);
    up_.apply<T>(std::span<const T>(lr), out);
    if (passed) passed->assign(hr_size_, 1);
    for (std::size_t i = 0; i < hr_size_; ++i) {
      const bool clouded = !mask.empty() && mask[i] != 0.0;
      const bool clipped = out[i] > T(1) || out[i] < T(-1);
      if (clouded) {
        out[i] = static_cast<T>(fill);
      } else if (clipped) {
        out[i] = out[i] > T(1) ? T(1) : T(-1);
      }
      if (passed && (clouded || clipped)) (*passed)[i] = 0;
    }
  }

  template <typename T>
  void adjoint_add(std::span<const T> grad_out, std::span<T> grad_in,
                   std::span<const unsigned char> passed) const {
    std::vector<T> g(grad_out.begin(), grad_out.end());
    for (std::size_t i = 0; i < hr_size_; ++i) {
      if (!passed[i]) g[i] = T(0);
    }
    std::vector<T> lr(lr_size_, T(0));
    up_.adjoint_add<T>(std::span<const T>(g), lr);
    down_.adjoint_add<T>(std::span<const T>(lr), grad_in);
  }

 private:
  BlurDecimate down_;
  CubicUpsample up_;
  std::size_t lr_size_, hr_size_;
};

// ---------------------------------------------------------------------------
// RasterImage-level operations.

inline RasterImage spatial_degrade(const RasterImage& x, const SpatialDegradeSpec& spec) {
  BlurDecimate op(x.height(), x.width(), spec);
  const std::size_t out_plane = op.out_height() * op.out_width();
  std::vector<double> out(out_plane * x.bands());
  for (std::size_t b = 0; b < x.bands(); ++b) {
    op.apply<double>(x.band(b), std::span<double>(out).subspan(b * out_plane, out_plane));
  }
  return RasterImage(op.out_height(), op.out_width(), x.bands(), x.kind(), x.range(),
                     std::move(out));
}

inline RasterImage bicubic_upsample(const RasterImage& x, int ratio) {
  CubicUpsample op(x.height(), x.width(), ratio);
  const std::size_t out_plane = op.out_height() * op.out_width();
  std::vector<double> out(out_plane * x.bands());
  for (std::size_t b = 0; b < x.bands(); ++b) {
    op.apply<double>(x.band(b), std::span<double>(out).subspan(b * out_plane, out_plane));
  }
  // Cubic overshoot can leave [-1, 1]; keep UNIT_SIGNED data in range.
  if (x.range() == ValueRange::UNIT_SIGNED) {
    for (double& v : out) v = std::clamp(v, -1.0, 1.0);
  }
  return RasterImage(op.out_height(), op.out_width(), x.bands(), x.kind(), x.range(),
                     std::move(out));
}

inline RasterImage apply_cloud_mask(const RasterImage& x, const CloudSpec& cloud) {
  const auto& m = cloud.mask;
  if (m.kind() != ImageKind::MASK) throw FormatError("cloud mask must have MASK kind");
  if (!m.same_geometry(x)) {
    throw SizeMismatch("cloud mask " + std::to_string(m.height()) + "x" +
                       std::to_string(m.width()) + " vs image " + std::to_string(x.height()) +
                       "x" + std::to_string(x.width()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const std::size_t plane = x.plane_size();
  auto mask = m.band(0);
  for (std::size_t b = 0; b < x.bands(); ++b) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (mask[i] != 0.0) out[b * plane + i] = cloud.fill_value;
    }
  }
  return RasterImage(x.height(), x.width(), x.bands(), x.kind(), x.range(), std::move(out));
}

inline RasterImage resize_branch(const RasterImage& fusion, const SpatialDegradeSpec& spec,
                                 const std::optional<CloudSpec>& cloud = std::nullopt) {
  RasterImage out = bicubic_upsample(spatial_degrade(fusion, spec), spec.ratio);
  if (cloud) out = apply_cloud_mask(out, *cloud);
  return out;
}

}  // namespace hetfuse
