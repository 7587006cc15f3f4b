#pragma once

// Raster data model shared by every other module: a band-sequential H x W x C
// image, per-band normalization and the BIRF file format.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hetfuse/errors.hpp"

namespace hetfuse {

enum class ImageKind : std::uint8_t { MS = 0, SAR = 1, MASK = 2 };
enum class ValueRange : std::uint8_t { RAW = 0, UNIT_SIGNED = 1 };

inline const char* to_string(ImageKind kind) {
  switch (kind) {
    case ImageKind::MS: return "MS";
    case ImageKind::SAR: return "SAR";
    case ImageKind::MASK: return "MASK";
  }
  return "?";
}

/// Immutable H x W x C image. Storage is band-major, then row-major:
/// element (band, row, col) lives at `band * H * W + row * W + col`.
class RasterImage {
 public:
  RasterImage() = default;

  RasterImage(std::size_t height, std::size_t width, std::size_t bands, ImageKind kind,
              ValueRange range, std::vector<double> data)
      : height_(height), width_(width), bands_(bands), kind_(kind), range_(range),
        data_(std::move(data)) {
    validate();
  }

  static RasterImage filled(std::size_t height, std::size_t width, std::size_t bands,
                            ImageKind kind, ValueRange range, double value) {
    return RasterImage(height, width, bands, kind, range,
                       std::vector<double>(height * width * bands, value));
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t bands() const noexcept { return bands_; }
  std::size_t plane_size() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return data_.size(); }
  ImageKind kind() const noexcept { return kind_; }
  ValueRange range() const noexcept { return range_; }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<const double> band(std::size_t b) const {
    return std::span<const double>(data_).subspan(b * plane_size(), plane_size());
  }
  double at(std::size_t b, std::size_t r, std::size_t c) const {
    return data_[(b * height_ + r) * width_ + c];
  }

  /// Same pixels, new tags. Re-validates the invariants of the new tags.
  RasterImage retag(ImageKind kind, ValueRange range) const {
    return RasterImage(height_, width_, bands_, kind, range, data_);
  }

  bool same_geometry(const RasterImage& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  void validate() const {
    if (data_.size() != height_ * width_ * bands_) {
      throw SizeMismatch("raster data length " + std::to_string(data_.size()) +
                         " != height*width*bands " +
                         std::to_string(height_ * width_ * bands_));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw FormatError("raster contains a non-finite value");
    }
    if (kind_ == ImageKind::MASK) {
      if (bands_ != 1) throw BandMismatch("mask images have exactly one band");
      for (double v : data_) {
        if (v != 0.0 && v != 1.0) throw FormatError("mask values must be 0 or 1");
      }
    }
    if (range_ == ValueRange::UNIT_SIGNED) {
      for (double v : data_) {
        if (v < -1.0 || v > 1.0) throw FormatError("UNIT_SIGNED value outside [-1, 1]");
      }
    }
  }

  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t bands_ = 0;
  ImageKind kind_ = ImageKind::MS;
  ValueRange range_ = ValueRange::RAW;
  std::vector<double> data_;
};

/// Per-band affine map between RAW values and [-1, 1].
struct NormStats {
  std::vector<double> offset;
  std::vector<double> scale;

  NormStats() = default;
  NormStats(std::vector<double> off, std::vector<double> sc)
      : offset(std::move(off)), scale(std::move(sc)) {
    if (offset.size() != scale.size()) throw BandMismatch("offset/scale length differ");
    for (double s : scale) {
      if (!(s > 0.0) || !std::isfinite(s)) throw Error("NormStats scale must be > 0");
    }
  }

  std::size_t bands() const noexcept { return offset.size(); }

  /// Midpoint / half-range of each band; constant bands get scale 1.
  static NormStats from_range(const RasterImage& img) {
    std::vector<double> off(img.bands()), sc(img.bands());
    for (std::size_t b = 0; b < img.bands(); ++b) {
      auto band = img.band(b);
      auto [lo, hi] = std::minmax_element(band.begin(), band.end());
      off[b] = 0.5 * (*lo + *hi);
      double half = 0.5 * (*hi - *lo);
      sc[b] = half > 0.0 ? half : 1.0;
    }
    return NormStats(std::move(off), std::move(sc));
  }
};

inline RasterImage normalize(const RasterImage& img, const NormStats& stats) {
  if (stats.bands() != img.bands()) {
    throw BandMismatch("normalize: image has " + std::to_string(img.bands()) +
                       " bands, stats have " + std::to_string(stats.bands()));
  }
  std::vector<double> out(img.size());
  const std::size_t plane = img.plane_size();
  for (std::size_t b = 0; b < img.bands(); ++b) {
    auto in = img.band(b);
    for (std::size_t i = 0; i < plane; ++i) {
      out[b * plane + i] = std::clamp((in[i] - stats.offset[b]) / stats.scale[b], -1.0, 1.0);
    }
  }
  return RasterImage(img.height(), img.width(), img.bands(), img.kind(),
                     ValueRange::UNIT_SIGNED, std::move(out));
}

inline RasterImage denormalize(const RasterImage& img, const NormStats& stats) {
  if (img.range() != ValueRange::UNIT_SIGNED) {
    throw FormatError("denormalize expects a UNIT_SIGNED image");
  }
  if (stats.bands() != img.bands()) {
    throw BandMismatch("denormalize: image has " + std::to_string(img.bands()) +
                       " bands, stats have " + std::to_string(stats.bands()));
  }
  std::vector<double> out(img.size());
  const std::size_t plane = img.plane_size();
  for (std::size_t b = 0; b < img.bands(); ++b) {
    auto in = img.band(b);
    for (std::size_t i = 0; i < plane; ++i) {
      out[b * plane + i] = in[i] * stats.scale[b] + stats.offset[b];
    }
  }
  return RasterImage(img.height(), img.width(), img.bands(), img.kind(), ValueRange::RAW,
                     std::move(out));
}

/// Stacks images along the band axis in argument order. The result keeps the
/// first image's kind (MS when it was a mask) and is UNIT_SIGNED only when
/// every input is.
inline RasterImage concat_channels(std::span<const RasterImage> imgs) {
  if (imgs.empty()) throw SizeMismatch("concat_channels needs at least one image");
  const auto& first = imgs.front();
  std::size_t bands = 0;
  bool unit = true;
  for (const auto& img : imgs) {
    if (!img.same_geometry(first)) {
      throw SizeMismatch("concat_channels: " + std::to_string(img.height()) + "x" +
                         std::to_string(img.width()) + " vs " +
                         std::to_string(first.height()) + "x" + std::to_string(first.width()));
    }
    bands += img.bands();
    unit = unit && img.range() == ValueRange::UNIT_SIGNED;
  }
  if (imgs.size() == 1) return first;
  std::vector<double> out;
  out.reserve(first.plane_size() * bands);
  for (const auto& img : imgs) out.insert(out.end(), img.data().begin(), img.data().end());
  ImageKind kind = first.kind() == ImageKind::MASK ? ImageKind::MS : first.kind();
  return RasterImage(first.height(), first.width(), bands, kind,
                     unit ? ValueRange::UNIT_SIGNED : ValueRange::RAW, std::move(out));
}

inline RasterImage concat_channels(std::initializer_list<RasterImage> imgs) {
  return concat_channels(std::span<const RasterImage>(imgs.begin(), imgs.size()));
}

/// Bands [first, first + count) of `img`.
inline RasterImage slice_bands(const RasterImage& img, std::size_t first, std::size_t count,
                               ImageKind kind) {
  if (first + count > img.bands()) throw BandMismatch("slice_bands out of range");
  auto src = img.data().subspan(first * img.plane_size(), count * img.plane_size());
  return RasterImage(img.height(), img.width(), count, kind, img.range(),
                     std::vector<double>(src.begin(), src.end()));
}

// ---------------------------------------------------------------------------
// BIRF: "BIRF" 0x01 | u32le height | u32le width | u32le bands | u8 kind |
//       height*width*bands f32le values, band-major then row-major.

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline constexpr std::array<char, 4> kBirfMagic{'B', 'I', 'R', 'F'};
inline constexpr std::uint8_t kBirfVersion = 0x01;
inline constexpr std::size_t kBirfHeader = 4 + 1 + 12 + 1;

}  // namespace detail

inline std::string encode_birf(const RasterImage& img) {
  std::string out;
  out.reserve(detail::kBirfHeader + 4 * img.size());
  out.append(detail::kBirfMagic.data(), 4);
  out.push_back(static_cast<char>(detail::kBirfVersion));
  detail::put_u32le(out, static_cast<std::uint32_t>(img.height()));
  detail::put_u32le(out, static_cast<std::uint32_t>(img.width()));
  detail::put_u32le(out, static_cast<std::uint32_t>(img.bands()));
  out.push_back(static_cast<char>(img.kind()));
  for (double v : img.data()) {
    detail::put_u32le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

/// Decodes a BIRF byte string. Files carry no range tag: the image is tagged
/// UNIT_SIGNED when every value lies in [-1, 1], RAW otherwise.
inline RasterImage decode_birf(std::span<const unsigned char> bytes) {
  if (bytes.size() < detail::kBirfHeader) throw FormatError("BIRF: truncated header");
  if (std::memcmp(bytes.data(), detail::kBirfMagic.data(), 4) != 0) {
    throw FormatError("BIRF: bad magic");
  }
  if (bytes[4] != detail::kBirfVersion) {
    throw FormatError("BIRF: unsupported version " + std::to_string(bytes[4]));
  }
  const std::uint64_t h = detail::get_u32le(bytes.data() + 5);
  const std::uint64_t w = detail::get_u32le(bytes.data() + 9);
  const std::uint64_t c = detail::get_u32le(bytes.data() + 13);
  const std::uint8_t kind = bytes[17];
  if (kind > 2) throw FormatError("BIRF: unknown kind byte " + std::to_string(kind));
  const std::uint64_t count = h * w * c;
  if (bytes.size() - detail::kBirfHeader != 4 * count) {
    throw FormatError("BIRF: header promises " + std::to_string(count) + " values, payload has " +
                      std::to_string(bytes.size() - detail::kBirfHeader) + " bytes");
  }
  std::vector<double> data(count);
  bool unit = true;
  const unsigned char* p = bytes.data() + detail::kBirfHeader;
  for (std::uint64_t i = 0; i < count; ++i, p += 4) {
    data[i] = std::bit_cast<float>(detail::get_u32le(p));
    if (!std::isfinite(data[i])) throw FormatError("BIRF: non-finite value");
    unit = unit && data[i] >= -1.0 && data[i] <= 1.0;
  }
  try {
    return RasterImage(h, w, c, static_cast<ImageKind>(kind),
                       unit ? ValueRange::UNIT_SIGNED : ValueRange::RAW, std::move(data));
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string("BIRF: ") + e.what());
  }
}

inline void write_raster(const RasterImage& img, const std::filesystem::path& path) {
  const std::string bytes = encode_birf(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

inline RasterImage read_raster(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode_birf(bytes);
}

}  // namespace hetfuse
