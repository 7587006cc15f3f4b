#pragma once

// Synthetic multi-sensor scenes with known ground truth: a land-cover map,
// the t1 high-resolution MS image, its t2 counterpart (affine radiometric
// drift plus abrupt land-cover change), a speckled SAR proxy, cloud masks,
// and the observation sets / patches the networks are trained on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "hetfuse/degrade.hpp"
#include "hetfuse/errors.hpp"
#include "hetfuse/imagery.hpp"
#include "hetfuse/strategy.hpp"

namespace hetfuse {

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t ms_bands = 3;
  std::size_t sar_bands = 2;
  std::size_t n_classes = 6;
  double change_fraction = 0.2;
  std::vector<double> temporal_gain{0.9, 1.05, 0.95};
  std::vector<double> temporal_bias{0.05, -0.03, 0.02};
  int speckle_looks = 16;
  double cloud_fraction = 0.0;
  int ratio = 4;  ///< LR/HR pixel-size ratio; height and width must be multiples of 4 * ratio
  std::uint64_t seed = 1;

  void validate() const {
    if (ratio < 1) throw ConfigError("ratio", "must be >= 1");
    const std::size_t unit = 4 * static_cast<std::size_t>(ratio);
    if (height == 0 || height % unit != 0) {
      throw ConfigError("height", "must be a positive multiple of " + std::to_string(unit));
    }
    if (width == 0 || width % unit != 0) {
      throw ConfigError("width", "must be a positive multiple of " + std::to_string(unit));
    }
    if (ms_bands < 1) throw ConfigError("ms_bands", "must be >= 1");
    if (sar_bands < 1) throw ConfigError("sar_bands", "must be >= 1");
    if (n_classes < 1) throw ConfigError("n_classes", "must be >= 1");
    if (!(change_fraction >= 0.0 && change_fraction <= 1.0)) {
      throw ConfigError("change_fraction", "must lie in [0, 1]");
    }
    if (!(cloud_fraction >= 0.0 && cloud_fraction <= 1.0)) {
      throw ConfigError("cloud_fraction", "must lie in [0, 1]");
    }
    if (speckle_looks < 1) throw ConfigError("speckle_looks", "must be >= 1");
    if (temporal_gain.size() != ms_bands) {
      throw ConfigError("temporal_gain", "needs one value per MS band");
    }
    if (temporal_bias.size() != ms_bands) {
      throw ConfigError("temporal_bias", "needs one value per MS band");
    }
    for (double v : temporal_gain) {
      if (!std::isfinite(v)) throw ConfigError("temporal_gain", "must be finite");
    }
    for (double v : temporal_bias) {
      if (!std::isfinite(v)) throw ConfigError("temporal_bias", "must be finite");
    }
  }
};

/// Per-pixel land-cover labels, row-major.
struct ClassMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;

  int at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
};

struct Scene {
  RasterImage x_t1;       ///< ground-truth HR MS at the target date
  RasterImage x_t2_base;  ///< same texture, alternate class signatures (changed land cover)
  ClassMap class_map;
};

struct TemporalPair {
  RasterImage z;            ///< HR MS at the auxiliary date
  RasterImage change_mask;  ///< 1 where land cover changed
};

/// One training / inference sample. Members a strategy does not use are empty.
struct ObservationSet {
  RasterImage x_tilde_up;  ///< bicubic-upsampled LR MS, possibly clouded
  std::optional<RasterImage> y;
  std::optional<RasterImage> z;
  std::optional<RasterImage> label;
  std::optional<RasterImage> cloud_mask;
  FusionStrategy strategy = FusionStrategy::HSST;

  std::size_t height() const { return x_tilde_up.height(); }
  std::size_t width() const { return x_tilde_up.width(); }

  /// Throws StrategyMismatch unless exactly the strategy's members are present.
  void check() const {
    if (uses_sar(strategy) != y.has_value()) {
      throw StrategyMismatch("SAR member does not match strategy " + to_string(strategy));
    }
    if (uses_temporal(strategy) != z.has_value()) {
      throw StrategyMismatch("t2 member does not match strategy " + to_string(strategy));
    }
    for (const auto* m : {&y, &z, &label, &cloud_mask}) {
      if (*m && !(*m)->same_geometry(x_tilde_up)) {
        throw SizeMismatch("observation members differ in size");
      }
    }
  }

  /// Forward generator input: (X-hat, Y, Z) stacked along bands.
  RasterImage generator_input() const {
    std::vector<RasterImage> parts{x_tilde_up};
    if (y) parts.push_back(*y);
    if (z) parts.push_back(*z);
    return concat_channels(std::span<const RasterImage>(parts));
  }
};

struct PatchWindow {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t size = 0;
  friend bool operator==(const PatchWindow&, const PatchWindow&) = default;
};

namespace detail {

/// Sum of random plane waves with wavelengths in [wavelength/2, 2 wavelength];
/// roughly unit variance.
class SmoothField {
 public:
  SmoothField(std::mt19937_64& rng, double wavelength, int waves = 12) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int k = 0; k < waves; ++k) {
      const double lambda = wavelength * std::exp2(u01(rng) * 2.0 - 1.0);
      const double theta = u01(rng) * 2.0 * std::numbers::pi;
      const double f = 2.0 * std::numbers::pi / lambda;
      waves_.push_back({f * std::cos(theta), f * std::sin(theta),
                        u01(rng) * 2.0 * std::numbers::pi});
    }
    amp_ = std::sqrt(2.0 / static_cast<double>(waves));
  }

  double operator()(double r, double c) const {
    double v = 0.0;
    for (const auto& w : waves_) v += std::cos(w.fy * r + w.fx * c + w.phase);
    return amp_ * v;
  }

  std::vector<double> sample(std::size_t h, std::size_t w) const {
    std::vector<double> out(h * w);
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        out[r * w + c] = (*this)(static_cast<double>(r), static_cast<double>(c));
      }
    }
    return out;
  }

 private:
  struct Wave {
    double fx, fy, phase;
  };
  std::vector<Wave> waves_;
  double amp_ = 1.0;
};

/// Binary mask marking the round(fraction * n) largest field values.
inline std::vector<double> top_fraction(const std::vector<double>& field, double fraction) {
  const std::size_t n = field.size();
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<double> mask(n, 0.0);
  if (k == 0) return mask;
  if (k >= n) {
    std::fill(mask.begin(), mask.end(), 1.0);
    return mask;
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return field[a] > field[b] || (field[a] == field[b] && a < b);
                   });
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1.0;
  return mask;
}

/// Independent generator streams derived from one scene seed.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

inline RasterImage crop(const RasterImage& img, const PatchWindow& win) {
  std::vector<double> out;
  out.reserve(win.size * win.size * img.bands());
  for (std::size_t b = 0; b < img.bands(); ++b) {
    auto band = img.band(b);
    for (std::size_t r = win.row; r < win.row + win.size; ++r) {
      const auto first = band.begin() + static_cast<std::ptrdiff_t>(r * img.width() + win.col);
      out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(win.size));
    }
  }
  return RasterImage(win.size, win.size, img.bands(), img.kind(), img.range(), std::move(out));
}

constexpr double kLogHalfRange = 7.0;

}  // namespace detail

/// Land-cover map (warped Voronoi partition), t1 image and the alternate-signature
/// image used for changed areas.
inline Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  auto rng = detail::stream(spec.seed, 1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t h = spec.height, w = spec.width, nb = spec.ms_bands;
  const std::size_t k = spec.n_classes;

  // Sites: every class owns at least two, the rest are drawn at random.
  const double cell = 14.0;
  const std::size_t n_sites = std::max<std::size_t>(
      2 * k, static_cast<std::size_t>(static_cast<double>(h * w) / (cell * cell)));
  struct Site {
    double r, c;
    int label;
  };
  std::vector<Site> sites;
  std::uniform_int_distribution<int> pick(0, static_cast<int>(k) - 1);
  for (std::size_t i = 0; i < n_sites; ++i) {
    const double r = u01(rng) * static_cast<double>(h), c = u01(rng) * static_cast<double>(w);
    sites.push_back({r, c, i < 2 * k ? static_cast<int>(i % k) : pick(rng)});
  }
  const detail::SmoothField warp_r(rng, 2.5 * cell), warp_c(rng, 2.5 * cell);
  const double warp_amp = 0.25 * cell;

  ClassMap map{h, w, std::vector<int>(h * w)};
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double qr = static_cast<double>(r) + warp_amp * warp_r(r, c);
      const double qc = static_cast<double>(c) + warp_amp * warp_c(r, c);
      double best = INFINITY;
      int label = 0;
      for (const auto& s : sites) {
        const double d = (qr - s.r) * (qr - s.r) + (qc - s.c) * (qc - s.c);
        if (d < best) {
          best = d;
          label = s.label;
        }
      }
      map.labels[r * w + c] = label;
    }
  }

  std::uniform_real_distribution<double> sig(-0.6, 0.6);
  std::vector<std::vector<double>> before(k, std::vector<double>(nb));
  std::vector<std::vector<double>> after(k, std::vector<double>(nb));
  for (auto& s : before) {
    for (double& v : s) v = sig(rng);
  }
  for (auto& s : after) {
    for (double& v : s) v = sig(rng);
  }

  // Texture: one field shared by all bands (band correlation) plus a weaker
  // per-band field.
  const auto common = detail::SmoothField(rng, 6.0).sample(h, w);
  std::vector<std::vector<double>> own;
  std::vector<double> weight(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    own.push_back(detail::SmoothField(rng, 4.0).sample(h, w));
    weight[b] = 0.5 + 0.5 * u01(rng);
  }
  auto render = [&](const std::vector<std::vector<double>>& signatures) {
    std::vector<double> d(h * w * nb);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t i = 0; i < h * w; ++i) {
        const double tex = 0.06 * weight[b] * common[i] + 0.02 * own[b][i];
        d[b * h * w + i] = std::clamp(
            signatures[static_cast<std::size_t>(map.labels[i])][b] + tex, -0.9, 0.9);
      }
    }
    return RasterImage(h, w, nb, ImageKind::MS, ValueRange::UNIT_SIGNED, std::move(d));
  };
  return Scene{render(before), render(after), std::move(map)};
}

/// Smooth blob mask covering round(fraction * H * W) pixels.
inline RasterImage make_cloud_mask(std::size_t height, std::size_t width, double fraction,
                                   std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ConfigError("cloud_fraction", "must lie in [0, 1]");
  }
  auto rng = detail::stream(seed, 2);
  const double wavelength = std::max(8.0, static_cast<double>(std::min(height, width)) / 3.0);
  const auto field = detail::SmoothField(rng, wavelength).sample(height, width);
  return RasterImage(height, width, 1, ImageKind::MASK, ValueRange::UNIT_SIGNED,
                     detail::top_fraction(field, fraction));
}

/// Z = gain * X_t1 + bias per band, except inside a blob-shaped change region
/// of change_fraction * H * W pixels where the relabeled land cover is used.
inline TemporalPair temporal_counterpart(const Scene& scene, const SceneSpec& spec) {
  spec.validate();
  const auto& x = scene.x_t1;
  if (x.bands() != spec.ms_bands) throw BandMismatch("scene bands differ from spec");
  auto rng = detail::stream(spec.seed, 3);
  const std::size_t plane = x.plane_size();
  const auto field = detail::SmoothField(rng, 16.0).sample(x.height(), x.width());
  auto changed = detail::top_fraction(field, spec.change_fraction);
  std::vector<double> z(x.size());
  for (std::size_t b = 0; b < x.bands(); ++b) {
    auto src = x.band(b), alt = scene.x_t2_base.band(b);
    for (std::size_t i = 0; i < plane; ++i) {
      const double base = changed[i] != 0.0 ? alt[i] : src[i];
      z[b * plane + i] =
          std::clamp(spec.temporal_gain[b] * base + spec.temporal_bias[b], -1.0, 1.0);
    }
  }
  return TemporalPair{
      RasterImage(x.height(), x.width(), x.bands(), ImageKind::MS, ValueRange::UNIT_SIGNED,
                  std::move(z)),
      RasterImage(x.height(), x.width(), 1, ImageKind::MASK, ValueRange::UNIT_SIGNED,
                  std::move(changed))};
}

/// Noiseless SAR backscatter: each band is an exponential of a positive random
/// combination of the MS bands, so log backscatter is linear in reflectance.
inline RasterImage sar_mixing(const RasterImage& x, const SceneSpec& spec) {
  spec.validate();
  auto rng = detail::stream(spec.seed, 4);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t plane = x.plane_size();
  std::vector<double> out(plane * spec.sar_bands);
  for (std::size_t j = 0; j < spec.sar_bands; ++j) {
    std::vector<double> mix(x.bands());
    for (double& m : mix) m = 0.1 + u01(rng);
    mix[j % x.bands()] += 1.5;
    double total = 0.0;
    for (double m : mix) total += m;
    const double kappa = 9.0 + 2.0 * u01(rng);
    for (std::size_t i = 0; i < plane; ++i) {
      double s = 0.0;
      for (std::size_t b = 0; b < x.bands(); ++b) s += mix[b] / total * 0.5 * (x.band(b)[i] + 1);
      out[j * plane + i] = std::exp(kappa * (std::clamp(s, 0.0, 1.0) - 0.5));
    }
  }
  return RasterImage(x.height(), x.width(), spec.sar_bands, ImageKind::SAR, ValueRange::RAW,
                     std::move(out));
}

/// Noiseless backscatter times unit-mean Gamma(looks, 1/looks) speckle.
inline RasterImage sar_backscatter(const RasterImage& x, const SceneSpec& spec) {
  const RasterImage clean = sar_mixing(x, spec);
  auto rng = detail::stream(spec.seed, 5);
  std::gamma_distribution<double> speckle(spec.speckle_looks, 1.0 / spec.speckle_looks);
  std::vector<double> out(clean.data().begin(), clean.data().end());
  for (double& v : out) v *= speckle(rng);
  return RasterImage(clean.height(), clean.width(), clean.bands(), ImageKind::SAR,
                     ValueRange::RAW, std::move(out));
}

/// Maps linear backscatter to [-1, 1] on a fixed log scale, ln v / 7, clamped.
inline RasterImage sar_to_unit(const RasterImage& backscatter) {
  std::vector<double> out(backscatter.data().begin(), backscatter.data().end());
  for (double& v : out) v = std::clamp(std::log(v) / detail::kLogHalfRange, -1.0, 1.0);
  return RasterImage(backscatter.height(), backscatter.width(), backscatter.bands(),
                     ImageKind::SAR, ValueRange::UNIT_SIGNED, std::move(out));
}

/// SAR proxy observation Y of the t1 scene.
inline RasterImage sar_proxy(const RasterImage& x, const SceneSpec& spec) {
  return sar_to_unit(sar_backscatter(x, spec));
}

/// Everything the simulator knows about one scene.
struct SimulatedScene {
  SceneSpec spec;
  Scene scene;
  TemporalPair temporal;
  RasterImage y;
  std::optional<RasterImage> cloud_mask;  ///< present when cloud_fraction > 0
};

inline SimulatedScene simulate_scene(const SceneSpec& spec) {
  spec.validate();
  SimulatedScene s{spec, generate_scene(spec), {}, {}, std::nullopt};
  s.temporal = temporal_counterpart(s.scene, spec);
  s.y = sar_proxy(s.scene.x_t1, spec);
  if (spec.cloud_fraction > 0.0) {
    s.cloud_mask = make_cloud_mask(spec.height, spec.width, spec.cloud_fraction, spec.seed);
  }
  return s;
}

/// X-hat = bicubic_upsample(spatial_degrade(X_t1)), clouded when `cloud` is
/// given, members pruned to `strategy`, label = X_t1.
inline ObservationSet make_observation_set(const SimulatedScene& sim, FusionStrategy strategy,
                                           const SpatialDegradeSpec& degrade,
                                           const std::optional<CloudSpec>& cloud = std::nullopt) {
  ObservationSet obs;
  obs.strategy = strategy;
  obs.x_tilde_up = resize_branch(sim.scene.x_t1, degrade, cloud);
  if (uses_sar(strategy)) obs.y = sim.y;
  if (uses_temporal(strategy)) obs.z = sim.temporal.z;
  obs.label = sim.scene.x_t1;
  if (cloud) obs.cloud_mask = cloud->mask;
  obs.check();
  return obs;
}

/// `count` random square windows whose origins are multiples of `align`.
inline std::vector<PatchWindow> sample_patch_windows(std::size_t height, std::size_t width,
                                                     std::size_t patch, std::size_t count,
                                                     std::uint64_t seed, std::size_t align = 1) {
  if (patch == 0 || patch % 4 != 0) {
    throw ShapeError("patch size must be a positive multiple of 4, got " + std::to_string(patch));
  }
  if (patch > height || patch > width) {
    throw PatchTooLarge("patch " + std::to_string(patch) + " exceeds scene " +
                        std::to_string(height) + "x" + std::to_string(width));
  }
  if (align == 0) align = 1;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> rows(0, (height - patch) / align);
  std::uniform_int_distribution<std::size_t> cols(0, (width - patch) / align);
  std::vector<PatchWindow> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t r = rows(rng) * align;
    out.push_back({r, cols(rng) * align, patch});
  }
  return out;
}

inline ObservationSet crop_observation(const ObservationSet& obs, const PatchWindow& win) {
  ObservationSet out;
  out.strategy = obs.strategy;
  out.x_tilde_up = detail::crop(obs.x_tilde_up, win);
  auto crop_opt = [&](const std::optional<RasterImage>& m) -> std::optional<RasterImage> {
    if (!m) return std::nullopt;
    return detail::crop(*m, win);
  };
  out.y = crop_opt(obs.y);
  out.z = crop_opt(obs.z);
  out.label = crop_opt(obs.label);
  out.cloud_mask = crop_opt(obs.cloud_mask);
  return out;
}

/// Congruent crops of every member at `count` random windows.
inline std::vector<ObservationSet> sample_patches(const ObservationSet& obs, std::size_t patch,
                                                  std::size_t count, std::uint64_t seed,
                                                  std::size_t align = 1) {
  std::vector<ObservationSet> out;
  for (const auto& win :
       sample_patch_windows(obs.height(), obs.width(), patch, count, seed, align)) {
    out.push_back(crop_observation(obs, win));
  }
  return out;
}

}  // namespace hetfuse
