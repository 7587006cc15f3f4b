#pragma once

// Full-reference quality indices: SAM, ERGAS, Q (universal image quality
// index), PSNR and SSIM, plus a CSV-ready report aggregating all five.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "hetfuse/errors.hpp"
#include "hetfuse/imagery.hpp"

namespace hetfuse {

struct MetricsReport {
  double sam_degrees = 0.0;
  double ergas = 0.0;
  double q = 1.0;
  double psnr_db = std::numeric_limits<double>::infinity();
  std::vector<double> ssim_per_band;
  double ssim_avg = 1.0;
};

namespace detail {

inline void require_same_shape(const RasterImage& a, const RasterImage& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width() || a.bands() != b.bands()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + "x" + std::to_string(a.bands()) + " vs " +
                     std::to_string(b.height()) + "x" + std::to_string(b.width()) + "x" +
                     std::to_string(b.bands()));
  }
}

/// Renders a value the way the CSV report does: %.10g, +inf as "inf".
inline std::string csv_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

/// Mean spectral angle in degrees over pixels whose vectors are both non-zero.
inline double sam(const RasterImage& result, const RasterImage& reference) {
  detail::require_same_shape(result, reference, "sam");
  if (result.bands() < 2) throw ShapeError("sam needs at least two bands");
  const std::size_t plane = result.plane_size();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t p = 0; p < plane; ++p) {
    double nx = 0.0, ny = 0.0;
    for (std::size_t b = 0; b < result.bands(); ++b) {
      nx += result.band(b)[p] * result.band(b)[p];
      ny += reference.band(b)[p] * reference.band(b)[p];
    }
    nx = std::sqrt(nx);
    ny = std::sqrt(ny);
    if (nx < 1e-12 || ny < 1e-12) continue;
    // Half-angle form: exact zero for parallel vectors, stable near 0 and 180.
    double diff = 0.0, sum = 0.0;
    for (std::size_t b = 0; b < result.bands(); ++b) {
      const double u = result.band(b)[p] / nx, v = reference.band(b)[p] / ny;
      diff += (u - v) * (u - v);
      sum += (u + v) * (u + v);
    }
    total += 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
    ++counted;
  }
  if (counted == 0) return 0.0;
  return total / static_cast<double>(counted) * 180.0 / std::numbers::pi;
}

/// 100 * ratio * sqrt(mean_b RMSE_b^2 / mu_b^2), mu_b the reference band mean.
/// `ratio` is the high/low resolution pixel-size ratio.
inline double ergas(const RasterImage& result, const RasterImage& reference, double ratio) {
  detail::require_same_shape(result, reference, "ergas");
  if (!(ratio > 0.0)) throw Error("ergas ratio must be > 0");
  double acc = 0.0;
  const double n = static_cast<double>(result.plane_size());
  for (std::size_t b = 0; b < result.bands(); ++b) {
    auto x = result.band(b), y = reference.band(b);
    double se = 0.0, mu = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      se += (x[i] - y[i]) * (x[i] - y[i]);
      mu += y[i];
    }
    mu /= n;
    if (std::abs(mu) < 1e-12) {
      throw DegenerateReference("ergas: reference band " + std::to_string(b) + " has zero mean");
    }
    acc += (se / n) / (mu * mu);
  }
  return 100.0 * ratio * std::sqrt(acc / static_cast<double>(result.bands()));
}

/// Universal image quality index averaged over non-overlapping 32 x 32 blocks
/// (block edge shrinks to the image edge for smaller images) and over bands.
/// Each block factor (correlation, luminance, contrast) is stabilized by
/// eps = 1e-12 in numerator and denominator, so flat blocks score 1.
inline double q_index(const RasterImage& result, const RasterImage& reference,
                      std::size_t block = 32) {
  detail::require_same_shape(result, reference, "q_index");
  constexpr double eps = 1e-12;
  const std::size_t bh = std::min(block, result.height());
  const std::size_t bw = std::min(block, result.width());
  if (bh == 0 || bw == 0) throw ShapeError("q_index on an empty image");
  const std::size_t w = result.width();
  double band_total = 0.0;
  for (std::size_t b = 0; b < result.bands(); ++b) {
    auto x = result.band(b), y = reference.band(b);
    double sum_q = 0.0;
    std::size_t blocks = 0;
    for (std::size_t r0 = 0; r0 + bh <= result.height(); r0 += bh) {
      for (std::size_t c0 = 0; c0 + bw <= w; c0 += bw) {
        const double n = static_cast<double>(bh * bw);
        double mx = 0, my = 0;
        for (std::size_t r = r0; r < r0 + bh; ++r) {
          for (std::size_t c = c0; c < c0 + bw; ++c) {
            mx += x[r * w + c];
            my += y[r * w + c];
          }
        }
        mx /= n;
        my /= n;
        double vx = 0, vy = 0, dd = 0;
        for (std::size_t r = r0; r < r0 + bh; ++r) {
          for (std::size_t c = c0; c < c0 + bw; ++c) {
            const double dx = x[r * w + c] - mx, dy = y[r * w + c] - my;
            vx += dx * dx;
            vy += dy * dy;
            dd += (dx - dy) * (dx - dy);
          }
        }
        // Unbiased moments; the normalisation cancels in every factor.
        const double norm = n - 1 > 0 ? n - 1 : 1;
        vx /= norm;
        vy /= norm;
        dd /= norm;
        // Correlation times contrast is 2cov/(vx+vy) = 1 - var(x-y)/(vx+vy), and
        // luminance likewise; both forms are exactly 1 for identical blocks.
        const double corr_con = 1.0 - dd / (vx + vy + eps);
        const double lum = 1.0 - (mx - my) * (mx - my) / (mx * mx + my * my + eps);
        sum_q += corr_con * lum;
        ++blocks;
      }
    }
    band_total += sum_q / static_cast<double>(blocks);
  }
  return band_total / static_cast<double>(result.bands());
}

/// 10 log10(peak^2 / MSE) over all bands; +inf for identical images.
inline double psnr(const RasterImage& result, const RasterImage& reference, double peak = 2.0) {
  detail::require_same_shape(result, reference, "psnr");
  if (!(peak > 0.0)) throw Error("psnr peak must be > 0");
  double se = 0.0;
  for (std::size_t i = 0; i < result.size(); ++i) {
    const double d = result.data()[i] - reference.data()[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(result.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

/// Per-band SSIM: 11 x 11 Gaussian window (sigma 1.5), C1 = (0.01 peak)^2,
/// C2 = (0.03 peak)^2, averaged over all window positions fully inside the image.
inline std::vector<double> ssim(const RasterImage& result, const RasterImage& reference,
                                double peak = 2.0) {
  detail::require_same_shape(result, reference, "ssim");
  constexpr std::size_t win = 11;
  if (result.height() < win || result.width() < win) {
    throw TooSmall("ssim needs at least 11x11 pixels");
  }
  std::array<double, win> g{};
  double gs = 0.0;
  for (std::size_t i = 0; i < win; ++i) {
    const double d = static_cast<double>(i) - 5.0;
    g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    gs += g[i];
  }
  for (double& v : g) v /= gs;
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  const std::size_t h = result.height(), w = result.width();
  const std::size_t oh = h - win + 1, ow = w - win + 1;

  // Separable valid-mode filtering of x, y, x^2, y^2, xy.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> tmp(oh * w, 0.0), out(oh * ow, 0.0);
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t k = 0; k < win; ++k) {
        for (std::size_t c = 0; c < w; ++c) tmp[r * w + c] += g[k] * src[(r + k) * w + c];
      }
    }
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < win; ++k) acc += g[k] * tmp[r * w + c + k];
        out[r * ow + c] = acc;
      }
    }
    return out;
  };

  std::vector<double> per_band;
  for (std::size_t b = 0; b < result.bands(); ++b) {
    auto xs = result.band(b), ys = reference.band(b);
    std::vector<double> x(xs.begin(), xs.end()), y(ys.begin(), ys.end());
    std::vector<double> xx(x.size()), yy(x.size()), dd(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      dd[i] = (x[i] - y[i]) * (x[i] - y[i]);
    }
    const auto mx = filter(x), my = filter(y), exx = filter(xx), eyy = filter(yy),
               edd = filter(dd);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = exx[i] - mx[i] * mx[i];
      const double vy = eyy[i] - my[i] * my[i];
      const double dm = mx[i] - my[i];
      // vx + vy - 2cov = E[(x-y)^2] - (mx-my)^2; zero for identical windows.
      const double spread = edd[i] - dm * dm;
      const double lum = 1.0 - dm * dm / (mx[i] * mx[i] + my[i] * my[i] + c1);
      const double cs = 1.0 - spread / (vx + vy + c2);
      total += lum * cs;
    }
    per_band.push_back(total / static_cast<double>(mx.size()));
  }
  return per_band;
}

inline MetricsReport evaluate_all(const RasterImage& result, const RasterImage& reference,
                                  double ratio = 1.0, double peak = 2.0) {
  detail::require_same_shape(result, reference, "evaluate_all");
  MetricsReport r;
  r.sam_degrees = sam(result, reference);
  r.ergas = ergas(result, reference, ratio);
  r.q = q_index(result, reference);
  r.psnr_db = psnr(result, reference, peak);
  r.ssim_per_band = ssim(result, reference, peak);
  double s = 0.0;
  for (double v : r.ssim_per_band) s += v;
  r.ssim_avg = s / static_cast<double>(r.ssim_per_band.size());
  return r;
}

/// `sam,ergas,q,psnr,ssim_b,ssim_g,ssim_r,ssim_avg` for three bands; other
/// band counts use `ssim_1..ssim_B`.
inline std::string metrics_csv_header(std::size_t bands) {
  std::string h = "sam,ergas,q,psnr";
  if (bands == 3) {
    h += ",ssim_b,ssim_g,ssim_r";
  } else {
    for (std::size_t b = 0; b < bands; ++b) h += ",ssim_" + std::to_string(b + 1);
  }
  return h + ",ssim_avg";
}

inline std::string metrics_csv_row(const MetricsReport& r) {
  std::string row = detail::csv_number(r.sam_degrees) + "," + detail::csv_number(r.ergas) + "," +
                    detail::csv_number(r.q) + "," + detail::csv_number(r.psnr_db);
  for (double v : r.ssim_per_band) row += "," + detail::csv_number(v);
  return row + "," + detail::csv_number(r.ssim_avg);
}

}  // namespace hetfuse
