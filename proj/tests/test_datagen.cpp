#include <gtest/gtest.h>

#include <set>

#include "hetfuse/datagen.hpp"

namespace hetfuse {
namespace {

SceneSpec small_spec(std::uint64_t seed = 3) {
  SceneSpec s;
  s.height = 64;
  s.width = 64;
  s.seed = seed;
  return s;
}

double fraction_set(const RasterImage& mask) {
  double n = 0;
  for (double v : mask.data()) n += v;
  return n / static_cast<double>(mask.size());
}

TEST(SceneSpec, Validation) {
  EXPECT_NO_THROW(small_spec().validate());
  auto s = small_spec();
  s.change_fraction = -0.1;
  try {
    s.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "change_fraction");
  }
  s = small_spec();
  s.height = 60;  // not a multiple of 16
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.temporal_gain = {1.0};
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(GenerateScene, Deterministic) {
  auto a = generate_scene(small_spec(9)), b = generate_scene(small_spec(9));
  EXPECT_EQ(a.x_t1, b.x_t1);
  EXPECT_EQ(a.x_t2_base, b.x_t2_base);
  EXPECT_EQ(a.class_map.labels, b.class_map.labels);
  auto c = generate_scene(small_spec(10));
  EXPECT_NE(a.x_t1, c.x_t1);
}

TEST(GenerateScene, SingleClass) {
  auto s = small_spec();
  s.n_classes = 1;
  auto scene = generate_scene(s);
  for (int l : scene.class_map.labels) EXPECT_EQ(l, 0);
  EXPECT_EQ(scene.x_t1.kind(), ImageKind::MS);
  EXPECT_EQ(scene.x_t1.range(), ValueRange::UNIT_SIGNED);
}

TEST(GenerateScene, ValuesInsideUnitRange) {
  auto scene = generate_scene(small_spec());
  for (double v : scene.x_t1.data()) {
    EXPECT_GE(v, -0.9);
    EXPECT_LE(v, 0.9);
  }
}

TEST(GenerateScene, CoversAllClasses) {
  int covered = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SceneSpec s;
    s.height = s.width = 128;
    s.n_classes = 8;
    s.seed = seed;
    auto scene = generate_scene(s);
    std::set<int> seen(scene.class_map.labels.begin(), scene.class_map.labels.end());
    covered += seen.size() == 8 ? 1 : 0;
  }
  EXPECT_GE(covered, 99);
}

TEST(TemporalCounterpart, IdentityWithoutChange) {
  auto s = small_spec();
  s.change_fraction = 0.0;
  s.temporal_gain = {1, 1, 1};
  s.temporal_bias = {0, 0, 0};
  auto scene = generate_scene(s);
  auto t = temporal_counterpart(scene, s);
  EXPECT_EQ(t.z.data().size(), scene.x_t1.data().size());
  EXPECT_TRUE(std::equal(t.z.data().begin(), t.z.data().end(), scene.x_t1.data().begin()));
  EXPECT_EQ(fraction_set(t.change_mask), 0.0);
}

TEST(TemporalCounterpart, AffineWithoutChange) {
  auto s = small_spec(4);
  s.change_fraction = 0.0;
  auto scene = generate_scene(s);
  auto z = temporal_counterpart(scene, s).z;
  for (std::size_t b = 0; b < 3; ++b) {
    // Least-squares fit z = a x + c, then the worst residual.
    auto x = scene.x_t1.band(b), y = z.band(b);
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      sx += x[i];
      sy += y[i];
      sxx += x[i] * x[i];
      sxy += x[i] * y[i];
    }
    const double a = (n * sxy - sx * sy) / (n * sxx - sx * sx), c = (sy - a * sx) / n;
    double worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(a * x[i] + c - y[i]));
    EXPECT_LT(worst, 1e-9);
    EXPECT_NEAR(a, s.temporal_gain[b], 1e-9);
    EXPECT_NEAR(c, s.temporal_bias[b], 1e-9);
  }
}

TEST(TemporalCounterpart, ChangedAreaMatchesFraction) {
  for (double f : {0.2, 0.3, 0.5}) {
    auto s = small_spec(5);
    s.height = s.width = 128;
    s.change_fraction = f;
    auto t = temporal_counterpart(generate_scene(s), s);
    EXPECT_NEAR(fraction_set(t.change_mask), f, 0.05 * f);
  }
}

TEST(TemporalCounterpart, ChangeRegionsUseNewSignatures) {
  auto s = small_spec(6);
  s.change_fraction = 0.3;
  auto scene = generate_scene(s);
  auto t = temporal_counterpart(scene, s);
  auto mask = t.change_mask.band(0);
  double inside = 0, outside = 0;
  std::size_t ni = 0, no = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double d = std::abs(t.z.band(0)[i] -
                              (s.temporal_gain[0] * scene.x_t1.band(0)[i] + s.temporal_bias[0]));
    (mask[i] != 0 ? inside : outside) += d;
    (mask[i] != 0 ? ni : no) += 1;
  }
  EXPECT_LT(outside / no, 1e-12);
  EXPECT_GT(inside / ni, 0.05);
}

TEST(SarProxy, DeterministicAndShaped) {
  auto s = small_spec();
  auto x = generate_scene(s).x_t1;
  auto y1 = sar_proxy(x, s), y2 = sar_proxy(x, s);
  EXPECT_EQ(y1, y2);
  EXPECT_EQ(y1.bands(), 2u);
  EXPECT_EQ(y1.kind(), ImageKind::SAR);
  EXPECT_EQ(y1.range(), ValueRange::UNIT_SIGNED);
}

TEST(SarProxy, SpeckleShrinksWithLooks) {
  auto s = small_spec();
  s.height = s.width = 128;
  auto x = generate_scene(s).x_t1;
  double prev = INFINITY;
  for (int looks : {1, 16, 256}) {
    s.speckle_looks = looks;
    auto clean = sar_mixing(x, s), noisy = sar_backscatter(x, s);
    double m = 0, m2 = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      const double r = noisy.data()[i] / clean.data()[i];
      m += r;
      m2 += r * r;
    }
    const double n = static_cast<double>(clean.size());
    const double sd = std::sqrt(m2 / n - (m / n) * (m / n));
    EXPECT_NEAR(m / n, 1.0, 0.03);
    EXPECT_NEAR(sd * std::sqrt(looks), 1.0, 0.05) << "looks " << looks;
    EXPECT_LT(sd, prev);
    prev = sd;
  }
}

TEST(SarProxy, MixingIsMonotoneInReflectance) {
  auto s = small_spec();
  auto lo = RasterImage::filled(4, 4, 3, ImageKind::MS, ValueRange::UNIT_SIGNED, -0.5);
  auto hi = RasterImage::filled(4, 4, 3, ImageKind::MS, ValueRange::UNIT_SIGNED, 0.5);
  auto a = sar_mixing(lo, s), b = sar_mixing(hi, s);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LT(a.data()[i], b.data()[i]);
}

// Edge statistic on the 3x3 box-filtered proxy: mean forward-difference
// magnitude on class boundaries versus pixels deep inside a class.
double edge_contrast(const RasterImage& y, const ClassMap& map) {
  const std::size_t h = y.height(), w = y.width();
  std::vector<double> s(y.size());
  for (std::size_t b = 0; b < y.bands(); ++b) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        double acc = 0;
        int n = 0;
        for (long dr = -1; dr <= 1; ++dr) {
          for (long dc = -1; dc <= 1; ++dc) {
            const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
            if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
            acc += y.at(b, rr, cc);
            ++n;
          }
        }
        s[(b * h + r) * w + c] = acc / n;
      }
    }
  }
  double edge = 0, interior = 0;
  std::size_t ne = 0, ni = 0;
  for (std::size_t r = 2; r + 2 < h; ++r) {
    for (std::size_t c = 2; c + 2 < w; ++c) {
      double g = 0;
      for (std::size_t b = 0; b < y.bands(); ++b) {
        const double v = s[(b * h + r) * w + c];
        g += std::abs(s[(b * h + r) * w + c + 1] - v) + std::abs(s[(b * h + r + 1) * w + c] - v);
      }
      const bool boundary = map.at(r, c) != map.at(r, c + 1) || map.at(r, c) != map.at(r + 1, c);
      bool flat = true;
      for (std::size_t rr = r - 2; rr <= r + 2; ++rr) {
        for (std::size_t cc = c - 2; cc <= c + 2; ++cc) flat = flat && map.at(rr, cc) == map.at(r, c);
      }
      if (boundary) {
        edge += g;
        ++ne;
      } else if (flat) {
        interior += g;
        ++ni;
      }
    }
  }
  return (edge / ne) / (interior / ni);
}

TEST(SarProxy, PreservesClassEdges) {
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    auto s = small_spec(seed);
    s.height = s.width = 128;
    s.speckle_looks = 16;
    auto scene = generate_scene(s);
    EXPECT_GE(edge_contrast(sar_proxy(scene.x_t1, s), scene.class_map), 2.0) << "seed " << seed;
  }
}

TEST(CloudMask, Fractions) {
  EXPECT_EQ(fraction_set(make_cloud_mask(64, 64, 0.0, 1)), 0.0);
  EXPECT_EQ(fraction_set(make_cloud_mask(64, 64, 1.0, 1)), 1.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const double f = fraction_set(make_cloud_mask(96, 80, 0.2315, seed));
    EXPECT_GE(f, 0.2215);
    EXPECT_LE(f, 0.2415);
  }
  EXPECT_EQ(make_cloud_mask(32, 32, 0.1972, 4), make_cloud_mask(32, 32, 0.1972, 4));
  EXPECT_THROW(make_cloud_mask(8, 8, 1.5, 0), ConfigError);
}

TEST(CloudMask, IsBlobby) {
  auto m = make_cloud_mask(128, 128, 0.2, 3);
  // Most cloud pixels have a cloudy right-hand neighbour.
  std::size_t cloudy = 0, joined = 0;
  for (std::size_t r = 0; r < 128; ++r) {
    for (std::size_t c = 0; c + 1 < 128; ++c) {
      if (m.at(0, r, c) != 0) {
        ++cloudy;
        joined += m.at(0, r, c + 1) != 0;
      }
    }
  }
  EXPECT_GT(static_cast<double>(joined) / cloudy, 0.9);
}

TEST(ObservationSet, StrategyMembers) {
  auto sim = simulate_scene(small_spec());
  auto spec = SpatialDegradeSpec::with_default_blur(4);
  auto hsst = make_observation_set(sim, FusionStrategy::HSST, spec);
  EXPECT_EQ(hsst.generator_input().bands(), 8u);
  auto st = make_observation_set(sim, FusionStrategy::ST, spec);
  EXPECT_FALSE(st.y);
  EXPECT_TRUE(st.z);
  EXPECT_EQ(st.generator_input().bands(), 6u);
  auto hss = make_observation_set(sim, FusionStrategy::HSS, spec);
  EXPECT_FALSE(hss.z);
  EXPECT_TRUE(hss.y);
  EXPECT_EQ(hss.generator_input().bands(), 5u);
  ASSERT_TRUE(hss.label);
  EXPECT_EQ(*hss.label, sim.scene.x_t1);
}

TEST(ObservationSet, IdentityDegradation) {
  auto sim = simulate_scene(small_spec());
  auto obs = make_observation_set(sim, FusionStrategy::HSST, SpatialDegradeSpec{1, 0.0});
  EXPECT_EQ(obs.x_tilde_up, *obs.label);
}

TEST(ObservationSet, MatchesResizeBranchOfLabel) {
  auto s = small_spec(8);
  s.cloud_fraction = 0.2;
  auto sim = simulate_scene(s);
  auto spec = SpatialDegradeSpec::with_default_blur(4);
  CloudSpec cloud{*sim.cloud_mask, 1.0};
  auto obs = make_observation_set(sim, FusionStrategy::HSST, spec, cloud);
  EXPECT_EQ(resize_branch(*obs.label, spec, cloud), obs.x_tilde_up);
  // Label is untouched under the cloud.
  EXPECT_EQ(*obs.label, sim.scene.x_t1);
  auto mask = obs.cloud_mask->band(0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0) {
      EXPECT_EQ(obs.x_tilde_up.band(1)[i], 1.0);
    }
  }
}

TEST(ObservationSet, CheckRejectsWrongMembers) {
  auto sim = simulate_scene(small_spec());
  auto obs = make_observation_set(sim, FusionStrategy::HSS, SpatialDegradeSpec{4, 2.0});
  obs.strategy = FusionStrategy::HSST;
  EXPECT_THROW(obs.check(), StrategyMismatch);
}

TEST(SamplePatches, ZeroCount) {
  auto sim = simulate_scene(small_spec());
  auto obs = make_observation_set(sim, FusionStrategy::HSST, SpatialDegradeSpec{4, 2.0});
  EXPECT_TRUE(sample_patches(obs, 32, 0, 1).empty());
}

TEST(SamplePatches, CongruentCrops) {
  auto sim = simulate_scene(small_spec());
  auto obs = make_observation_set(sim, FusionStrategy::HSST, SpatialDegradeSpec{4, 2.0});
  auto windows = sample_patch_windows(64, 64, 32, 20, 11, 4);
  auto patches = sample_patches(obs, 32, 20, 11, 4);
  ASSERT_EQ(patches.size(), 20u);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& w = windows[i];
    EXPECT_EQ(w.row % 4, 0u);
    EXPECT_EQ(w.col % 4, 0u);
    const auto& p = patches[i];
    EXPECT_EQ(p.height(), 32u);
    for (std::size_t r = 0; r < 32; ++r) {
      for (std::size_t c = 0; c < 32; ++c) {
        for (std::size_t b = 0; b < 3; ++b) {
          EXPECT_EQ(p.label->at(b, r, c), obs.label->at(b, w.row + r, w.col + c));
          EXPECT_EQ(p.z->at(b, r, c), obs.z->at(b, w.row + r, w.col + c));
          EXPECT_EQ(p.x_tilde_up.at(b, r, c), obs.x_tilde_up.at(b, w.row + r, w.col + c));
        }
        EXPECT_EQ(p.y->at(1, r, c), obs.y->at(1, w.row + r, w.col + c));
      }
    }
  }
  EXPECT_EQ(patches[3].x_tilde_up, sample_patches(obs, 32, 20, 11, 4)[3].x_tilde_up);
}

TEST(SamplePatches, Errors) {
  auto sim = simulate_scene(small_spec());
  auto obs = make_observation_set(sim, FusionStrategy::ST, SpatialDegradeSpec{4, 2.0});
  EXPECT_THROW(sample_patches(obs, 68, 1, 1), PatchTooLarge);
  EXPECT_THROW(sample_patches(obs, 30, 1, 1), ShapeError);
}

TEST(SamplePatches, PaperScaleWindows) {
  auto windows = sample_patch_windows(6400, 5300, 200, 1984, 2024);
  ASSERT_EQ(windows.size(), 1984u);
  for (const auto& w : windows) {
    EXPECT_LE(w.row + 200, 6400u);
    EXPECT_LE(w.col + 200, 5300u);
  }
}

}  // namespace
}  // namespace hetfuse
