// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails. Criteria names on the command line select a subset.

#include <Eigen/Core>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "hetfuse/datagen.hpp"
#include "hetfuse/degrade.hpp"
#include "hetfuse/loss.hpp"
#include "hetfuse/metrics.hpp"
#include "hetfuse/netgraph.hpp"
#include "hetfuse/train.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace hetfuse {
namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

/// Networks scaled down from the full architecture so the learning checks
/// fit a single CPU core; layer layout is unchanged.
TrainConfig learning_config(FusionStrategy strategy) {
  TrainConfig c;
  c.strategy = strategy;
  c.batch = 4;
  c.patch = 32;
  c.n_res_blocks = 3;
  c.base_width = 16;
  c.disc_widths = {16, 32, 64, 128};
  c.seed = 1;
  return c;
}

SceneSpec overfit_scene() {
  SceneSpec s;
  s.height = 64;
  s.width = 64;
  s.ms_bands = 3;
  s.sar_bands = 2;
  s.ratio = 4;
  s.change_fraction = 0.2;
  s.seed = 1;
  return s;
}

std::uint64_t fnv1a(const NetworkParams<float>& p) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ull;
  };
  for (const auto* group : {&p.params, &p.buffers}) {
    for (const auto& [name, t] : *group) {
      mix(name.data(), name.size());
      mix(t.storage().data(), t.size() * sizeof(float));
    }
  }
  return h;
}

Verdict a1_overfit() {
  const SimulatedScene sim = simulate_scene(overfit_scene());
  TrainConfig cfg = learning_config(FusionStrategy::HSST);
  cfg.steps = 2000;
  const std::vector<ObservationSet> data{make_observation_set(sim, cfg.strategy, cfg.degrade)};
  const TrainResult r = train(cfg, data);
  const double first = r.losses.front().content, last = r.losses.back().content;
  const double drop = 1.0 - last / first;
  const double baseline = psnr(data[0].x_tilde_up, *data[0].label);
  const double fused = psnr(fuse(r.state, data[0]), *data[0].label);
  const double gain = fused - baseline;
  return {gain >= 3.0 && drop >= 0.8,
          fmt("%zu steps: PSNR %.2f dB vs bicubic %.2f dB (gain %.2f, need >= 3); "
              "L_con %.4f -> %.4f (drop %.1f%%, need >= 80%%)",
              cfg.steps, fused, baseline, gain, first, last, 100 * drop)};
}

Verdict a2_ablation() {
  SceneSpec spec = overfit_scene();
  spec.seed = 7;
  spec.change_fraction = 0.2;
  spec.speckle_looks = 16;
  spec.cloud_fraction = 0.0;
  const SimulatedScene sim = simulate_scene(spec);
  double best_other = -std::numeric_limits<double>::infinity(), hsst = 0.0;
  std::string detail;
  for (auto strategy : {FusionStrategy::HSS, FusionStrategy::ST, FusionStrategy::HSST}) {
    TrainConfig cfg = learning_config(strategy);
    cfg.steps = 1500;
    const std::vector<ObservationSet> data{make_observation_set(sim, strategy, cfg.degrade)};
    const TrainResult r = train(cfg, data);
    const double p = psnr(fuse(r.state, data[0]), *data[0].label);
    detail += to_string(strategy) + fmt(" %.2f dB, ", p);
    if (strategy == FusionStrategy::HSST) {
      hsst = p;
    } else {
      best_other = std::max(best_other, p);
    }
  }
  return {hsst >= best_other - 0.25,
          detail + fmt("need hsst >= %.2f (1500 steps each)", best_other - 0.25)};
}

Verdict a3_cloud_mode() {
  TrainConfig cfg = learning_config(FusionStrategy::HSST);
  cfg.cloud_mode = true;
  cfg.cloud_fill = 1.0;
  std::vector<ObservationSet> data;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    SceneSpec spec = overfit_scene();
    spec.seed = seed;
    spec.cloud_fraction = 0.1 * static_cast<double>(seed);
    const SimulatedScene sim = simulate_scene(spec);
    data.push_back(make_observation_set(sim, cfg.strategy, cfg.degrade,
                                        CloudSpec{*sim.cloud_mask, cfg.cloud_fill}));
  }
  TrainState state = init_train_state(cfg);
  const float fill = static_cast<float>(cfg.cloud_fill);
  std::size_t masked = 0, wrong = 0;
  for (int k = 0; k < 100; ++k) {
    const auto batch = sample_batch(state, data);
    Network<float> g_f(state.g_f), g_b(state.g_b);
    const CycleTensors c = cycle_forward(cfg, batch, g_f, g_b, k % 2 ? Pass::Train : Pass::Infer);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto mask = batch[i].cloud_mask->band(0);
      for (std::size_t b = 0; b < cfg.ms_bands; ++b) {
        const auto x = c.x_hat_star.channel(i, b);
        for (std::size_t p = 0; p < mask.size(); ++p) {
          if (mask[p] <= 0.5) continue;
          ++masked;
          if (std::memcmp(&x[p], &fill, sizeof(float)) != 0) ++wrong;
        }
      }
    }
    if (k % 10 == 0) train_step(state, batch);
  }
  return {wrong == 0 && masked > 0,
          fmt("100 batches, %zu masked values, %zu differ from the fill value", masked, wrong)};
}

Verdict a4_metrics() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto x = testing::random_image(16, 16, 3, 5000 + s, 0.05, 1.0);
    const auto y = testing::random_image(16, 16, 3, 6000 + s, 0.05, 1.0);
    worst = std::max(worst, std::abs(sam(x, y) - oracle::sam(x, y)));
    worst = std::max(worst, std::abs(ergas(x, y, 0.25) - oracle::ergas(x, y, 0.25)));
    worst = std::max(worst, std::abs(q_index(x, y) - oracle::q_index(x, y)));
    worst = std::max(worst, std::abs(psnr(x, y) - oracle::psnr(x, y)));
    const auto got = ssim(x, y), want = oracle::ssim(x, y);
    for (std::size_t b = 0; b < 3; ++b) worst = std::max(worst, std::abs(got[b] - want[b]));
  }
  bool ideal = true;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto x = testing::random_image(16, 16, 3, 7000 + s, 0.05, 1.0);
    const MetricsReport r = evaluate_all(x, x);
    ideal &= r.sam_degrees == 0.0 && r.ergas == 0.0 && r.q == 1.0 &&
             r.psnr_db == std::numeric_limits<double>::infinity() && r.ssim_avg == 1.0;
    for (double v : r.ssim_per_band) ideal &= v == 1.0;
    ideal &= metrics_csv_row(r) == "0,0,1,inf,1,1,1,1";
  }
  return {worst <= 1e-6 && ideal,
          fmt("max |library - oracle| %.3g over 100 pairs (need <= 1e-6); identity rows %s",
              worst, ideal ? "exact" : "NOT exact")};
}

Verdict a5_gradients() {
  std::size_t checked = 0, skipped = 0, bad = 0;
  std::string first;
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto r = oracle::check_loss_gradients(oracle::random_bundle(900 + s),
                                                LossWeights{10.0, 1.0, 1.0}, 1e-4, 1e-3);
    checked += r.checked;
    skipped += r.skipped;
    bad += r.mismatches.size();
    if (first.empty() && !r.mismatches.empty()) first = r.mismatches.front();
  }
  return {bad == 0 && checked > 0,
          fmt("%zu gradient entries checked, %zu near-zero L1 residuals skipped, %zu mismatches",
              checked, skipped, bad) +
              (first.empty() ? "" : " (first: " + first + ")")};
}

Verdict a6_shapes() {
  const auto gen = build_generator<float>(GeneratorSpec{8, 3, 6, 64}, 17, "g_f");
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::size_t cases = 0, bad_shape = 0, out_of_bounds = 0;
  for (std::size_t h = 32; h <= 128; h += 4) {
    for (std::size_t w = 32; w <= 128; w += 4) {
      Tensor<float> x(1, 8, h, w);
      for (auto& v : x.storage()) v = u(rng);
      const Tensor<float> y = generator_forward(gen, x);
      ++cases;
      if (y.n() != 1 || y.c() != 3 || y.h() != h || y.w() != w) ++bad_shape;
      for (float v : y.storage()) out_of_bounds += !(v > -1.0f && v < 1.0f);
    }
  }
  const auto disc = build_discriminator<float>(DiscriminatorSpec{3, {64, 128, 256, 512}, 0.2}, 19,
                                               "d_f");
  Network<float> d(disc);
  bool disc_ok = true;
  std::string disc_detail;
  for (auto [in, want] : {std::pair<std::size_t, std::size_t>{64, 6}, {256, 30}}) {
    Tensor<float> x(1, 3, in, in);
    for (auto& v : x.storage()) v = u(rng);
    const Tensor<float> y = d.forward(x, Pass::Infer);
    disc_ok &= y.c() == 1 && y.h() == want && y.w() == want;
    disc_detail += fmt(" D %zu->%zux%zu", in, y.h(), y.w());
  }
  return {bad_shape == 0 && out_of_bounds == 0 && disc_ok,
          fmt("%zu generator sizes, %zu wrong shapes, %zu values outside (-1,1);", cases,
              bad_shape, out_of_bounds) +
              disc_detail};
}

Verdict a7_determinism() {
  Eigen::setNbThreads(1);
  const SimulatedScene sim = simulate_scene(overfit_scene());
  TrainConfig cfg = learning_config(FusionStrategy::HSST);
  const std::vector<ObservationSet> data{make_observation_set(sim, cfg.strategy, cfg.degrade)};

  // Update isolation, hashed around each of the three updates.
  TrainState state = init_train_state(cfg);
  std::size_t violations = 0;
  for (int k = 0; k < 20; ++k) {
    const auto batch = sample_batch(state, data);
    const std::uint64_t step = state.step + 1;
    const std::uint64_t gf0 = fnv1a(state.g_f), gb0 = fnv1a(state.g_b);
    const std::uint64_t df0 = fnv1a(state.d_f), db0 = fnv1a(state.d_b);
    auto gen = update_generators(state, batch);
    violations += fnv1a(state.d_f) != df0 || fnv1a(state.d_b) != db0;
    violations += fnv1a(state.g_f) == gf0 || fnv1a(state.g_b) == gb0;
    const std::uint64_t gf1 = fnv1a(state.g_f), gb1 = fnv1a(state.g_b);
    update_discriminator(state.d_f, state.opt_df, cfg.adam, gen.fusion, gen.label, step, "D_F");
    violations += fnv1a(state.g_f) != gf1 || fnv1a(state.g_b) != gb1 || fnv1a(state.d_b) != db0;
    const std::uint64_t df1 = fnv1a(state.d_f);
    violations += df1 == df0;
    update_discriminator(state.d_b, state.opt_db, cfg.adam, gen.cycle_out, gen.cycle_target, step,
                         "D_B");
    violations += fnv1a(state.g_f) != gf1 || fnv1a(state.g_b) != gb1 || fnv1a(state.d_f) != df1;
    violations += fnv1a(state.d_b) == db0;
    state.step = step;
  }

  // Two seeded full runs.
  cfg.steps = 200;
  cfg.checkpoint_every = 50;
  testing::TempDir a("accept_a"), b("accept_b");
  train(cfg, data, a.path());
  train(cfg, data, b.path());
  bool identical = true;
  for (const char* f : {"loss_log.csv", "checkpoint/manifest.json", "checkpoint/params.bin"}) {
    identical &= testing::slurp(a / f) == testing::slurp(b / f) && !testing::slurp(a / f).empty();
  }
  Eigen::setNbThreads(0);
  return {violations == 0 && identical,
          fmt("20 steps hashed, %zu isolation violations; two 200-step runs %s", violations,
              identical ? "byte-identical" : "DIFFER")};
}

Verdict a8_degrade() {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> blocks(3, 10), bands(1, 3);
  std::uniform_real_distribution<double> sigma(0.5, 3.0);
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const int s = 2 + k % 3;
    const std::size_t h = static_cast<std::size_t>(s * blocks(rng));
    const std::size_t w = static_cast<std::size_t>(s * blocks(rng));
    const auto x = testing::random_image(h, w, static_cast<std::size_t>(bands(rng)), 800 + k);
    const double sg = sigma(rng);
    const auto got = spatial_degrade(x, SpatialDegradeSpec{s, sg});
    const auto want = oracle::dense_degrade_oracle(x, s, sg);
    if (got.height() != want.height() || got.width() != want.width()) {
      return {false, fmt("image %d: shape differs from the oracle", k)};
    }
    for (std::size_t i = 0; i < got.size(); ++i) {
      worst = std::max(worst, std::abs(got.data()[i] - want.data()[i]));
    }
  }
  return {worst <= 1e-6, fmt("50 images, S in {2,3,4}, max deviation %.3g (need <= 1e-6)", worst)};
}

}  // namespace
}  // namespace hetfuse

int main(int argc, char** argv) {
  using namespace hetfuse;
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"A1", a1_overfit},    {"A2", a2_ablation}, {"A3", a3_cloud_mode}, {"A4", a4_metrics},
      {"A5", a5_gradients},  {"A6", a6_shapes},   {"A7", a7_determinism}, {"A8", a8_degrade}};
  std::vector<std::string> selected(argv + 1, argv + argc);
  bool all = true;
  for (const auto& [name, fn] : criteria) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), name) == selected.end()) {
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s  %s [%.0f s]\n", name.c_str(), v.pass ? "PASS" : "FAIL", v.detail.c_str(),
                secs);
    std::fflush(stdout);
    all &= v.pass;
  }
  return all ? 0 : 1;
}
