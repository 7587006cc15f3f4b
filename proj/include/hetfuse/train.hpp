#pragma once

// Training cycle of the residual cycle GAN and the inference path.
//
// One step: (1) both generators are updated jointly on the generator loss,
// the discriminators being evaluated with batch statistics but left
// untouched; (2) the forward discriminator and (3) the backward
// discriminator are then updated on the detached generator outputs.

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hetfuse/datagen.hpp"
#include "hetfuse/degrade.hpp"
#include "hetfuse/errors.hpp"
#include "hetfuse/imagery.hpp"
#include "hetfuse/loss.hpp"
#include "hetfuse/netgraph.hpp"
#include "hetfuse/strategy.hpp"
#include "hetfuse/tensor.hpp"

namespace hetfuse {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  FusionStrategy strategy = FusionStrategy::HSST;
  std::size_t ms_bands = 3;
  std::size_t sar_bands = 2;
  std::size_t batch = 4;
  std::size_t steps = 100;
  std::size_t patch = 0;  ///< square crop edge; 0 trains on whole samples
  AdamConfig adam;
  LossWeights weights;
  SpatialDegradeSpec degrade{4, 2.0};
  bool cloud_mode = false;
  double cloud_fill = 1.0;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  ///< 0: only the initial and final checkpoints
  std::size_t n_res_blocks = 6;
  std::size_t base_width = 64;
  std::array<std::size_t, 4> disc_widths{64, 128, 256, 512};

  void validate() const {
    if (batch < 1) throw ConfigError("batch", "must be >= 1");
    if (patch % 4 != 0) throw ConfigError("patch", "must be a multiple of 4");
    if (ms_bands < 1) throw ConfigError("ms_bands", "must be >= 1");
    if (sar_bands < 1) throw ConfigError("sar_bands", "must be >= 1");
    if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) throw ConfigError("lr", "must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("beta1", "must be in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("beta2", "must be in [0, 1)");
    if (!(adam.eps > 0.0)) throw ConfigError("eps", "must be > 0");
    weights.validate();
    if (degrade.ratio < 1) throw ConfigError("ratio", "must be >= 1");
    if (!(degrade.blur_sigma >= 0.0)) throw ConfigError("blur_sigma", "must be >= 0");
    if (!(cloud_fill >= -1.0 && cloud_fill <= 1.0)) {
      throw ConfigError("cloud_fill", "must lie in [-1, 1]");
    }
    if (n_res_blocks < 1) throw ConfigError("n_res_blocks", "must be >= 1");
    if (base_width < 1) throw ConfigError("base_width", "must be >= 1");
    for (auto w : disc_widths) {
      if (w < 1) throw ConfigError("disc_widths", "must be >= 1");
    }
  }

  GeneratorSpec forward_generator() const {
    return {forward_in_channels(strategy, ms_bands, sar_bands), ms_bands, n_res_blocks,
            base_width};
  }
  GeneratorSpec backward_generator() const {
    return {ms_bands, backward_out_channels(strategy, ms_bands, sar_bands), n_res_blocks,
            base_width};
  }
  DiscriminatorSpec forward_discriminator() const { return {ms_bands, disc_widths, 0.2}; }
  DiscriminatorSpec backward_discriminator() const {
    return {forward_in_channels(strategy, ms_bands, sar_bands), disc_widths, 0.2};
  }
};

/// Adam first/second moments keyed by parameter name, plus the update count.
struct AdamState {
  std::map<std::string, Tensor<float>> m;
  std::map<std::string, Tensor<float>> v;
  std::uint64_t t = 0;
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct TrainState {
  TrainConfig config;
  NetworkParams<float> g_f, g_b, d_f, d_b;
  AdamState opt_g, opt_df, opt_db;
  std::uint64_t step = 0;
  std::mt19937_64 rng;
};

struct StepLosses {
  double generator = 0.0;      ///< L_G
  double adversarial = 0.0;    ///< L_adv
  double content = 0.0;        ///< L_con
  double forward_disc = 0.0;   ///< L_DF
  double backward_disc = 0.0;  ///< L_DB

  bool all_finite() const {
    return std::isfinite(generator) && std::isfinite(adversarial) && std::isfinite(content) &&
           std::isfinite(forward_disc) && std::isfinite(backward_disc);
  }
};

/// Fresh networks and optimizer state. Each network draws from its own seed
/// derived from `config.seed`.
inline TrainState init_train_state(const TrainConfig& config) {
  config.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed),
                    static_cast<std::uint32_t>(config.seed >> 32), 0x7e11u};
  std::array<std::uint64_t, 5> seeds{};
  std::mt19937_64 root(seq);
  for (auto& s : seeds) s = root();
  return TrainState{config,
                    build_generator<float>(config.forward_generator(), seeds[0], "g_f"),
                    build_generator<float>(config.backward_generator(), seeds[1], "g_b"),
                    build_discriminator<float>(config.forward_discriminator(), seeds[2], "d_f"),
                    build_discriminator<float>(config.backward_discriminator(), seeds[3], "d_b"),
                    {},
                    {},
                    {},
                    0,
                    std::mt19937_64(seeds[4])};
}

/// One Adam step over every tensor in `params` with its gradient in `grads`.
inline void adam_update(std::map<std::string, Tensor<float>>& params,
                        const std::map<std::string, Tensor<float>>& grads, AdamState& state,
                        const AdamConfig& cfg) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (!m.same_shape(p)) m = Tensor<float>(p.n(), p.c(), p.h(), p.w());
    if (!v.same_shape(p)) v = Tensor<float>(p.n(), p.c(), p.h(), p.w());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.storage()[i];
      const double mi = cfg.beta1 * m.storage()[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v.storage()[i] + (1.0 - cfg.beta2) * gi * gi;
      m.storage()[i] = static_cast<float>(mi);
      v.storage()[i] = static_cast<float>(vi);
      const double step = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      p.storage()[i] = static_cast<float>(p.storage()[i] - step);
    }
  }
}

namespace detail {

inline Tensor<float> stack_images(const std::vector<const RasterImage*>& imgs) {
  const auto& f = *imgs.front();
  Tensor<float> t(imgs.size(), f.bands(), f.height(), f.width());
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const auto& img = *imgs[i];
    if (img.bands() != f.bands() || img.height() != f.height() || img.width() != f.width()) {
      throw ShapeError("batch members differ in shape");
    }
    std::copy(img.data().begin(), img.data().end(), t.sample(i));
  }
  return t;
}

inline RasterImage tensor_sample_to_image(const Tensor<float>& t, std::size_t i, ImageKind kind) {
  std::vector<double> d(t.sample(i), t.sample(i) + t.sample_size());
  for (double& v : d) v = std::clamp(v, -1.0, 1.0);
  return RasterImage(t.h(), t.w(), t.c(), kind, ValueRange::UNIT_SIGNED, std::move(d));
}

inline void check_batch(const TrainConfig& cfg, std::span<const ObservationSet> batch) {
  if (batch.empty()) throw ShapeError("empty batch");
  for (const auto& obs : batch) {
    if (obs.strategy != cfg.strategy) {
      throw StrategyMismatch("observation strategy " + to_string(obs.strategy) +
                             " vs training strategy " + to_string(cfg.strategy));
    }
    obs.check();
    if (!obs.label) throw ShapeError("training observations need a label");
    if (obs.x_tilde_up.bands() != cfg.ms_bands) throw BandMismatch("X-hat band count");
    if (obs.y && obs.y->bands() != cfg.sar_bands) throw BandMismatch("SAR band count");
    if (obs.height() % 4 != 0 || obs.width() % 4 != 0) {
      throw ShapeError("observation height and width must be multiples of 4");
    }
  }
}

}  // namespace detail

/// Generator-side tensors of one batch, as seen by the losses.
struct CycleTensors {
  Tensor<float> input;  ///< (X-hat, Y, Z), also the cycle target
  Tensor<float> label;
  Tensor<float> fusion;
  Tensor<float> x_hat_star;  ///< Resize branch of the fusion
  Tensor<float> backward;    ///< G_B(fusion) = (Y*, Z*)
  Tensor<float> cycle_out;   ///< (X-hat*, Y*, Z*)
  std::vector<std::vector<unsigned char>> passed;  ///< per sample and band, for the adjoint
};

/// Resize branch of a batch of fusions: blur, decimate, bicubic back to full
/// size, clamp, then the per-sample cloud mask in cloud mode.
inline Tensor<float> resize_batch(const TrainConfig& cfg, std::span<const ObservationSet> batch,
                                  const Tensor<float>& fusion,
                                  std::vector<std::vector<unsigned char>>* passed = nullptr) {
  ResizeOperator op(fusion.h(), fusion.w(), cfg.degrade);
  Tensor<float> out(fusion.n(), fusion.c(), fusion.h(), fusion.w());
  if (passed) passed->assign(fusion.n() * fusion.c(), {});
  for (std::size_t i = 0; i < fusion.n(); ++i) {
    std::span<const double> mask;
    if (cfg.cloud_mode && batch[i].cloud_mask) mask = batch[i].cloud_mask->band(0);
    for (std::size_t b = 0; b < fusion.c(); ++b) {
      op.apply<float>(fusion.channel(i, b), out.channel(i, b), mask, cfg.cloud_fill,
                      passed ? &(*passed)[i * fusion.c() + b] : nullptr);
    }
  }
  return out;
}

/// Runs the two generators (and Resize branch) forward over `batch`.
inline CycleTensors cycle_forward(const TrainConfig& cfg, std::span<const ObservationSet> batch,
                                  Network<float>& g_f, Network<float>& g_b, Pass pass) {
  detail::check_batch(cfg, batch);
  std::vector<RasterImage> inputs;
  std::vector<const RasterImage*> in_ptrs, label_ptrs;
  inputs.reserve(batch.size());
  for (const auto& obs : batch) {
    inputs.push_back(obs.generator_input());
    label_ptrs.push_back(&*obs.label);
  }
  for (const auto& img : inputs) in_ptrs.push_back(&img);
  CycleTensors c;
  c.input = detail::stack_images(in_ptrs);
  c.label = detail::stack_images(label_ptrs);
  c.fusion = g_f.forward(c.input, pass);
  c.x_hat_star = resize_batch(cfg, batch, c.fusion, &c.passed);
  c.backward = g_b.forward(c.fusion, pass);
  const Tensor<float>* parts[] = {&c.x_hat_star, &c.backward};
  c.cycle_out = concat_channels<float>(parts);
  return c;
}

/// Generator outputs of one step, detached for the discriminator updates.
struct GeneratorPhase {
  double generator = 0.0;
  double adversarial = 0.0;
  double content = 0.0;
  Tensor<float> fusion, label, cycle_out, cycle_target;
};

/// Update (1): G_F and G_B jointly by L_G. The discriminators only provide
/// gradients; their parameters and running statistics are left untouched.
inline GeneratorPhase update_generators(TrainState& state, std::span<const ObservationSet> batch) {
  const TrainConfig& cfg = state.config;
  const std::uint64_t step_index = state.step + 1;
  Network<float> g_f(std::move(state.g_f)), g_b(std::move(state.g_b));
  Network<float> d_f(std::move(state.d_f)), d_b(std::move(state.d_b));
  auto restore = [&] {
    state.g_f = std::move(g_f.params());
    state.g_b = std::move(g_b.params());
    state.d_f = std::move(d_f.params());
    state.d_b = std::move(d_b.params());
  };
  GeneratorPhase out;
  try {
    CycleTensors c = cycle_forward(cfg, batch, g_f, g_b, Pass::Train);
    CycleBundle<float> bundle;
    bundle.fusion = c.fusion;
    bundle.label = c.label;
    bundle.cycle_out = c.cycle_out;
    bundle.cycle_target = c.input;
    bundle.d_fusion = d_f.forward(c.fusion, Pass::Probe);
    bundle.d_cycle_out = d_b.forward(c.cycle_out, Pass::Probe);
    BundleGrad<float> grad;
    out.adversarial = adversarial_loss(bundle);
    out.content = content_loss(bundle, cfg.weights);
    out.generator = generator_loss(bundle, cfg.weights, &grad);
    if (!std::isfinite(out.generator)) {
      throw DivergenceError(step_index, "generator loss is not finite");
    }
    Tensor<float> g_fusion = grad.fusion;
    g_fusion += d_f.backward(grad.d_fusion);
    Tensor<float> g_cycle = grad.cycle_out;
    g_cycle += d_b.backward(grad.d_cycle_out);
    const std::size_t nb = cfg.ms_bands;
    {
      ResizeOperator op(c.fusion.h(), c.fusion.w(), cfg.degrade);
      for (std::size_t i = 0; i < c.fusion.n(); ++i) {
        for (std::size_t b = 0; b < nb; ++b) {
          op.adjoint_add<float>(g_cycle.channel(i, b), g_fusion.channel(i, b),
                                c.passed[i * nb + b]);
        }
      }
    }
    g_fusion += g_b.backward(slice_channels(g_cycle, nb, g_cycle.c() - nb));
    g_f.backward(g_fusion);
    std::map<std::string, Tensor<float>> gen_params, gen_grads;
    for (auto* net : {&g_f, &g_b}) {
      for (auto& [name, t] : net->params().params) gen_params[name] = std::move(t);
      for (const auto& [name, t] : net->grads()) gen_grads[name] = t;
    }
    adam_update(gen_params, gen_grads, state.opt_g, cfg.adam);
    for (auto* net : {&g_f, &g_b}) {
      for (auto& [name, t] : net->params().params) t = std::move(gen_params.at(name));
    }
    out.fusion = std::move(c.fusion);
    out.label = std::move(c.label);
    out.cycle_out = std::move(c.cycle_out);
    out.cycle_target = std::move(c.input);
  } catch (...) {
    restore();
    throw;
  }
  restore();
  return out;
}

/// Updates (2) and (3): one discriminator by its least-squares loss on a
/// constant fake and real batch. Returns the loss.
inline double update_discriminator(NetworkParams<float>& params, AdamState& opt,
                                   const AdamConfig& adam, const Tensor<float>& fake,
                                   const Tensor<float>& real, std::uint64_t step_index,
                                   const char* what) {
  Network<float> d(std::move(params));
  try {
    Tensor<float> g;
    double loss = discriminator_term(d.forward(fake, Pass::Train), 0.0, &g, what);
    d.backward(g);
    g = Tensor<float>();
    loss += discriminator_term(d.forward(real, Pass::Train), 1.0, &g, what);
    d.backward(g);
    if (!std::isfinite(loss)) {
      throw DivergenceError(step_index, std::string(what) + " loss is not finite");
    }
    adam_update(d.params().params, d.grads(), opt, adam);
    params = std::move(d.params());
    return loss;
  } catch (...) {
    params = std::move(d.params());
    throw;
  }
}

/// One training step on `batch`: generators, then D_F, then D_B.
inline StepLosses train_step(TrainState& state, std::span<const ObservationSet> batch) {
  const TrainConfig& cfg = state.config;
  const std::uint64_t step_index = state.step + 1;
  GeneratorPhase gen = update_generators(state, batch);
  StepLosses losses;
  losses.generator = gen.generator;
  losses.adversarial = gen.adversarial;
  losses.content = gen.content;
  losses.forward_disc = update_discriminator(state.d_f, state.opt_df, cfg.adam, gen.fusion,
                                             gen.label, step_index, "D_F");
  losses.backward_disc = update_discriminator(state.d_b, state.opt_db, cfg.adam, gen.cycle_out,
                                              gen.cycle_target, step_index, "D_B");
  for (const auto* p : {&state.g_f, &state.g_b, &state.d_f, &state.d_b}) {
    if (!p->all_finite()) throw DivergenceError(step_index, p->prefix + " parameters diverged");
  }
  state.step = step_index;
  return losses;
}

/// Draws `batch` samples uniformly with replacement and, when the config asks
/// for patches, a random crop of each aligned to the LR grid.
inline std::vector<ObservationSet> sample_batch(TrainState& state,
                                                std::span<const ObservationSet> dataset) {
  if (dataset.empty()) throw ShapeError("empty dataset");
  const auto& cfg = state.config;
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  std::vector<ObservationSet> out;
  out.reserve(cfg.batch);
  for (std::size_t i = 0; i < cfg.batch; ++i) {
    const ObservationSet& obs = dataset[pick(state.rng)];
    if (cfg.patch == 0 || (cfg.patch == obs.height() && cfg.patch == obs.width())) {
      out.push_back(obs);
      continue;
    }
    const auto align = static_cast<std::size_t>(cfg.degrade.ratio);
    auto win = sample_patch_windows(obs.height(), obs.width(), cfg.patch, 1, state.rng(), align);
    out.push_back(crop_observation(obs, win.front()));
  }
  return out;
}

/// Forward generator in inference mode over one observation set.
inline RasterImage fuse(const TrainState& state, const ObservationSet& obs) {
  const auto& cfg = state.config;
  if (obs.strategy != cfg.strategy) {
    throw StrategyMismatch("checkpoint trained for " + to_string(cfg.strategy) +
                           ", observations prepared for " + to_string(obs.strategy));
  }
  obs.check();
  const RasterImage input = obs.generator_input();
  if (input.bands() != forward_in_channels(cfg.strategy, cfg.ms_bands, cfg.sar_bands)) {
    throw StrategyMismatch("observation channels do not match the checkpoint");
  }
  if (input.height() % 4 != 0 || input.width() % 4 != 0) {
    throw ShapeError("fusion input height and width must be multiples of 4");
  }
  const Tensor<float> out = generator_forward(state.g_f, detail::stack_images({&input}));
  return detail::tensor_sample_to_image(out, 0, ImageKind::MS);
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory holding manifest.json and params.bin.

namespace detail {

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"strategy", to_string(c.strategy)},
          {"ms_bands", c.ms_bands},
          {"sar_bands", c.sar_bands},
          {"batch", c.batch},
          {"steps", c.steps},
          {"patch", c.patch},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"lambda", c.weights.lambda},
          {"lambda1", c.weights.lambda1},
          {"lambda2", c.weights.lambda2},
          {"ratio", c.degrade.ratio},
          {"blur_sigma", c.degrade.blur_sigma},
          {"cloud_mode", c.cloud_mode},
          {"cloud_fill", c.cloud_fill},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"n_res_blocks", c.n_res_blocks},
          {"base_width", c.base_width},
          {"disc_widths", c.disc_widths}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  c.ms_bands = j.at("ms_bands").get<std::size_t>();
  c.sar_bands = j.at("sar_bands").get<std::size_t>();
  c.batch = j.at("batch").get<std::size_t>();
  c.steps = j.at("steps").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  c.adam = {j.at("lr").get<double>(), j.at("beta1").get<double>(), j.at("beta2").get<double>(),
            j.at("eps").get<double>()};
  c.weights = {j.at("lambda").get<double>(), j.at("lambda1").get<double>(),
               j.at("lambda2").get<double>()};
  c.degrade = {j.at("ratio").get<int>(), j.at("blur_sigma").get<double>()};
  c.cloud_mode = j.at("cloud_mode").get<bool>();
  c.cloud_fill = j.at("cloud_fill").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
  c.n_res_blocks = j.at("n_res_blocks").get<std::size_t>();
  c.base_width = j.at("base_width").get<std::size_t>();
  c.disc_widths = j.at("disc_widths").get<std::array<std::size_t, 4>>();
  return c;
}

inline nlohmann::json network_to_json(const NetworkParams<float>& p) {
  if (const auto* g = std::get_if<GeneratorSpec>(&p.spec)) {
    return {{"kind", "generator"},
            {"in_channels", g->in_channels},
            {"out_channels", g->out_channels},
            {"n_res_blocks", g->n_res_blocks},
            {"base_width", g->base_width}};
  }
  const auto& d = std::get<DiscriminatorSpec>(p.spec);
  return {{"kind", "discriminator"},
          {"in_channels", d.in_channels},
          {"widths", d.widths},
          {"leaky_slope", d.leaky_slope}};
}

/// Every tensor of the state in checkpoint order, with its stored name.
template <typename State, typename Fn>
void for_each_tensor(State& s, Fn&& fn) {
  for (auto* net : {&s.g_f, &s.g_b, &s.d_f, &s.d_b}) {
    for (auto& [name, t] : net->params) fn(name, t);
    for (auto& [name, t] : net->buffers) fn(name, t);
  }
  const std::pair<const char*, decltype(&s.opt_g)> opts[] = {
      {"adam/g", &s.opt_g}, {"adam/d_f", &s.opt_df}, {"adam/d_b", &s.opt_db}};
  for (const auto& [tag, opt] : opts) {
    for (auto& [name, t] : opt->m) fn(std::string(tag) + "/m/" + name, t);
    for (auto& [name, t] : opt->v) fn(std::string(tag) + "/v/" + name, t);
  }
}

}  // namespace detail

inline void save_checkpoint(const TrainState& state, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  nlohmann::json manifest;
  manifest["format"] = "hetfuse-checkpoint";
  manifest["version"] = 1;
  manifest["strategy"] = to_string(state.config.strategy);
  manifest["step"] = state.step;
  manifest["config"] = detail::config_to_json(state.config);
  manifest["networks"] = {{"g_f", detail::network_to_json(state.g_f)},
                          {"g_b", detail::network_to_json(state.g_b)},
                          {"d_f", detail::network_to_json(state.d_f)},
                          {"d_b", detail::network_to_json(state.d_b)}};
  manifest["adam_steps"] = {{"g", state.opt_g.t}, {"d_f", state.opt_df.t}, {"d_b", state.opt_db.t}};
  std::ostringstream rng_text;
  rng_text << state.rng;
  manifest["rng_state"] = rng_text.str();

  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  detail::for_each_tensor(state, [&](const std::string& name, const Tensor<float>& t) {
    const std::size_t offset = blob.size();
    for (float v : t.storage()) detail::put_u32le(blob, std::bit_cast<std::uint32_t>(v));
    tensors.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"dtype", "f32le"},
                       {"offset", offset},
                       {"length", blob.size() - offset}});
  });
  manifest["tensors"] = std::move(tensors);

  // Write beside the target and swap in, so a crash never leaves half a checkpoint.
  const fs::path tmp = dir.string() + ".partial";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  {
    std::ofstream m(tmp / "manifest.json", std::ios::binary);
    m << manifest.dump(2) << '\n';
    std::ofstream p(tmp / "params.bin", std::ios::binary);
    p.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!m || !p) throw Error("failed to write checkpoint " + tmp.string());
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

inline TrainState load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  {
    std::ifstream in(dir / "manifest.json", std::ios::binary);
    if (!in) throw FormatError("missing manifest.json in " + dir.string());
    try {
      manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("manifest.json: ") + e.what());
    }
  }
  std::string blob;
  {
    std::ifstream in(dir / "params.bin", std::ios::binary);
    if (!in) throw FormatError("missing params.bin in " + dir.string());
    blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  try {
    if (manifest.at("format") != "hetfuse-checkpoint" || manifest.at("version") != 1) {
      throw FormatError("unsupported checkpoint format");
    }
    TrainConfig cfg = detail::config_from_json(manifest.at("config"));
    if (manifest.at("strategy").get<std::string>() != to_string(cfg.strategy)) {
      throw FormatError("manifest strategy disagrees with its config echo");
    }
    TrainState state = init_train_state(cfg);
    state.step = manifest.at("step").get<std::uint64_t>();
    state.opt_g.t = manifest.at("adam_steps").at("g").get<std::uint64_t>();
    state.opt_df.t = manifest.at("adam_steps").at("d_f").get<std::uint64_t>();
    state.opt_db.t = manifest.at("adam_steps").at("d_b").get<std::uint64_t>();
    std::istringstream rng_text(manifest.at("rng_state").get<std::string>());
    rng_text >> state.rng;
    if (!rng_text) throw FormatError("bad rng_state");

    std::map<std::string, Tensor<float>> stored;
    std::size_t covered = 0;
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::array<std::size_t, 4>>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto length = entry.at("length").get<std::size_t>();
      if (entry.at("dtype") != "f32le") throw FormatError(name + ": unsupported dtype");
      const std::size_t count = shape[0] * shape[1] * shape[2] * shape[3];
      if (length != count * 4) throw FormatError(name + ": length does not match shape");
      if (offset != covered || offset + length > blob.size()) {
        throw FormatError(name + ": blob range out of order or past the end of params.bin");
      }
      covered += length;
      std::vector<float> data(count);
      const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
      for (std::size_t i = 0; i < count; ++i) {
        data[i] = std::bit_cast<float>(detail::get_u32le(bytes + 4 * i));
      }
      if (!stored.emplace(name, Tensor<float>(shape, std::move(data))).second) {
        throw FormatError(name + ": duplicate tensor");
      }
    }
    if (covered != blob.size()) throw FormatError("params.bin has trailing bytes");

    auto take = [&](const std::string& name, Tensor<float>& into, bool optional) {
      auto it = stored.find(name);
      if (it == stored.end()) {
        if (optional) return;
        throw FormatError("checkpoint lacks tensor " + name);
      }
      if (!optional && !it->second.same_shape(into)) {
        throw FormatError(name + ": shape " + shape_string(it->second) + " expected " +
                          shape_string(into));
      }
      into = std::move(it->second);
      stored.erase(it);
    };
    for (auto* net : {&state.g_f, &state.g_b, &state.d_f, &state.d_b}) {
      for (auto& [name, t] : net->params) take(name, t, false);
      for (auto& [name, t] : net->buffers) take(name, t, false);
    }
    const std::pair<const char*, AdamState*> opts[] = {
        {"adam/g", &state.opt_g}, {"adam/d_f", &state.opt_df}, {"adam/d_b", &state.opt_db}};
    for (const auto& [tag, opt] : opts) {
      for (const auto* net : {&state.g_f, &state.g_b, &state.d_f, &state.d_b}) {
        for (const auto& [name, t] : net->params) {
          const std::string m_name = std::string(tag) + "/m/" + name;
          if (!stored.contains(m_name)) continue;
          opt->m[name] = Tensor<float>(t.n(), t.c(), t.h(), t.w());
          opt->v[name] = Tensor<float>(t.n(), t.c(), t.h(), t.w());
          take(m_name, opt->m[name], false);
          take(std::string(tag) + "/v/" + name, opt->v[name], false);
        }
      }
    }
    if (!stored.empty()) throw FormatError("unexpected tensor " + stored.begin()->first);
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("manifest.json config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training loop.

inline constexpr const char* kLossLogHeader = "step,L_G,L_adv,L_con,L_DF,L_DB";

inline std::string loss_log_row(std::uint64_t step, const StepLosses& l) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu,%.10g,%.10g,%.10g,%.10g,%.10g",
                static_cast<unsigned long long>(step), l.generator, l.adversarial, l.content,
                l.forward_disc, l.backward_disc);
  return buf;
}

struct TrainResult {
  TrainState state;
  std::vector<StepLosses> losses;
};

/// Runs `config.steps` steps on `dataset`. When `out_dir` is non-empty, the
/// checkpoint is kept in `out_dir/checkpoint` (written at step 0, every
/// `checkpoint_every` steps and at the end) and the loss log in
/// `out_dir/loss_log.csv`. On divergence the last good checkpoint stays in
/// place and the error propagates.
inline TrainResult train(const TrainConfig& config, std::span<const ObservationSet> dataset,
                         const std::filesystem::path& out_dir = {},
                         const std::function<void(std::uint64_t, const StepLosses&)>& on_step = {}) {
  config.validate();
  if (dataset.empty()) throw ShapeError("empty dataset");
  for (const auto& obs : dataset) {
    if (obs.strategy != config.strategy) {
      throw StrategyMismatch("dataset prepared for " + to_string(obs.strategy));
    }
  }
  TrainResult result{init_train_state(config), {}};
  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log.open(out_dir / "loss_log.csv", std::ios::binary);
    log << kLossLogHeader << '\n';
    save_checkpoint(result.state, out_dir / "checkpoint");
  }
  for (std::size_t k = 0; k < config.steps; ++k) {
    const auto batch = sample_batch(result.state, dataset);
    const StepLosses l = train_step(result.state, batch);
    result.losses.push_back(l);
    if (log.is_open()) log << loss_log_row(result.state.step, l) << '\n' << std::flush;
    if (on_step) on_step(result.state.step, l);
    const bool last = k + 1 == config.steps;
    if (!out_dir.empty() && !last && config.checkpoint_every > 0 &&
        result.state.step % config.checkpoint_every == 0) {
      save_checkpoint(result.state, out_dir / "checkpoint");
    }
  }
  if (!out_dir.empty() && config.steps > 0) save_checkpoint(result.state, out_dir / "checkpoint");
  return result;
}

}  // namespace hetfuse
