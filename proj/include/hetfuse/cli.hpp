#pragma once

// Command-line front end: `simulate`, `train`, `fuse` and `evaluate`.
//
// Settings come from a `key = value` file (--config) with command-line flags
// taking precedence. Exit codes: 0 ok, 1 other failure, 2 configuration,
// 3 divergence, 4 strategy mismatch, 5 shape mismatch, 64 usage.

#include "CLI11.hpp"
#include "json.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hetfuse/datagen.hpp"
#include "hetfuse/errors.hpp"
#include "hetfuse/imagery.hpp"
#include "hetfuse/metrics.hpp"
#include "hetfuse/train.hpp"

namespace hetfuse::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kDivergence = 3,
  kStrategy = 4,
  kShape = 5,
  kUsage = 64,
};

struct RunConfig {
  std::string command;
  std::filesystem::path data;        ///< dataset or scene directory
  std::filesystem::path out;         ///< output directory
  std::filesystem::path checkpoint;  ///< checkpoint directory for `fuse`
  std::filesystem::path result, reference;
  SceneSpec scene;
  std::size_t scenes = 1;
  TrainConfig train;
  bool strategy_set = false;
  double ergas_ratio = 0.25;
  double peak = 2.0;
  bool header = false;
};

using Settings = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  if (!text.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || text.empty()) {
    throw ConfigError(key, "not a valid number: '" + text + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
  if (text == "0" || text == "false" || text == "no" || text == "off") return false;
  throw ConfigError(key, "expected true or false, got '" + text + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  if (out.empty()) throw ConfigError(key, "empty list");
  return out;
}

inline std::vector<double> cycled(const std::vector<double>& base, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = base[i % base.size()];
  return out;
}

}  // namespace detail

/// `key = value` lines; blank lines and lines starting with '#' or ';' are
/// skipped. Keys keep file order.
inline Settings parse_settings(std::istream& in, const std::string& source = "config") {
  Settings out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source, "line " + std::to_string(number) + ": expected key = value");
    }
    std::string key = detail::trim(std::string_view(t).substr(0, eq));
    if (key.empty()) {
      throw ConfigError(source, "line " + std::to_string(number) + ": empty key");
    }
    out.emplace_back(std::move(key), detail::trim(std::string_view(t).substr(eq + 1)));
  }
  return out;
}

inline Settings read_settings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  return parse_settings(in, path.string());
}

/// Applies one setting. Unknown keys and malformed values raise ConfigError
/// naming the key.
inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
  using detail::parse_number;
  auto& t = rc.train;
  auto& s = rc.scene;
  if (key == "seed") {
    s.seed = t.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "strategy") {
    t.strategy = parse_strategy(value);
    rc.strategy_set = true;
  } else if (key == "steps") {
    t.steps = parse_number<std::size_t>(key, value);
  } else if (key == "batch") {
    t.batch = parse_number<std::size_t>(key, value);
  } else if (key == "patch") {
    t.patch = parse_number<std::size_t>(key, value);
  } else if (key == "lr") {
    t.adam.lr = parse_number<double>(key, value);
  } else if (key == "beta1") {
    t.adam.beta1 = parse_number<double>(key, value);
  } else if (key == "beta2") {
    t.adam.beta2 = parse_number<double>(key, value);
  } else if (key == "eps") {
    t.adam.eps = parse_number<double>(key, value);
  } else if (key == "lambda") {
    t.weights.lambda = parse_number<double>(key, value);
  } else if (key == "lambda1") {
    t.weights.lambda1 = parse_number<double>(key, value);
  } else if (key == "lambda2") {
    t.weights.lambda2 = parse_number<double>(key, value);
  } else if (key == "ratio") {
    s.ratio = t.degrade.ratio = parse_number<int>(key, value);
  } else if (key == "blur_sigma") {
    t.degrade.blur_sigma = parse_number<double>(key, value);
  } else if (key == "cloud_mode") {
    t.cloud_mode = detail::parse_bool(key, value);
  } else if (key == "cloud_fill") {
    t.cloud_fill = parse_number<double>(key, value);
  } else if (key == "checkpoint_every") {
    t.checkpoint_every = parse_number<std::size_t>(key, value);
  } else if (key == "n_res_blocks") {
    t.n_res_blocks = parse_number<std::size_t>(key, value);
  } else if (key == "base_width") {
    t.base_width = parse_number<std::size_t>(key, value);
  } else if (key == "disc_widths") {
    const auto w = detail::parse_list<std::size_t>(key, value);
    if (w.size() != 4) throw ConfigError(key, "needs four comma-separated widths");
    std::copy(w.begin(), w.end(), t.disc_widths.begin());
  } else if (key == "height") {
    s.height = parse_number<std::size_t>(key, value);
  } else if (key == "width") {
    s.width = parse_number<std::size_t>(key, value);
  } else if (key == "ms_bands") {
    s.ms_bands = t.ms_bands = parse_number<std::size_t>(key, value);
    if (s.temporal_gain.size() != s.ms_bands) {
      s.temporal_gain = detail::cycled(SceneSpec{}.temporal_gain, s.ms_bands);
    }
    if (s.temporal_bias.size() != s.ms_bands) {
      s.temporal_bias = detail::cycled(SceneSpec{}.temporal_bias, s.ms_bands);
    }
  } else if (key == "sar_bands") {
    s.sar_bands = t.sar_bands = parse_number<std::size_t>(key, value);
  } else if (key == "n_classes") {
    s.n_classes = parse_number<std::size_t>(key, value);
  } else if (key == "change_fraction") {
    s.change_fraction = parse_number<double>(key, value);
  } else if (key == "temporal_gain") {
    s.temporal_gain = detail::parse_list<double>(key, value);
  } else if (key == "temporal_bias") {
    s.temporal_bias = detail::parse_list<double>(key, value);
  } else if (key == "speckle_looks") {
    s.speckle_looks = parse_number<int>(key, value);
  } else if (key == "cloud_fraction") {
    s.cloud_fraction = parse_number<double>(key, value);
  } else if (key == "scenes") {
    rc.scenes = parse_number<std::size_t>(key, value);
    if (rc.scenes < 1) throw ConfigError(key, "must be >= 1");
  } else if (key == "data") {
    rc.data = value;
  } else if (key == "out") {
    rc.out = value;
  } else if (key == "checkpoint") {
    rc.checkpoint = value;
  } else if (key == "ergas_ratio") {
    rc.ergas_ratio = parse_number<double>(key, value);
    if (!(rc.ergas_ratio > 0.0)) throw ConfigError(key, "must be > 0");
  } else if (key == "peak") {
    rc.peak = parse_number<double>(key, value);
    if (!(rc.peak > 0.0)) throw ConfigError(key, "must be > 0");
  } else {
    throw ConfigError(key, "unknown setting");
  }
}

inline void apply_settings(RunConfig& rc, const Settings& settings) {
  for (const auto& [k, v] : settings) apply_setting(rc, k, v);
}

// ---------------------------------------------------------------------------
// Dataset directories.

inline nlohmann::json scene_spec_to_json(const SceneSpec& s) {
  return {{"height", s.height},
          {"width", s.width},
          {"ms_bands", s.ms_bands},
          {"sar_bands", s.sar_bands},
          {"n_classes", s.n_classes},
          {"change_fraction", s.change_fraction},
          {"temporal_gain", s.temporal_gain},
          {"temporal_bias", s.temporal_bias},
          {"speckle_looks", s.speckle_looks},
          {"cloud_fraction", s.cloud_fraction},
          {"ratio", s.ratio},
          {"seed", s.seed}};
}

/// Scene directories of a dataset in index order, or `dir` itself when it
/// directly holds a scene.
inline std::vector<std::filesystem::path> scene_dirs(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(dir / "x_tilde_up.birf")) return {dir};
  if (!fs::is_directory(dir)) throw ConfigError("data", "no such directory: " + dir.string());
  std::vector<std::pair<std::size_t, fs::path>> found;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (!e.is_directory() || name.rfind("scene_", 0) != 0) continue;
    std::size_t k = 0;
    const auto [p, ec] = std::from_chars(name.data() + 6, name.data() + name.size(), k);
    if (ec == std::errc() && p == name.data() + name.size()) found.emplace_back(k, e.path());
  }
  if (found.empty()) throw ConfigError("data", "no scene_<k> directories in " + dir.string());
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& [k, p] : found) out.push_back(std::move(p));
  return out;
}

/// Degradation and cloud fill recorded by `simulate`, when the dataset has a
/// meta.json.
inline void adopt_dataset_meta(const std::filesystem::path& data, TrainConfig& cfg) {
  namespace fs = std::filesystem;
  fs::path meta = data / "meta.json";
  if (!fs::exists(meta)) meta = data.parent_path() / "meta.json";
  if (!fs::exists(meta)) return;
  try {
    std::ifstream in(meta);
    const auto j = nlohmann::json::parse(in);
    cfg.degrade.ratio = j.at("degrade").at("ratio").get<int>();
    cfg.degrade.blur_sigma = j.at("degrade").at("blur_sigma").get<double>();
    cfg.cloud_fill = j.at("cloud_fill").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta.string() + ": " + e.what());
  }
}

/// Observation sets for `strategy` from a dataset or scene directory. Labels
/// are attached when x.birf is present, cloud masks when `with_mask` is set.
inline std::vector<ObservationSet> load_observations(const std::filesystem::path& data,
                                                     FusionStrategy strategy, bool with_mask) {
  std::vector<ObservationSet> out;
  for (const auto& dir : scene_dirs(data)) {
    ObservationSet obs;
    obs.strategy = strategy;
    obs.x_tilde_up = read_raster(dir / "x_tilde_up.birf");
    if (uses_sar(strategy)) obs.y = read_raster(dir / "y.birf");
    if (uses_temporal(strategy)) obs.z = read_raster(dir / "z.birf");
    if (std::filesystem::exists(dir / "x.birf")) obs.label = read_raster(dir / "x.birf");
    if (with_mask && std::filesystem::exists(dir / "mask.birf")) {
      obs.cloud_mask = read_raster(dir / "mask.birf");
    }
    obs.check();
    out.push_back(std::move(obs));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands.

inline void require_path(const std::filesystem::path& p, const char* key) {
  if (p.empty()) throw ConfigError(key, "required");
}

inline int cmd_simulate(const RunConfig& rc, std::ostream& out) {
  require_path(rc.out, "out");
  SceneSpec base = rc.scene;
  base.ratio = rc.train.degrade.ratio;
  base.validate();
  if (!(rc.train.degrade.blur_sigma >= 0.0)) throw ConfigError("blur_sigma", "must be >= 0");
  if (!(rc.train.cloud_fill >= -1.0 && rc.train.cloud_fill <= 1.0)) {
    throw ConfigError("cloud_fill", "must lie in [-1, 1]");
  }
  std::filesystem::create_directories(rc.out);
  for (std::size_t k = 0; k < rc.scenes; ++k) {
    SceneSpec spec = base;
    spec.seed = base.seed + k;
    const SimulatedScene sim = simulate_scene(spec);
    std::optional<CloudSpec> cloud;
    if (sim.cloud_mask) cloud = CloudSpec{*sim.cloud_mask, rc.train.cloud_fill};
    const auto dir = rc.out / ("scene_" + std::to_string(k));
    std::filesystem::create_directories(dir);
    write_raster(sim.scene.x_t1, dir / "x.birf");
    write_raster(resize_branch(sim.scene.x_t1, rc.train.degrade, cloud), dir / "x_tilde_up.birf");
    write_raster(sim.y, dir / "y.birf");
    write_raster(sim.temporal.z, dir / "z.birf");
    write_raster(sim.cloud_mask ? *sim.cloud_mask
                                : RasterImage::filled(spec.height, spec.width, 1, ImageKind::MASK,
                                                      ValueRange::UNIT_SIGNED, 0.0),
                 dir / "mask.birf");
  }
  const nlohmann::json meta = {
      {"format", "hetfuse-dataset"},
      {"version", 1},
      {"seed", base.seed},
      {"scenes", rc.scenes},
      {"strategy", to_string(rc.train.strategy)},
      {"spec", scene_spec_to_json(base)},
      {"degrade", {{"ratio", rc.train.degrade.ratio}, {"blur_sigma", rc.train.degrade.blur_sigma}}},
      {"cloud_fill", rc.train.cloud_fill}};
  std::ofstream(rc.out / "meta.json") << meta.dump(2) << '\n';
  out << "wrote " << rc.scenes << " scene(s) to " << rc.out.string() << '\n';
  return kOk;
}

inline int cmd_train(const RunConfig& rc, std::ostream& out) {
  require_path(rc.data, "data");
  require_path(rc.out, "out");
  TrainConfig cfg = rc.train;
  adopt_dataset_meta(rc.data, cfg);
  cfg.validate();
  const auto dataset = load_observations(rc.data, cfg.strategy, cfg.cloud_mode);
  cfg.ms_bands = dataset.front().x_tilde_up.bands();
  if (dataset.front().y) cfg.sar_bands = dataset.front().y->bands();
  const TrainResult r = train(cfg, dataset, rc.out);
  out << "steps " << r.state.step;
  if (!r.losses.empty()) {
    const StepLosses& l = r.losses.back();
    out << "  L_G " << l.generator << "  L_adv " << l.adversarial << "  L_con " << l.content
        << "  L_DF " << l.forward_disc << "  L_DB " << l.backward_disc;
  }
  out << "\ncheckpoint " << (rc.out / "checkpoint").string() << '\n';
  return kOk;
}

inline int cmd_fuse(const RunConfig& rc, std::ostream& out) {
  require_path(rc.checkpoint, "checkpoint");
  require_path(rc.data, "data");
  require_path(rc.out, "out");
  const TrainState state = load_checkpoint(rc.checkpoint);
  const FusionStrategy strategy = rc.strategy_set ? rc.train.strategy : state.config.strategy;
  const auto dirs = scene_dirs(rc.data);
  const auto observations = load_observations(rc.data, strategy, false);
  std::filesystem::create_directories(rc.out);
  for (std::size_t k = 0; k < observations.size(); ++k) {
    const auto path = rc.out / (dirs[k].filename().string() + ".birf");
    write_raster(fuse(state, observations[k]), path);
    out << path.string() << '\n';
  }
  return kOk;
}

inline int cmd_evaluate(const RunConfig& rc, std::ostream& out) {
  require_path(rc.result, "result");
  require_path(rc.reference, "reference");
  const RasterImage result = read_raster(rc.result);
  const RasterImage reference = read_raster(rc.reference);
  const MetricsReport report = evaluate_all(result, reference, rc.ergas_ratio, rc.peak);
  if (rc.header) out << metrics_csv_header(result.bands()) << '\n';
  out << metrics_csv_row(report) << '\n';
  return kOk;
}

/// Caps Eigen's worker threads from HETFUSE_THREADS when it is set.
inline void apply_thread_cap() {
  const char* env = std::getenv("HETFUSE_THREADS");
  if (env == nullptr || *env == '\0') return;
  const int n = detail::parse_number<int>("HETFUSE_THREADS", env);
  if (n < 1) throw ConfigError("HETFUSE_THREADS", "must be >= 1");
  Eigen::setNbThreads(n);
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Heterogeneous spatio-temporal-spectral fusion with a residual cycle GAN",
               "hetfuse"};
  app.require_subcommand(1);

  struct Flags {
    std::string config, seed, strategy, steps, batch, out, data, checkpoint, scenes, ergas_ratio,
        peak, result, reference;
    bool header = false;
  } f;
  auto common = [&](CLI::App* sub, bool training) {
    sub->add_option("--config", f.config, "key = value settings file (flags override it)");
    sub->add_option("--seed", f.seed, "random seed");
    sub->add_option("--strategy", f.strategy, "fusion strategy: hss, st or hsst");
    if (training) {
      sub->add_option("--steps", f.steps, "training steps");
      sub->add_option("--batch", f.batch, "samples per step");
    }
    sub->add_option("--out", f.out, "output directory");
  };
  auto* sim = app.add_subcommand("simulate", "write a synthetic dataset directory");
  common(sim, false);
  sim->add_option("--scenes", f.scenes, "number of scenes");
  auto* trn = app.add_subcommand("train", "train on a dataset; writes checkpoint and loss log");
  common(trn, true);
  trn->add_option("--data", f.data, "dataset directory from simulate");
  auto* fus = app.add_subcommand("fuse", "run a trained forward generator on a dataset");
  common(fus, false);
  fus->add_option("--data", f.data, "dataset or scene directory");
  fus->add_option("--checkpoint", f.checkpoint, "checkpoint directory");
  auto* ev = app.add_subcommand("evaluate", "print quality indices of a result against a reference");
  ev->add_option("--config", f.config, "key = value settings file (flags override it)");
  ev->add_option("result", f.result, "fused BIRF image")->required();
  ev->add_option("reference", f.reference, "reference BIRF image")->required();
  ev->add_option("--ergas-ratio", f.ergas_ratio, "high/low resolution pixel-size ratio for ERGAS");
  ev->add_option("--peak", f.peak, "PSNR/SSIM dynamic range");
  ev->add_flag("--header", f.header, "print the CSV header first");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsage;
  }

  try {
    apply_thread_cap();
    RunConfig rc;
    rc.command = app.get_subcommands().front()->get_name();
    if (!f.config.empty()) apply_settings(rc, read_settings(f.config));
    const std::pair<const char*, const std::string*> flags[] = {
        {"seed", &f.seed},   {"strategy", &f.strategy},     {"steps", &f.steps},
        {"batch", &f.batch}, {"out", &f.out},               {"data", &f.data},
        {"checkpoint", &f.checkpoint}, {"scenes", &f.scenes}, {"ergas_ratio", &f.ergas_ratio},
        {"peak", &f.peak}};
    for (const auto& [key, value] : flags) {
      if (!value->empty()) apply_setting(rc, key, *value);
    }
    rc.result = f.result;
    rc.reference = f.reference;
    rc.header = f.header;

    if (rc.command == "simulate") return cmd_simulate(rc, out);
    if (rc.command == "train") return cmd_train(rc, out);
    if (rc.command == "fuse") return cmd_fuse(rc, out);
    return cmd_evaluate(rc, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const StrategyMismatch& e) {
    err << "strategy mismatch: " << e.what() << '\n';
    return kStrategy;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return kShape;
  } catch (const SizeMismatch& e) {
    err << "shape error: " << e.what() << '\n';
    return kShape;
  } catch (const BandMismatch& e) {
    err << "shape error: " << e.what() << '\n';
    return kShape;
  } catch (const NotDivisible& e) {
    err << "shape error: " << e.what() << '\n';
    return kShape;
  } catch (const PatchTooLarge& e) {
    err << "shape error: " << e.what() << '\n';
    return kShape;
  } catch (const TooSmall& e) {
    err << "shape error: " << e.what() << '\n';
    return kShape;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace hetfuse::cli
