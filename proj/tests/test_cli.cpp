#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "hetfuse/cli.hpp"
#include "test_support.hpp"

namespace hetfuse {
namespace {

using testing::slurp;
using testing::TempDir;

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "hetfuse");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

constexpr const char* kSmall =
    "# tiny networks and scenes\n"
    "n_res_blocks = 1\n"
    "base_width = 4\n"
    "disc_widths = 4, 8, 8, 8\n"
    "height = 32\n"
    "width = 32\n";

std::filesystem::path write_config(const TempDir& dir, const std::string& text,
                                   const std::string& name = "run.cfg") {
  std::ofstream(dir / name) << text;
  return dir / name;
}

TEST(Settings, ParsesKeyValueLines) {
  std::istringstream in("# comment\n\n  seed = 7 \n; other comment\nstrategy=st\nout = a b\n");
  const auto s = cli::parse_settings(in);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0], (std::pair<std::string, std::string>{"seed", "7"}));
  EXPECT_EQ(s[1], (std::pair<std::string, std::string>{"strategy", "st"}));
  EXPECT_EQ(s[2].second, "a b");
}

TEST(Settings, MalformedLinesAreConfigErrors) {
  std::istringstream no_eq("seed 7\n");
  EXPECT_THROW(cli::parse_settings(no_eq), ConfigError);
  std::istringstream no_key(" = 7\n");
  EXPECT_THROW(cli::parse_settings(no_key), ConfigError);
}

TEST(Settings, ApplyValidatesAndNamesTheKey) {
  cli::RunConfig rc;
  cli::apply_setting(rc, "seed", "42");
  EXPECT_EQ(rc.train.seed, 42u);
  EXPECT_EQ(rc.scene.seed, 42u);
  cli::apply_setting(rc, "ratio", "2");
  EXPECT_EQ(rc.train.degrade.ratio, 2);
  EXPECT_EQ(rc.scene.ratio, 2);
  cli::apply_setting(rc, "disc_widths", "8,16,32,64");
  EXPECT_EQ(rc.train.disc_widths[3], 64u);
  cli::apply_setting(rc, "cloud_mode", "true");
  EXPECT_TRUE(rc.train.cloud_mode);
  cli::apply_setting(rc, "ms_bands", "4");
  EXPECT_EQ(rc.scene.temporal_gain.size(), 4u);
  for (const auto& [key, value] : std::vector<std::pair<std::string, std::string>>{
           {"steps", "ten"}, {"batch", "-1"}, {"lr", "1e"}, {"strategy", "fancy"},
           {"disc_widths", "1,2"}, {"cloud_mode", "maybe"}, {"colour", "red"}}) {
    try {
      cli::RunConfig r;
      cli::apply_setting(r, key, value);
      ADD_FAILURE() << key << " = " << value << " accepted";
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.field(), key);
    }
  }
}

TEST(Cli, HelpListsEveryFlag) {
  const std::map<std::string, std::vector<std::string>> expected{
      {"simulate", {"--config", "--seed", "--strategy", "--out", "--scenes"}},
      {"train", {"--config", "--seed", "--strategy", "--steps", "--batch", "--out", "--data"}},
      {"fuse", {"--config", "--seed", "--strategy", "--out", "--data", "--checkpoint"}},
      {"evaluate", {"--config", "--ergas-ratio", "--peak", "--header"}}};
  for (const auto& [sub, flags] : expected) {
    const auto r = run_cli({sub, "--help"});
    EXPECT_EQ(r.code, 0) << sub;
    for (const auto& flag : flags) EXPECT_NE(r.out.find(flag), std::string::npos) << sub << flag;
  }
  const auto top = run_cli({"--help"});
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"simulate", "train", "fuse", "evaluate"}) {
    EXPECT_NE(top.out.find(sub), std::string::npos);
  }
}

TEST(Cli, UsageErrorsExit64) {
  EXPECT_EQ(run_cli({}).code, 64);
  EXPECT_EQ(run_cli({"launch"}).code, 64);
  EXPECT_EQ(run_cli({"train", "--bogus", "1"}).code, 64);
  EXPECT_EQ(run_cli({"simulate", "--steps", "3"}).code, 64);
  EXPECT_EQ(run_cli({"evaluate", "only_one.birf"}).code, 64);
}

TEST(Cli, MissingPathsAndConfigFilesExit2) {
  TempDir dir("cli_cfg");
  EXPECT_EQ(run_cli({"simulate"}).code, 2);
  EXPECT_EQ(run_cli({"train", "--out", (dir / "x").string()}).code, 2);
  EXPECT_EQ(run_cli({"simulate", "--config", (dir / "absent.cfg").string()}).code, 2);
  const auto bad = write_config(dir, "steps = 3\nnot a setting\n");
  const auto r = run_cli({"simulate", "--config", bad.string(), "--out", (dir / "d").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 2"), std::string::npos);
}

TEST(Simulate, WritesSceneFilesAndMeta) {
  TempDir dir("cli_sim");
  const auto cfg = write_config(dir, kSmall);
  const auto r = run_cli({"simulate", "--config", cfg.string(), "--seed", "5", "--strategy", "st",
                          "--out", (dir / "ds").string(), "--scenes", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* scene : {"scene_0", "scene_1"}) {
    for (const char* f : {"x", "x_tilde_up", "y", "z", "mask"}) {
      EXPECT_TRUE(std::filesystem::exists(dir / "ds" / scene / (std::string(f) + ".birf")));
    }
  }
  const auto meta = nlohmann::json::parse(slurp(dir / "ds" / "meta.json"));
  EXPECT_EQ(meta["seed"], 5);
  EXPECT_EQ(meta["strategy"], "st");
  EXPECT_EQ(meta["spec"]["height"], 32);
  EXPECT_EQ(meta["scenes"], 2);

  const auto x = read_raster(dir / "ds" / "scene_0" / "x.birf");
  EXPECT_EQ(x.height(), 32u);
  EXPECT_EQ(x.bands(), 3u);
  EXPECT_EQ(read_raster(dir / "ds" / "scene_0" / "y.birf").bands(), 2u);
  SceneSpec spec;
  spec.height = spec.width = 32;
  spec.seed = 5;
  const auto sim = simulate_scene(spec);
  EXPECT_EQ(slurp(dir / "ds" / "scene_0" / "x.birf"), encode_birf(sim.scene.x_t1));
  EXPECT_EQ(slurp(dir / "ds" / "scene_0" / "x_tilde_up.birf"),
            encode_birf(resize_branch(sim.scene.x_t1, SpatialDegradeSpec{4, 2.0})));
  EXPECT_FALSE(read_raster(dir / "ds" / "scene_1" / "x.birf") == x);
}

TEST(Simulate, SameSeedSameBytes) {
  TempDir dir("cli_sim2");
  const auto cfg = write_config(dir, std::string(kSmall) + "cloud_fraction = 0.2\n");
  for (const char* name : {"a", "b"}) {
    ASSERT_EQ(run_cli({"simulate", "--config", cfg.string(), "--out", (dir / name).string()}).code,
              0);
  }
  for (const char* f : {"x", "x_tilde_up", "y", "z", "mask"}) {
    const std::string file = std::string(f) + ".birf";
    EXPECT_EQ(slurp(dir / "a" / "scene_0" / file), slurp(dir / "b" / "scene_0" / file)) << f;
  }
  EXPECT_EQ(slurp(dir / "a" / "meta.json"), slurp(dir / "b" / "meta.json"));
  const auto mask = read_raster(dir / "a" / "scene_0" / "mask.birf");
  const auto xt = read_raster(dir / "a" / "scene_0" / "x_tilde_up.birf");
  for (std::size_t p = 0; p < mask.plane_size(); ++p) {
    if (mask.data()[p] > 0.5) {
      EXPECT_EQ(xt.band(0)[p], 1.0);
    }
  }
}

TEST(Simulate, InvalidSpecNamesTheField) {
  TempDir dir("cli_sim3");
  const auto cfg = write_config(dir, "change_fraction = -0.1\n");
  const auto r = run_cli({"simulate", "--config", cfg.string(), "--out", (dir / "d").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("change_fraction"), std::string::npos);
  const auto h = run_cli({"simulate", "--out", (dir / "e").string(), "--config",
                          write_config(dir, "height = 30\n", "h.cfg").string()});
  EXPECT_EQ(h.code, 2);
  EXPECT_NE(h.err.find("height"), std::string::npos);
}

class CliPipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_ = write_config(dir_, kSmall);
    ASSERT_EQ(run_cli({"simulate", "--config", cfg_.string(), "--seed", "9", "--out", data(),
                       "--scenes", "2"})
                  .code,
              0);
  }
  std::string data() const { return (dir_ / "ds").string(); }
  Outcome train(const std::string& out, const std::string& steps,
                std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"train", "--config", cfg_.string(), "--data", data(),
                                  "--steps", steps, "--batch", "2", "--out", (dir_ / out).string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return run_cli(args);
  }

  TempDir dir_{"cli_pipe"};
  std::filesystem::path cfg_;
};

TEST_F(CliPipeline, TrainWritesLogAndCheckpoint) {
  const auto r = train("run", "3");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("L_con"), std::string::npos);
  std::istringstream log(slurp(dir_ / "run" / "loss_log.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(log, line);
  EXPECT_EQ(line, "step,L_G,L_adv,L_con,L_DF,L_DB");
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 3u);
  const auto state = load_checkpoint(dir_ / "run" / "checkpoint");
  EXPECT_EQ(state.step, 3u);
  EXPECT_EQ(state.config.batch, 2u);
  EXPECT_EQ(state.config.base_width, 4u);
}

TEST_F(CliPipeline, ZeroStepsWritesInitialization) {
  ASSERT_EQ(train("zero", "0").code, 0);
  auto cfg = load_checkpoint(dir_ / "zero" / "checkpoint").config;
  const auto init = init_train_state(cfg);
  TempDir ref("cli_init");
  save_checkpoint(init, ref / "ck");
  EXPECT_EQ(slurp(dir_ / "zero" / "checkpoint" / "params.bin"), slurp(ref / "ck" / "params.bin"));
}

TEST_F(CliPipeline, RerunIsIdentical) {
  ASSERT_EQ(train("a", "2", {"--seed", "4"}).code, 0);
  ASSERT_EQ(train("b", "2", {"--seed", "4"}).code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "loss_log.csv"), slurp(dir_ / "b" / "loss_log.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "checkpoint" / "params.bin"),
            slurp(dir_ / "b" / "checkpoint" / "params.bin"));
}

TEST_F(CliPipeline, FlagsOverrideTheConfigFile) {
  write_config(dir_, std::string(kSmall) + "steps = 5\nbatch = 3\n", "override.cfg");
  const auto r = run_cli({"train", "--config", (dir_ / "override.cfg").string(), "--data", data(),
                          "--steps", "1", "--out", (dir_ / "o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto state = load_checkpoint(dir_ / "o" / "checkpoint");
  EXPECT_EQ(state.step, 1u);
  EXPECT_EQ(state.config.batch, 3u);
}

TEST_F(CliPipeline, DivergenceExits3) {
  write_config(dir_, std::string(kSmall) + "lr = 1e35\n", "hot.cfg");
  const auto r = run_cli({"train", "--config", (dir_ / "hot.cfg").string(), "--data", data(),
                          "--steps", "50", "--batch", "2", "--out", (dir_ / "hot").string()});
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NO_THROW(load_checkpoint(dir_ / "hot" / "checkpoint"));
}

TEST_F(CliPipeline, FuseShapeDeterminismAndStrategy) {
  ASSERT_EQ(train("run", "2").code, 0);
  const std::string ck = (dir_ / "run" / "checkpoint").string();
  for (const char* out : {"f1", "f2"}) {
    const auto r = run_cli({"fuse", "--checkpoint", ck, "--data", data(), "--out",
                            (dir_ / out).string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto fused = read_raster(dir_ / "f1" / "scene_0.birf");
  EXPECT_EQ(fused.height(), 32u);
  EXPECT_EQ(fused.width(), 32u);
  EXPECT_EQ(fused.bands(), 3u);
  EXPECT_EQ(slurp(dir_ / "f1" / "scene_1.birf"), slurp(dir_ / "f2" / "scene_1.birf"));

  const auto wrong = run_cli({"fuse", "--checkpoint", ck, "--data", data(), "--strategy", "hss",
                              "--out", (dir_ / "f3").string()});
  EXPECT_EQ(wrong.code, 4);
  const auto one = run_cli({"fuse", "--checkpoint", ck, "--data", data() + "/scene_1", "--out",
                            (dir_ / "f4").string()});
  ASSERT_EQ(one.code, 0) << one.err;
  EXPECT_EQ(slurp(dir_ / "f4" / "scene_1.birf"), slurp(dir_ / "f1" / "scene_1.birf"));
}

TEST_F(CliPipeline, EvaluateRows) {
  const std::string x = data() + "/scene_0/x.birf";
  const auto ident = run_cli({"evaluate", x, x});
  ASSERT_EQ(ident.code, 0) << ident.err;
  EXPECT_EQ(ident.out, "0,0,1,inf,1,1,1,1\n");

  const std::string xt = data() + "/scene_0/x_tilde_up.birf";
  const auto r = run_cli({"evaluate", xt, x, "--header", "--ergas-ratio", "0.5"});
  ASSERT_EQ(r.code, 0);
  const auto report = evaluate_all(read_raster(xt), read_raster(x), 0.5, 2.0);
  EXPECT_EQ(r.out, metrics_csv_header(3) + "\n" + metrics_csv_row(report) + "\n");

  EXPECT_EQ(run_cli({"evaluate", data() + "/scene_0/y.birf", x}).code, 5);
  EXPECT_EQ(run_cli({"evaluate", x, data() + "/scene_0/absent.birf"}).code, 1);
}

TEST(Cli, ThreadCapMustBePositive) {
  ::setenv("HETFUSE_THREADS", "zero", 1);
  EXPECT_EQ(run_cli({"evaluate", "a.birf", "b.birf"}).code, 2);
  ::setenv("HETFUSE_THREADS", "1", 1);
  EXPECT_EQ(run_cli({"evaluate", "a.birf", "b.birf"}).code, 1);
  ::unsetenv("HETFUSE_THREADS");
}

#ifdef HETFUSE_CLI_PATH
TEST(CliProcess, SeparateProcessesProduceIdenticalRuns) {
  TempDir dir("cli_proc");
  const auto cfg = write_config(dir, kSmall);
  const std::string exe = HETFUSE_CLI_PATH;
  auto sh = [&](const std::string& args) {
    return std::system(("HETFUSE_THREADS=1 '" + exe + "' " + args + " > /dev/null").c_str());
  };
  ASSERT_EQ(sh("simulate --config '" + cfg.string() + "' --out '" + (dir / "ds").string() + "'"),
            0);
  for (const char* run : {"a", "b"}) {
    ASSERT_EQ(sh("train --config '" + cfg.string() + "' --data '" + (dir / "ds").string() +
                 "' --steps 3 --batch 2 --out '" + (dir / run).string() + "'"),
              0);
  }
  EXPECT_EQ(slurp(dir / "a" / "loss_log.csv"), slurp(dir / "b" / "loss_log.csv"));
  EXPECT_EQ(slurp(dir / "a" / "checkpoint" / "params.bin"),
            slurp(dir / "b" / "checkpoint" / "params.bin"));
  EXPECT_EQ(slurp(dir / "a" / "checkpoint" / "manifest.json"),
            slurp(dir / "b" / "checkpoint" / "manifest.json"));
  EXPECT_EQ(std::system(("'" + exe + "' train --bogus > /dev/null 2>&1").c_str()) >> 8, 64);
}
#endif

}  // namespace
}  // namespace hetfuse
