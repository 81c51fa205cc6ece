#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "cotvla/cli.hpp"
#include "cotvla/run_config.hpp"
#include "cotvla/teacher.hpp"
#include "httplib.h"
#include "test_support.hpp"

using namespace cotvla;
using cotvla::testing::read_file;
using cotvla::testing::TempDir;
using cotvla::testing::write_file;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Small model and data settings shared by the end-to-end tests.
std::vector<std::string> small(std::vector<std::string> args) {
  for (const char* a : {"--grid", "8", "--d-model", "16", "--n-layers", "2", "--n-heads", "2", "--d-ff", "32",
                        "--max-seq-len", "160", "--reasoning-budget", "40", "--bins", "8", "--batch", "4",
                        "--lr", "0.003", "--freeze", "1"}) {
    args.emplace_back(a);
  }
  return args;
}

// The summary a subcommand prints last.
nlohmann::json last_json_line(const std::string& out) {
  std::string trimmed = out.substr(0, out.find_last_not_of('\n') + 1);
  return nlohmann::json::parse(trimmed.substr(trimmed.rfind('\n') + 1));
}

std::string shell_quote(const std::string& s) { return "'" + s + "'"; }

int run_binary(const std::string& args, std::string* stderr_text = nullptr) {
  TempDir dir;
  const std::string cmd = shell_quote(COTVLA_CLI_PATH) + " " + args + " >" + shell_quote((dir / "o").string()) +
                          " 2>" + shell_quote((dir / "e").string());
  const int status = std::system(cmd.c_str());
  if (stderr_text != nullptr) *stderr_text = read_file(dir / "e");
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(RunConfig, DefaultsFileAndFlagPrecedence) {
  TempDir dir;
  write_file(dir / "cfg.toml", "# experiment\nlambda_r = 0.5\nout = \"runs/a\"\nfreeze = 1\n");
  RunConfig cfg;
  EXPECT_EQ(cfg.real("lambda_r"), 0.3);
  EXPECT_EQ(cfg.source("lambda_r"), "default");
  cfg.load_file(dir / "cfg.toml");
  EXPECT_EQ(cfg.real("lambda_r"), 0.5);
  EXPECT_EQ(cfg.text("out"), "runs/a");
  cfg.set("lambda-r", "0.7", "flag");
  EXPECT_EQ(cfg.real("lambda_r"), 0.7);
  EXPECT_EQ(cfg.source("lambda_r"), "flag");
  EXPECT_NE(cfg.describe().find("lambda_r = 0.7  # flag"), std::string::npos);
  EXPECT_NE(cfg.describe().find("freeze = 1  # file"), std::string::npos);
}

TEST(RunConfig, ErrorsNameTheLine) {
  TempDir dir;
  write_file(dir / "bad.toml", "seed = 1\nlamda_r = 0.3\n");
  RunConfig cfg;
  try {
    cfg.load_file(dir / "bad.toml");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "config");
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("lamda_r"), std::string::npos) << e.what();
  }
  write_file(dir / "bad2.toml", "seed = one\n");
  EXPECT_THROW(cfg.load_file(dir / "bad2.toml"), Error);
  write_file(dir / "bad3.toml", "just words\n");
  EXPECT_THROW(cfg.load_file(dir / "bad3.toml"), Error);
}

TEST(RunConfig, TypedAccessorsBuildModuleConfigs) {
  RunConfig cfg;
  const TrainConfig t = cfg.train_config();
  EXPECT_EQ(t.lambda_r, 0.3);
  EXPECT_EQ(t.batch_size, 32);
  EXPECT_EQ(t.reasoning_budget, 244);
  EXPECT_EQ(t.save_steps, 500);
  EXPECT_EQ(t.epochs, 1);
  EXPECT_EQ(cfg.integer("k"), 5);
  const ModelConfig m = cfg.model_config(100);
  EXPECT_EQ(m.vocab_size, 100);
  EXPECT_EQ(m.n_layers, 4);
}

TEST(Cli, HelpListsEverySchemaFlagWithDefault) {
  const Outcome o = run_cli({"--help"});
  EXPECT_EQ(o.code, 0);
  for (const ConfigKey& c : config_schema()) {
    const auto at = o.out.find(flag_for(c.key) + " ");
    ASSERT_NE(at, std::string::npos) << flag_for(c.key);
    if (!c.default_value.empty()) {
      const std::string line = o.out.substr(at, o.out.find('\n', at) - at);
      EXPECT_NE(line.find(c.default_value), std::string::npos) << line;
    }
  }
  for (const char* sub : {"gen-data", "annotate", "train", "eval", "rollout", "viz-attn", "plot"}) {
    EXPECT_NE(o.out.find(sub), std::string::npos) << sub;
  }
}

TEST(Cli, UsageErrorsAreOneMachineReadableLine) {
  for (const std::vector<std::string>& args : std::vector<std::vector<std::string>>{
           {}, {"fly"}, {"gen-data", "--no-such-flag", "1"}, {"gen-data", "--seed", "x"}}) {
    const Outcome o = run_cli(args);
    EXPECT_NE(o.code, 0);
    EXPECT_EQ(o.err.rfind("error: code=", 0), 0u) << o.err;
    EXPECT_EQ(std::count(o.err.begin(), o.err.end(), '\n'), 1) << o.err;
  }
}

TEST(Cli, MissingRequiredInputIsConfigError) {
  const Outcome o = run_cli({"train"});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("code=config"), std::string::npos);
  EXPECT_NE(o.err.find("--data"), std::string::npos);
  EXPECT_NE(o.out.find("# train resolved configuration"), std::string::npos);
}

TEST(Cli, GenDataIsDeterministic) {
  TempDir a, b;
  for (const TempDir* d : {&a, &b}) {
    const Outcome o = run_cli({"gen-data", "--n", "6", "--seed", "4", "--grid", "8", "--out", d->path().string()});
    ASSERT_EQ(o.code, 0) << o.err;
    EXPECT_NE(o.out.find("seed = 4  # flag"), std::string::npos);
  }
  EXPECT_EQ(read_file(a / "episodes.jsonl"), read_file(b / "episodes.jsonl"));
  EXPECT_EQ(load_episodes(a / "episodes.jsonl").size(), 6u);
  const auto stats = nlohmann::json::parse(read_file(a / "stats.json"));
  EXPECT_EQ(stats["episodes"], 6);
  EXPECT_EQ(stats["per_task"]["move_near"], 3);
}

TEST(Cli, EndToEndPipeline) {
  TempDir dir;
  const std::string data = (dir / "data").string();
  ASSERT_EQ(run_cli({"gen-data", "--n", "8", "--seed", "2", "--grid", "8", "--out", data}).code, 0);
  const std::string episodes = data + "/episodes.jsonl";
  const std::string traces = (dir / "traces").string();

  const Outcome ann = run_cli({"annotate", "--data", episodes, "--out", traces, "--workers", "3"});
  ASSERT_EQ(ann.code, 0) << ann.err;
  const auto report = nlohmann::json::parse(read_file(dir / "traces" / "report.json"));
  EXPECT_EQ(report["steps_failed"], 0);
  EXPECT_EQ(report["steps_annotated"], report["steps_total"]);

  // Config file plus flag overrides.
  write_file(dir / "cfg.toml", "epochs = 2\nsave_steps = 3\nseed = 9\n");
  const std::string run_dir = (dir / "run").string();
  const Outcome tr = run_cli(small({"train", "--config", (dir / "cfg.toml").string(), "--data", episodes,
                                    "--traces", traces, "--eval-data", episodes, "--eval-steps", "4", "--out",
                                    run_dir}));
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_NE(tr.out.find("epochs = 2  # file"), std::string::npos);
  EXPECT_NE(tr.out.find("lambda_r = 0.3  # default"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "ckpt_3.bin"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "metrics.jsonl"));
  const auto summary = last_json_line(tr.out);
  const int steps = summary["steps"];
  const std::string ckpt = run_dir + "/ckpt_" + std::to_string(steps) + ".bin";
  ASSERT_TRUE(std::filesystem::exists(ckpt));

  const Outcome ev = run_cli(small({"eval", "--ckpt", ckpt, "--data", episodes, "--traces", traces}));
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_NE(ev.out.find("\"action_accuracy\""), std::string::npos);

  const Outcome ro = run_cli(small({"rollout", "--ckpt", ckpt, "--n-episodes", "2", "--families", "pick",
                                    "--max-steps", "5"}));
  ASSERT_EQ(ro.code, 0) << ro.err;
  EXPECT_NE(ro.out.find("\"success_rate\""), std::string::npos);

  const std::string viz = (dir / "viz").string();
  const Outcome va = run_cli(small({"viz-attn", "--ckpt", ckpt, "--data", episodes, "--episode", "e1", "--step",
                                    "1", "--k", "3", "--method", "mean", "--out", viz}));
  ASSERT_EQ(va.code, 0) << va.err;
  for (int a = 0; a < 7; ++a) {
    const std::string stem = "attn_e1_s1_a" + std::to_string(a);
    EXPECT_TRUE(std::filesystem::exists(dir / "viz" / (stem + ".json"))) << stem;
    EXPECT_TRUE(std::filesystem::exists(dir / "viz" / (stem + ".ppm"))) << stem;
  }
  const auto heat = nlohmann::json::parse(read_file(dir / "viz" / "attn_e1_s1_a0.json"));
  EXPECT_EQ(heat["k"], 3);
  EXPECT_EQ(heat["method"], "mean");
  EXPECT_EQ(heat["grid"].size(), 8u);

  const Outcome pl = run_cli({"plot", "--metrics", run_dir + "/metrics.jsonl", "--out", (dir / "fig.svg").string()});
  ASSERT_EQ(pl.code, 0) << pl.err;
  EXPECT_NE(read_file(dir / "fig.svg").find("<polyline"), std::string::npos);

  const Outcome bad_ep = run_cli(small({"viz-attn", "--ckpt", ckpt, "--data", episodes, "--episode", "nope"}));
  EXPECT_EQ(bad_ep.code, 1);
  EXPECT_NE(bad_ep.err.find("code=data"), std::string::npos);
}

TEST(Cli, IdenticalConfigsGiveByteIdenticalArtifacts) {
  TempDir dir;
  const std::string data = (dir / "data").string();
  ASSERT_EQ(run_cli({"gen-data", "--n", "4", "--seed", "3", "--grid", "8", "--out", data}).code, 0);
  const std::string episodes = data + "/episodes.jsonl";
  std::string metrics[2], ckpts[2];
  for (int r = 0; r < 2; ++r) {
    const std::string out = (dir / ("r" + std::to_string(r))).string();
    const Outcome o = run_cli(small({"train", "--data", episodes, "--lambda-r", "0", "--seed", "5", "--out", out}));
    ASSERT_EQ(o.code, 0) << o.err;
    metrics[r] = read_file(out + "/metrics.jsonl");
    const auto summary = last_json_line(o.out);
    ckpts[r] = read_file(summary["checkpoint"].get<std::string>());
  }
  EXPECT_FALSE(metrics[0].empty());
  EXPECT_EQ(metrics[0], metrics[1]);
  EXPECT_EQ(ckpts[0], ckpts[1]);
}

TEST(Cli, RemoteTeacherOutageStillExitsZero) {
  httplib::Server server;
  server.Post("/generate", [](const httplib::Request&, httplib::Response& res) { res.status = 503; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  TempDir dir;
  ASSERT_EQ(run_cli({"gen-data", "--n", "2", "--grid", "8", "--out", dir.path().string()}).code, 0);
  ::setenv("TEACHER_URL", ("http://127.0.0.1:" + std::to_string(port)).c_str(), 1);
  ::setenv("TEACHER_TIMEOUT_S", "5", 1);
  const Outcome o = run_cli({"annotate", "--teacher", "remote", "--data", (dir / "episodes.jsonl").string(), "--out",
                             (dir / "traces").string()});
  ::unsetenv("TEACHER_URL");
  ::unsetenv("TEACHER_TIMEOUT_S");
  server.stop();
  th.join();
  ASSERT_EQ(o.code, 0) << o.err;
  const auto report = nlohmann::json::parse(read_file(dir / "traces" / "report.json"));
  EXPECT_GT(report["steps_total"].get<int>(), 0);
  EXPECT_EQ(report["steps_failed"], report["steps_total"]);
}

TEST(CliBinary, ExitCodesFromTheProcess) {
  std::string err;
  EXPECT_EQ(run_binary("--help"), 0);
  EXPECT_EQ(run_binary("fly", &err), 2);
  EXPECT_EQ(err.rfind("error: code=usage", 0), 0u) << err;
  EXPECT_EQ(run_binary("eval --ckpt /nonexistent/ckpt.bin --vocab /nonexistent/v.json", &err), 1);
  EXPECT_EQ(err.rfind("error: code=io", 0), 0u) << err;
  TempDir dir;
  EXPECT_EQ(run_binary("gen-data --n 1 --grid 8 --out " + shell_quote(dir.path().string())), 0);
}
