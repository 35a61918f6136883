#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "tirgan/io.hpp"

using namespace tirgan;
using nlohmann::json;

namespace {

const fs::path kFixtures = TIRGAN_FIXTURES;

struct Result {
  int code = -1;
  std::string out, err;
};

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

// Runs the real binary in a shell; `env` is a prefix such as "X=1 ".
Result run_bin(const std::vector<std::string>& args, const oracle::TempDir& scratch,
               const std::string& env = "env -u TIRGAN_WORKDIR ") {
  std::string cmd = env + quote(TIRGAN_BIN);
  for (const auto& a : args) cmd += " " + quote(a);
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  cmd += " > " + quote(out.string()) + " 2> " + quote(err.string());
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = oracle::file_bytes(out);
  r.err = oracle::file_bytes(err);
  return r;
}

const char* kTinyConfig = R"(# tiny networks for tests
epochs = 1
seed = 3

[colorizer.generator]
base_width = 4
n_resblocks = 1

[colorizer.discriminator]
base_width = 4
n_layers = 2

[ir_translator.generator]
base_width = 4
n_resblocks = 1

[ir_translator.discriminator]
base_width = 4
n_layers = 2

[day_translator.generator]
base_width = 4
n_resblocks = 1

[day_translator.discriminator]
base_width = 4
n_layers = 2
)";

}  // namespace

TEST_CASE("key/value config parsing") {
  const auto j = cli::parse_kv_config(
      "a = 1\nb = \"x # not a comment\" # comment\n[s.t]\nc = [1, 2.5, \"q\"]\nd = true\n", "cfg");
  CHECK(j["a"] == 1);
  CHECK(j["b"] == "x # not a comment");
  CHECK(j["s"]["t"]["c"] == json::array({1, 2.5, "q"}));
  CHECK(j["s"]["t"]["d"] == true);
  CHECK_THROWS_AS(cli::parse_kv_config("a = 1\na = 2\n", "cfg"), cli::UsageError);
  CHECK_THROWS_AS(cli::parse_kv_config("a = nope\n", "cfg"), cli::UsageError);
  CHECK_THROWS_AS(cli::parse_kv_config("[open\n", "cfg"), cli::UsageError);
}

TEST_CASE("config merge rejects unknown keys") {
  auto base = cli::default_pipeline_config();
  CHECK_NOTHROW(cli::merge_config(base, json{{"colorizer", {{"weights", {{"lambda_l1", 5.0}}}}}}));
  CHECK(base["colorizer"]["weights"]["lambda_l1"] == 5.0);
  CHECK_THROWS_WITH_AS(cli::merge_config(base, json{{"colorizer", {{"wieghts", 1}}}}),
                       doctest::Contains("colorizer.wieghts"), cli::UsageError);
  CHECK(cli::parse_approach_flag("2") == pipe::Approach::approach2);
  CHECK(cli::parse_approach_flag("baseline") == pipe::Approach::baseline);
  CHECK_THROWS_AS(cli::parse_approach_flag("4"), cli::UsageError);
}

TEST_CASE("exit codes") {
  oracle::TempDir t("cli_codes");
  CHECK(run_bin({"--help"}, t).code == 0);
  CHECK(run_bin({}, t).code == 2);
  CHECK(run_bin({"frobnicate"}, t).code == 2);
  auto r = run_bin({"synth", "--n", "1"}, t);
  CHECK(r.code == 2);
  CHECK(r.err.find("--out") != std::string::npos);
  CHECK(run_bin({"pipeline", "--approach", "4", "--manifest", "x", "--workdir", (t / "w").string()}, t).code == 2);
  // runtime failure: manifest does not exist
  r = run_bin({"pipeline", "--approach", "1", "--manifest", (t / "none.jsonl").string(), "--workdir",
               (t / "w").string()},
              t);
  CHECK(r.code == 1);
  CHECK(r.err.find("cannot open manifest") != std::string::npos);
  // no work directory anywhere
  r = run_bin({"pipeline", "--approach", "1", "--manifest", "m.jsonl"}, t);
  CHECK(r.code == 2);
  CHECK(r.err.find("TIRGAN_WORKDIR") != std::string::npos);
  // bad eval input is a runtime failure
  CHECK(run_bin({"eval", "--detections", (t / "no.jsonl").string(), "--annotations",
                 (t / "no.jsonl").string(), "--out", (t / "e").string()},
                t)
            .code == 1);
}

TEST_CASE("synth, pipeline, cached rerun and translate") {
  oracle::TempDir t("cli_flow");
  auto r = run_bin({"synth", "--n", "2", "--size", "32", "--seed", "4", "--out", (t / "data").string()}, t);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(t / "data" / "manifest.jsonl"));
  write_text_file(t / "tiny.toml", kTinyConfig);

  const std::vector<std::string> args = {"pipeline", "--approach", "3", "--config", (t / "tiny.toml").string(),
                                         "--manifest", (t / "data" / "manifest.jsonl").string()};
  const std::string env = "TIRGAN_WORKDIR=" + quote((t / "work").string()) + " ";
  r = run_bin(args, t, env);
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("[pipeline] stage ir_translator: training") != std::string::npos);
  CHECK(fs::exists(t / "work" / "lineage.json"));
  const auto snap = json::parse(read_text_file(t / "work" / "config.resolved.json"));
  CHECK(snap["approach"] == "approach3");
  CHECK(snap["seed"] == 3);
  CHECK(snap["colorizer"]["generator"]["base_width"] == 4);
  CHECK(snap["colorizer"]["schedule"]["total_epochs"] == 1);

  r = run_bin(args, t, env);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("stage ir_translator: cached") != std::string::npos);
  CHECK(r.out.find("stage colorizer_fake_night: cached") != std::string::npos);

  // translate a directory, then an empty one
  fs::create_directories(t / "in");
  fs::copy_file(t / "data" / "ir" / "scene_0000_night.png", t / "in" / "a.png");
  fs::copy_file(t / "data" / "ir" / "scene_0001_night.png", t / "in" / "b.png");
  r = run_bin({"translate", "--input", (t / "in").string(), "--out", (t / "out").string()}, t, env);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(t / "out" / "a.png"));
  CHECK(read_png_info(t / "out" / "b.png").channels == 3);
  fs::create_directories(t / "empty");
  r = run_bin({"translate", "--workdir", (t / "work").string(), "--input", (t / "empty").string()}, t);
  CHECK(r.code == 0);
  CHECK(r.err.find("warning") != std::string::npos);
  r = run_bin({"translate", "--workdir", (t / "nowork").string(), "--input", (t / "in").string()}, t);
  CHECK(r.code == 1);
}

TEST_CASE("config precedence") {
  oracle::TempDir t("cli_prec");
  data::synth_toy_dataset(t / "data", 1, 32, 1);
  write_text_file(t / "tiny.toml", std::string(kTinyConfig) + "\n[colorizer.weights]\nlambda_tv = 2.0\n");
  const std::string env = "TIRGAN_WORKDIR=" + quote((t / "env_work").string()) + " ";
  auto r = run_bin({"pipeline", "--approach", "baseline", "--config", (t / "tiny.toml").string(), "--manifest",
                    (t / "data" / "manifest.jsonl").string(), "--seed", "9", "--set",
                    "colorizer.weights.lambda_tv=4.5"},
                   t, env);
  INFO(r.err);
  REQUIRE(r.code == 0);
  // env supplies the work dir; flags beat the file; --set beats flags and file
  auto snap = json::parse(read_text_file(t / "env_work" / "config.resolved.json"));
  CHECK(snap["seed"] == 9);
  CHECK(snap["colorizer"]["weights"]["lambda_tv"] == 4.5);
  CHECK(snap["colorizer"]["generator"]["base_width"] == 4);

  // --workdir beats the environment
  r = run_bin({"pipeline", "--approach", "baseline", "--config", (t / "tiny.toml").string(), "--manifest",
               (t / "data" / "manifest.jsonl").string(), "--workdir", (t / "flag_work").string()},
              t, env);
  REQUIRE(r.code == 0);
  snap = json::parse(read_text_file(t / "flag_work" / "config.resolved.json"));
  CHECK(snap["colorizer"]["weights"]["lambda_tv"] == 2.0);
  CHECK(snap["seed"] == 3);

  r = run_bin({"pipeline", "--approach", "baseline", "--config", (t / "tiny.toml").string(), "--manifest",
               (t / "data" / "manifest.jsonl").string(), "--set", "colorizer.bogus=1"},
              t, env);
  CHECK(r.code == 2);
}

TEST_CASE("eval command") {
  oracle::TempDir t("cli_eval");
  auto r = run_bin({"eval", "--detections", (kFixtures / "perfect" / "detections.jsonl").string(), "--annotations",
                    (kFixtures / "perfect" / "annotations.jsonl").string(), "--out", (t / "p").string()},
                   t);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("1.000 1.000 1.000") != std::string::npos);

  const auto hand = kFixtures / "hand";
  r = run_bin({"eval", "--detections", (hand / "detections.jsonl").string(), "--annotations",
               (hand / "annotations.jsonl").string(), "--out", (t / "h1").string()},
              t);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("0.833") != std::string::npos);
  CHECK(fs::exists(t / "h1" / "report.json"));
  CHECK(fs::exists(t / "h1" / "pr_curve.csv"));
  CHECK(read_png_info(t / "h1" / "pr_curve.png").channels == 3);

  // the default IoU threshold is 0.5
  r = run_bin({"eval", "--detections", (hand / "detections.jsonl").string(), "--annotations",
               (hand / "annotations.jsonl").string(), "--iou", "0.5", "--out", (t / "h2").string()},
              t);
  REQUIRE(r.code == 0);
  CHECK(oracle::file_bytes(t / "h1" / "report.json") == oracle::file_bytes(t / "h2" / "report.json"));

  r = run_bin({"eval", "--detections", (hand / "detections.jsonl").string(), "--annotations",
               (hand / "annotations.jsonl").string(), "--iou", "1.5", "--out", (t / "h3").string()},
              t);
  CHECK(r.code == 2);

  // detector text output
  fs::create_directories(t / "yolo");
  write_text_file(t / "yolo" / "a.txt", "2 0.25 0.25 0.25 0.25 0.9\n");
  write_text_file(t / "sizes.json", "{\"a\": [80, 40]}");
  write_text_file(t / "ann.jsonl", "{\"image_id\":\"a\",\"category\":\"car\",\"bbox\":[10,5,20,10]}\n");
  r = run_bin({"eval", "--yolo-dir", (t / "yolo").string(), "--sizes", (t / "sizes.json").string(),
               "--annotations", (t / "ann.jsonl").string(), "--out", (t / "y").string()},
              t);
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("1 1 1.000 1.000 1.000") != std::string::npos);
}
