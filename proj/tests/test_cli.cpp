// Copyright (c) 2026 The bkd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// End-to-end checks of the bkd command-line tool.

#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "bkd/image.hpp"
#include "test_util.hpp"

namespace bkd {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::string& args, const std::string& env = "") {
  const auto dir = fs::temp_directory_path();
  const auto o = dir / "bkd_cli_stdout.txt", e = dir / "bkd_cli_stderr.txt";
  const std::string cmd = env + " " + BKD_CLI_PATH + " " + args + " >" + o.string() + " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), read_file(o), read_file(e)};
}

TEST(Cli, ProfileTinyFullSize) {
  const auto out = testing::scratch_dir("cli_profile");
  const auto r = run("profile --config fullsize_v1.json --preset tiny --latent 64x64 -o " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("323.4M"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("-62.4%"), std::string::npos) << r.out;
  const auto j = nlohmann::json::parse(read_file(out / "profile.json"));
  EXPECT_EQ(j["total_params"].get<std::int64_t>(), 323384964);
  EXPECT_EQ(j["seed"].get<int>(), 0);
  const auto run_json = nlohmann::json::parse(read_file(out / "run.json"));
  EXPECT_EQ(run_json["command"], "profile");
  EXPECT_EQ(run_json["config_hash"].get<std::string>().size(), 16u);
}

TEST(Cli, UnknownFlagIsAConfigError) {
  const auto r = run("profile --no-such-flag");
  EXPECT_EQ(r.code, 2);
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j["error"]["kind"], "config");
}

TEST(Cli, HelpListsEveryFlag) {
  const auto r = run("distill --help");
  EXPECT_EQ(r.code, 0);
  for (const char* f : {"--teacher", "--preset", "--plan", "--kd", "--init", "--lambda-out", "--lambda-feat",
                        "--iterations", "--batch-size", "--grad-accum", "--lr", "--seed", "--out", "--threads",
                        "--run-config", "--resume", "--data"}) {
    EXPECT_NE(r.out.find(f), std::string::npos) << f;
  }
}

TEST(Cli, ConfigErrorsListEveryProblem) {
  const auto dir = testing::scratch_dir("cli_badcfg");
  write_file(dir / "train.json", R"({"batch_size": 0, "learning_rate": -1, "iterations": -5})");
  const auto r = run("train-teacher --train-config " + (dir / "train.json").string() + " -o " + (dir / "o").string());
  EXPECT_EQ(r.code, 2);
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_GE(j["error"]["problems"].size(), 3u) << r.err;
}

TEST(Cli, TrainDistillSampleRoundTrip) {
  const auto dir = testing::scratch_dir("cli_e2e");
  const std::string small = " --iterations 3 --batch-size 2 --grad-accum 1 --eval-every 1 --eval-size 4";
  auto r = run("gen-data --count 24 --image-size 8 -o " + (dir / "data").string());
  ASSERT_EQ(r.code, 0) << r.err;
  r = run("train-teacher --data " + (dir / "data").string() + small + " -o " + (dir / "teacher").string());
  ASSERT_EQ(r.code, 0) << r.err;

  // BKD_OUT stands in for --out; --kd off zeroes both KD columns.
  write_file(dir / "rc.json", R"({"kd": "off", "preset": "base"})");
  r = run("distill --teacher " + (dir / "teacher" / "checkpoint").string() + " --run-config " +
              (dir / "rc.json").string() + small,
          "BKD_OUT=" + (dir / "student").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto log = nlohmann::json::parse(read_file(dir / "student" / "train_log.json"));
  ASSERT_GE(log.size(), 2u);
  for (const auto& rec : log) {
    EXPECT_EQ(rec["out_kd"].get<double>(), 0.0);
    EXPECT_EQ(rec["feat_kd"].get<double>(), 0.0);
  }
  const auto rj = nlohmann::json::parse(read_file(dir / "student" / "run.json"));
  EXPECT_EQ(rj["config"]["train"]["kd_enabled"], false);

  const std::string ck = (dir / "student" / "checkpoint").string();
  const std::string args = "sample --checkpoint " + ck + " --prompt 'a large red circle at center' --steps 25 "
                           "--guidance 7.5 --seed 1 -o ";
  ASSERT_EQ(run(args + (dir / "s1").string()).code, 0);
  ASSERT_EQ(run(args + (dir / "s2").string()).code, 0);
  EXPECT_EQ(read_file(dir / "s1" / "000.ppm"), read_file(dir / "s2" / "000.ppm"));
  EXPECT_EQ(read_file(dir / "s1" / "run.json"), read_file(dir / "s2" / "run.json"));
}

TEST(Cli, MissingCheckpointIsAConfigError) {
  const auto r = run("sample --checkpoint /nonexistent/ck --prompt x");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/nonexistent/ck"), std::string::npos);
}

}  // namespace
}  // namespace bkd
