#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <random>
#include <string>
#include <sys/wait.h>

#include "ccl/io.hpp"

namespace fs = std::filesystem;
using ccl::io::Json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(CCL_BIN) + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

class Cli : public testing::Test {
 protected:
  void SetUp() override {
    std::random_device rd;
    dir_ = fs::temp_directory_path() / ("ccl_cli_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(dir_);
    Json j{{"grid", Json{{"t_a", 4}, {"t_v", 2}, {"h", 2}, {"w", 2}}},
           {"checkpoint_every", 3},
           {"model", Json{{"signal_channels", 2},
                          {"n_classes", 2},
                          {"text_tokens", 2},
                          {"audio", Json{{"depth", 2}, {"dim", 8}, {"heads", 2}, {"text_dim", 4}, {"n_lct", 3}}},
                          {"video", Json{{"depth", 2}, {"dim", 16}, {"heads", 2}, {"text_dim", 4}, {"n_lct", 2}}}}},
           {"train", Json{{"steps", 6}, {"batch", 2}}},
           {"guidance", Json{{"steps", 4}}}};
    cfg_ = (dir_ / "tiny.json").string();
    ccl::io::write_json(cfg_, j);
  }
  void TearDown() override {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
  std::string at(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
  std::string cfg_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run("--no-such-flag").code, 2);
  EXPECT_EQ(run("train --steps").code, 2);
  EXPECT_EQ(run("sample").code, 2);
  EXPECT_EQ(run("train --config " + at("missing.json")).code, 2);
  Json bad = ccl::io::read_json(cfg_);
  bad["train"]["stpes"] = 3;
  ccl::io::write_json(at("bad.json"), bad);
  const auto r = run("train --config " + at("bad.json") + " --out " + at("x"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("train.stpes"), std::string::npos) << r.out;
  EXPECT_EQ(run("train --config " + cfg_ + " --variant dense --out " + at("x")).code, 2);
}

TEST_F(Cli, ConfigCommandPrintsLoadableDefaults) {
  const auto r = run("config");
  ASSERT_EQ(r.code, 0);
  const auto j = Json::parse(r.out);
  EXPECT_EQ(ccl::io::to_json(ccl::io::run_config_from_json(j)).dump(), j.dump());
}

TEST_F(Cli, TrainingIsDeterministicAndResumable) {
  ASSERT_EQ(run("train --config " + cfg_ + " --out " + at("a")).code, 0);
  ASSERT_EQ(run("train --config " + cfg_ + " --out " + at("b")).code, 0);
  EXPECT_EQ(slurp(at("a/final/params.bin")), slurp(at("b/final/params.bin")));
  EXPECT_EQ(slurp(at("a/train_log.jsonl")), slurp(at("b/train_log.jsonl")));
  ASSERT_TRUE(fs::exists(at("a/ckpt_000003/manifest.json")));

  ASSERT_EQ(run("train --resume " + at("a/ckpt_000003") + " --out " + at("c")).code, 0);
  EXPECT_EQ(slurp(at("a/final/params.bin")), slurp(at("c/final/params.bin")));
  EXPECT_EQ(slurp(at("a/final/manifest.json")), slurp(at("c/final/manifest.json")));

  const auto other = run("train --config " + cfg_ + " --seed 5 --out " + at("d"));
  ASSERT_EQ(other.code, 0);
  EXPECT_NE(slurp(at("a/final/params.bin")), slurp(at("d/final/params.bin")));
}

TEST_F(Cli, TruncatedCheckpointIsRejected) {
  ASSERT_EQ(run("train --config " + cfg_ + " --out " + at("a")).code, 0);
  const std::string blob = slurp(at("a/final/params.bin"));
  std::ofstream(at("a/final/params.bin"), std::ios::binary | std::ios::trunc) << blob.substr(0, blob.size() / 2);
  const auto r = run("sample --checkpoint " + at("a/final") + " --out " + at("s"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("integrity error"), std::string::npos) << r.out;
  EXPECT_EQ(run("train --resume " + at("a/final") + " --out " + at("r")).code, 2);
}

TEST_F(Cli, NonFiniteTrainingExitsWithThree) {
  Json j = ccl::io::read_json(cfg_);
  j["train"]["lr_base"] = 1e30;
  j["train"]["lr_cca"] = 1e30;
  ccl::io::write_json(at("huge.json"), j);
  const auto r = run("train --config " + at("huge.json") + " --out " + at("h"));
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("numerical failure"), std::string::npos);
}

TEST_F(Cli, SampleAndEvaluate) {
  ASSERT_EQ(run("train --config " + cfg_ + " --out " + at("a")).code, 0);
  const std::string ck = " --checkpoint " + at("a/final");
  const auto s = run("sample" + ck + " --mode ucg2 --count 3 --class 1 --seed 2 --out " + at("s") + " --dump-attn " +
                     at("attn") + " --probe-pairs 2");
  ASSERT_EQ(s.code, 0) << s.out;
  const Json meta = ccl::io::read_json(at("s/sample.json"));
  EXPECT_EQ(meta.at("class_ids"), Json({1, 1, 1}));
  EXPECT_EQ(meta.at("mode"), "ucg2");
  EXPECT_EQ(fs::file_size(at("s/video.f32")), 3U * 8U * 2U * 4U);

  const auto again = run("sample" + ck + " --mode ucg2 --count 3 --class 1 --seed 2 --out " + at("s2"));
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(slurp(at("s/video.f32")), slurp(at("s2/video.f32")));

  const auto ea = run("eval-attn " + at("attn") + " " + at("s"));
  EXPECT_EQ(ea.code, 0) << ea.out;
  EXPECT_NE(ea.out.find("all blocks"), std::string::npos);
  const auto es = run("eval-sync " + at("s"));
  EXPECT_EQ(es.code, 0) << es.out;
  EXPECT_NE(es.out.find("mean"), std::string::npos);
  EXPECT_EQ(run("eval-attn " + at("attn") + " " + at("s2")).code, 2);

  EXPECT_EQ(run("sample" + ck + " --mode cfg --out " + at("s3")).code, 2);
  EXPECT_EQ(run("sample" + ck + " --class 7 --out " + at("s3")).code, 2);
}

TEST_F(Cli, BenchWritesReport) {
  const auto r = run("bench --config " + cfg_ + " --seeds 1 --steps 100 --jobs 1 --out " + at("b"));
  ASSERT_EQ(r.code, 0) << r.out;
  const Json rep = ccl::io::read_json(at("b/bench/report.json"));
  EXPECT_EQ(rep.at("points_per_curve"), 1);
  EXPECT_EQ(rep.at("final").size(), 1U);
  EXPECT_TRUE(fs::exists(at("b/bench/curves.csv")));
  EXPECT_EQ(run("bench --config " + cfg_ + " --seeds 1 --steps 50 --out " + at("b")).code, 2);
}
