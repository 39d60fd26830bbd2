#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dualsr/checkpoint.hpp"
#include "dualsr/cli.hpp"
#include "dualsr/degradation.hpp"
#include "dualsr/evaluation.hpp"
#include "dualsr/model.hpp"
#include "test_util.hpp"

using namespace dualsr;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string line; std::getline(in, line);) n += line.empty() ? 0 : 1;
  return n;
}

// One shared workspace: HR sources, a small dataset and a tiny-model config.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = dualsr::testing::scratch_dir("cli");
    ASSERT_EQ(run({"gen-hr", "--out", (dir_ / "src").string(), "--n", "2", "--size", "64", "--seed", "3"}).code, 0);
    std::ofstream(dir_ / "synth.json") << R"({"degradation": {"crop_size": 32}})";
    ASSERT_EQ(run({"synth", "--hr-dir", (dir_ / "src").string(), "--out", (dir_ / "data").string(), "--n", "3",
                   "--seed", "4", "--config", (dir_ / "synth.json").string()})
                  .code,
              0);
    nlohmann::json cfg{{"model", dualsr::testing::tiny_model()}, {"train", {{"crop_size", 32}, {"warmup_iters", 1}}}};
    std::ofstream(dir_ / "tiny.json") << cfg.dump();
  }

  static Result train(const std::string& out, int iters, const std::string& ablation = "full") {
    return run({"train", "--data", (dir_ / "data").string(), "--out", (dir_ / out).string(), "--iters",
                std::to_string(iters), "--seed", "7", "--config", (dir_ / "tiny.json").string(), "--ablation",
                ablation});
  }

  static fs::path dir_;
};

fs::path CliTest::dir_;

}  // namespace

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run({"synth", "--out", (dir_ / "x").string(), "--n", "1"}).code, cli::kUsageError);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kUsageError);
  EXPECT_EQ(run({}).code, cli::kUsageError);
  EXPECT_EQ(train("bad", 1, "everything").code, cli::kUsageError);
  EXPECT_EQ(run({"train", "--data", "d", "--out", "o", "--iters", "-1"}).code, cli::kUsageError);
}

TEST_F(CliTest, RuntimeErrorsExitOne) {
  const auto r = run({"infer", "--ckpt", (dir_ / "none.ckpt").string(), "--input", (dir_ / "data/lr/000000.png").string(),
                      "--output", (dir_ / "o.png").string()});
  EXPECT_EQ(r.code, cli::kRuntimeError);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, SynthSinglePairAndRepeatable) {
  for (const char* out : {"one_a", "one_b"})
    ASSERT_EQ(run({"synth", "--hr-dir", (dir_ / "src").string(), "--out", (dir_ / out).string(), "--n", "1", "--seed",
                   "4", "--config", (dir_ / "synth.json").string()})
                  .code,
              0);
  const auto m = degradation::load_manifest(dir_ / "one_a");
  ASSERT_EQ(m.pairs.size(), 1u);
  for (const std::string& rel : {m.pairs[0].hr, m.pairs[0].lr, m.pairs[0].trace, std::string("manifest.json")})
    EXPECT_EQ(slurp(dir_ / "one_a" / rel), slurp(dir_ / "one_b" / rel)) << rel;
}

TEST_F(CliTest, SeedFallsBackToEnvironment) {
  ASSERT_EQ(run({"synth", "--hr-dir", (dir_ / "src").string(), "--out", (dir_ / "flag").string(), "--n", "1", "--seed",
                 "4", "--config", (dir_ / "synth.json").string()})
                .code,
            0);
  ::setenv("GUIDESR_SEED", "4", 1);
  ASSERT_EQ(run({"synth", "--hr-dir", (dir_ / "src").string(), "--out", (dir_ / "env").string(), "--n", "1",
                 "--config", (dir_ / "synth.json").string()})
                .code,
            0);
  ::unsetenv("GUIDESR_SEED");
  EXPECT_EQ(slurp(dir_ / "env" / "manifest.json"), slurp(dir_ / "flag" / "manifest.json"));
}

TEST_F(CliTest, TrainWritesRunLayout) {
  ASSERT_EQ(train("run2", 2).code, 0);
  EXPECT_EQ(count_lines(dir_ / "run2" / "losses.log"), 2);
  EXPECT_TRUE(fs::exists(dir_ / "run2" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir_ / "run2" / "ckpt" / "last.ckpt"));
  EXPECT_TRUE(fs::is_directory(dir_ / "run2" / "eval"));
  EXPECT_EQ(load_checkpoint(dir_ / "run2" / "ckpt" / "last.ckpt").iteration, 2);
}

TEST_F(CliTest, ZeroItersAndBaselineWiring) {
  ASSERT_EQ(train("run0", 0, "baseline").code, 0);
  EXPECT_EQ(count_lines(dir_ / "run0" / "losses.log"), 0);
  const auto ck = load_checkpoint(dir_ / "run0" / "ckpt" / "last.ckpt");
  EXPECT_EQ(ck.iteration, 0);
  EXPECT_EQ(ck.model.ablation, Ablation::baseline);
  for (const auto& [name, p] : ck.generator.entries()) EXPECT_NE(name.rfind("guidance.", 0), 0u) << name;
}

TEST_F(CliTest, InferShapeIdentityAndDeterminism) {
  ASSERT_EQ(train("init", 0).code, 0);
  const fs::path ckpt = dir_ / "init" / "ckpt" / "last.ckpt";
  const Image lr = degradation::synth_hr_image(32, 32, 9, 0);
  write_png(dir_ / "lr32.png", lr);
  for (const char* name : {"a.png", "b.png"})
    ASSERT_EQ(run({"infer", "--ckpt", ckpt.string(), "--input", (dir_ / "lr32.png").string(), "--output",
                   (dir_ / name).string(), "--scale", "4", "--emit-guidance"})
                  .code,
              0);
  const Image r1 = read_image(dir_ / "a.png");
  EXPECT_EQ(r1.shape(), (Shape{3, 128, 128}));
  EXPECT_EQ(slurp(dir_ / "a.png"), slurp(dir_ / "b.png"));
  EXPECT_EQ(read_image(dir_ / "a_r2.png"), quantize16(upsample_input(read_image(dir_ / "lr32.png"), 4)));
}

TEST_F(CliTest, EvalSanityAndRepeatability) {
  ASSERT_EQ(train("evalrun", 0).code, 0);
  const std::string ckpt = (dir_ / "evalrun" / "ckpt" / "last.ckpt").string();
  ASSERT_EQ(run({"eval", "--ckpt", ckpt, "--data", (dir_ / "data").string(), "--out", (dir_ / "sane.json").string(),
                 "--hr-sanity"})
                .code,
            0);
  EXPECT_EQ(evaluation::read_report(dir_ / "sane.json").aggregate.at("psnr"), 100.0);
  for (const char* name : {"e1.json", "e2.json"})
    ASSERT_EQ(run({"eval", "--ckpt", ckpt, "--data", (dir_ / "data").string(), "--out", (dir_ / name).string()}).code,
              0);
  EXPECT_EQ(slurp(dir_ / "e1.json"), slurp(dir_ / "e2.json"));
  EXPECT_EQ(evaluation::read_report(dir_ / "e1.json").per_image.size(), 3u);
}

TEST_F(CliTest, ReportTables) {
  evaluation::MetricReport a, b;
  a.model_id = "a";
  a.aggregate = {{"psnr", 20.0}, {"ssim", 0.5}, {"lpips", 0.2}};
  b.model_id = "b";
  b.aggregate = {{"psnr", 30.0}, {"ssim", 0.5}, {"lpips", 0.4}};
  evaluation::write_report(dir_ / "ra.json", a);
  evaluation::write_report(dir_ / "rb.json", b);
  ASSERT_EQ(run({"report", "--reports", (dir_ / "ra.json").string(), (dir_ / "rb.json").string(), "--out",
                 (dir_ / "table").string()})
                .code,
            0);
  const std::string radar = slurp(dir_ / "table" / "radar.tsv");
  EXPECT_EQ(radar.substr(0, radar.find('\n')), "model\tpsnr\tssim\tlpips");
  EXPECT_NE(radar.find("\na\t"), std::string::npos);
  EXPECT_NE(radar.find("\nb\t"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "table" / "aggregate.tsv"));

  ASSERT_EQ(run({"report", "--reports", (dir_ / "ra.json").string(), "--out", (dir_ / "single").string()}).code, 0);
  const auto t = evaluation::export_radar({a});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(t.normalized[0][i], 0.5);
}
