#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>

#include "maet/tensor_store.hpp"
#include "support.hpp"

using namespace maet;
using namespace maet::testing;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run(const std::string& args, const TempDir& dir) {
  const std::string err_path = (dir / "stderr.txt").string();
  const std::string command = std::string(MAET_CLI) + " " + args + " 2>" + err_path;
  Result r;
  FILE* pipe = popen(command.c_str(), "r");
  char buffer[4096];
  std::size_t n = 0;
  while ((n = fread(buffer, 1, sizeof buffer, pipe)) > 0) r.out.append(buffer, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_path);
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    write_store({{"t1", DType::F32, {2}, std::vector<float>{1, 1}}, {"t2", DType::F32, {2}, std::vector<float>{1, 1}}},
                {}, dir / "base.safetensors");
    write_store({{"t1", DType::F32, {2}, std::vector<float>{2, 1}}, {"t2", DType::F32, {2}, std::vector<float>{1, 3}}},
                {}, dir / "ability.safetensors");
    write_store({{"t1", DType::F32, {2}, std::vector<float>{1, 2}}, {"t2", DType::F32, {2}, std::vector<float>{1, 1}}},
                {}, dir / "lang.safetensors");
  }
  std::string p(const std::string& name) const { return (dir / name).string(); }
  TempDir dir;
};

}  // namespace

TEST_F(Cli, ExtractDefaultsAlpha) {
  const Result r = run("extract --trained " + p("ability.safetensors") + " --lang " + p("lang.safetensors") +
                           " --base " + p("base.safetensors") + " --out " + p("r.safetensors"),
                       dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const TensorStore store = TensorStore::open(dir / "r.safetensors");
  EXPECT_EQ(store.metadata_value("alpha"), "0.8");
  EXPECT_EQ(store.metadata_value("beta"), "0.2");
  EXPECT_EQ(store.read_f32("t1"), (std::vector<float>{0.8f, -0.2f}));
}

TEST_F(Cli, SelectRejectsZeroK2) {
  const Result r = run("select --ability " + p("ability.safetensors") + " --multilingual " + p("lang.safetensors") +
                           " --k2 0",
                       dir);
  EXPECT_EQ(r.code, 1);
  const auto err = nlohmann::json::parse(r.err);
  EXPECT_EQ(err["error"], "usage");
}

TEST_F(Cli, UsageAndDataErrors) {
  EXPECT_EQ(run("diff --bogus", dir).code, 1);
  EXPECT_EQ(run("diff --trained " + p("missing") + " --base " + p("base.safetensors") + " --out x", dir).code, 1);
  EXPECT_EQ(run("", dir).code, 1);
  std::ofstream(dir / "junk.safetensors") << "not a store";
  const Result r = run("diff --trained " + p("junk.safetensors") + " --base " + p("base.safetensors") + " --out " +
                           p("d.safetensors"),
                       dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("malformed header"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir / "d.safetensors"));
}

TEST_F(Cli, PipelineAndDryRun) {
  ASSERT_EQ(run("diff --trained " + p("ability.safetensors") + " --base " + p("base.safetensors") + " --out " +
                    p("ra.safetensors"),
                dir)
                .code,
            0);
  ASSERT_EQ(run("extract --trained " + p("lang.safetensors") + " --base " + p("base.safetensors") +
                    " --language-id fr --out " + p("rl.safetensors"),
                dir)
                .code,
            0);
  ASSERT_EQ(run("combine --weight fr=" + p("rl.safetensors") + " --mu fr=1 --out " + p("rlang.safetensors"), dir).code, 0);
  ASSERT_EQ(run("select --ability " + p("ra.safetensors") + " --multilingual " + p("rlang.safetensors") +
                    " --k2 50 --out " + p("sel.json"),
                dir)
                .code,
            0);
  const std::size_t before = std::distance(std::filesystem::directory_iterator(dir.path()), {});
  const Result dry = run("merge --base " + p("base.safetensors") + " --ability " + p("ra.safetensors") +
                             " --multilingual " + p("rlang.safetensors") + " --selection " + p("sel.json") + " --dry-run",
                         dir);
  ASSERT_EQ(dry.code, 0) << dry.err;
  const auto summary = nlohmann::json::parse(dry.out);
  EXPECT_EQ(summary["rows"].size(), 2u);
  EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir.path()), {}), static_cast<long>(before));
  const Result real = run("merge --base " + p("base.safetensors") + " --ability " + p("ra.safetensors") +
                              " --multilingual " + p("rlang.safetensors") + " --selection " + p("sel.json") +
                              " --out " + p("merged.safetensors"),
                          dir);
  ASSERT_EQ(real.code, 0) << real.err;
  EXPECT_EQ(TensorStore::open(dir / "merged.safetensors").metadata_value("kind"), "merged");
  const Result inspect = run("inspect " + p("merged.safetensors") + " " + p("base.safetensors"), dir);
  ASSERT_EQ(inspect.code, 0) << inspect.err;
  EXPECT_EQ(nlohmann::json::parse(inspect.out)["kind"], "layer_report");
}

TEST_F(Cli, MaskCommands) {
  write_store({{"t1", DType::F32, {2}, std::vector<float>{1, 1.5}}, {"t2", DType::F32, {2}, std::vector<float>{3, 1}}},
              {}, dir / "probe.safetensors");
  ASSERT_EQ(run("importance --base " + p("base.safetensors") + " --probe " + p("probe.safetensors") + " --out " +
                    p("imp.safetensors"),
                dir)
                .code,
            0);
  ASSERT_EQ(run("mask --importance " + p("imp.safetensors") + " --k1 25 --out " + p("m1.safetensors"), dir).code, 0);
  ASSERT_EQ(run("mask --importance " + p("imp.safetensors") + " --k1 50 --out " + p("m2.safetensors"), dir).code, 0);
  ASSERT_EQ(run("mask-union --mask " + p("m1.safetensors") + " --mask " + p("m2.safetensors") + " --out " +
                    p("mu.safetensors"),
                dir)
                .code,
            0);
  ASSERT_EQ(run("project --base " + p("base.safetensors") + " --trained " + p("probe.safetensors") + " --mask " +
                    p("m1.safetensors") + " --out " + p("proj.safetensors"),
                dir)
                .code,
            0);
  EXPECT_EQ(TensorStore::open(dir / "proj.safetensors").read_f32("t2"), (std::vector<float>{3, 1}));
  EXPECT_EQ(TensorStore::open(dir / "proj.safetensors").read_f32("t1"), (std::vector<float>{1, 1}));
}
