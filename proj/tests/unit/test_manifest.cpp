#include <gtest/gtest.h>

#include <fstream>
#include <nlohmann/json.hpp>

#include "maet/ability_extract.hpp"
#include "maet/delta_ops.hpp"
#include "maet/error.hpp"
#include "maet/lingual_combine.hpp"
#include "maet/manifest.hpp"
#include "maet/toy_lab.hpp"
#include "maet/transfer_merge.hpp"
#include "support.hpp"

using namespace maet;
using namespace maet::testing;
using json = nlohmann::json;

namespace {

std::string error_of(const std::string& text, const std::filesystem::path& dir) {
  try {
    parse_manifest(text, dir);
  } catch (const InvalidArgument& e) {
    return e.what();
  }
  return "no error";
}

std::size_t count_files(const std::filesystem::path& dir) {
  std::size_t n = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) n += e.is_regular_file();
  return n;
}

// Toy checkpoints small enough to build in a test.
void make_toy_inputs(const std::filesystem::path& dir) {
  toy::ToyConfig config;
  config.pretrain_steps = 100;
  config.probe_steps = 10;
  config.cpt_steps = 50;
  config.language_steps = 50;
  config.eval_samples = 16;
  toy::run_transfer_experiment(config, dir);
}

const char* kFullPipeline = R"({
  "hyperparameters": {"alpha": 0.8, "beta": 0.2, "gamma": 0.2, "eta": 1.0,
                      "k1_percent": 5, "k2_percent": 80, "metric": "dot"},
  "stages": [
    {"name": "imp_a", "op": "importance", "inputs": {"base": "base.safetensors", "probe": "probe_ability.safetensors"}, "output": "imp_a.safetensors"},
    {"name": "imp_l", "op": "importance", "inputs": {"base": "base.safetensors", "probe": "probe_lang0.safetensors"}, "output": "imp_l.safetensors"},
    {"name": "mask_a", "op": "mask", "inputs": {"importance": "@imp_a"}, "output": "mask_a.safetensors"},
    {"name": "mask_l", "op": "mask", "inputs": {"importance": "@imp_l"}, "output": "mask_l.safetensors"},
    {"name": "mask_al", "op": "mask-union", "inputs": {"a": "@mask_a", "b": "@mask_l"}, "output": "mask_al.safetensors"},
    {"name": "proj", "op": "project", "inputs": {"base": "base.safetensors", "trained": "theta_ability_lang0.safetensors", "mask": "@mask_al"}, "output": "proj.safetensors"},
    {"name": "merged", "op": "merge", "inputs": {"base": "base.safetensors", "ability": "@ability", "multilingual": "@multi", "selection": "@sel"}, "output": "merged.safetensors"},
    {"name": "ability", "op": "extract", "inputs": {"ability_model": "theta_ability_lang0.safetensors", "language_model": "theta_lang0.safetensors", "base": "base.safetensors"}, "output": "ability.safetensors"},
    {"name": "r1", "op": "diff", "inputs": {"minuend": "theta_lang1.safetensors", "subtrahend": "base.safetensors"}, "output": "r1.safetensors"},
    {"name": "r2", "op": "diff", "inputs": {"minuend": "theta_lang2.safetensors", "subtrahend": "base.safetensors"}, "output": "r2.safetensors"},
    {"name": "multi", "op": "combine", "inputs": {"lang1": "@r1", "lang2": "@r2"}, "output": "multi.safetensors"},
    {"name": "sel", "op": "select", "inputs": {"ability": "@ability", "multilingual": "@multi"}, "output": "selection.json"}
  ]
})";

}  // namespace

TEST(Manifest, SingleDiffStage) {
  TempDir in, out;
  Rng rng(1);
  write_store(toy_tensors(rng, 1.0), {}, in / "a.safetensors");
  write_store(toy_tensors(rng, 1.0), {}, in / "b.safetensors");
  const Manifest m = parse_manifest(
      R"({"stages": [{"name": "d", "op": "diff", "inputs": {"minuend": "a.safetensors", "subtrahend": "b.safetensors"}, "output": "d.safetensors"}]})",
      in.path());
  const std::vector<Artifact> artifacts = run_manifest(m, out.path());
  ASSERT_EQ(artifacts.size(), 1u);
  std::size_t stores = 0;
  for (const auto& e : std::filesystem::directory_iterator(out.path())) stores += e.path().extension() == ".safetensors";
  EXPECT_EQ(stores, 1u);
  const TensorStore d = TensorStore::open(out / "d.safetensors");
  EXPECT_EQ(d.metadata_value("kind"), "delta");
  const json provenance = json::parse(slurp(out / "d.safetensors.provenance.json"));
  EXPECT_EQ(provenance["inputs"]["minuend"]["sha256"], TensorStore::open(in / "a.safetensors").digest());
  EXPECT_EQ(provenance["output"]["sha256"], d.digest());
}

TEST(Manifest, CyclesAreRejectedBeforeRunning) {
  TempDir in;
  const std::string text = R"({"stages": [
    {"name": "a", "op": "diff", "inputs": {"minuend": "@b", "subtrahend": "@b"}, "output": "a.safetensors"},
    {"name": "b", "op": "diff", "inputs": {"minuend": "@a", "subtrahend": "@a"}, "output": "b.safetensors"}]})";
  EXPECT_NE(error_of(text, in.path()).find("cyclic"), std::string::npos);
  const std::string self = R"({"stages": [
    {"name": "a", "op": "diff", "inputs": {"minuend": "@a", "subtrahend": "@a"}, "output": "a.safetensors"}]})";
  EXPECT_NE(error_of(self, in.path()).find("cyclic"), std::string::npos);
  EXPECT_EQ(count_files(in.path()), 0u);
}

TEST(Manifest, ValidationNamesTheField) {
  TempDir in;
  write_store({{"w", DType::F32, {1}, std::vector<float>{1}}}, {}, in / "x.safetensors");
  const std::string stage = R"({"name": "s", "op": "diff", "inputs": {"minuend": "x.safetensors", "subtrahend": "x.safetensors"}, "output": "o.safetensors"})";
  EXPECT_NE(error_of(R"({"hyperparameters": {"k2_percent": 0}, "stages": [)" + stage + "]}", in.path())
                .find("hyperparameters.k2_percent"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"hyperparameters": {"k1_percent": 150}, "stages": [)" + stage + "]}", in.path())
                .find("hyperparameters.k1_percent"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"stages": [{"name": "s", "op": "nope", "output": "o"}]})", in.path()).find("stages[0].op"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"stages": [{"name": "s", "op": "diff", "inputs": {"minuend": "x.safetensors"}, "output": "o"}]})",
                     in.path())
                .find("stages[0].inputs.subtrahend"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"stages": [{"name": "s", "op": "diff", "inputs": {"minuend": "x.safetensors", "subtrahend": "gone.safetensors"}, "output": "o"}]})",
                     in.path())
                .find("not found"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"stages": [)" + stage +
                         R"(, {"name": "m", "op": "mask", "inputs": {"importance": "@s"}, "output": "m"}]})",
                     in.path())
                .find("stages[1].inputs.importance"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"stages": [)" + stage + "," + stage + "]}", in.path()).find("duplicate"), std::string::npos);
  EXPECT_NE(error_of(R"({"stages": []})", in.path()).find("stages"), std::string::npos);
  EXPECT_NE(error_of(R"({"stagez": []})", in.path()).find("stagez"), std::string::npos);
  EXPECT_NE(error_of(R"({"filters": {"include": ["[x"]}, "stages": [)" + stage + "]}", in.path()).find("filters"),
            std::string::npos);
  EXPECT_NE(error_of("{", in.path()).find("JSON"), std::string::npos);
}

TEST(Manifest, FullPipelineMatchesDirectCallsAndReruns) {
  TempDir toy_dir, run1, run2;
  make_toy_inputs(toy_dir.path());
  std::ofstream(toy_dir / "pipeline.json") << kFullPipeline;
  const Manifest manifest = load_manifest(toy_dir / "pipeline.json");
  const std::vector<std::size_t> order = execution_order(manifest);
  EXPECT_LT(std::find(order.begin(), order.end(), 11) - order.begin(),
            std::find(order.begin(), order.end(), 6) - order.begin());  // select before merge
  const std::vector<Artifact> first = run_manifest(manifest, run1.path());
  const std::vector<Artifact> second = run_manifest(manifest, run2.path());
  const std::vector<Artifact> again = run_manifest(manifest, run1.path());
  ASSERT_EQ(first.size(), manifest.stages.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_EQ(first[i].digest, second[i].digest) << first[i].stage;
    EXPECT_EQ(first[i].digest, again[i].digest) << first[i].stage;
    EXPECT_EQ(slurp(std::filesystem::path(first[i].path.string() + ".provenance.json")), slurp(std::filesystem::path(second[i].path.string() + ".provenance.json")));
  }

  // Same operations called directly.
  const auto open = [&](const char* name) { return TensorStore::open(toy_dir / name); };
  const TensorStore base = open("base.safetensors");
  const TensorStore ability = extract_ability(open("theta_ability_lang0.safetensors"), open("theta_lang0.safetensors"),
                                              base, 0.8, 0.2, "ability");
  const TensorStore multi = combine_languages(
      {{"lang1", diff(open("theta_lang1.safetensors"), base, Destination::memory(), {{"stage", "r1"}}), {}},
       {"lang2", diff(open("theta_lang2.safetensors"), base, Destination::memory(), {{"stage", "r2"}}), {}}});
  const TensorSelection selection = select_last(similarity_report(ability, multi), 80.0);
  const TensorStore merged = merge({base, ability, multi, selection.names, 0.2, 1.0});
  EXPECT_EQ(TensorStore::open(run1 / "merged.safetensors").digest(), merged.digest());
  EXPECT_EQ(read_selection(run1 / "selection.json").names, selection.names);
}

TEST(Manifest, FailingStageIsNamedAndCleanedUp) {
  TempDir in, out;
  write_store({{"w", DType::F32, {1}, std::vector<float>{1}}}, {}, in / "a.safetensors");
  write_store({{"v", DType::F32, {1}, std::vector<float>{1}}}, {}, in / "b.safetensors");
  const Manifest m = parse_manifest(
      R"({"stages": [{"name": "ok", "op": "diff", "inputs": {"minuend": "a.safetensors", "subtrahend": "a.safetensors"}, "output": "ok.safetensors"},
                     {"name": "bad", "op": "diff", "inputs": {"minuend": "a.safetensors", "subtrahend": "b.safetensors"}, "output": "bad.safetensors"}]})",
      in.path());
  try {
    run_manifest(m, out.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("stage 'bad'"), std::string::npos);
  }
  EXPECT_TRUE(std::filesystem::exists(out / "ok.safetensors"));
  EXPECT_FALSE(std::filesystem::exists(out / "bad.safetensors"));
  EXPECT_FALSE(std::filesystem::exists(out / "bad.safetensors.partial"));
  EXPECT_FALSE(std::filesystem::exists(out / "bad.safetensors.provenance.json"));
}
