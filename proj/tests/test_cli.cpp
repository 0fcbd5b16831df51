// Copyright 2026 The D-Ref Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "dref/cli.hpp"
#include "support.hpp"

using namespace dref;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

/// Small planted-token synth spec whose "run" block drives refine/evaluate.
std::string synth_spec() {
  return R"({
  "vocab_size": 120,
  "mean_length": 7,
  "planted_frequency": 0.2,
  "source_genuine_coverage": 0.8,
  "source_train_size": 300,
  "source_val_size": 60,
  "target_val_size": 80,
  "target_test_size": 120,
  "seed": 4,
  "planted_tokens": [{"token": "zork", "class": "hate", "source_correlation": 0.95, "target_correlation": 0.5}],
  "genuine_signal_tokens": [{"token": "vile", "class": "hate"}, {"token": "scum", "class": "hate"}],
  "run": {"mode": "reg", "method": "scaled_attention", "lambda": 10, "epochs": 2, "dim": 8,
          "seeds": [3], "n_resamples": 1000}
})";
}

/// synth + refine + evaluate into `root`; returns the results.json text.
std::string pipeline(const fs::path& root) {
  write(root / "synth.json", synth_spec());
  EXPECT_EQ(run({"synth", "--spec", (root / "synth.json").string(), "--out", (root / "data").string()}).code, 0);
  const auto spec = (root / "data" / "run.json").string();
  const auto r = run({"refine", "--spec", spec, "--out", (root / "refine").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  const auto e = run({"evaluate", "--spec", spec, "--out", (root / "eval").string()});
  EXPECT_EQ(e.code, 0) << e.err;
  return slurp(root / "eval" / "results.json");
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  const auto r = run({"frobnicate", "--spec", "x.json"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("frobnicate"), std::string::npos);
  EXPECT_EQ(run({"refine"}).code, 2);  // --spec is required
  EXPECT_EQ(run({"refine", "--spec", "x.json", "--mode", "bogus"}).code, 2);
  EXPECT_EQ(run({"refine", "--spec", "x.json", "--k", "2"}).code, 2);
}

TEST(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("refine"), std::string::npos);
  EXPECT_NE(r.out.find("synth"), std::string::npos);
}

TEST(Cli, MissingSpecNamesPath) {
  const auto r = run({"refine", "--spec", "/nonexistent/dir/spec.json"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("/nonexistent/dir/spec.json"), std::string::npos);
}

TEST(Cli, InvalidSpecsRejected) {
  const auto dir = dref::testing::scratch_dir("cli_invalid");
  write(dir / "unknown.json", R"({"out": "o", "lamda": 3})");
  auto r = run({"train", "--spec", (dir / "unknown.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("lamda"), std::string::npos);

  write(dir / "badjson.json", "{ not json");
  r = run({"train", "--spec", (dir / "badjson.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("badjson.json"), std::string::npos);

  write(dir / "nolex.json", R"({"out": "o", "mode": "comb"})");
  r = run({"refine", "--spec", (dir / "nolex.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("lexicon"), std::string::npos);

  write(dir / "missing_file.json", R"({"out": "o", "source_train": "nope.jsonl"})");
  r = run({"train", "--spec", (dir / "missing_file.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("nope.jsonl"), std::string::npos);

  write(dir / "noout.json", R"({"mode": "reg"})");
  r = run({"train", "--spec", (dir / "noout.json").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("output directory"), std::string::npos);
}

TEST(Cli, FullPipeline) {
  const auto root = dref::testing::scratch_dir("cli_pipeline");
  const auto results = nlohmann::json::parse(pipeline(root));
  ASSERT_EQ(results["experiments"].size(), 2u);
  EXPECT_EQ(results["experiments"][0]["mode"], "vanilla");
  EXPECT_EQ(results["experiments"][1]["mode"], "reg");
  EXPECT_FALSE(results["experiments"][1]["p_vs_vanilla"].is_null());
  EXPECT_TRUE(fs::exists(root / "eval" / "results.txt"));

  const auto refine = root / "refine";
  for (const char* f : {"checkpoint.json", "vocab.json", "manifest.json", "spurious_epoch_1.json",
                        "spurious_epoch_2.json", "predictions_target_test.jsonl", "effective_spec.json"}) {
    EXPECT_TRUE(fs::exists(refine / f)) << f;
  }
  const auto manifest = nlohmann::json::parse(slurp(refine / "manifest.json"));
  EXPECT_EQ(manifest["config"]["mode"], "reg");
  EXPECT_EQ(manifest["epochs"].size(), 2u);
  const auto eff = nlohmann::json::parse(slurp(refine / "effective_spec.json"));
  EXPECT_EQ(eff["command"], "refine");
  EXPECT_EQ(eff["lambda"], 10.0);

  const auto spec = (root / "data" / "run.json").string();
  ASSERT_EQ(run({"train", "--spec", spec, "--out", (root / "train").string()}).code, 0);
  EXPECT_TRUE(fs::exists(root / "train" / "checkpoint.json"));
  EXPECT_FALSE(fs::exists(root / "train" / "spurious_epoch_1.json"));

  // extract and visualize read the checkpoint through a second spec.
  auto run_json = nlohmann::json::parse(slurp(spec));
  run_json["checkpoint"] = (refine / "checkpoint.json").string();
  run_json["baseline_checkpoint"] = (root / "train" / "checkpoint.json").string();
  run_json["visualize_corpus"] = "target_test.jsonl";
  run_json["heatmap_limit"] = 3;
  write(root / "data" / "post.json", run_json.dump());
  auto r = run({"extract", "--spec", (root / "data" / "post.json").string(), "--out", (root / "extract").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"global_ranking.json", "spurious.json", "attributions_target_val.jsonl", "chi2_tokens.txt"}) {
    EXPECT_TRUE(fs::exists(root / "extract" / f)) << f;
  }

  r = run({"visualize", "--spec", (root / "data" / "post.json").string(), "--out", (root / "viz").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t pages = 0;
  for (const auto& e : fs::directory_iterator(root / "viz")) {
    if (e.path().extension() == ".html") {
      ++pages;
      EXPECT_NE(slurp(e.path()).find("<span style=\"background-color: rgba("), std::string::npos);
    }
  }
  EXPECT_EQ(pages, 3u);

  nlohmann::json boot;
  boot["predictions_a"] = (refine / "predictions_target_test.jsonl").string();
  boot["predictions_b"] = (root / "train" / "predictions_target_test.jsonl").string();
  boot["gold"] = (root / "data" / "target_test.jsonl").string();
  boot["n_resamples"] = 1000;
  boot["out"] = "boot";
  write(root / "boot.json", boot.dump());
  r = run({"bootstrap", "--spec", (root / "boot.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto sig = nlohmann::json::parse(slurp(root / "boot" / "significance.json"));
  EXPECT_GE(sig["p_value"].get<double>(), 0.0);
  EXPECT_LE(sig["p_value"].get<double>(), 1.0);
  EXPECT_EQ(sig["n_resamples"], 1000);
}

TEST(Cli, PipelineIsDeterministic) {
  const auto a = pipeline(dref::testing::scratch_dir("cli_det_a"));
  const auto b = pipeline(dref::testing::scratch_dir("cli_det_b"));
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_EQ(slurp(fs::temp_directory_path() / "dref_test_cli_det_a" / "refine" / "predictions_target_test.jsonl"),
            slurp(fs::temp_directory_path() / "dref_test_cli_det_b" / "refine" / "predictions_target_test.jsonl"));
}

TEST(Cli, FlagsOverrideSpec) {
  const auto root = dref::testing::scratch_dir("cli_override");
  write(root / "synth.json", synth_spec());
  ASSERT_EQ(run({"synth", "--spec", (root / "synth.json").string(), "--out", (root / "data").string()}).code, 0);
  const auto r = run({"refine", "--spec", (root / "data" / "run.json").string(), "--out", (root / "o").string(),
                      "--mode", "tok_mask", "--epochs", "1", "--seed", "9"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto eff = nlohmann::json::parse(slurp(root / "o" / "effective_spec.json"));
  EXPECT_EQ(eff["mode"], "tok_mask");
  EXPECT_EQ(eff["epochs"], 1);
  EXPECT_EQ(eff["seeds"], nlohmann::json::array({9}));
}
