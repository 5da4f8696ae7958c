#include <cstdlib>
#include <sstream>

#include <gtest/gtest.h>

#include "json.hpp"
#include "mmcr/cli.hpp"
#include "mmcr/prune.hpp"
#include "mmcr/verify.hpp"
#include "support.hpp"

using namespace mmcr;
using mmcr::testing::read_file;
using mmcr::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;

  // The last stdout line is the JSON summary.
  json summary() const {
    auto trimmed = out.substr(0, out.find_last_not_of('\n') + 1);
    return json::parse(trimmed.substr(trimmed.rfind('\n') == std::string::npos ? 0 : trimmed.rfind('\n') + 1));
  }
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = dispatch(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

const std::string kFixtures = MMCR_FIXTURE_DIR;

}  // namespace

TEST(Cli, HelpExitsZero) {
  auto r = run({"--help"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("preprocess"), std::string::npos);
  EXPECT_EQ(run({"train", "--help"}).code, kExitOk);
}

TEST(Cli, MissingRequiredOptionIsUsageNamingTheFlag) {
  TempDir dir;
  auto r = run({"eval", "--manifest", (dir / "m.tsv").string(), "--out", (dir / "r.json").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("--model"), std::string::npos) << r.err;
}

TEST(Cli, UnknownSubcommandAndBadValuesAreUsageErrors) {
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"synth", "--out", "x", "--classes", "many"}).code, kExitUsage);
  TempDir dir;
  EXPECT_EQ(run({"synth", "--out", dir.path().string(), "--mode", "texture"}).code, kExitUsage);
}

TEST(Cli, DataErrorsExitTwo) {
  TempDir dir;
  mmcr::testing::write_file(dir / "bad.tsv", "id=a\tpath=x.png\tsplit=sideways\n");
  auto r = run({"preprocess", "--manifest", (dir / "bad.tsv").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, kExitData) << r.err;
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  auto missing = run({"ingest", "stanford", "--annotations", (dir / "none.csv").string(), "--images",
                      dir.path().string(), "--out", (dir / "m.tsv").string()});
  EXPECT_EQ(missing.code, kExitData);
}

TEST(Cli, ConfigFileEnvironmentAndFlagsLayer) {
  TempDir dir;
  mmcr::testing::write_file(dir / "c.json", R"({"synth": {"classes": 3, "per_class": 4, "mode": "color"}})");
  ::setenv("MMCR_SYNTH_PER_CLASS", "5", 1);
  auto r = run({"--config", (dir / "c.json").string(), "synth", "--out", (dir / "a").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.summary()["records"], 15);
  EXPECT_EQ(r.summary()["mode"], "color");
  r = run({"--config", (dir / "c.json").string(), "synth", "--out", (dir / "b").string(), "--per-class", "6"});
  ::unsetenv("MMCR_SYNTH_PER_CLASS");
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.summary()["records"], 18);
  ::setenv("MMCR_CONFIG", (dir / "c.json").string().c_str(), 1);
  r = run({"synth", "--out", (dir / "c").string()});
  ::unsetenv("MMCR_CONFIG");
  EXPECT_EQ(r.summary()["records"], 12);
}

TEST(Cli, IngestStanfordFixture) {
  TempDir dir;
  auto r = run({"ingest", "stanford", "--annotations", kFixtures + "/stanford/cars_annos.csv", "--images",
                kFixtures + "/stanford", "--class-names", kFixtures + "/stanford/class_names.txt", "--out",
                (dir / "m.tsv").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  auto s = r.summary();
  EXPECT_EQ(s["records"], 5);
  EXPECT_EQ(s["train"], 3);
  EXPECT_EQ(s["test"], 2);
  EXPECT_EQ(load_manifest(dir / "m.tsv").size(), 5u);
  // Miniature trees report, not hide, the gap to the published counts.
  EXPECT_FALSE(s["published_counts"][0]["ok"].get<bool>());
}

TEST(Cli, IngestCompcarsVerificationWritesPairSets) {
  TempDir dir;
  auto r = run({"ingest", "compcars", "--root", kFixtures + "/compcars", "--task", "verification",
                "--calibration-pairs", "10", "--out", (dir / "v").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(load_pairs(dir / "v" / "pairs_easy.tsv").size(), 2u);
  EXPECT_EQ(load_pairs(dir / "v" / "pairs_medium.tsv").size(), 1u);
  EXPECT_EQ(load_pairs(dir / "v" / "pairs_hard.tsv").size(), 1u);
  EXPECT_EQ(load_pairs(dir / "v" / "calibration.tsv").size(), 10u);
  EXPECT_TRUE(fs::exists(dir / "v" / "manifest.tsv"));
}

namespace {

// synth -> preprocess -> train in one directory; returns the summaries.
struct Chain {
  json synth, preprocess, train;
};

Chain run_chain(const fs::path& root) {
  Chain c;
  auto r = run({"synth", "--out", (root / "raw").string(), "--mode", "color", "--classes", "4", "--per-class", "10"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  c.synth = r.summary();
  r = run({"preprocess", "--manifest", (root / "raw" / "manifest.tsv").string(), "--out",
           (root / "prep").string(), "--size", "32", "--mask"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  c.preprocess = r.summary();
  r = run({"train", "--manifest", (root / "prep" / "manifest.tsv").string(), "--model",
           (root / "color.mmcr").string(), "--granularity", "color", "--epochs", "3", "--embedding-dim", "32"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  c.train = r.summary();
  return c;
}

}  // namespace

TEST(Cli, ChainIsByteIdenticalAcrossReruns) {
  TempDir a, b;
  auto first = run_chain(a.path());
  auto second = run_chain(b.path());
  EXPECT_EQ(first.synth["records"], 40);
  EXPECT_EQ(first.preprocess["unaligned"], 0);
  EXPECT_EQ(first.train["digest"], second.train["digest"]);
  for (const char* f : {"raw/manifest.tsv", "prep/manifest.tsv", "prep/aligned.tsv", "prep/preprocess.log.jsonl",
                        "color.mmcr", "color.mmcr.log.jsonl", "prep/masked/syn_000_0000.png", "prep/images/syn_003_0009.png"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(read_file(a / f), read_file(b / f)) << f;
  }
  for (const auto* dir : {&a, &b}) {
    auto r = run({"eval", "--model", (*dir / "color.mmcr").string(), "--manifest",
                  (*dir / "prep" / "manifest.tsv").string(), "--out", (*dir / "report.json").string()});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_EQ(r.summary()["records"], 8);
  }
  EXPECT_EQ(read_file(a / "report.json"), read_file(b / "report.json"));
  EXPECT_EQ(read_file(a / "report.txt"), read_file(b / "report.txt"));
  auto report = json::parse(read_file(a / "report.json"));
  EXPECT_EQ(report["dataset"]["test_images"], 8);
  EXPECT_EQ(report["protocol"], "generic");
}

TEST(Cli, PredictVerifyAndPruneOnTrainedModel) {
  TempDir dir;
  run_chain(dir.path());
  const auto manifest = (dir / "prep" / "manifest.tsv").string();
  const auto model = (dir / "color.mmcr").string();

  auto r = run({"predict", "--model", model, "--manifest", manifest, "--top-k", "2", "--split", "test"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  int predictions = 0;
  while (std::getline(lines, line)) {
    auto j = json::parse(line);
    if (j.contains("predictions")) {
      EXPECT_EQ(j["predictions"].size(), 2u);
      ++predictions;
    }
  }
  EXPECT_EQ(predictions, 8);
  EXPECT_EQ(r.summary()["records"], 8);

  const auto records = load_manifest(manifest);
  save_pairs(sample_pairs(filter_split(records, Split::train), Granularity::color, 40, 1), dir / "calib.tsv");
  save_pairs(sample_pairs(filter_split(records, Split::test), Granularity::color, 20, 2), dir / "pairs_easy.tsv");
  r = run({"verify", "calibrate", "--model", model, "--manifest", manifest, "--pairs",
           (dir / "calib.tsv").string(), "--out", (dir / "threshold.json").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_GT(r.summary()["threshold"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir / "threshold.json"));
  r = run({"verify", "evaluate", "--model", model, "--manifest", manifest, "--pairs",
           (dir / "pairs_easy.tsv").string(), "--calibration", (dir / "calib.tsv").string(), "--out",
           (dir / "verif.json").string(), "--frozen", model});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(r.summary()["accuracy"].contains("easy"));
  EXPECT_NE(read_file(dir / "verif.txt").find("Accuracy(Easy)"), std::string::npos);
  EXPECT_EQ(run({"verify", "evaluate", "--model", model, "--manifest", manifest, "--pairs",
                 (dir / "pairs_easy.tsv").string()}).code, kExitUsage);

  r = run({"prune", "build", "--model", model, "--manifest", manifest, "--queue", (dir / "q.tsv").string(),
           "--fraction", "0.1"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.summary()["items"], 4);  // ceil(0.1 * 40)
  auto queue = load_queue(dir / "q.tsv");
  ASSERT_EQ(queue.size(), 4u);
  auto rejected = queue[0];
  rejected.status = ReviewStatus::rejected;
  rejected.annotator = "tester";
  rejected.timestamp = utc_timestamp();
  append_queue_entry(rejected, dir / "q.tsv");

  EXPECT_EQ(run({"prune", "apply", "--model", model, "--manifest", manifest, "--queue", (dir / "q.tsv").string(),
                 "--out", manifest}).code, kExitUsage);
  fs::create_directories(dir / "pruned");
  r = run({"prune", "apply", "--model", model, "--manifest", manifest, "--queue", (dir / "q.tsv").string(),
           "--out", (dir / "pruned" / "manifest.tsv").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.summary()["records_out"], 39);
  EXPECT_EQ(r.summary()["removed"], 1);
  auto pruned = load_manifest(dir / "pruned" / "manifest.tsv");
  ASSERT_EQ(pruned.size(), 39u);
  for (const auto& p : pruned) {
    EXPECT_NE(p.id, rejected.record_id);
    EXPECT_TRUE(fs::exists(resolve_path(p.path, dir / "pruned"))) << p.path;
  }
  EXPECT_EQ(load_manifest(manifest).size(), 40u);
  EXPECT_NE(read_file(dir / "pruned" / "manifest.tsv.audit.jsonl").find("\"remove\""), std::string::npos);
}

TEST(Cli, FinetuneKeepsParentInputSize) {
  TempDir dir;
  run_chain(dir.path());
  auto r = run({"finetune", "--parent", (dir / "color.mmcr").string(), "--manifest",
                (dir / "prep" / "manifest.tsv").string(), "--model", (dir / "tuned.mmcr").string(),
                "--epochs", "1"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(r.summary()["command"], "finetune");
  auto log = read_file(dir / "tuned.mmcr.log.jsonl");
  EXPECT_NE(log.find("fine_tune"), std::string::npos);
  EXPECT_EQ(run({"finetune", "--parent", (dir / "color.mmcr").string(), "--manifest",
                 (dir / "prep" / "manifest.tsv").string(), "--model", (dir / "t2.mmcr").string(), "--size",
                 "48"}).code, kExitUsage);
}
