#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "attri/attristory/story.hpp"
#include "attri/guidance.hpp"

namespace fs = std::filesystem;
using attri::story::read_file;
using attri::story::write_file;

namespace {

const fs::path kSource = ATTRI_SOURCE_DIR;
const fs::path kFixtures = kSource / "tests" / "fixtures";

struct Result {
  int code = -1;
  std::string out, err;
};

fs::path work_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("attri_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

// Runs the CLI in `cwd` and captures both streams.
Result run_cli(const std::vector<std::string>& args, const fs::path& cwd) {
  const auto out = cwd / ".stdout", err = cwd / ".stderr";
  std::string cmd = "cd " + quote(cwd.string()) + " && " + quote(ATTRI_CLI);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " >" + quote(out.string()) + " 2>" + quote(err.string());
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  fs::remove(out);
  fs::remove(err);
  return r;
}

std::size_t count_files(const fs::path& dir, const std::string& suffix) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) ++n;
  }
  return n;
}

// Relative path -> content for every regular file under `dir`.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).generic_string()] = read_file(e.path());
  }
  return out;
}

}  // namespace

TEST(CliGenBenchmark, QuotaTwoWritesTwentyStories) {
  const auto w = work_dir("gen");
  const auto r = run_cli({"gen-benchmark", "--out", "bench", "--quota", "2", "--jobs", "3"}, w);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_files(w / "bench" / "stories", ".json"), 20u);
  EXPECT_EQ(attri::story::parse_manifest(read_file(w / "bench" / "manifest.json")).stories.size(), 20u);
  EXPECT_EQ(run_cli({"validate", "--benchmark", "bench"}, w).code, 0);

  // same seed, same bytes
  ASSERT_EQ(run_cli({"gen-benchmark", "--out", "again", "--quota", "2"}, w).code, 0);
  EXPECT_EQ(snapshot(w / "bench"), snapshot(w / "again"));
}

TEST(CliGenBenchmark, QuotaZeroAndUnwritable) {
  const auto w = work_dir("gen0");
  const auto r = run_cli({"gen-benchmark", "--out", "empty", "--quota", "0"}, w);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(attri::story::parse_manifest(read_file(w / "empty" / "manifest.json")).stories.empty());

  write_file(w / "blocker", "a file, not a directory");
  EXPECT_EQ(run_cli({"gen-benchmark", "--out", "blocker/sub", "--quota", "1"}, w).code, 2);
  EXPECT_EQ(run_cli({"gen-benchmark", "--out", "x", "--style", "sketch"}, w).code, 2);
}

TEST(CliValidate, CleanPlantedAndMissing) {
  const auto w = work_dir("validate");
  EXPECT_EQ(run_cli({"validate", "--benchmark", (kFixtures / "benchmark").string()}, w).code, 0);

  fs::copy(kFixtures / "benchmark", w / "bench", fs::copy_options::recursive);
  const auto path = w / "bench" / "stories" / "photo-001.json";
  auto story = attri::story::parse_story(read_file(path));
  story.scenes[2].positive_pairs.push_back({"red", "umbrella"});
  write_file(path, attri::story::serialize(story));
  const auto r = run_cli({"validate", "--benchmark", "bench"}, w);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("photo-001"), std::string::npos);
  EXPECT_NE(r.out.find("scene 3"), std::string::npos);
  EXPECT_NE(r.out.find("umbrella"), std::string::npos);

  EXPECT_EQ(run_cli({"validate", "--benchmark", "nowhere"}, w).code, 2);
}

TEST(CliValidate, FixtureStoriesAreCanonical) {
  for (const auto& e : fs::directory_iterator(kFixtures / "benchmark" / "stories")) {
    const auto text = read_file(e.path());
    EXPECT_EQ(attri::story::serialize(attri::story::parse_story(text)), text) << e.path();
  }
}

TEST(CliRun, ReproducibleAcrossRerunsAndJobs) {
  const auto w = work_dir("run");
  const auto bench = (kFixtures / "benchmark").string();
  const auto r = run_cli({"run", "--benchmark", bench, "--out", "r1", "--seed", "7"}, w);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_files(w / "r1", ".latent.json"), 10u);
  EXPECT_EQ(count_files(w / "r1", ".trace.jsonl"), 10u);
  EXPECT_EQ(count_files(w / "r1", ".png"), 10u);
  ASSERT_EQ(run_cli({"run", "--benchmark", bench, "--out", "r2", "--seed", "7"}, w).code, 0);
  ASSERT_EQ(run_cli({"run", "--benchmark", bench, "--out", "r3", "--seed", "7", "--jobs", "4"}, w).code, 0);
  const auto a = snapshot(w / "r1");
  EXPECT_EQ(a, snapshot(w / "r2"));
  EXPECT_EQ(a, snapshot(w / "r3"));

  ASSERT_EQ(run_cli({"run", "--benchmark", bench, "--out", "r4", "--seed", "8"}, w).code, 0);
  EXPECT_NE(a.at("photo-001/scene_1.latent.json"), read_file(w / "r4" / "photo-001" / "scene_1.latent.json"));
}

TEST(CliRun, NoGuidanceTraceDiffersOnlyInUpdates) {
  const auto w = work_dir("noguide");
  const auto bench = (kFixtures / "benchmark").string();
  ASSERT_EQ(run_cli({"run", "--benchmark", bench, "--out", "g", "--seed", "1"}, w).code, 0);
  ASSERT_EQ(run_cli({"run", "--benchmark", bench, "--out", "u", "--seed", "1", "--no-guidance"}, w).code, 0);
  const auto rel = fs::path("watercolor-illustration-001") / "scene_1.trace.jsonl";
  const auto g = attri::trace_from_jsonl(read_file(w / "g" / rel));
  const auto u = attri::trace_from_jsonl(read_file(w / "u" / rel));
  ASSERT_EQ(g.records.size(), 50u);
  ASSERT_EQ(u.records.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(g.records[i].timestep_index, u.records[i].timestep_index);
    EXPECT_EQ(g.records[i].applied, i < 25);
    EXPECT_FALSE(u.records[i].applied);
    ASSERT_EQ(g.records[i].pair_iou.size(), u.records[i].pair_iou.size());
    for (std::size_t p = 0; p < g.records[i].pair_iou.size(); ++p) {
      EXPECT_EQ(g.records[i].pair_iou[p].pair, u.records[i].pair_iou[p].pair);
      EXPECT_EQ(g.records[i].pair_iou[p].positive, u.records[i].pair_iou[p].positive);
    }
  }
  // both start from the same latent
  EXPECT_EQ(g.records[0].loss, u.records[0].loss);
  const auto manifest = nlohmann::json::parse(read_file(w / "u" / "manifest.json"));
  EXPECT_EQ(manifest["guidance_enabled"], false);
  EXPECT_EQ(manifest["method"], "toy");
}

TEST(CliRun, ConfigFileAndFlags) {
  const auto w = work_dir("config");
  write_file(w / "cfg.json", R"({"total_steps": 6, "guided_fraction": 0.5, "seed": 3})");
  ASSERT_EQ(run_cli({"run", "--benchmark", (kFixtures / "benchmark").string(), "--out", "c", "--config", "cfg.json",
                   "--dump-maps", "--method", "mine"},
                  w)
                .code,
            0);
  const auto m = nlohmann::json::parse(read_file(w / "c" / "manifest.json"));
  EXPECT_EQ(m["seed"], 3);
  EXPECT_EQ(m["method"], "mine");
  EXPECT_EQ(m["guidance"]["total_steps"], 6);
  EXPECT_EQ(attri::trace_from_jsonl(read_file(w / "c" / "photo-001" / "scene_2.trace.jsonl")).records.size(), 6u);
  EXPECT_TRUE(fs::exists(w / "c" / "photo-001" / "scene_2.maps" / "apron.pfm"));
  EXPECT_TRUE(fs::exists(w / "c" / "photo-001" / "scene_2.maps" / "apron.json"));

  write_file(w / "bad.json", R"({"total_steps": 0})");
  EXPECT_EQ(run_cli({"run", "--benchmark", (kFixtures / "benchmark").string(), "--out", "d", "--config", "bad.json"}, w).code, 2);
}

TEST(CliRun, UnknownBackendIsUsageError) {
  const auto w = work_dir("backend");
  const auto r = run_cli({"run", "--benchmark", (kFixtures / "benchmark").string(), "--out", "x", "--backend", "sdxl"}, w);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("sdxl"), std::string::npos);
  EXPECT_EQ(run_cli({"run", "--out", "x"}, w).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}, w).code, 2);
}

TEST(CliScore, StubOverFixtureRunMatchesGolden) {
  const auto w = work_dir("score");
  fs::copy(kFixtures / "run", w / "run", fs::copy_options::recursive);
  const auto r = run_cli({"score", "--run", "run", "--out", "score", "--jobs", "4"}, w);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(w / "score" / "report.json"), read_file(kSource / "tests" / "golden" / "report.json"));
  EXPECT_EQ(read_file(w / "score" / "report.txt"), read_file(kSource / "tests" / "golden" / "report.txt"));
  EXPECT_EQ(r.out, read_file(kSource / "tests" / "golden" / "report.txt"));
}

TEST(CliScore, EmptyAndIncompleteRuns) {
  const auto w = work_dir("score_empty");
  fs::create_directories(w / "empty");
  EXPECT_NE(run_cli({"score", "--run", "empty", "--out", "s"}, w).code, 0);

  write_file(w / "none" / "manifest.json", R"({"format": "attristory-run/1", "scenes": []})");
  EXPECT_EQ(run_cli({"score", "--run", "none", "--out", "s"}, w).code, 1);

  fs::copy(kFixtures / "run", w / "run", fs::copy_options::recursive);
  fs::remove(w / "run" / "photo-001" / "scene_4.png");
  const auto r = run_cli({"score", "--run", "run", "--out", "partial"}, w);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("photo-001 scene 4"), std::string::npos);
  const auto doc = nlohmann::json::parse(read_file(w / "partial" / "report.json"));
  ASSERT_EQ(doc["methods"][0]["stories"].size(), 1u);
  EXPECT_EQ(doc["methods"][0]["stories"][0]["story_id"], "watercolor-illustration-001");

  EXPECT_EQ(run_cli({"score", "--run", "run", "--out", "s", "--scorer", "clip-large"}, w).code, 2);
}

TEST(CliScore, MergedReportHasBothRows) {
  const auto w = work_dir("merge");
  fs::copy(kFixtures / "run", w / "run", fs::copy_options::recursive);
  ASSERT_EQ(run_cli({"score", "--run", "run", "--out", "base"}, w).code, 0);
  const auto r = run_cli({"score", "--run", "run", "--out", "both", "--method", "+ AttriLoss", "--merge",
                        "base/report.json", "--negative", "--diagnostics", "diag.csv"},
                       w);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto table = read_file(w / "both" / "report.txt");
  EXPECT_NE(table.find("ConsiStory "), std::string::npos);
  EXPECT_NE(table.find("+ AttriLoss "), std::string::npos);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
  EXPECT_EQ(read_file(w / "diag.csv"), "story_id,scene,timestep_index,attribute,object,polarity,iou\n");
}

TEST(CliScore, DiagnosticsFromARealRun) {
  const auto w = work_dir("diag");
  write_file(w / "cfg.json", R"({"total_steps": 4})");
  ASSERT_EQ(run_cli({"run", "--benchmark", (kFixtures / "benchmark").string(), "--out", "r", "--config", "cfg.json"}, w).code, 0);
  ASSERT_EQ(run_cli({"score", "--run", "r", "--out", "s", "--diagnostics", "d.csv"}, w).code, 0);
  std::istringstream csv(read_file(w / "d.csv"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  // 10 scenes x 4 steps x (positive + negative pairs); the fixture has 22 positive pairs in total
  EXPECT_EQ(lines, 1u + 4u * 2u * 22u);
}

TEST(CliReport, PageWithTwoMethodsAndPlaceholders) {
  const auto w = work_dir("report");
  fs::copy(kFixtures / "run", w / "run", fs::copy_options::recursive);
  ASSERT_EQ(run_cli({"score", "--run", "run", "--out", "a"}, w).code, 0);
  ASSERT_EQ(run_cli({"score", "--run", "run", "--out", "b", "--method", "+ AttriLoss"}, w).code, 0);
  auto r = run_cli({"report", "a/report.json", "b/report.json", "--out", "site/index.html"}, w);
  ASSERT_EQ(r.code, 0) << r.err;
  auto page = read_file(w / "site" / "index.html");
  EXPECT_NE(page.find("ConsiStory"), std::string::npos);
  EXPECT_NE(page.find("+ AttriLoss"), std::string::npos);
  EXPECT_NE(page.find("../run/photo-001/scene_1.png"), std::string::npos);
  EXPECT_EQ(page.find("missing:"), std::string::npos);

  fs::remove(w / "run" / "photo-001" / "scene_1.png");
  r = run_cli({"report", "a/report.json", "b/report.json", "--out", "site/index.html"}, w);
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("2 missing images"), std::string::npos);
  page = read_file(w / "site" / "index.html");
  EXPECT_NE(page.find("missing: photo-001/scene_1.png"), std::string::npos);

  EXPECT_EQ(run_cli({"report", "--out", "x.html"}, w).code, 2);
  write_file(w / "junk.json", "{");
  EXPECT_EQ(run_cli({"report", "junk.json", "--out", "x.html"}, w).code, 2);
}
