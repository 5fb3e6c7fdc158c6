#include <gtest/gtest.h>

#include <zlib.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "attri/attristory/story.hpp"
#include "attri/evaluation/image.hpp"
#include "attri/evaluation/report.hpp"
#include "attri/evaluation/scorer.hpp"

using namespace attri;
using namespace attri::eval;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("attri_eval_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

fs::path write_png(const fs::path& path, unsigned char shade) {
  story::write_file(path, encode_png(4, 2, std::vector<unsigned char>(24, shade)));
  return path;
}

// Answers each question from a fixed table; everything else is constant.
struct TableScorer {
  std::map<std::string, double> answers;
  std::string identity() const { return "table"; }
  double text_alignment(const Image&, std::string_view) const { return 0.25; }
  double vqa_yes_probability(const Image&, std::string_view q) const { return answers.at(std::string(q)); }
  double image_similarity(const Image&, const Image&) const { return 0.5; }
  double perceptual_similarity(const Image&, const Image&) const { return 0.5; }
  bool concurrent() const { return true; }
};

// Returns a distinct value per unordered pair of image paths.
struct PairScorer {
  std::map<std::pair<std::string, std::string>, double> clip;
  std::string identity() const { return "pairs"; }
  double text_alignment(const Image&, std::string_view) const { return 0; }
  double vqa_yes_probability(const Image&, std::string_view) const { return 0; }
  double image_similarity(const Image& a, const Image& b) const { return clip.at(std::minmax(a.path, b.path)); }
  double perceptual_similarity(const Image& a, const Image& b) const { return clip.at(std::minmax(a.path, b.path)) / 2; }
  bool concurrent() const { return false; }
};

SceneScores scene(std::string id, int k, double vqa, double clip_t) {
  return {std::move(id), k, "img.png", vqa, clip_t, std::nullopt};
}

std::vector<SceneScores> full_story(const std::string& id, double vqa, double clip_t) {
  std::vector<SceneScores> out;
  for (int k = 1; k <= 5; ++k) out.push_back(scene(id, k, vqa, clip_t));
  return out;
}

}  // namespace

TEST(Question, Template) {
  EXPECT_EQ(question_from_pair({"pink", "dress"}), "Is the dress pink?");
  EXPECT_EQ(question_from_pair({"red", "umbrella"}), "Is the umbrella red?");
  EXPECT_EQ(question_from_pair({"red velvet", "capelet"}), "Is the capelet red velvet?");
  EXPECT_THROW(question_from_pair({"", "capelet"}), ConfigError);
  EXPECT_THROW(question_from_pair({"red", " "}), ConfigError);
}

TEST(ScoreScene, ConstantAnswersAverageToTheConstant) {
  const auto dir = scratch_dir("const");
  TableScorer s;
  s.answers = {{"Is the dress pink?", 0.7}, {"Is the hat red?", 0.7}, {"Is the coat blue?", 0.7}};
  SceneResult r{"s", 1, write_png(dir / "a.png", 10), "p", {{{"pink", "dress"}, {"red", "hat"}, {"blue", "coat"}}, {}}};
  const auto out = score_scene(r, s);
  EXPECT_DOUBLE_EQ(out.vqa, 0.7);
  EXPECT_DOUBLE_EQ(out.clip_t, 0.25);
  EXPECT_FALSE(out.vqa_negative);
}

TEST(ScoreScene, HandMeanAndNegativeDiagnostic) {
  const auto dir = scratch_dir("mean");
  TableScorer s;
  s.answers = {{"Is the dress pink?", 0.2}, {"Is the hat red?", 0.4}, {"Is the coat blue?", 0.9},
               {"Is the hat pink?", 0.1}, {"Is the dress red?", 0.3}};
  SceneResult r{"s", 2, write_png(dir / "a.png", 10), "p",
                {{{"pink", "dress"}, {"red", "hat"}, {"blue", "coat"}}, {{"pink", "hat"}, {"red", "dress"}}}};
  const auto out = score_scene(r, s, true);
  EXPECT_NEAR(out.vqa, 0.5, 1e-15);
  ASSERT_TRUE(out.vqa_negative);
  EXPECT_NEAR(*out.vqa_negative, 0.2, 1e-15);
}

TEST(ScoreScene, Errors) {
  const auto dir = scratch_dir("errors");
  StubScorer stub;
  SceneResult r{"s", 1, dir / "missing.png", "p", {{{"pink", "dress"}}, {}}};
  try {
    score_scene(r, stub);
    FAIL();
  } catch (const ImageLoadError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.png"), std::string::npos);
  }
  story::write_file(dir / "text.png", "hello");
  r.image = dir / "text.png";
  EXPECT_THROW(score_scene(r, stub), ImageLoadError);

  TableScorer bad;
  bad.answers = {{"Is the dress pink?", 1.5}};
  r.image = write_png(dir / "ok.png", 1);
  EXPECT_THROW(score_scene(r, bad), ScoringError);
}

TEST(Consistency, IdenticalImagesUnderStub) {
  const auto dir = scratch_dir("same");
  std::vector<Image> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(load_image(write_png(dir / (std::to_string(i) + ".png"), 7)));
  const auto c = score_story_consistency(imgs, StubScorer{});
  EXPECT_EQ(c.clip_i, 1.0);
  EXPECT_EQ(c.dreamsim, 1.0);
  EXPECT_EQ(c.pairs, 10);
}

TEST(Consistency, MeanOverTheTenPairs) {
  const auto dir = scratch_dir("pairs");
  std::vector<Image> imgs;
  PairScorer s;
  for (int i = 0; i < 5; ++i) imgs.push_back(load_image(write_png(dir / (std::to_string(i) + ".png"), static_cast<unsigned char>(i))));
  double total = 0;
  int v = 1;
  for (int i = 0; i < 5; ++i) {
    for (int j = i + 1; j < 5; ++j) {
      s.clip[std::minmax(imgs[i].path, imgs[j].path)] = v / 100.0;
      total += v / 100.0;
      ++v;
    }
  }
  const auto c = score_story_consistency(imgs, s);
  EXPECT_NEAR(c.clip_i, total / 10, 1e-15);
  EXPECT_NEAR(c.dreamsim, total / 20, 1e-15);

  StubScorer stub;
  CountingScorer counter(stub);
  score_story_consistency(imgs, counter);
  EXPECT_EQ(counter.image_calls, 10);
  EXPECT_EQ(counter.perceptual_calls, 10);
  EXPECT_THROW(score_story_consistency({imgs[0]}, stub), ScoringError);
}

TEST(Aggregate, UniformSingleStory) {
  const auto r = aggregate_report(full_story("a", 0.8, 0.35), {{"a", {0.85, 0.7, 10}}}, "toy", "stub-v1");
  EXPECT_DOUBLE_EQ(r.vqa.mean, 0.8);
  EXPECT_DOUBLE_EQ(r.clip_t.mean, 0.35);
  EXPECT_DOUBLE_EQ(r.clip_i.mean, 0.85);
  EXPECT_DOUBLE_EQ(r.dreamsim.mean, 0.7);
  EXPECT_EQ(r.vqa.count, 1u);
}

TEST(Aggregate, TwoStoriesHandMean) {
  auto scenes = full_story("a", 0.8, 0.3);
  const auto b = full_story("b", 0.9, 0.3);
  scenes.insert(scenes.end(), b.begin(), b.end());
  const auto r = aggregate_report(scenes, {{"a", {0.8, 0.6, 10}}, {"b", {0.9, 0.7, 10}}}, "m", "stub-v1");
  EXPECT_NEAR(r.vqa.mean, 0.85, 1e-15);
  EXPECT_NEAR(r.dreamsim.mean, 0.65, 1e-15);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].story_id, "a");
}

TEST(Aggregate, IncompleteStoryListsMissingScenes) {
  auto scenes = full_story("a", 0.8, 0.3);
  scenes.erase(scenes.begin() + 3);
  try {
    aggregate_report(scenes, {{"a", {0.8, 0.6, 10}}}, "m", "stub-v1");
    FAIL();
  } catch (const IncompleteStory& e) {
    EXPECT_NE(std::string(e.what()).find("missing scenes 4"), std::string::npos);
  }
  EXPECT_THROW(aggregate_report(full_story("a", 0.8, 0.3), {}, "m", "stub-v1"), IncompleteStory);
}

TEST(Aggregate, StoryOrderDoesNotMatter) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u;
  std::vector<SceneScores> scenes;
  std::map<std::string, ConsistencyScores> cons;
  for (int s = 0; s < 12; ++s) {
    const auto id = "story-" + std::to_string(s);
    for (int k = 1; k <= 5; ++k) scenes.push_back(scene(id, k, u(rng), u(rng)));
    cons[id] = {u(rng), u(rng), 10};
  }
  const auto ref = report_document({aggregate_report(scenes, cons, "m", "x")}).dump();
  for (int t = 0; t < 5; ++t) {
    std::shuffle(scenes.begin(), scenes.end(), rng);
    EXPECT_EQ(report_document({aggregate_report(scenes, cons, "m", "x")}).dump(), ref);
  }
}

TEST(Report, TableOneShapedGolden) {
  auto base = aggregate_report(full_story("a", 0.8, 0.35), {{"a", {0.85, 0.7, 10}}}, "ConsiStory", "stub-v1");
  auto guided = aggregate_report(full_story("a", 0.9, 0.36), {{"a", {0.85, 0.7, 10}}}, "+ AttriLoss", "stub-v1");
  const std::string golden =
      "Method      | VQA-Score | CLIP-T | CLIP-I | DreamSim\n"
      "------------+-----------+--------+--------+---------\n"
      "ConsiStory  |    0.8000 | 0.3500 | 0.8500 |   0.7000\n"
      "+ AttriLoss |    0.9000 | 0.3600 | 0.8500 |   0.7000\n";
  EXPECT_EQ(render_table({base, guided}), golden);

  const auto doc = report_document({base, guided});
  EXPECT_EQ(doc["format"], "attristory-report/1");
  const auto back = reports_from_document(nlohmann::ordered_json::parse(doc.dump()));
  EXPECT_EQ(report_document(back).dump(2), doc.dump(2));
}

TEST(Report, MergeReplacesSameLabel) {
  auto a = aggregate_report(full_story("a", 0.8, 0.35), {{"a", {0.85, 0.7, 10}}}, "ConsiStory", "stub-v1");
  auto b = aggregate_report(full_story("a", 0.9, 0.35), {{"a", {0.85, 0.7, 10}}}, "+ AttriLoss", "stub-v1");
  auto b2 = aggregate_report(full_story("a", 0.95, 0.35), {{"a", {0.85, 0.7, 10}}}, "+ AttriLoss", "stub-v1");
  const auto m = merge_reports(merge_reports({a}, {b}), {b2});
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[1].method, "+ AttriLoss");
  EXPECT_DOUBLE_EQ(m[1].vqa.mean, 0.95);
}

TEST(Report, RoundingIsStable) {
  EXPECT_EQ(round6(0.1234564999), 0.123456);
  EXPECT_EQ(round6(-1e-9), 0.0);
  EXPECT_FALSE(std::signbit(round6(-1e-9)));
}

// ---------------------------------------------------------------------------------------------

TEST(Png, EncodesAValidFile) {
  const auto dir = scratch_dir("png");
  std::vector<unsigned char> rgb(3 * 5 * 3);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<unsigned char>(i * 7);
  const auto data = encode_png(5, 3, rgb);
  const auto img = load_image(write_png(dir / "x.png", 0));
  EXPECT_EQ(img.width, 4u);
  EXPECT_EQ(img.height, 2u);

  // walk the chunks and check every CRC, then inflate IDAT and compare scanlines
  ASSERT_EQ(data.compare(0, 8, "\x89PNG\r\n\x1a\n"), 0);
  std::string idat;
  std::size_t pos = 8;
  std::vector<std::string> types;
  while (pos < data.size()) {
    const auto* p = reinterpret_cast<const unsigned char*>(data.data() + pos);
    const std::uint32_t len = read_be32(p);
    const std::string type(data.data() + pos + 4, 4);
    types.push_back(type);
    const auto crc = crc32(0L, p + 4, 4 + len);
    EXPECT_EQ(read_be32(p + 8 + len), crc) << type;
    if (type == "IDAT") idat.append(data.data() + pos + 8, len);
    pos += 12 + len;
  }
  EXPECT_EQ(types.front(), "IHDR");
  EXPECT_EQ(types.back(), "IEND");
  std::vector<unsigned char> raw(3 * (1 + 5 * 3));
  uLongf raw_len = raw.size();
  ASSERT_EQ(uncompress(raw.data(), &raw_len, reinterpret_cast<const Bytef*>(idat.data()), idat.size()), Z_OK);
  ASSERT_EQ(raw_len, raw.size());
  for (std::size_t y = 0; y < 3; ++y) {
    EXPECT_EQ(raw[y * 16], 0);
    for (std::size_t x = 0; x < 15; ++x) EXPECT_EQ(raw[y * 16 + 1 + x], rgb[y * 15 + x]);
  }
  EXPECT_THROW(encode_png(2, 2, rgb), ShapeMismatch);
}

TEST(Pfm, RoundTrip) {
  Grid g(3, 2, {0.0, 0.25, 0.5, 0.75, 1.0, 0.125});
  const auto back = decode_pfm(encode_pfm(g));
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.width, 2u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_FLOAT_EQ(static_cast<float>(back.values[i]), static_cast<float>(g.values[i]));
}
