#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "attri/attristory/generate.hpp"
#include "attri/attristory/lexicon.hpp"
#include "attri/attristory/story.hpp"
#include "attri/attristory/validate.hpp"

using namespace attri;
using namespace attri::story;

namespace {

Story fixture_story() {
  Story s;
  s.id = "watercolor-illustration-001";
  s.style = "watercolor illustration";
  s.character_description = "Oliver, a lively 8-year-old boy with sandy blond hair and brown eyes";
  const std::vector<std::pair<std::string, std::vector<AttributePair>>> scenes = {
      {"riding a green bike wearing a red hoodie past golden fields", {{"green", "bike"}, {"red", "hoodie"}}},
      {"reading under a striped umbrella in a wooden boat", {{"striped", "umbrella"}, {"wooden", "boat"}}},
      {"flying a yellow kite in a denim jacket", {{"yellow", "kite"}, {"denim", "jacket"}}},
      {"holding a blue mug beside a plaid blanket and a glass vase", {{"blue", "mug"}, {"plaid", "blanket"}, {"glass", "vase"}}},
      {"wearing a leather belt and a purple scarf", {{"leather", "belt"}, {"purple", "scarf"}}},
  };
  for (const auto& [narrative, pos] : scenes) s.scenes.push_back({narrative, pos, derive_negative_pairs(pos)});
  return s;
}

std::string fixture_reply(int scenes) {
  auto j = to_json(fixture_story());
  j.erase("id");
  j.erase("style");
  while (static_cast<int>(j["scenes"].size()) > scenes) j["scenes"].erase(j["scenes"].size() - 1);
  return "Sure!\n" + j.dump() + "\n";
}

bool has_code(const std::vector<Violation>& v, std::string_view code) {
  return std::any_of(v.begin(), v.end(), [&](const Violation& x) { return x.code == code; });
}

}  // namespace

TEST(ScenePrompt, OliverSentence) {
  EXPECT_EQ(build_scene_prompt("watercolor illustration",
                               "Oliver, a lively 8-year-old boy with sandy blond hair and brown eyes",
                               "riding a green bike wearing a red hoodie past golden fields"),
            "A watercolor illustration of Oliver, a lively 8-year-old boy with sandy blond hair and brown eyes, "
            "riding a green bike wearing a red hoodie past golden fields.");
}

TEST(ScenePrompt, SkeletonAndErrors) {
  EXPECT_EQ(build_scene_prompt("photo", "X", "Y"), "A photo of X, Y.");
  EXPECT_THROW(build_scene_prompt("", "X", "Y"), ConfigError);
  EXPECT_THROW(build_scene_prompt("photo", " ", "Y"), ConfigError);
  EXPECT_THROW(build_scene_prompt("photo", "X", ""), ConfigError);
}

TEST(ScenePrompt, ContainsArgumentsVerbatim) {
  for (const auto& sc : fixture_story().scenes) {
    const auto p = build_scene_prompt("oil painting", "Maya, a curious girl", sc.narrative);
    EXPECT_NE(p.find("oil painting"), std::string::npos);
    EXPECT_NE(p.find("Maya, a curious girl"), std::string::npos);
    EXPECT_NE(p.find(sc.narrative), std::string::npos);
  }
}

TEST(Styles, CanonicalNames) {
  EXPECT_EQ(kStyles.size(), 10u);
  EXPECT_EQ(canonical_style("3D Animation"), "3d animation");
  EXPECT_EQ(canonical_style(" Pixar-Style "), "pixar-style");
  EXPECT_EQ(canonical_style("sketch"), "");
}

TEST(StoryFormat, CanonicalRoundTripIsByteIdentical) {
  const auto text = serialize(fixture_story());
  EXPECT_EQ(serialize(parse_story(text)), text);
  EXPECT_EQ(text.back(), '\n');
  SyntheticStoryWriter w;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto s = parse_story_response(w.complete("", seed), "x-" + std::to_string(seed), "photo");
    const auto t = serialize(s);
    EXPECT_EQ(serialize(parse_story(t)), t);
  }
}

TEST(StoryFormat, StrictParsing) {
  EXPECT_THROW(parse_story("{"), ParseError);
  EXPECT_THROW(parse_story(R"({"id":"a","style":"photo","character_description":"x","scenes":[],"extra":1})"),
               ParseError);
  EXPECT_THROW(parse_story(R"({"id":"a","style":"photo","character_description":"x","scenes":[{"narrative":"n"}]})"),
               ParseError);
  EXPECT_THROW(
      parse_story(R"({"id":"a","style":"photo","character_description":"x","scenes":[{"narrative":"n","positive_pairs":[["a"]]}]})"),
      ParseError);
  // negatives are optional
  const auto s = parse_story(
      R"({"id":"a","style":"photo","character_description":"x","scenes":[{"narrative":"n","positive_pairs":[["red","hat"]]}]})");
  EXPECT_TRUE(s.scenes[0].negative_pairs.empty());
}

TEST(Manifest, RoundTripAndVersion) {
  Manifest m;
  m.stories = {"stories/a.json", "stories/b.json"};
  const auto text = serialize(m);
  const auto back = parse_manifest(text);
  EXPECT_EQ(back.stories, m.stories);
  EXPECT_THROW(parse_manifest(R"({"format_version":"attristory/9","stories":[]})"), ParseError);
}

TEST(Benchmark, LoadsFromDirectory) {
  const auto dir = std::filesystem::temp_directory_path() / "attri_test_benchmark";
  std::filesystem::remove_all(dir);
  const auto s = fixture_story();
  write_file(dir / "stories" / (s.id + ".json"), serialize(s));
  write_file(dir / "manifest.json", serialize(Manifest{std::string(kFormatVersion), {"stories/" + s.id + ".json"}}));
  const auto b = load_benchmark(dir);
  ASSERT_EQ(b.stories.size(), 1u);
  EXPECT_EQ(serialize(b.stories[0]), serialize(s));
  EXPECT_THROW(load_benchmark(dir / "nope"), IoError);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------------------------

TEST(NegativePairs, PinkDressWhiteLilies) {
  const std::vector<AttributePair> pos = {{"pink", "dress"}, {"white", "lilies"}};
  EXPECT_EQ(derive_negative_pairs(pos), (std::vector<AttributePair>{{"pink", "lilies"}, {"white", "dress"}}));
}

TEST(NegativePairs, SharedObjectCannotBeSwapped) {
  EXPECT_THROW(derive_negative_pairs({{"red", "shirt"}, {"blue", "shirt"}}), InsufficientDiversity);
  EXPECT_THROW(derive_negative_pairs({{"red", "shirt"}, {"red", "hat"}}), InsufficientDiversity);
  EXPECT_THROW(derive_negative_pairs({{"red", "shirt"}}), InsufficientDiversity);
}

TEST(NegativePairs, ThreePairsIsAValidDerangement) {
  const std::vector<AttributePair> pos = {{"red", "a"}, {"blue", "b"}, {"green", "c"}};
  // oracle: every derangement of the three objects, by brute force
  std::set<std::vector<AttributePair>> valid;
  std::vector<std::size_t> perm = {0, 1, 2};
  do {
    bool fixed = false;
    for (std::size_t i = 0; i < 3; ++i) fixed = fixed || perm[i] == i;
    if (fixed) continue;
    std::vector<AttributePair> out;
    for (std::size_t i = 0; i < 3; ++i) out.push_back({pos[i].attribute, pos[perm[i]].object});
    valid.insert(out);
  } while (std::next_permutation(perm.begin(), perm.end()));
  ASSERT_EQ(valid.size(), 2u);
  EXPECT_TRUE(valid.count(derive_negative_pairs(pos)));
}

TEST(NegativePairs, OutputIsDisjointFromInput) {
  std::mt19937_64 rng(17);
  const std::vector<std::string> attrs = {"red", "blue", "green", "striped", "silk", "wooden"};
  const std::vector<std::string> objs = {"hat", "coat", "mug", "kite", "bench", "vase"};
  for (int trial = 0; trial < 500; ++trial) {
    const auto n = std::uniform_int_distribution<std::size_t>(2, 5)(rng);
    auto a = attrs, o = objs;
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(o.begin(), o.end(), rng);
    std::vector<AttributePair> pos;
    for (std::size_t i = 0; i < n; ++i) pos.push_back({a[i], o[i]});
    {
      const auto neg = derive_negative_pairs(pos);
      ASSERT_EQ(neg.size(), pos.size());
      for (const auto& p : neg) EXPECT_EQ(std::count(pos.begin(), pos.end(), p), 0);
      std::multiset<std::string> in_objs, out_objs;
      for (std::size_t i = 0; i < n; ++i) {
        in_objs.insert(pos[i].object);
        out_objs.insert(neg[i].object);
        EXPECT_EQ(neg[i].attribute, pos[i].attribute);
      }
      EXPECT_EQ(in_objs, out_objs);
    }
  }
}

// ---------------------------------------------------------------------------------------------

TEST(Validate, FixtureIsClean) {
  const auto v = validate_story(fixture_story());
  EXPECT_TRUE(v.empty()) << (v.empty() ? "" : to_string(v[0]));
}

TEST(Validate, AbsentPairWordNamesSceneAndWord) {
  auto s = fixture_story();
  s.scenes[2].positive_pairs.push_back({"yellow", "umbrella"});
  const auto v = validate_story(s);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].code, "pair_word_missing");
  EXPECT_EQ(v[0].scene, 3);
  EXPECT_EQ(v[0].word, "umbrella");
  EXPECT_NE(to_string(v[0]).find("scene 3"), std::string::npos);
}

TEST(Validate, SixScenes) {
  auto s = fixture_story();
  s.scenes.push_back(s.scenes[0]);
  EXPECT_TRUE(has_code(validate_story(s), "scene_count"));
}

TEST(Validate, OtherInvariants) {
  auto s = fixture_story();
  s.style = "sketch";
  s.scenes[0].positive_pairs = {{"green", "bike"}};
  s.scenes[1].negative_pairs.push_back({"striped", "umbrella"});
  s.scenes[3].narrative = "Oliver, a boy, holding a blue mug beside a plaid blanket and a glass vase";
  const auto v = validate_story(s);
  EXPECT_TRUE(has_code(v, "style"));
  EXPECT_TRUE(has_code(v, "pair_count"));
  EXPECT_TRUE(has_code(v, "pair_overlap"));
  EXPECT_TRUE(has_code(v, "character_consistency"));

  auto mono = fixture_story();
  for (auto& sc : mono.scenes) {
    for (auto& p : sc.positive_pairs) p.attribute = "red";
    sc.negative_pairs.clear();
    sc.narrative = "with";
    for (const auto& p : sc.positive_pairs) sc.narrative += " a red " + p.object;
  }
  EXPECT_TRUE(has_code(validate_story(mono), "attribute_diversity"));
}

TEST(Lexicon, CategoriesAndDataFileMatchesDefault) {
  const Lexicon lex;
  EXPECT_EQ(lex.category("red"), "color");
  EXPECT_EQ(lex.category("red velvet"), "color");
  EXPECT_EQ(lex.category("velvet"), "material");
  EXPECT_EQ(lex.category("polka-dot"), "texture");
  EXPECT_EQ(lex.category("tiny"), "other");
  EXPECT_EQ(read_file(std::filesystem::path(ATTRI_SOURCE_DIR) / "data" / "attribute_lexicon.json"),
            std::string(kDefaultLexicon));
  EXPECT_EQ(read_file(std::filesystem::path(ATTRI_SOURCE_DIR) / "data" / "instruction_template.txt"),
            std::string(kDefaultInstructionTemplate));
}

// ---------------------------------------------------------------------------------------------

TEST(Stats, Empty) {
  const auto s = compute_stats({});
  EXPECT_EQ(s.story_count, 0u);
  EXPECT_EQ(s.scene_count, 0u);
  for (const auto& [k, v] : s.style_histogram) EXPECT_EQ(v, 0u);
  EXPECT_EQ(s.style_histogram.size(), 10u);
  EXPECT_TRUE(s.pair_count_histogram.empty());
}

TEST(Stats, UniformStyles) {
  std::vector<Story> stories;
  for (auto st : kStyles) {
    for (int i = 0; i < 20; ++i) {
      auto s = fixture_story();
      s.style = std::string(st);
      stories.push_back(s);
    }
  }
  const auto s = compute_stats(stories);
  EXPECT_EQ(s.story_count, 200u);
  EXPECT_EQ(s.scene_count, 1000u);
  for (const auto& [k, v] : s.style_histogram) EXPECT_EQ(v, 20u) << k;
  EXPECT_EQ(s.scenes_per_story, (std::map<std::size_t, std::size_t>{{5, 200}}));
}

TEST(Stats, PairCountHistogram) {
  auto s = fixture_story();
  const std::vector<AttributePair> five = {{"a", "b"}, {"c", "d"}, {"e", "f"}, {"g", "h"}, {"i", "j"}};
  const std::size_t counts[] = {2, 3, 4, 5, 2};
  for (std::size_t i = 0; i < 5; ++i) s.scenes[i].positive_pairs.assign(five.begin(), five.begin() + counts[i]);
  EXPECT_EQ(compute_stats({s}).pair_count_histogram,
            (std::map<std::size_t, std::size_t>{{2, 2}, {3, 1}, {4, 1}, {5, 1}}));
}

// ---------------------------------------------------------------------------------------------

TEST(Generate, FixtureReply) {
  ScriptedClient client({fixture_reply(5)});
  const auto r = generate_story(client, "Watercolor Illustration", kDefaultInstructionTemplate, 1);
  EXPECT_EQ(r.retries, 0);
  EXPECT_EQ(r.story.scenes.size(), 5u);
  EXPECT_EQ(r.story.style, "watercolor illustration");
  for (const auto& sc : r.story.scenes) {
    EXPECT_GE(sc.positive_pairs.size(), 2u);
    EXPECT_LE(sc.positive_pairs.size(), 5u);
  }
  ASSERT_EQ(client.instructions().size(), 1u);
  EXPECT_NE(client.instructions()[0].find("watercolor illustration"), std::string::npos);
  EXPECT_EQ(client.instructions()[0].find("{style}"), std::string::npos);
}

TEST(Generate, MalformedThenValidRetriesOnce) {
  ScriptedClient client({"I cannot do JSON today", fixture_reply(5)});
  const auto r = generate_story(client, "photo", kDefaultInstructionTemplate, 1);
  EXPECT_EQ(r.retries, 1);
  ASSERT_EQ(client.instructions().size(), 2u);
  EXPECT_NE(client.instructions()[1].find("could not be parsed"), std::string::npos);
}

TEST(Generate, RetriesExhaustedCarryTheRawReply) {
  ScriptedClient client({"nope", "{broken", "still nope"});
  try {
    generate_story(client, "photo", kDefaultInstructionTemplate, 1, {.max_retries = 2});
    FAIL();
  } catch (const GenerationFailure& e) {
    EXPECT_EQ(e.raw(), "still nope");
  }
}

TEST(Generate, FourScenesFailValidation) {
  ScriptedClient client({fixture_reply(4)});
  try {
    generate_story(client, "photo", kDefaultInstructionTemplate, 1);
    FAIL();
  } catch (const ValidationFailure& e) {
    EXPECT_TRUE(has_code(e.violations(), "scene_count"));
  }
}

TEST(Generate, MissingNegativesAreDerived) {
  auto j = nlohmann::ordered_json::parse(fixture_reply(5).substr(6));
  for (auto& sc : j["scenes"]) sc.erase("negative_pairs");
  ScriptedClient client({j.dump()});
  const auto r = generate_story(client, "photo", kDefaultInstructionTemplate, 1);
  for (const auto& sc : r.story.scenes) EXPECT_EQ(sc.negative_pairs, derive_negative_pairs(sc.positive_pairs));
}

TEST(Generate, SyntheticWriterPassesValidationForEveryStyle) {
  SyntheticStoryWriter w;
  for (auto st : kStyles) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto r = generate_story(w, st, kDefaultInstructionTemplate, seed);
      EXPECT_TRUE(validate_story(r.story).empty());
    }
  }
  EXPECT_THROW(generate_story(w, "sketch", kDefaultInstructionTemplate, 0), ConfigError);
}
