#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attri/attristory/lexicon.hpp"
#include "attri/attristory/story.hpp"
#include "attri/text.hpp"

namespace attri::story {

struct Violation {
  std::string code;
  int scene = 0;  // 1-based; 0 for story-level findings
  std::string word;
  std::string message;
};

inline std::string to_string(const Violation& v) {
  std::string out = v.code;
  if (v.scene > 0) out += " (scene " + std::to_string(v.scene) + ")";
  return out + ": " + v.message;
}

/// Name the character description opens with, e.g. "Oliver" in "Oliver, a lively boy".
inline std::string character_name(std::string_view description) {
  const auto comma = description.find(',');
  if (comma == std::string_view::npos) return {};
  const auto name = text::trim(description.substr(0, comma));
  if (name.empty() || text::split_words(name).size() > 3) return {};
  return std::string(name);
}

inline std::vector<Violation> validate_story(const Story& story, const Lexicon& lexicon = {}) {
  std::vector<Violation> out;
  auto add = [&](std::string code, int scene, std::string word, std::string message) {
    out.push_back({std::move(code), scene, std::move(word), std::move(message)});
  };

  if (text::trim(story.id).empty()) add("id", 0, {}, "story id is empty");
  if (story.scenes.size() != static_cast<std::size_t>(kSceneCount)) {
    add("scene_count", 0, {},
        "expected " + std::to_string(kSceneCount) + " scenes, found " + std::to_string(story.scenes.size()));
  }
  if (canonical_style(story.style).empty()) add("style", 0, {}, "unknown style \"" + story.style + "\"");

  const auto description = std::string(text::trim(story.character_description));
  if (description.empty()) add("character_consistency", 0, {}, "character description is empty");
  const auto name = character_name(description);

  std::set<std::string> categories;
  for (std::size_t i = 0; i < story.scenes.size(); ++i) {
    const auto& sc = story.scenes[i];
    const int n = static_cast<int>(i) + 1;
    const auto npos = sc.positive_pairs.size();
    if (npos < static_cast<std::size_t>(kPairMin) || npos > static_cast<std::size_t>(kPairMax)) {
      add("pair_count", n, {},
          std::to_string(npos) + " positive pairs, expected " + std::to_string(kPairMin) + " to " +
              std::to_string(kPairMax));
    }

    std::string prompt;
    if (text::trim(sc.narrative).empty() || description.empty() || text::trim(story.style).empty()) {
      add("empty_component", n, {}, "scene prompt has an empty component");
    } else {
      prompt = build_scene_prompt(story.style, story.character_description, sc.narrative);
    }
    const auto pieces = text::split_words(prompt);
    std::set<std::string> missing;
    for (const auto* set : {&sc.positive_pairs, &sc.negative_pairs}) {
      for (const auto& p : *set) {
        for (const auto& w : {p.attribute, p.object}) {
          if (!text::find_phrase(pieces, w) && missing.insert(w).second) {
            add("pair_word_missing", n, w, "\"" + w + "\" does not appear in the scene " + std::to_string(n) + " prompt");
          }
        }
      }
    }
    for (const auto& neg : sc.negative_pairs) {
      if (std::find(sc.positive_pairs.begin(), sc.positive_pairs.end(), neg) != sc.positive_pairs.end()) {
        add("pair_overlap", n, neg.attribute,
            "(" + neg.attribute + ", " + neg.object + ") is both a positive and a negative pair");
      }
    }

    if (!description.empty()) {
      const auto narrative = text::split_words(sc.narrative);
      bool redescribed = text::find_phrase(narrative, description).has_value();
      if (!name.empty()) {
        const auto name_pieces = text::split_words(name);
        const std::size_t m = name_pieces.size();
        for (std::size_t k = 0; !redescribed && k + m + 1 < narrative.size(); ++k) {
          bool match = true;
          for (std::size_t q = 0; q < m && match; ++q) match = narrative[k + q].text == name_pieces[q].text;
          if (!match) continue;
          const auto& next = narrative[k + m + 1].text;
          redescribed = narrative[k + m].text == "," && (next == "a" || next == "an" || next == "the");
        }
      }
      if (redescribed) {
        add("character_consistency", n, name, "narrative re-describes the character instead of using the shared description");
      }
    }

    for (const auto& p : sc.positive_pairs) categories.insert(lexicon.category(p.attribute));
  }
  if (!story.scenes.empty() && categories.size() < 2) {
    add("attribute_diversity", 0, {},
        "attributes span " + std::to_string(categories.size()) + " categor" + (categories.size() == 1 ? "y" : "ies") +
            ", expected at least 2 of color/texture/material/other");
  }
  return out;
}

class InsufficientDiversity : public Error {
 public:
  using Error::Error;
};

/// Re-pairs attributes with objects so that every object gets an attribute from a different
/// positive pair and no output pair is a positive pair. Tries cyclic shifts first, then any
/// permutation in lexicographic order.
inline std::vector<AttributePair> derive_negative_pairs(const std::vector<AttributePair>& positive) {
  if (positive.size() < 2) throw InsufficientDiversity("need at least 2 positive pairs to derive negatives");
  std::set<std::string> attrs;
  for (const auto& p : positive) attrs.insert(p.attribute);
  if (attrs.size() < 2) throw InsufficientDiversity("all positive pairs share the attribute \"" + positive[0].attribute + "\"");

  const std::size_t n = positive.size();
  auto accept = [&](const std::vector<std::size_t>& perm) -> std::optional<std::vector<AttributePair>> {
    std::vector<AttributePair> out;
    for (std::size_t i = 0; i < n; ++i) {
      if (perm[i] == i) return std::nullopt;
      AttributePair p{positive[i].attribute, positive[perm[i]].object};
      if (std::find(positive.begin(), positive.end(), p) != positive.end()) return std::nullopt;
      if (std::find(out.begin(), out.end(), p) != out.end()) return std::nullopt;
      out.push_back(std::move(p));
    }
    return out;
  };

  std::vector<std::size_t> perm(n);
  for (std::size_t k = 1; k < n; ++k) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = (i + k) % n;
    if (auto r = accept(perm)) return *r;
  }
  std::iota(perm.begin(), perm.end(), 0);
  do {
    if (auto r = accept(perm)) return *r;
  } while (std::next_permutation(perm.begin(), perm.end()));
  throw InsufficientDiversity("every re-pairing reproduces a positive pair");
}

struct BenchmarkStats {
  std::size_t story_count = 0;
  std::size_t scene_count = 0;
  std::map<std::string, std::size_t> style_histogram;       // all ten styles, zero-filled
  std::map<std::size_t, std::size_t> scenes_per_story;       // scene count -> stories
  std::map<std::size_t, std::size_t> pair_count_histogram;   // positive pairs -> scenes
  std::map<std::string, std::size_t> category_histogram;     // positive attributes per category
};

inline BenchmarkStats compute_stats(const std::vector<Story>& stories, const Lexicon& lexicon = {}) {
  BenchmarkStats s;
  for (auto st : kStyles) s.style_histogram[std::string(st)] = 0;
  for (auto c : kCategories) s.category_histogram[std::string(c)] = 0;
  for (const auto& story : stories) {
    ++s.story_count;
    const auto style = canonical_style(story.style);
    ++s.style_histogram[style.empty() ? story.style : style];
    ++s.scenes_per_story[story.scenes.size()];
    for (const auto& sc : story.scenes) {
      ++s.scene_count;
      ++s.pair_count_histogram[sc.positive_pairs.size()];
      for (const auto& p : sc.positive_pairs) ++s.category_histogram[lexicon.category(p.attribute)];
    }
  }
  return s;
}

inline nlohmann::ordered_json to_json(const BenchmarkStats& s) {
  nlohmann::ordered_json j;
  j["story_count"] = s.story_count;
  j["scene_count"] = s.scene_count;
  j["style_histogram"] = nlohmann::ordered_json::object();
  for (auto st : kStyles) j["style_histogram"][std::string(st)] = s.style_histogram.at(std::string(st));
  for (const auto& [k, v] : s.style_histogram) {
    if (canonical_style(k).empty()) j["style_histogram"][k] = v;
  }
  auto keyed = [](const std::map<std::size_t, std::size_t>& m) {
    nlohmann::ordered_json o = nlohmann::ordered_json::object();
    for (const auto& [k, v] : m) o[std::to_string(k)] = v;
    return o;
  };
  j["scenes_per_story"] = keyed(s.scenes_per_story);
  j["pair_count_histogram"] = keyed(s.pair_count_histogram);
  j["category_histogram"] = nlohmann::ordered_json::object();
  for (auto c : kCategories) j["category_histogram"][std::string(c)] = s.category_histogram.at(std::string(c));
  return j;
}

}  // namespace attri::story
