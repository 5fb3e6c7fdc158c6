#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attri/attention.hpp"
#include "attri/errors.hpp"
#include "attri/text.hpp"

namespace attri::story {

using Json = nlohmann::ordered_json;

inline constexpr int kSceneCount = 5;
inline constexpr int kPairMin = 2;
inline constexpr int kPairMax = 5;
inline constexpr std::string_view kFormatVersion = "attristory/1";

inline constexpr std::array<std::string_view, 10> kStyles = {
    "photo",        "cartoon style",   "3d animation", "watercolor illustration", "oil painting",
    "crayon drawing", "neon punk style", "pixar-style", "hyperrealistic digital painting", "pastel color painting"};

/// Canonical (lowercase) style name, or empty if `s` is not one of the ten.
inline std::string canonical_style(std::string_view s) {
  const auto low = text::lowercase(text::trim(s));
  for (auto st : kStyles) {
    if (st == low) return low;
  }
  return {};
}

struct Scene {
  std::string narrative;
  std::vector<AttributePair> positive_pairs;
  std::vector<AttributePair> negative_pairs;

  AttributePairSet pairs() const { return {positive_pairs, negative_pairs}; }
};

struct Story {
  std::string id;
  std::string style;
  std::string character_description;
  std::vector<Scene> scenes;
};

/// Raised for malformed story documents.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// "A {style} of {character}, {narrative}."
inline std::string build_scene_prompt(std::string_view style, std::string_view character, std::string_view narrative) {
  for (auto [name, v] : {std::pair{"style", style}, {"character description", character}, {"scene narrative", narrative}}) {
    if (text::trim(v).empty()) throw ConfigError(std::string("empty ") + name + " in scene prompt");
  }
  std::string out = "A ";
  out.append(style).append(" of ").append(character).append(", ").append(narrative).append(".");
  return out;
}

inline std::string scene_prompt(const Story& s, std::size_t scene) {
  return build_scene_prompt(s.style, s.character_description, s.scenes.at(scene).narrative);
}

inline Json pairs_to_json(const std::vector<AttributePair>& pairs) {
  Json a = Json::array();
  for (const auto& p : pairs) a.push_back({p.attribute, p.object});
  return a;
}

inline Json to_json(const Story& s) {
  Json j;
  j["id"] = s.id;
  j["style"] = s.style;
  j["character_description"] = s.character_description;
  j["scenes"] = Json::array();
  for (const auto& sc : s.scenes) {
    Json o;
    o["narrative"] = sc.narrative;
    o["positive_pairs"] = pairs_to_json(sc.positive_pairs);
    o["negative_pairs"] = pairs_to_json(sc.negative_pairs);
    j["scenes"].push_back(std::move(o));
  }
  return j;
}

/// Canonical text form: two-space indent, trailing newline.
inline std::string serialize(const Story& s) { return to_json(s).dump(2) + "\n"; }

namespace detail {

template <class J>
std::string get_string(const J& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ParseError(std::string("missing field \"") + key + "\"");
  if (!j.at(key).is_string()) throw ParseError(std::string("field \"") + key + "\" must be a string");
  return j.at(key).template get<std::string>();
}

template <class J>
void only_keys(const J& j, std::initializer_list<std::string_view> keys, std::string_view where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) {
      throw ParseError("unexpected field \"" + it.key() + "\" in " + std::string(where));
    }
  }
}

}  // namespace detail

template <class J>
std::vector<AttributePair> pairs_from_json(const J& j, std::string_view field) {
  if (!j.is_array()) throw ParseError(std::string(field) + " must be an array");
  std::vector<AttributePair> out;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_string() || !p[1].is_string()) {
      throw ParseError(std::string(field) + " entries must be [attribute, object] string pairs");
    }
    out.push_back({p[0].template get<std::string>(), p[1].template get<std::string>()});
  }
  return out;
}

template <class J>
Scene scene_from_json(const J& j) {
  if (!j.is_object()) throw ParseError("scene must be an object");
  detail::only_keys(j, {"narrative", "positive_pairs", "negative_pairs"}, "scene");
  Scene sc;
  sc.narrative = detail::get_string(j, "narrative");
  if (!j.contains("positive_pairs")) throw ParseError("missing field \"positive_pairs\"");
  sc.positive_pairs = pairs_from_json(j.at("positive_pairs"), "positive_pairs");
  if (j.contains("negative_pairs")) sc.negative_pairs = pairs_from_json(j.at("negative_pairs"), "negative_pairs");
  return sc;
}

template <class J>
Story story_from_json(const J& j) {
  if (!j.is_object()) throw ParseError("story must be a JSON object");
  detail::only_keys(j, {"id", "style", "character_description", "scenes"}, "story");
  Story s;
  s.id = detail::get_string(j, "id");
  s.style = detail::get_string(j, "style");
  s.character_description = detail::get_string(j, "character_description");
  if (!j.contains("scenes") || !j.at("scenes").is_array()) throw ParseError("field \"scenes\" must be an array");
  for (const auto& sc : j.at("scenes")) s.scenes.push_back(scene_from_json(sc));
  return s;
}

inline Story parse_story(std::string_view document) {
  Json j;
  try {
    j = Json::parse(document);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("story is not valid JSON: ") + e.what());
  }
  return story_from_json(j);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline Story load_story(const std::filesystem::path& path) {
  try {
    return parse_story(read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Benchmark manifest: format version plus story files relative to the manifest.
struct Manifest {
  std::string format_version{kFormatVersion};
  std::vector<std::string> stories;
};

inline std::string serialize(const Manifest& m) {
  Json j;
  j["format_version"] = m.format_version;
  j["stories"] = m.stories;
  return j.dump(2) + "\n";
}

inline Manifest parse_manifest(std::string_view document) {
  Json j;
  try {
    j = Json::parse(document);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("manifest must be a JSON object");
  Manifest m;
  m.format_version = detail::get_string(j, "format_version");
  if (m.format_version != kFormatVersion) throw ParseError("unsupported manifest format \"" + m.format_version + "\"");
  if (!j.contains("stories") || !j.at("stories").is_array()) throw ParseError("field \"stories\" must be an array");
  for (const auto& s : j.at("stories")) {
    if (!s.is_string()) throw ParseError("manifest story entries must be paths");
    m.stories.push_back(s.get<std::string>());
  }
  return m;
}

struct Benchmark {
  std::filesystem::path root;
  Manifest manifest;
  std::vector<Story> stories;
};

/// Loads a benchmark from its manifest file or the directory holding `manifest.json`.
inline Benchmark load_benchmark(std::filesystem::path path) {
  if (std::filesystem::is_directory(path)) path /= "manifest.json";
  Benchmark b;
  b.root = path.parent_path();
  b.manifest = parse_manifest(read_file(path));
  for (const auto& rel : b.manifest.stories) b.stories.push_back(load_story(b.root / rel));
  return b;
}

}  // namespace attri::story
