#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attri/attention.hpp"
#include "attri/attristory/story.hpp"
#include "attri/errors.hpp"

namespace attri::eval {

inline constexpr std::string_view kRunFormat = "attristory-run/1";

/// One generated scene. Paths are relative to the run directory.
struct RunScene {
  std::string story_id;
  int scene = 0;  // 1-based
  std::string prompt;
  AttributePairSet pairs;
  std::string image;
  std::string latent;
  std::string trace;
  std::string status = "ok";
  std::string error;
};

/// Binds a run's images to prompts and pairs. A toy run fills every field; an externally
/// produced run needs only method and scenes[story_id, scene, prompt, positive_pairs, image].
struct RunManifest {
  std::string benchmark;
  std::string backend;
  std::string method;
  std::uint64_t seed = 0;
  bool guidance_enabled = true;
  nlohmann::ordered_json guidance;  // GuidanceConfig as JSON; null when not applicable
  std::vector<RunScene> scenes;
};

inline nlohmann::ordered_json to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["format"] = kRunFormat;
  j["benchmark"] = m.benchmark;
  j["backend"] = m.backend;
  j["method"] = m.method;
  j["seed"] = m.seed;
  j["guidance_enabled"] = m.guidance_enabled;
  j["guidance"] = m.guidance;
  j["scenes"] = nlohmann::ordered_json::array();
  for (const auto& s : m.scenes) {
    nlohmann::ordered_json o;
    o["story_id"] = s.story_id;
    o["scene"] = s.scene;
    o["prompt"] = s.prompt;
    o["positive_pairs"] = story::pairs_to_json(s.pairs.positive);
    o["negative_pairs"] = story::pairs_to_json(s.pairs.negative);
    o["image"] = s.image;
    o["latent"] = s.latent;
    o["trace"] = s.trace;
    o["status"] = s.status;
    if (!s.error.empty()) o["error"] = s.error;
    j["scenes"].push_back(std::move(o));
  }
  return j;
}

inline RunManifest run_manifest_from_json(const nlohmann::ordered_json& j) {
  try {
    if (!j.is_object() || j.value("format", "") != kRunFormat) {
      throw ConfigError("not an " + std::string(kRunFormat) + " manifest");
    }
    RunManifest m;
    m.benchmark = j.value("benchmark", "");
    m.backend = j.value("backend", "");
    m.method = j.value("method", "");
    m.seed = j.value("seed", std::uint64_t{0});
    m.guidance_enabled = j.value("guidance_enabled", true);
    if (j.contains("guidance")) m.guidance = j.at("guidance");
    for (const auto& o : j.at("scenes")) {
      RunScene s;
      s.story_id = o.at("story_id").get<std::string>();
      s.scene = o.at("scene").get<int>();
      s.prompt = o.at("prompt").get<std::string>();
      s.pairs.positive = story::pairs_from_json(o.at("positive_pairs"), "positive_pairs");
      if (o.contains("negative_pairs")) s.pairs.negative = story::pairs_from_json(o.at("negative_pairs"), "negative_pairs");
      s.image = o.at("image").get<std::string>();
      s.latent = o.value("latent", "");
      s.trace = o.value("trace", "");
      s.status = o.value("status", "ok");
      s.error = o.value("error", "");
      m.scenes.push_back(std::move(s));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run manifest: ") + e.what());
  } catch (const story::ParseError& e) {
    throw ConfigError(std::string("malformed run manifest: ") + e.what());
  }
}

inline RunManifest load_run_manifest(const std::filesystem::path& run_dir) {
  const auto path = run_dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw IoError("no run manifest at " + path.string());
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(story::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_manifest_from_json(j);
}

}  // namespace attri::eval
