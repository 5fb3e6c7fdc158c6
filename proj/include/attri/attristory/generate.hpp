#pragma once

#include <concepts>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attri/attristory/lexicon.hpp"
#include "attri/attristory/story.hpp"
#include "attri/attristory/validate.hpp"
#include "attri/text.hpp"

namespace attri::story {

/// Structured instruction -> raw response text. `concurrent()` says whether one instance may be
/// called from several threads at once.
template <class C>
concept TextGenClient = requires(C& c, const C& cc, std::string_view instruction, std::uint64_t seed) {
  { c.complete(instruction, seed) } -> std::convertible_to<std::string>;
  { cc.concurrent() } -> std::convertible_to<bool>;
};

inline constexpr std::string_view kDefaultInstructionTemplate = R"template(You are writing one story for a text-to-image benchmark. The story is rendered in the {style} style.

Produce:
1. Character Description: a detailed multi-attribute specification of one main character, starting with the character's name followed by a comma (e.g. "Oliver, a lively 8-year-old boy with sandy blond hair and brown eyes").
2. Scenes: exactly {scene_count} scene descriptions. Each continues the sentence "A {style} of <character description>, ..." and is enriched with fine-grained visual attributes (color, texture, material). Refer to the character only implicitly; never restate the description.
3. Positive pairs: for each scene, {pair_min} to {pair_max} [attribute, object] pairs whose words appear verbatim in that scene.
4. Negative pairs: for each scene, [attribute, object] pairs that must not be bound, formed by swapping attributes between the scene's objects.

Reply with only a JSON object of the form:
{"character_description": "...", "scenes": [{"narrative": "...", "positive_pairs": [["attribute", "object"]], "negative_pairs": [["attribute", "object"]]}]}
)template";

inline std::string fill_instruction(std::string_view tmpl, std::string_view style) {
  if (text::trim(tmpl).empty()) throw ConfigError("instruction template is empty");
  std::string out(tmpl);
  auto replace_all = [&](std::string_view key, const std::string& value) {
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
      out.replace(pos, key.size(), value);
    }
  };
  replace_all("{style}", std::string(style));
  replace_all("{scene_count}", std::to_string(kSceneCount));
  replace_all("{pair_min}", std::to_string(kPairMin));
  replace_all("{pair_max}", std::to_string(kPairMax));
  return out;
}

/// Replays fixed responses in order; records the instructions it was given.
class ScriptedClient {
 public:
  explicit ScriptedClient(std::vector<std::string> responses) : responses_(std::move(responses)) {}

  std::string complete(std::string_view instruction, std::uint64_t) {
    if (next_ >= responses_.size()) throw IoError("scripted client has no response left");
    instructions_.emplace_back(instruction);
    return responses_[next_++];
  }
  bool concurrent() const { return false; }
  const std::vector<std::string>& instructions() const noexcept { return instructions_; }

 private:
  std::vector<std::string> responses_;
  std::vector<std::string> instructions_;
  std::size_t next_ = 0;
};

/// Offline stand-in for a language model: writes a well-formed story from the seed alone.
class SyntheticStoryWriter {
 public:
  explicit SyntheticStoryWriter(int scene_count = kSceneCount) : scene_count_(scene_count) {}

  bool concurrent() const { return true; }

  std::string complete(std::string_view, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    auto pick = [&](const auto& pool) -> std::string {
      std::uniform_int_distribution<std::size_t> d(0, std::size(pool) - 1);
      return std::string(pool[d(rng)]);
    };
    static constexpr std::string_view names[] = {"Oliver", "Maya", "Leo",  "Aria", "Noah",  "Zara", "Felix",
                                                 "Ivy",    "Theo", "Luna", "Milo", "Nora",  "Hugo", "Elsa",
                                                 "Omar",   "Ruby", "Kai",  "Iris", "Jonas", "Mei"};
    static constexpr std::string_view who[] = {"a lively 8-year-old boy",  "a curious 10-year-old girl",
                                               "a cheerful elderly man",   "a thoughtful young woman",
                                               "a brave teenage girl",     "a gentle middle-aged man",
                                               "a playful 6-year-old girl", "a quiet grandmother"};
    static constexpr std::string_view hair[] = {"sandy blond hair", "curly dark hair",  "short auburn hair",
                                                "long chestnut hair", "wavy ginger hair", "neat gray hair"};
    static constexpr std::string_view eyes[] = {"brown eyes", "hazel eyes", "bright eyes", "dark eyes", "green eyes"};
    static constexpr std::string_view activities[] = {
        "walking through a quiet park",    "reading on a porch",          "exploring a busy market",
        "picnicking by a lake",            "standing on a snowy hill",    "baking in a sunny kitchen",
        "waiting at a train station",      "painting in an attic studio", "feeding ducks at a pond",
        "sailing a toy boat at the harbor", "camping under the stars",     "dancing at a village fair"};
    static constexpr std::string_view colors[] = {"red",    "blue",   "yellow",  "purple", "pink",    "orange",
                                                  "white",  "teal",   "crimson", "golden", "silver",  "navy",
                                                  "lavender", "black", "turquoise"};
    static constexpr std::string_view textures[] = {"striped",  "checkered", "plaid",       "fluffy", "glossy",
                                                    "knitted",  "quilted",   "embroidered", "polka-dot", "ruffled"};
    static constexpr std::string_view materials[] = {"leather", "denim", "velvet", "silk",  "wooden",
                                                     "metal",   "glass", "ceramic", "straw", "wicker"};
    static constexpr std::string_view objects[] = {"hoodie", "scarf",    "backpack", "umbrella", "hat",    "jacket",
                                                   "coat",   "kite",     "lantern",  "basket",   "bicycle", "mug",
                                                   "guitar", "book",     "blanket",  "vase",     "cane",   "teapot",
                                                   "bench",  "suitcase", "belt",     "apron",    "bucket", "camera"};

    nlohmann::ordered_json j;
    j["character_description"] =
        pick(names) + ", " + pick(who) + " with " + pick(hair) + " and " + pick(eyes);
    j["scenes"] = nlohmann::ordered_json::array();
    for (int s = 0; s < scene_count_; ++s) {
      const auto n = std::uniform_int_distribution<int>(kPairMin, kPairMax)(rng);
      std::vector<AttributePair> pairs;
      std::vector<std::string> used;
      auto fresh = [&](const auto& pool) {
        for (;;) {
          auto w = pick(pool);
          if (std::find(used.begin(), used.end(), w) == used.end()) {
            used.push_back(w);
            return w;
          }
        }
      };
      for (int p = 0; p < n; ++p) {
        std::string attr;
        if (s == 0 && p == 0) {
          attr = fresh(colors);
        } else if (s == 0 && p == 1) {
          attr = fresh(materials);
        } else {
          switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
            case 0: attr = fresh(colors); break;
            case 1: attr = fresh(textures); break;
            default: attr = fresh(materials); break;
          }
        }
        pairs.push_back({attr, fresh(objects)});
      }
      std::string narrative = pick(activities) + " with ";
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        if (p > 0) narrative += p + 1 == pairs.size() ? " and " : ", ";
        const bool vowel = std::string_view("aeiou").find(pairs[p].attribute[0]) != std::string_view::npos;
        narrative += (vowel ? "an " : "a ") + pairs[p].attribute + " " + pairs[p].object;
      }
      nlohmann::ordered_json sc;
      sc["narrative"] = narrative;
      sc["positive_pairs"] = pairs_to_json(pairs);
      sc["negative_pairs"] = pairs_to_json(derive_negative_pairs(pairs));
      j["scenes"].push_back(std::move(sc));
    }
    return "Here is the story.\n```json\n" + j.dump(2) + "\n```\n";
  }

 private:
  int scene_count_;
};

static_assert(TextGenClient<ScriptedClient>);
static_assert(TextGenClient<SyntheticStoryWriter>);

/// Raised when no response could be parsed within the retry budget.
class GenerationFailure : public Error {
 public:
  GenerationFailure(const std::string& what, std::string raw) : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

/// Raised when a parsed story breaks the benchmark invariants.
class ValidationFailure : public Error {
 public:
  explicit ValidationFailure(std::vector<Violation> violations)
      : Error(describe(violations)), violations_(std::move(violations)) {}
  const std::vector<Violation>& violations() const noexcept { return violations_; }

 private:
  static std::string describe(const std::vector<Violation>& v) {
    std::string out = "story failed validation:";
    for (const auto& x : v) out += "\n  " + to_string(x);
    return out;
  }
  std::vector<Violation> violations_;
};

/// Parses a model reply: the outermost {...} in the text, holding character_description and scenes.
inline Story parse_story_response(std::string_view raw, const std::string& id, const std::string& style) {
  const auto open = raw.find('{');
  const auto close = raw.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
    throw ParseError("reply contains no JSON object");
  }
  Json reply;
  try {
    reply = Json::parse(raw.substr(open, close - open + 1));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("reply is not valid JSON: ") + e.what());
  }
  if (!reply.is_object()) throw ParseError("reply must be a JSON object");
  Json doc;
  doc["id"] = id;
  doc["style"] = style;
  doc["character_description"] = reply.contains("character_description") ? reply["character_description"] : Json();
  doc["scenes"] = reply.contains("scenes") ? reply["scenes"] : Json();
  return story_from_json(doc);
}

struct GenerationOptions {
  int max_retries = 2;
  std::string id;  // defaults to "<style-slug>-<seed>"
};

struct GenerationResult {
  Story story;
  int retries = 0;
  std::string raw;
};

template <TextGenClient C>
GenerationResult generate_story(C& client, std::string_view style, std::string_view instruction_template,
                                std::uint64_t seed, const GenerationOptions& options = {}, const Lexicon& lexicon = {}) {
  const auto canonical = canonical_style(style);
  if (canonical.empty()) throw ConfigError("unknown style \"" + std::string(style) + "\"");
  const auto id = options.id.empty() ? text::slug(canonical) + "-" + std::to_string(seed) : options.id;
  const auto instruction = fill_instruction(instruction_template, canonical);

  GenerationResult result;
  std::string prompt = instruction;
  for (;;) {
    result.raw = client.complete(prompt, seed + static_cast<std::uint64_t>(result.retries));
    try {
      result.story = parse_story_response(result.raw, id, canonical);
      break;
    } catch (const ParseError& e) {
      if (result.retries >= options.max_retries) {
        throw GenerationFailure("could not parse the reply after " + std::to_string(result.retries) +
                                    " retries: " + e.what(),
                                result.raw);
      }
      ++result.retries;
      prompt = instruction + "\n\nYour previous reply could not be parsed (" + e.what() +
               "). Reply again with only the JSON object described above.";
    }
  }

  for (auto& sc : result.story.scenes) {
    if (!sc.negative_pairs.empty()) continue;
    try {
      sc.negative_pairs = derive_negative_pairs(sc.positive_pairs);
    } catch (const InsufficientDiversity&) {
    }
  }
  auto violations = validate_story(result.story, lexicon);
  if (!violations.empty()) throw ValidationFailure(std::move(violations));
  return result;
}

}  // namespace attri::story
