#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attri/attristory/story.hpp"
#include "attri/text.hpp"

namespace attri::story {

inline constexpr std::array<std::string_view, 4> kCategories = {"color", "texture", "material", "other"};

/// Default attribute lexicon; data/attribute_lexicon.json carries the same content.
inline constexpr std::string_view kDefaultLexicon = R"lexicon({
  "color": ["red", "orange", "yellow", "green", "blue", "purple", "violet", "pink", "white", "black", "gray", "grey", "brown", "golden", "silver", "beige", "crimson", "scarlet", "navy", "teal", "turquoise", "emerald", "olive", "maroon", "ivory", "amber", "lavender", "magenta", "cyan", "indigo", "coral", "mint", "blond", "tan", "cream", "peach"],
  "texture": ["striped", "checkered", "plaid", "polka-dot", "dotted", "fluffy", "furry", "fuzzy", "glossy", "matte", "shiny", "sparkly", "glittery", "knitted", "quilted", "ribbed", "smooth", "rough", "wrinkled", "crinkled", "embroidered", "floral", "patterned", "ruffled", "pleated", "sequined", "frayed", "woolly", "curly", "spotted"],
  "material": ["leather", "denim", "velvet", "silk", "satin", "wool", "cotton", "linen", "lace", "wooden", "metal", "metallic", "glass", "ceramic", "porcelain", "paper", "plastic", "rubber", "straw", "wicker", "bamboo", "stone", "marble", "brass", "copper", "iron", "steel", "tweed", "suede", "fleece", "canvas", "corduroy", "knit", "crystal"]
}
)lexicon";

/// Keyword lexicon mapping attribute words to color / texture / material; anything else is "other".
class Lexicon {
 public:
  Lexicon() : Lexicon(nlohmann::json::parse(kDefaultLexicon)) {}

  explicit Lexicon(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("lexicon must be an object of category -> word list");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& cat = it.key();
      if (std::find(kCategories.begin(), kCategories.end(), cat) == kCategories.end() || cat == "other") {
        throw ParseError("unknown lexicon category \"" + cat + "\"");
      }
      if (!it.value().is_array()) throw ParseError("lexicon category \"" + cat + "\" must be a list");
      for (const auto& w : it.value()) {
        if (!w.is_string()) throw ParseError("lexicon entries must be strings");
        entries_.push_back({text::lowercase(w.get<std::string>()), cat});
      }
    }
  }

  static Lexicon load(const std::filesystem::path& path) {
    try {
      return Lexicon(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ": " + e.what());
    }
  }

  /// Category of the earliest lexicon keyword inside `attribute` ("red velvet" -> color).
  std::string category(std::string_view attribute) const {
    const auto pieces = text::split_words(attribute);
    std::optional<std::size_t> best;
    std::string out = "other";
    for (const auto& [word, cat] : entries_) {
      const auto pos = text::find_phrase(pieces, word);
      if (pos && (!best || *pos < *best)) {
        best = pos;
        out = cat;
      }
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace attri::story
