#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "attri/errors.hpp"
#include "attri/text.hpp"

namespace attri {

/// One position of a conditioning sequence.
struct SubToken {
  std::size_t index = 0;
  std::string surface;

  friend bool operator==(const SubToken&, const SubToken&) = default;
};

inline constexpr std::string_view kBeginToken = "<|startoftext|>";
inline constexpr std::string_view kEndToken = "<|endoftext|>";

/// Greedy longest-prefix subword tokenizer over a fixed piece inventory.
///
/// A word present in the inventory is one token; otherwise it is covered left to right by the
/// longest inventory piece that prefixes the remainder. Punctuation always maps to a single
/// token. The sequence is framed by begin/end sentinels, so content starts at index 1.
class SubwordTokenizer {
 public:
  explicit SubwordTokenizer(std::vector<std::string> pieces) {
    for (auto& p : pieces) pieces_.insert(text::lowercase(p));
  }

  bool contains(std::string_view piece) const { return pieces_.count(std::string(piece)) != 0; }

  std::vector<SubToken> tokenize(std::string_view prompt) const {
    std::vector<SubToken> out;
    out.push_back({0, std::string(kBeginToken)});
    for (const auto& piece : text::split_words(prompt)) {
      if (!piece.is_word || contains(piece.text)) {
        out.push_back({out.size(), piece.text});
        continue;
      }
      std::string_view rest = piece.text;
      while (!rest.empty()) {
        std::size_t len = rest.size();
        while (len > 0 && !contains(rest.substr(0, len))) --len;
        if (len == 0) throw UnknownWord(piece.text);
        out.push_back({out.size(), std::string(rest.substr(0, len))});
        rest.remove_prefix(len);
      }
    }
    out.push_back({out.size(), std::string(kEndToken)});
    return out;
  }

 private:
  std::set<std::string, std::less<>> pieces_;
};

}  // namespace attri
