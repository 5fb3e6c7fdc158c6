#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace attri::text {

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '\'' || c >= 0x80; }

struct Piece {
  std::string text;  // lowercased
  bool is_word = false;
};

/// Splits text into lowercase word runs (letters, digits, apostrophes, non-ASCII bytes) and
/// single punctuation characters. Whitespace separates and is dropped.
inline std::vector<Piece> split_words(std::string_view s) {
  std::vector<Piece> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (is_word_char(c)) {
      std::size_t j = i;
      while (j < s.size() && is_word_char(static_cast<unsigned char>(s[j]))) ++j;
      out.push_back({lowercase(s.substr(i, j - i)), true});
      i = j;
    } else {
      out.push_back({std::string(1, static_cast<char>(std::tolower(c))), false});
      ++i;
    }
  }
  return out;
}

/// Position of the first whole-piece, case-insensitive occurrence of `phrase` in `haystack`.
inline std::optional<std::size_t> find_phrase(const std::vector<Piece>& haystack, std::string_view phrase) {
  const auto needle = split_words(phrase);
  if (needle.empty() || needle.size() > haystack.size()) return std::nullopt;
  for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    bool match = true;
    for (std::size_t k = 0; k < needle.size() && match; ++k) match = haystack[i + k].text == needle[k].text;
    if (match) return i;
  }
  return std::nullopt;
}

inline bool contains_phrase(std::string_view text, std::string_view phrase) {
  return find_phrase(split_words(text), phrase).has_value();
}

/// 64-bit FNV-1a; stable across platforms, used to derive per-item seeds and embeddings.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string slug(std::string_view s) {
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c)) {
      out.push_back(static_cast<char>(std::tolower(c)));
    } else if (!out.empty() && out.back() != '-') {
      out.push_back('-');
    }
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  return out;
}

}  // namespace attri::text
