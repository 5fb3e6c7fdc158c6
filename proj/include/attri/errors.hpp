#pragma once

#include <stdexcept>
#include <string>

namespace attri {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

/// A value lies outside the domain an operation accepts (e.g. a map cell outside [0, 1]).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class WordNotFound : public Error {
 public:
  explicit WordNotFound(std::string word)
      : Error("word not found in prompt tokenization: \"" + word + "\""), word_(std::move(word)) {}
  const std::string& word() const noexcept { return word_; }

 private:
  std::string word_;
};

class MissingMap : public Error {
 public:
  explicit MissingMap(std::string word)
      : Error("no attention map for word \"" + word + "\""), word_(std::move(word)) {}
  const std::string& word() const noexcept { return word_; }

 private:
  std::string word_;
};

class UnknownWord : public Error {
 public:
  explicit UnknownWord(std::string word)
      : Error("word outside the vocabulary: \"" + word + "\""), word_(std::move(word)) {}
  const std::string& word() const noexcept { return word_; }

 private:
  std::string word_;
};

class NonFiniteValue : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace attri
