#pragma once

#include <atomic>
#include <cmath>
#include <concepts>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "attri/errors.hpp"
#include "attri/evaluation/image.hpp"

namespace attri::eval {

class ScoringError : public Error {
 public:
  using Error::Error;
};

/// The four metric callables plus an identity string that makes runs comparable.
///   text_alignment        CLIP-T   [-1, 1]
///   vqa_yes_probability   VQA      [0, 1]
///   image_similarity      CLIP-I   [-1, 1]
///   perceptual_similarity DreamSim [0, 1], higher = more similar
template <class S>
concept ScorerContract = requires(const S& s, const Image& a, const Image& b, std::string_view text) {
  { s.identity() } -> std::convertible_to<std::string>;
  { s.text_alignment(a, text) } -> std::convertible_to<double>;
  { s.vqa_yes_probability(a, text) } -> std::convertible_to<double>;
  { s.image_similarity(a, b) } -> std::convertible_to<double>;
  { s.perceptual_similarity(a, b) } -> std::convertible_to<double>;
  { s.concurrent() } -> std::convertible_to<bool>;
};

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::string identity() const = 0;
  virtual double text_alignment(const Image& image, std::string_view text) const = 0;
  virtual double vqa_yes_probability(const Image& image, std::string_view question) const = 0;
  virtual double image_similarity(const Image& a, const Image& b) const = 0;
  virtual double perceptual_similarity(const Image& a, const Image& b) const = 0;
  virtual bool concurrent() const { return false; }
};

static_assert(ScorerContract<Scorer>);

inline double checked_score(double v, double lo, double hi, std::string_view metric) {
  if (!std::isfinite(v) || v < lo || v > hi) {
    throw ScoringError(std::string(metric) + " returned " + std::to_string(v) + ", outside [" + std::to_string(lo) +
                       ", " + std::to_string(hi) + "]");
  }
  return v;
}

/// Fixed-value scorer for tests and offline runs.
class StubScorer final : public Scorer {
 public:
  static constexpr double kTextAlignment = 0.35;
  static constexpr double kVqa = 0.8;
  static constexpr double kImageSimilarity = 0.85;
  static constexpr double kPerceptualSimilarity = 0.7;

  std::string identity() const override { return "stub-v1"; }
  double text_alignment(const Image&, std::string_view) const override { return kTextAlignment; }
  double vqa_yes_probability(const Image&, std::string_view) const override { return kVqa; }
  double image_similarity(const Image& a, const Image& b) const override {
    return a.same_content(b) ? 1.0 : kImageSimilarity;
  }
  double perceptual_similarity(const Image& a, const Image& b) const override {
    return a.same_content(b) ? 1.0 : kPerceptualSimilarity;
  }
  bool concurrent() const override { return true; }
};

/// Forwards to another scorer and counts calls per metric.
class CountingScorer final : public Scorer {
 public:
  explicit CountingScorer(const Scorer& inner) : inner_(inner) {}

  std::string identity() const override { return inner_.identity(); }
  double text_alignment(const Image& i, std::string_view t) const override {
    ++text_calls;
    return inner_.text_alignment(i, t);
  }
  double vqa_yes_probability(const Image& i, std::string_view q) const override {
    ++vqa_calls;
    return inner_.vqa_yes_probability(i, q);
  }
  double image_similarity(const Image& a, const Image& b) const override {
    ++image_calls;
    return inner_.image_similarity(a, b);
  }
  double perceptual_similarity(const Image& a, const Image& b) const override {
    ++perceptual_calls;
    return inner_.perceptual_similarity(a, b);
  }
  bool concurrent() const override { return inner_.concurrent(); }

  mutable std::atomic<long> text_calls{0}, vqa_calls{0}, image_calls{0}, perceptual_calls{0};

 private:
  const Scorer& inner_;
};

/// Name -> factory; factories receive the model cache directory for lazily loaded weights.
class ScorerRegistry {
 public:
  using Factory = std::function<std::unique_ptr<Scorer>(const std::string& cache_dir)>;

  static ScorerRegistry& instance() {
    static ScorerRegistry registry = [] {
      ScorerRegistry r;
      r.add("stub", [](const std::string&) { return std::make_unique<StubScorer>(); });
      return r;
    }();
    return registry;
  }

  void add(std::string name, Factory f) { factories_[std::move(name)] = std::move(f); }
  bool contains(std::string_view name) const { return factories_.find(name) != factories_.end(); }

  std::unique_ptr<Scorer> create(std::string_view name, const std::string& cache_dir = {}) const {
    const auto it = factories_.find(name);
    if (it == factories_.end()) throw ConfigError("unknown scorer \"" + std::string(name) + "\"");
    return it->second(cache_dir);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : factories_) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, Factory, std::less<>> factories_;
};

}  // namespace attri::eval
