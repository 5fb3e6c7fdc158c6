#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "attri/attention.hpp"
#include "attri/errors.hpp"
#include "attri/grid.hpp"
#include "attri/guidance.hpp"
#include "attri/text.hpp"
#include "attri/tokenizer.hpp"

namespace attri::toy {

struct VocabEntry {
  std::string word;
  std::vector<double> embedding;  // one weight per latent channel
};

/// Norm of toy word embeddings; scales attention logits relative to latent units.
inline constexpr double kSharpness = 8.0;

struct ToyConfig {
  LatentShape latent{4, 8, 8};
  Resolution attention{8, 8};
  std::vector<VocabEntry> vocab;
  std::uint64_t seed = 0;
  int pyramid_levels = 1;     // level l pools the latent 2^l times coarser and is its own layer
  double noise_gain = 0.002;  // magnitude of the linear noise prediction
  double init_noise = 1.0 / kSharpness;
  std::optional<Tensor3> base_latent;  // initial latents are base + init_noise * N(0, 1)
};

/// Deterministic pseudo-random embedding of a word, scaled to `norm`.
inline std::vector<double> random_embedding(std::string_view word, std::size_t dim, std::uint64_t seed,
                                            double norm = kSharpness) {
  std::mt19937_64 rng(text::fnv1a(word) ^ (seed * 0x9e3779b97f4a7c15ULL));
  std::normal_distribution<double> normal;
  std::vector<double> e(dim);
  for (auto& v : e) v = normal(rng);
  const double n = l2_norm(e);
  for (auto& v : e) v *= norm / (n > 0 ? n : 1.0);
  return e;
}

inline std::vector<VocabEntry> make_vocab(const std::vector<std::string>& words, std::size_t channels,
                                          std::uint64_t seed) {
  std::vector<VocabEntry> out;
  for (const auto& w : words) out.push_back({text::lowercase(w), random_embedding(text::lowercase(w), channels, seed)});
  return out;
}

/// Vocabulary covering every word of the given prompts.
inline std::vector<VocabEntry> vocab_for_prompts(const std::vector<std::string>& prompts, std::size_t channels,
                                                 std::uint64_t seed) {
  std::vector<std::string> words;
  std::set<std::string> seen;
  for (const auto& p : prompts) {
    for (const auto& piece : text::split_words(p)) {
      if (piece.is_word && seen.insert(piece.text).second) words.push_back(piece.text);
    }
  }
  return make_vocab(words, channels, seed);
}

/// CPU-scale denoiser with real cross-attention: the attention of token k at location p is the
/// softmax over locations of <pooled latent at p, embedding(k)>. The noise prediction is a fixed
/// channel-mixing map of the latent and the scheduler subtracts 1/total of it per step.
class ToyDenoiser final : public Denoiser {
 public:
  explicit ToyDenoiser(ToyConfig config)
      : config_(std::move(config)), tokenizer_(piece_list(config_.vocab)), mixing_(config_.latent.channels * config_.latent.channels) {
    const auto& l = config_.latent;
    if (l.size() == 0 || config_.attention.cells() == 0) throw ConfigError("toy dimensions must be positive");
    if (config_.pyramid_levels < 1) throw ConfigError("toy needs at least one attention level");
    zero_.assign(l.channels, 0.0);
    for (int level = 0; level < config_.pyramid_levels; ++level) {
      const std::size_t block_h = block(l.height, config_.attention.height, level);
      const std::size_t block_w = block(l.width, config_.attention.width, level);
      if (block_h == 0 || block_w == 0 || l.height % block_h || l.width % block_w) {
        throw ConfigError("toy attention levels must evenly tile the latent");
      }
      levels_.push_back({block_h, block_w, {l.height / block_h, l.width / block_w}});
    }
    for (const auto& v : config_.vocab) {
      if (v.embedding.size() != l.channels) throw ConfigError("embedding of \"" + v.word + "\" has wrong size");
      embeddings_[text::lowercase(v.word)] = v.embedding;
    }
    std::mt19937_64 rng(config_.seed ^ 0x5eedULL);
    std::normal_distribution<double> normal;
    for (auto& m : mixing_) m = normal(rng) / std::sqrt(static_cast<double>(l.channels));
  }

  const ToyConfig& config() const noexcept { return config_; }

  std::string name() const override { return "toy"; }
  LatentShape latent_shape() const override { return config_.latent; }
  std::optional<Resolution> native_resolution() const override { return config_.attention; }
  bool concurrent() const override { return true; }

  std::vector<SubToken> tokenize(std::string_view prompt) const override { return tokenizer_.tokenize(prompt); }

  Tensor3 initial_latent(std::uint64_t seed) const override {
    Tensor3 z = config_.base_latent ? *config_.base_latent : Tensor3(config_.latent);
    if (z.shape != config_.latent) throw ConfigError("base latent does not match the toy latent shape");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    for (auto& v : z.values) v += config_.init_noise * normal(rng);
    return z;
  }

  DenoiserOutput predict(const LatentState& state, std::string_view prompt) const override {
    check(state.tensor);
    const auto tokens = tokenize(prompt);
    DenoiserOutput out;
    out.noise = Tensor3(config_.latent);
    const auto& l = config_.latent;
    const std::size_t cells = l.height * l.width;
    for (std::size_t c = 0; c < l.channels; ++c) {
      for (std::size_t d = 0; d < l.channels; ++d) {
        const double m = config_.noise_gain * mixing_[c * l.channels + d];
        for (std::size_t p = 0; p < cells; ++p) out.noise.values[c * cells + p] += m * state.tensor.values[d * cells + p];
      }
    }
    for (std::size_t level = 0; level < levels_.size(); ++level) {
      const auto pooled = pool(state.tensor, levels_[level]);
      LayerAttention layer(static_cast<int>(level), 1, tokens.size(), levels_[level].res);
      for (std::size_t k = 0; k < tokens.size(); ++k) {
        const auto probs = softmax_scores(pooled, embedding(tokens[k].surface), levels_[level].res);
        std::copy(probs.begin(), probs.end(), layer.grid(0, k).begin());
      }
      out.attention.layers.push_back(std::move(layer));
    }
    return out;
  }

  Tensor3 attention_vjp(const LatentState& state, std::string_view prompt,
                        const RawAttention& upstream) const override {
    check(state.tensor);
    const auto tokens = tokenize(prompt);
    if (upstream.layers.size() != levels_.size()) throw ShapeMismatch("upstream gradient has wrong layer count");
    const auto& l = config_.latent;
    Tensor3 grad(l);
    for (std::size_t level = 0; level < levels_.size(); ++level) {
      const auto& lv = levels_[level];
      const auto& up = upstream.layers[level];
      if (up.tokens != tokens.size() || !(up.resolution == lv.res) || up.heads != 1) {
        throw ShapeMismatch("upstream gradient does not match the toy attention layout");
      }
      const auto pooled = pool(state.tensor, lv);
      const std::size_t cells = lv.res.cells();
      std::vector<double> d_pooled(l.channels * cells, 0.0);
      for (std::size_t k = 0; k < tokens.size(); ++k) {
        const auto u = up.grid(0, k);
        bool any = false;
        for (double v : u) any = any || v != 0.0;
        if (!any) continue;
        const auto& e = embedding(tokens[k].surface);
        const auto probs = softmax_scores(pooled, e, lv.res);
        double mean_u = 0.0;
        for (std::size_t p = 0; p < cells; ++p) mean_u += probs[p] * u[p];
        for (std::size_t p = 0; p < cells; ++p) {
          const double ds = probs[p] * (u[p] - mean_u);
          for (std::size_t c = 0; c < l.channels; ++c) d_pooled[c * cells + p] += e[c] * ds;
        }
      }
      const double share = 1.0 / static_cast<double>(lv.block_h * lv.block_w);
      for (std::size_t c = 0; c < l.channels; ++c) {
        for (std::size_t y = 0; y < l.height; ++y) {
          for (std::size_t x = 0; x < l.width; ++x) {
            grad.at(c, y, x) += share * d_pooled[c * cells + (y / lv.block_h) * lv.res.width + x / lv.block_w];
          }
        }
      }
    }
    return grad;
  }

  Tensor3 scheduler_step(const LatentState& state, const Tensor3& noise, int total_steps) const override {
    check(state.tensor);
    check(noise);
    Tensor3 next = state.tensor;
    const double rate = 1.0 / static_cast<double>(std::max(total_steps, 1));
    for (std::size_t i = 0; i < next.size(); ++i) next.values[i] -= rate * noise.values[i];
    return next;
  }

 private:
  struct Level {
    std::size_t block_h, block_w;
    Resolution res;
  };

  static std::vector<std::string> piece_list(const std::vector<VocabEntry>& vocab) {
    std::vector<std::string> out;
    for (const auto& v : vocab) out.push_back(v.word);
    return out;
  }

  static std::size_t block(std::size_t latent, std::size_t attention, int level) {
    if (attention == 0 || latent % attention) return 0;
    return (latent / attention) << level;
  }

  void check(const Tensor3& t) const {
    if (t.shape != config_.latent) throw ShapeMismatch("latent does not match the toy latent shape");
  }

  const std::vector<double>& embedding(const std::string& surface) const {
    const auto it = embeddings_.find(surface);
    if (it != embeddings_.end()) return it->second;
    if (surface.empty() || !text::split_words(surface).front().is_word || detail::is_sentinel(surface)) {
      return zero_;
    }
    throw UnknownWord(surface);
  }

  std::vector<double> pool(const Tensor3& z, const Level& lv) const {
    const auto& l = config_.latent;
    const std::size_t cells = lv.res.cells();
    std::vector<double> out(l.channels * cells, 0.0);
    const double share = 1.0 / static_cast<double>(lv.block_h * lv.block_w);
    for (std::size_t c = 0; c < l.channels; ++c) {
      for (std::size_t y = 0; y < l.height; ++y) {
        for (std::size_t x = 0; x < l.width; ++x) {
          out[c * cells + (y / lv.block_h) * lv.res.width + x / lv.block_w] += share * z.at(c, y, x);
        }
      }
    }
    return out;
  }

  std::vector<double> softmax_scores(const std::vector<double>& pooled, const std::vector<double>& e,
                                     Resolution res) const {
    const std::size_t cells = res.cells();
    std::vector<double> s(cells, 0.0);
    if (e.empty()) {
      std::fill(s.begin(), s.end(), 1.0 / static_cast<double>(cells));
      return s;
    }
    for (std::size_t c = 0; c < e.size(); ++c) {
      for (std::size_t p = 0; p < cells; ++p) s[p] += pooled[c * cells + p] * e[c];
    }
    const double top = *std::max_element(s.begin(), s.end());
    double total = 0.0;
    for (auto& v : s) {
      v = std::exp(v - top);
      total += v;
    }
    for (auto& v : s) v /= total;
    return s;
  }

  ToyConfig config_;
  SubwordTokenizer tokenizer_;
  std::vector<double> mixing_;
  std::vector<Level> levels_;
  std::map<std::string, std::vector<double>, std::less<>> embeddings_;
  std::vector<double> zero_;
};

static_assert(DenoiserAdapter<ToyDenoiser>);

inline ToyDenoiser build_toy(ToyConfig config) { return ToyDenoiser(std::move(config)); }

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
template <class F>
std::vector<double> finite_difference_grad(F&& scalar_fn, std::vector<double> x, double h) {
  if (!(h > 0.0)) throw DomainError("finite-difference step must be positive");
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = scalar_fn(std::as_const(x));
    x[i] = saved - h;
    const double down = scalar_fn(std::as_const(x));
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NonFiniteValue("non-finite function value at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

enum class Separation { overlapping, separated };

struct PlantedScenario {
  std::string prompt;
  AttributePairSet pairs;
  std::map<std::string, std::pair<double, double>> planted_centers;  // attention-grid (row, col)
  double blob_width = 2.0;
  double amplitude = 6.0;
  Tensor3 initial_latent;
};

/// Flat-topped radial profile: ~1 inside radius `width`, falling off sharply outside.
inline double planted_profile(double distance, double width) { return 1.0 / (1.0 + std::pow(distance / width, 16.0)); }

inline constexpr std::array<std::string_view, 4> kPlantedWords = {"pink", "dress", "white", "lilies"};

/// Toy configuration whose vocabulary gives the planted words mutually orthogonal embeddings
/// (a scaled Hadamard basis), so each word's attention logits can be planted independently.
inline ToyConfig planted_toy_config(std::uint64_t seed = 0) {
  ToyConfig config;
  config.seed = seed;
  config.init_noise = 0.01;
  const std::size_t channels = config.latent.channels;
  static constexpr int kHadamard[4][4] = {{1, 1, 1, 1}, {1, -1, 1, -1}, {1, 1, -1, -1}, {1, -1, -1, 1}};
  for (std::size_t w = 0; w < kPlantedWords.size(); ++w) {
    std::vector<double> e(channels, 0.0);
    for (std::size_t c = 0; c < 4 && c < channels; ++c) e[c] = kHadamard[w][c] * kSharpness / 2.0;
    config.vocab.push_back({std::string(kPlantedWords[w]), e});
  }
  for (const char* filler : {"a", "girl", "wearing", "holding", "bouquet", "of"}) {
    config.vocab.push_back({filler, random_embedding(filler, channels, seed)});
  }
  return config;
}

/// Planted layout for the pink-dress / white-lilies scene.
///
/// overlapping: each negative pair shares a center and the two centers sit two cells apart, so
/// positive pairs overlap only partially (the ambiguous binding guidance should repair).
/// separated: each positive pair shares a center and the centers are a full plateau apart.
inline PlantedScenario make_planted_scenario(const ToyConfig& config, Separation separation,
                                             double amplitude = 6.0, double blob_width = 2.0) {
  PlantedScenario s;
  s.prompt = "a girl wearing a pink dress holding a bouquet of white lilies";
  s.pairs.positive = {{"pink", "dress"}, {"white", "lilies"}};
  s.pairs.negative = {{"pink", "lilies"}, {"white", "dress"}};
  s.blob_width = blob_width;
  s.amplitude = amplitude;

  const double rows = static_cast<double>(config.attention.height);
  const double cols = static_cast<double>(config.attention.width);
  const double mid_row = (rows - 1.0) / 2.0;
  const double mid_col = (cols - 1.0) / 2.0;
  if (separation == Separation::overlapping) {
    const std::pair<double, double> left{mid_row, mid_col - 1.0}, right{mid_row, mid_col + 1.0};
    s.planted_centers = {{"pink", right}, {"lilies", right}, {"white", left}, {"dress", left}};
  } else {
    const std::pair<double, double> left{mid_row, mid_col - blob_width}, right{mid_row, mid_col + blob_width};
    s.planted_centers = {{"pink", left}, {"dress", left}, {"white", right}, {"lilies", right}};
  }

  std::map<std::string, std::vector<double>> embeddings;
  for (const auto& v : config.vocab) embeddings[text::lowercase(v.word)] = v.embedding;
  const auto& l = config.latent;
  const double ry = static_cast<double>(l.height) / rows;
  const double rx = static_cast<double>(l.width) / cols;
  s.initial_latent = Tensor3(l);
  for (const auto& [word, center] : s.planted_centers) {
    const auto it = embeddings.find(word);
    if (it == embeddings.end()) throw UnknownWord(word);
    const auto& e = it->second;
    double norm2 = 0.0;
    for (double v : e) norm2 += v * v;
    if (norm2 == 0.0) throw ConfigError("planted word \"" + word + "\" has a zero embedding");
    for (std::size_t y = 0; y < l.height; ++y) {
      for (std::size_t x = 0; x < l.width; ++x) {
        const double gy = (static_cast<double>(y) + 0.5) / ry - 0.5;
        const double gx = (static_cast<double>(x) + 0.5) / rx - 0.5;
        const double g = planted_profile(std::hypot(gy - center.first, gx - center.second), blob_width);
        for (std::size_t c = 0; c < l.channels; ++c) s.initial_latent.at(c, y, x) += amplitude * g * e[c] / norm2;
      }
    }
  }
  return s;
}

/// Aggregation policy matching the toy's own attention grid.
inline AggregationPolicy native_policy(const ToyConfig& config) {
  AggregationPolicy p;
  p.target = config.attention;
  return p;
}

}  // namespace attri::toy
