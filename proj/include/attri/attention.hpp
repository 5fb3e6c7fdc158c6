#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attri/errors.hpp"
#include "attri/grid.hpp"
#include "attri/resample.hpp"
#include "attri/text.hpp"
#include "attri/tokenizer.hpp"

namespace attri {

/// Spatial attention of one prompt word, cells in [0, 1].
struct AttentionMap {
  std::string token_label;
  Grid values;
};

/// Prompt word (or phrase) and the conditioning positions covering it.
struct TokenSpan {
  std::string word;
  std::vector<std::size_t> subtoken_indices;

  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

struct AttributePair {
  std::string attribute;
  std::string object;

  friend bool operator==(const AttributePair&, const AttributePair&) = default;
  friend auto operator<=>(const AttributePair&, const AttributePair&) = default;
};

/// Pairs whose maps should overlap (positive) or stay apart (negative).
struct AttributePairSet {
  std::vector<AttributePair> positive;
  std::vector<AttributePair> negative;

  bool empty() const noexcept { return positive.empty() && negative.empty(); }

  /// Every distinct word named by a pair, in first-appearance order.
  std::vector<std::string> words() const {
    std::vector<std::string> out;
    auto add = [&](const std::string& w) {
      if (std::find(out.begin(), out.end(), w) == out.end()) out.push_back(w);
    };
    for (const auto* set : {&positive, &negative}) {
      for (const auto& p : *set) {
        add(p.attribute);
        add(p.object);
      }
    }
    return out;
  }
};

/// Throws ConfigError when the sets share an ordered pair, a word is empty, or negatives are
/// requested without any positive pair.
inline void validate_pair_set(const AttributePairSet& pairs) {
  const std::set<AttributePair> pos(pairs.positive.begin(), pairs.positive.end());
  for (const auto* set : {&pairs.positive, &pairs.negative}) {
    for (const auto& p : *set) {
      if (text::trim(p.attribute).empty() || text::trim(p.object).empty()) {
        throw ConfigError("attribute-object pair with an empty word");
      }
    }
  }
  for (const auto& n : pairs.negative) {
    if (pos.count(n)) {
      throw ConfigError("pair (" + n.attribute + ", " + n.object + ") is both positive and negative");
    }
  }
  if (pairs.positive.empty() && !pairs.negative.empty()) {
    throw ConfigError("guidance needs at least one positive pair");
  }
}

/// Which cross-attention layers contribute and the common grid they are resampled to.
/// Heads, subtokens and layers are all reduced by the arithmetic mean.
struct AggregationPolicy {
  std::vector<int> layers;  // empty selects every layer
  Resolution target{16, 16};
  bool min_max = true;

  friend bool operator==(const AggregationPolicy&, const AggregationPolicy&) = default;
};

/// Raw attention probabilities of one cross-attention layer, indexed [head][token][y][x].
struct LayerAttention {
  int layer_id = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  Resolution resolution;
  std::vector<double> values;

  LayerAttention() = default;
  LayerAttention(int id, std::size_t h, std::size_t t, Resolution res)
      : layer_id(id), heads(h), tokens(t), resolution(res), values(h * t * res.cells(), 0.0) {}

  std::size_t offset(std::size_t head, std::size_t token) const {
    return (head * tokens + token) * resolution.cells();
  }
  std::span<double> grid(std::size_t head, std::size_t token) {
    return {values.data() + offset(head, token), resolution.cells()};
  }
  std::span<const double> grid(std::size_t head, std::size_t token) const {
    return {values.data() + offset(head, token), resolution.cells()};
  }
};

struct RawAttention {
  std::vector<LayerAttention> layers;
};

/// Raw attention with the same layout as `like`, all zeros. Used for gradients.
inline RawAttention zeros_like(const RawAttention& like) {
  RawAttention out;
  for (const auto& l : like.layers) out.layers.emplace_back(l.layer_id, l.heads, l.tokens, l.resolution);
  return out;
}

namespace detail {

inline bool is_sentinel(std::string_view s) {
  static const std::set<std::string, std::less<>> kSentinels = {
      std::string(kBeginToken), std::string(kEndToken), "<bos>", "<eos>", "<pad>", "<s>", "</s>",
      "[cls]", "[sep]", "[pad]", "<|pad|>"};
  return kSentinels.count(text::lowercase(s)) != 0;
}

/// Strips BPE/WordPiece boundary markers and lowercases.
inline std::string normalize_surface(std::string_view s) {
  std::string out = text::lowercase(s);
  if (out.size() >= 4 && out.ends_with("</w>")) out.resize(out.size() - 4);
  if (out.starts_with("##")) out.erase(0, 2);
  if (out.starts_with("\xc4\xa0")) out.erase(0, 2);  // byte-level BPE space marker
  return out;
}

/// Sum in ascending order: bit-identical for any permutation of the inputs.
inline double order_invariant_sum(std::vector<double>& buf) {
  std::sort(buf.begin(), buf.end());
  double s = 0.0;
  for (double v : buf) s += v;
  return s;
}

}  // namespace detail

/// Maps every prompt word onto the contiguous conditioning positions that spell it.
/// Sentinel and padding positions are skipped; punctuation is consumed but not reported.
inline std::vector<TokenSpan> align_tokens(std::string_view prompt, std::span<const SubToken> sequence) {
  std::vector<const SubToken*> content;
  for (const auto& t : sequence) {
    if (!detail::is_sentinel(t.surface)) content.push_back(&t);
  }
  std::vector<TokenSpan> spans;
  std::size_t next = 0;
  for (const auto& piece : text::split_words(prompt)) {
    TokenSpan span{piece.text, {}};
    std::string covered;
    while (covered.size() < piece.text.size()) {
      if (next >= content.size()) {
        throw Error("tokenization ends before prompt word \"" + piece.text + "\" is covered");
      }
      const auto surface = detail::normalize_surface(content[next]->surface);
      covered += surface;
      if (surface.empty() || !piece.text.starts_with(covered)) {
        throw Error("subtoken \"" + content[next]->surface + "\" does not match prompt word \"" + piece.text + "\"");
      }
      if (!span.subtoken_indices.empty() && content[next]->index <= span.subtoken_indices.back()) {
        throw Error("subtoken indices must be strictly increasing");
      }
      span.subtoken_indices.push_back(content[next]->index);
      ++next;
    }
    if (piece.is_word) spans.push_back(std::move(span));
  }
  return spans;
}

/// Span of a pair word: a single prompt word or a multi-word phrase matched on consecutive words
/// (first occurrence, case-insensitive). Throws WordNotFound when the prompt lacks it.
inline TokenSpan resolve_span(std::span<const TokenSpan> spans, std::string_view phrase) {
  std::vector<std::string> words;
  for (const auto& p : text::split_words(phrase)) {
    if (p.is_word) words.push_back(p.text);
  }
  if (words.empty()) throw WordNotFound(std::string(phrase));
  for (std::size_t i = 0; i + words.size() <= spans.size(); ++i) {
    bool match = true;
    for (std::size_t k = 0; k < words.size() && match; ++k) match = spans[i + k].word == words[k];
    if (!match) continue;
    TokenSpan out{std::string(phrase), {}};
    for (std::size_t k = 0; k < words.size(); ++k) {
      const auto& idx = spans[i + k].subtoken_indices;
      out.subtoken_indices.insert(out.subtoken_indices.end(), idx.begin(), idx.end());
    }
    return out;
  }
  throw WordNotFound(std::string(phrase));
}

inline std::vector<TokenSpan> resolve_spans(std::span<const TokenSpan> spans, const std::vector<std::string>& words) {
  std::vector<TokenSpan> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(resolve_span(spans, w));
  return out;
}

using MapSet = std::map<std::string, AttentionMap, std::less<>>;
using GridSet = std::map<std::string, Grid, std::less<>>;

namespace detail {

struct SelectedLayer {
  const LayerAttention* layer;
  BilinearResampler resampler;
};

inline std::vector<SelectedLayer> select_layers(const RawAttention& raw, const AggregationPolicy& policy) {
  if (policy.target.cells() == 0) throw ConfigError("aggregation target resolution must be positive");
  std::vector<SelectedLayer> out;
  for (const auto& l : raw.layers) {
    if (!policy.layers.empty() &&
        std::find(policy.layers.begin(), policy.layers.end(), l.layer_id) == policy.layers.end()) {
      continue;
    }
    if (l.values.size() != l.heads * l.tokens * l.resolution.cells() || l.heads == 0) {
      throw ShapeMismatch("layer " + std::to_string(l.layer_id) + " data does not match its declared shape");
    }
    out.push_back({&l, BilinearResampler(l.resolution, policy.target)});
  }
  for (int id : policy.layers) {
    const bool present = std::any_of(raw.layers.begin(), raw.layers.end(),
                                     [id](const LayerAttention& l) { return l.layer_id == id; });
    if (!present) throw ConfigError("selected layer " + std::to_string(id) + " is not present");
  }
  if (out.empty()) throw ConfigError("aggregation selected no attention layers");
  return out;
}

inline void check_span(const TokenSpan& span, const LayerAttention& l) {
  if (span.subtoken_indices.empty()) throw Error("token span for \"" + span.word + "\" is empty");
  for (auto i : span.subtoken_indices) {
    if (i >= l.tokens) {
      throw ShapeMismatch("subtoken " + std::to_string(i) + " of \"" + span.word + "\" exceeds layer " +
                          std::to_string(l.layer_id) + " token count " + std::to_string(l.tokens));
    }
  }
}

/// Mean over heads and the word's subtokens at the layer's native resolution.
inline Grid reduce_heads(const LayerAttention& l, const TokenSpan& span) {
  check_span(span, l);
  const std::size_t n = l.heads * span.subtoken_indices.size();
  Grid out(l.resolution.height, l.resolution.width);
  std::vector<double> buf(n);
  for (std::size_t cell = 0; cell < out.size(); ++cell) {
    std::size_t k = 0;
    for (std::size_t h = 0; h < l.heads; ++h) {
      for (auto t : span.subtoken_indices) buf[k++] = l.grid(h, t)[cell];
    }
    out.values[cell] = order_invariant_sum(buf) / static_cast<double>(n);
  }
  return out;
}

/// Mean over selected layers after resampling, before normalization.
inline Grid reduce_layers(const std::vector<SelectedLayer>& layers, const TokenSpan& span, Resolution target) {
  std::vector<Grid> resampled;
  resampled.reserve(layers.size());
  for (const auto& s : layers) resampled.push_back(s.resampler.apply(reduce_heads(*s.layer, span)));
  Grid out(target.height, target.width);
  std::vector<double> buf(layers.size());
  for (std::size_t cell = 0; cell < out.size(); ++cell) {
    for (std::size_t k = 0; k < layers.size(); ++k) buf[k] = resampled[k].values[cell];
    out.values[cell] = order_invariant_sum(buf) / static_cast<double>(layers.size());
  }
  return out;
}

struct Extent {
  std::size_t argmin = 0, argmax = 0;
  double min = 0.0, max = 0.0, range = 0.0;
};

inline Extent extent(const Grid& g) {
  Extent e;
  const auto [lo, hi] = std::minmax_element(g.values.begin(), g.values.end());
  e.argmin = static_cast<std::size_t>(lo - g.values.begin());
  e.argmax = static_cast<std::size_t>(hi - g.values.begin());
  e.min = *lo;
  e.max = *hi;
  e.range = *hi - *lo;
  return e;
}

// Below this range a map is treated as constant and normalizes to all zeros.
inline constexpr double kFlatRange = 1e-300;

inline Grid normalize(const Grid& pre, bool min_max) {
  Grid out = pre;
  if (min_max) {
    const auto e = extent(pre);
    for (auto& v : out.values) v = e.range > kFlatRange ? (v - e.min) / e.range : 0.0;
  }
  for (auto& v : out.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

inline Grid normalize_vjp(const Grid& pre, const Grid& grad_out, bool min_max) {
  Grid g = grad_out;
  if (!min_max) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pre.values[i] < 0.0 || pre.values[i] > 1.0) g.values[i] = 0.0;
    }
    return g;
  }
  const auto e = extent(pre);
  if (e.range <= kFlatRange) return Grid(pre.height, pre.width);
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    s1 += grad_out.values[i];
    s2 += grad_out.values[i] * (pre.values[i] - e.min) / e.range;
  }
  // ties at the extremes share the min/max gradient equally
  const double hi = e.max;
  std::size_t n_min = 0, n_max = 0;
  for (double v : pre.values) {
    n_min += v == e.min;
    n_max += v == hi;
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.values[i] /= e.range;
    if (pre.values[i] == e.min) g.values[i] += (s2 - s1) / e.range / static_cast<double>(n_min);
    if (pre.values[i] == hi) g.values[i] -= s2 / e.range / static_cast<double>(n_max);
  }
  return g;
}

}  // namespace detail

/// Per-word aggregated attention: subtoken and head mean at native resolution, bilinear resample
/// to the policy target, mean over selected layers, per-map min-max rescale, clamp to [0, 1].
inline MapSet aggregate_attention(const RawAttention& raw, std::span<const TokenSpan> spans,
                                  const AggregationPolicy& policy) {
  const auto layers = detail::select_layers(raw, policy);
  MapSet out;
  for (const auto& span : spans) {
    out[span.word] = {span.word, detail::normalize(detail::reduce_layers(layers, span, policy.target), policy.min_max)};
  }
  return out;
}

/// Vector-Jacobian product of aggregate_attention: given dL/d(map) per word, returns dL/d(raw).
inline RawAttention aggregate_attention_vjp(const RawAttention& raw, std::span<const TokenSpan> spans,
                                            const AggregationPolicy& policy, const GridSet& upstream) {
  const auto layers = detail::select_layers(raw, policy);
  RawAttention grad = zeros_like(raw);
  for (const auto& span : spans) {
    const auto it = upstream.find(span.word);
    if (it == upstream.end()) continue;
    const Grid pre = detail::reduce_layers(layers, span, policy.target);
    const Grid g_pre = detail::normalize_vjp(pre, it->second, policy.min_max);
    for (const auto& s : layers) {
      Grid g_layer = g_pre;
      for (auto& v : g_layer.values) v /= static_cast<double>(layers.size());
      const Grid g_native = s.resampler.adjoint(g_layer);
      const auto idx = static_cast<std::size_t>(s.layer - raw.layers.data());
      auto& dst = grad.layers[idx];
      const double share = 1.0 / static_cast<double>(s.layer->heads * span.subtoken_indices.size());
      for (std::size_t h = 0; h < dst.heads; ++h) {
        for (auto t : span.subtoken_indices) {
          auto cells = dst.grid(h, t);
          for (std::size_t c = 0; c < cells.size(); ++c) cells[c] += share * g_native.values[c];
        }
      }
    }
  }
  return grad;
}

namespace detail {

inline void check_iou_inputs(const Grid& a, const Grid& b, double epsilon) {
  if (!(a.shape() == b.shape()) || a.size() != b.size()) {
    throw ShapeMismatch("soft IoU of " + to_string(a.shape()) + " and " + to_string(b.shape()) + " maps");
  }
  if (!(epsilon > 0.0)) throw DomainError("soft IoU epsilon must be positive");
  for (const auto* g : {&a, &b}) {
    for (double v : g->values) {
      if (!(v >= 0.0 && v <= 1.0)) throw DomainError("attention value " + std::to_string(v) + " outside [0, 1]");
    }
  }
}

}  // namespace detail

/// Soft Jaccard overlap: sum(a*b) / max(sum(a + b - a*b), epsilon).
inline double soft_iou(const Grid& a, const Grid& b, double epsilon) {
  detail::check_iou_inputs(a, b, epsilon);
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ab = a.values[i] * b.values[i];
    inter += ab;
    uni += a.values[i] + b.values[i] - ab;
  }
  return inter / std::max(uni, epsilon);
}

inline double soft_iou(const AttentionMap& a, const AttentionMap& b, double epsilon) {
  return soft_iou(a.values, b.values, epsilon);
}

struct SoftIouGradient {
  double value = 0.0;
  Grid d_a;
  Grid d_b;
};

inline SoftIouGradient soft_iou_with_grad(const Grid& a, const Grid& b, double epsilon) {
  detail::check_iou_inputs(a, b, epsilon);
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ab = a.values[i] * b.values[i];
    inter += ab;
    uni += a.values[i] + b.values[i] - ab;
  }
  SoftIouGradient out{0.0, Grid(a.height, a.width), Grid(a.height, a.width)};
  if (uni > epsilon) {
    out.value = inter / uni;
    const double u2 = uni * uni;
    for (std::size_t i = 0; i < a.size(); ++i) {
      out.d_a.values[i] = (b.values[i] * uni - inter * (1.0 - b.values[i])) / u2;
      out.d_b.values[i] = (a.values[i] * uni - inter * (1.0 - a.values[i])) / u2;
    }
  } else {
    out.value = inter / epsilon;
    for (std::size_t i = 0; i < a.size(); ++i) {
      out.d_a.values[i] = b.values[i] / epsilon;
      out.d_b.values[i] = a.values[i] / epsilon;
    }
  }
  return out;
}

struct PairIou {
  AttributePair pair;
  bool positive = true;
  double iou = 0.0;
};

struct AttriLossResult {
  double loss = 0.0;
  std::vector<PairIou> pair_iou;
  GridSet gradient;  // dL/d(map) for every word named by a pair
};

namespace detail {

inline const AttentionMap& lookup(const MapSet& maps, const std::string& word) {
  const auto it = maps.find(word);
  if (it == maps.end()) throw MissingMap(word);
  return it->second;
}

inline void check_common_shape(const MapSet& maps, const AttributePairSet& pairs) {
  const Grid* first = nullptr;
  for (const auto& w : pairs.words()) {
    const auto& g = lookup(maps, w).values;
    if (first && !(first->shape() == g.shape())) {
      throw ShapeMismatch("attention maps of one scene must share a shape");
    }
    first = &g;
  }
}

}  // namespace detail

/// -sum over positive pairs of soft IoU + sum over negative pairs, with dL/d(map).
inline AttriLossResult attri_loss_with_grad(const MapSet& maps, const AttributePairSet& pairs, double epsilon) {
  detail::check_common_shape(maps, pairs);
  AttriLossResult out;
  auto accumulate = [&](const std::string& word, const Grid& g, double sign) {
    auto [it, inserted] = out.gradient.try_emplace(word, Grid(g.height, g.width));
    for (std::size_t i = 0; i < g.size(); ++i) it->second.values[i] += sign * g.values[i];
  };
  for (const bool positive : {true, false}) {
    const double sign = positive ? -1.0 : 1.0;
    for (const auto& p : positive ? pairs.positive : pairs.negative) {
      const auto& a = detail::lookup(maps, p.attribute);
      const auto& b = detail::lookup(maps, p.object);
      const auto r = soft_iou_with_grad(a.values, b.values, epsilon);
      out.loss += sign * r.value;
      out.pair_iou.push_back({p, positive, r.value});
      accumulate(p.attribute, r.d_a, sign);
      accumulate(p.object, r.d_b, sign);
    }
  }
  return out;
}

inline double attri_loss(const MapSet& maps, const AttributePairSet& pairs, double epsilon) {
  detail::check_common_shape(maps, pairs);
  double loss = 0.0;
  for (const auto& p : pairs.positive) {
    loss -= soft_iou(detail::lookup(maps, p.attribute), detail::lookup(maps, p.object), epsilon);
  }
  for (const auto& p : pairs.negative) {
    loss += soft_iou(detail::lookup(maps, p.attribute), detail::lookup(maps, p.object), epsilon);
  }
  return loss;
}

}  // namespace attri
