#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attri/attention.hpp"
#include "attri/evaluation/image.hpp"
#include "attri/evaluation/scorer.hpp"
#include "attri/text.hpp"

namespace attri::eval {

using Json = nlohmann::ordered_json;

inline constexpr std::string_view kReportFormat = "attristory-report/1";
inline constexpr std::array<std::string_view, 4> kColumns = {"VQA-Score", "CLIP-T", "CLIP-I", "DreamSim"};

/// "Is the {object} {attribute}?"
inline std::string question_from_pair(const AttributePair& pair) {
  const auto attr = text::trim(pair.attribute);
  const auto obj = text::trim(pair.object);
  if (attr.empty() || obj.empty()) throw ConfigError("question needs a non-empty attribute and object");
  return "Is the " + std::string(obj) + " " + std::string(attr) + "?";
}

struct SceneResult {
  std::string story_id;
  int scene = 0;  // 1-based
  std::filesystem::path image;
  std::string prompt;
  AttributePairSet pairs;
};

struct SceneScores {
  std::string story_id;
  int scene = 0;
  std::string image;  // as recorded in the run manifest
  double vqa = 0.0;
  double clip_t = 0.0;
  std::optional<double> vqa_negative;  // diagnostic: yes-probability on negative pairs
};

namespace detail {

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline std::string scene_context(const SceneResult& r) {
  return "story " + r.story_id + " scene " + std::to_string(r.scene);
}

}  // namespace detail

template <ScorerContract S>
SceneScores score_scene(const SceneResult& result, const S& scorer, bool negative_diagnostics = false) {
  const auto image = load_image(result.image);
  if (result.pairs.positive.empty()) throw ScoringError(detail::scene_context(result) + ": no positive pairs");
  SceneScores out{result.story_id, result.scene, result.image.generic_string(), 0.0, 0.0, std::nullopt};
  try {
    std::vector<double> yes;
    for (const auto& p : result.pairs.positive) {
      yes.push_back(checked_score(scorer.vqa_yes_probability(image, question_from_pair(p)), 0.0, 1.0, "vqa"));
    }
    out.vqa = detail::mean(yes);
    out.clip_t = checked_score(scorer.text_alignment(image, result.prompt), -1.0, 1.0, "text alignment");
    if (negative_diagnostics && !result.pairs.negative.empty()) {
      std::vector<double> neg;
      for (const auto& p : result.pairs.negative) {
        neg.push_back(checked_score(scorer.vqa_yes_probability(image, question_from_pair(p)), 0.0, 1.0, "vqa"));
      }
      out.vqa_negative = detail::mean(neg);
    }
  } catch (const ImageLoadError&) {
    throw;
  } catch (const std::exception& e) {
    throw ScoringError(detail::scene_context(result) + ": " + e.what());
  }
  return out;
}

struct ConsistencyScores {
  double clip_i = 0.0;
  double dreamsim = 0.0;
  int pairs = 0;
};

/// Mean similarity over all unordered image pairs, n(n-1)/2 scorer calls per metric.
template <ScorerContract S>
ConsistencyScores score_story_consistency(const std::vector<Image>& images, const S& scorer) {
  if (images.size() < 2) throw ScoringError("consistency needs at least two images, got " + std::to_string(images.size()));
  std::vector<double> clip, dream;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t j = i + 1; j < images.size(); ++j) {
      clip.push_back(checked_score(scorer.image_similarity(images[i], images[j]), -1.0, 1.0, "image similarity"));
      dream.push_back(checked_score(scorer.perceptual_similarity(images[i], images[j]), 0.0, 1.0,
                                    "perceptual similarity"));
    }
  }
  return {detail::mean(clip), detail::mean(dream), static_cast<int>(clip.size())};
}

struct MetricSummary {
  double mean = 0.0;
  std::size_t count = 0;
};

struct StoryRow {
  std::string story_id;
  double vqa = 0.0;
  double clip_t = 0.0;
  double clip_i = 0.0;
  double dreamsim = 0.0;
  std::optional<double> vqa_negative;
  std::vector<SceneScores> scenes;
};

struct MetricReport {
  std::string method;
  std::string scorer;
  std::string run_dir;
  std::vector<StoryRow> rows;  // sorted by story id
  MetricSummary vqa, clip_t, clip_i, dreamsim;
  std::optional<MetricSummary> vqa_negative;
};

class IncompleteStory : public Error {
 public:
  using Error::Error;
};

/// Per-story means over scenes joined with consistency scores, then benchmark means over stories.
inline MetricReport aggregate_report(const std::vector<SceneScores>& scene_scores,
                                     const std::map<std::string, ConsistencyScores>& story_scores,
                                     std::string method, std::string scorer_identity, int scenes_per_story = 5) {
  std::map<std::string, std::map<int, const SceneScores*>> by_story;
  std::vector<std::string> problems;
  for (const auto& s : scene_scores) {
    if (!by_story[s.story_id].emplace(s.scene, &s).second) {
      problems.push_back("story " + s.story_id + ": scene " + std::to_string(s.scene) + " scored twice");
    }
  }
  for (const auto& [id, c] : story_scores) by_story[id];

  MetricReport report;
  report.method = std::move(method);
  report.scorer = std::move(scorer_identity);
  for (const auto& [id, scenes] : by_story) {
    std::vector<int> missing;
    for (int k = 1; k <= scenes_per_story; ++k) {
      if (!scenes.count(k)) missing.push_back(k);
    }
    std::string problem;
    if (!missing.empty()) {
      problem = "missing scenes";
      for (int k : missing) problem += " " + std::to_string(k);
    }
    if (!story_scores.count(id)) problem += std::string(problem.empty() ? "" : "; ") + "missing consistency scores";
    if (!problem.empty()) {
      problems.push_back("story " + id + ": " + problem);
      continue;
    }
    StoryRow row;
    row.story_id = id;
    std::vector<double> vqa, clip_t, neg;
    for (const auto& [k, s] : scenes) {
      vqa.push_back(s->vqa);
      clip_t.push_back(s->clip_t);
      if (s->vqa_negative) neg.push_back(*s->vqa_negative);
      row.scenes.push_back(*s);
    }
    row.vqa = detail::mean(vqa);
    row.clip_t = detail::mean(clip_t);
    if (!neg.empty()) row.vqa_negative = detail::mean(neg);
    row.clip_i = story_scores.at(id).clip_i;
    row.dreamsim = story_scores.at(id).dreamsim;
    report.rows.push_back(std::move(row));
  }
  if (!problems.empty()) {
    std::string msg = "incomplete stories:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw IncompleteStory(msg);
  }

  auto summarize = [&](auto field) {
    std::vector<double> v;
    for (const auto& r : report.rows) v.push_back(field(r));
    return MetricSummary{detail::mean(v), v.size()};
  };
  report.vqa = summarize([](const StoryRow& r) { return r.vqa; });
  report.clip_t = summarize([](const StoryRow& r) { return r.clip_t; });
  report.clip_i = summarize([](const StoryRow& r) { return r.clip_i; });
  report.dreamsim = summarize([](const StoryRow& r) { return r.dreamsim; });
  std::vector<double> neg;
  for (const auto& r : report.rows) {
    if (r.vqa_negative) neg.push_back(*r.vqa_negative);
  }
  if (!neg.empty()) report.vqa_negative = MetricSummary{detail::mean(neg), neg.size()};
  return report;
}

/// Six decimals keeps reports byte-stable across platforms' last-bit differences.
inline double round6(double v) {
  const double r = std::round(v * 1e6) / 1e6;
  return r == 0.0 ? 0.0 : r;
}

inline Json report_metadata() {
  Json m;
  m["vqa_averaging"] = "mean over positive-pair questions per scene, then mean over scenes per story, then mean over stories";
  m["clip_i_pairs"] = "all unordered image pairs within a story";
  m["dreamsim_orientation"] = "similarity, higher is more similar";
  m["vqa_negative"] = "diagnostic only: yes-probability on negative-pair questions, lower is better";
  return m;
}

inline Json to_json(const MetricReport& r) {
  Json j;
  j["method"] = r.method;
  j["scorer"] = r.scorer;
  j["run_dir"] = r.run_dir;
  auto summary = [](const MetricSummary& s) { return Json{{"mean", round6(s.mean)}, {"count", s.count}}; };
  j["aggregate"]["vqa_score"] = summary(r.vqa);
  j["aggregate"]["clip_t"] = summary(r.clip_t);
  j["aggregate"]["clip_i"] = summary(r.clip_i);
  j["aggregate"]["dreamsim"] = summary(r.dreamsim);
  if (r.vqa_negative) j["aggregate"]["vqa_negative"] = summary(*r.vqa_negative);
  j["stories"] = Json::array();
  for (const auto& row : r.rows) {
    Json s;
    s["story_id"] = row.story_id;
    s["vqa_score"] = round6(row.vqa);
    s["clip_t"] = round6(row.clip_t);
    s["clip_i"] = round6(row.clip_i);
    s["dreamsim"] = round6(row.dreamsim);
    if (row.vqa_negative) s["vqa_negative"] = round6(*row.vqa_negative);
    s["scenes"] = Json::array();
    for (const auto& sc : row.scenes) {
      Json o;
      o["scene"] = sc.scene;
      o["image"] = sc.image;
      o["vqa_score"] = round6(sc.vqa);
      o["clip_t"] = round6(sc.clip_t);
      if (sc.vqa_negative) o["vqa_negative"] = round6(*sc.vqa_negative);
      s["scenes"].push_back(std::move(o));
    }
    j["stories"].push_back(std::move(s));
  }
  return j;
}

/// A report file holds one or more methods side by side.
inline Json report_document(const std::vector<MetricReport>& reports) {
  Json j;
  j["format"] = kReportFormat;
  j["metadata"] = report_metadata();
  j["methods"] = Json::array();
  for (const auto& r : reports) j["methods"].push_back(to_json(r));
  return j;
}

inline MetricReport report_from_json(const Json& j) {
  try {
    MetricReport r;
    r.method = j.at("method").get<std::string>();
    r.scorer = j.at("scorer").get<std::string>();
    r.run_dir = j.value("run_dir", "");
    auto summary = [](const Json& s) { return MetricSummary{s.at("mean").get<double>(), s.at("count").get<std::size_t>()}; };
    const auto& a = j.at("aggregate");
    r.vqa = summary(a.at("vqa_score"));
    r.clip_t = summary(a.at("clip_t"));
    r.clip_i = summary(a.at("clip_i"));
    r.dreamsim = summary(a.at("dreamsim"));
    if (a.contains("vqa_negative")) r.vqa_negative = summary(a.at("vqa_negative"));
    for (const auto& s : j.at("stories")) {
      StoryRow row;
      row.story_id = s.at("story_id").get<std::string>();
      row.vqa = s.at("vqa_score").get<double>();
      row.clip_t = s.at("clip_t").get<double>();
      row.clip_i = s.at("clip_i").get<double>();
      row.dreamsim = s.at("dreamsim").get<double>();
      if (s.contains("vqa_negative")) row.vqa_negative = s.at("vqa_negative").get<double>();
      for (const auto& o : s.at("scenes")) {
        SceneScores sc{row.story_id, o.at("scene").get<int>(), o.at("image").get<std::string>(),
                       o.at("vqa_score").get<double>(), o.at("clip_t").get<double>(), std::nullopt};
        if (o.contains("vqa_negative")) sc.vqa_negative = o.at("vqa_negative").get<double>();
        row.scenes.push_back(std::move(sc));
      }
      r.rows.push_back(std::move(row));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
}

inline std::vector<MetricReport> reports_from_document(const Json& j) {
  if (!j.is_object() || j.value("format", "") != kReportFormat || !j.contains("methods")) {
    throw ConfigError("not an attristory report document");
  }
  std::vector<MetricReport> out;
  for (const auto& m : j.at("methods")) out.push_back(report_from_json(m));
  return out;
}

/// Adds `more` to `base`; a method label already present is replaced in place.
inline std::vector<MetricReport> merge_reports(std::vector<MetricReport> base, const std::vector<MetricReport>& more) {
  for (const auto& m : more) {
    auto it = std::find_if(base.begin(), base.end(), [&](const MetricReport& r) { return r.method == m.method; });
    if (it != base.end()) {
      *it = m;
    } else {
      base.push_back(m);
    }
  }
  return base;
}

/// Plain-text method comparison table, one row per method, four decimals.
inline std::string render_table(const std::vector<MetricReport>& reports) {
  std::vector<std::array<std::string, 5>> rows;
  rows.push_back({"Method", std::string(kColumns[0]), std::string(kColumns[1]), std::string(kColumns[2]),
                  std::string(kColumns[3])});
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", round6(v));
    return std::string(buf);
  };
  for (const auto& r : reports) {
    rows.push_back({r.method, fmt(r.vqa.mean), fmt(r.clip_t.mean), fmt(r.clip_i.mean), fmt(r.dreamsim.mean)});
  }
  std::array<std::size_t, 5> width{};
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < 5; ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  auto line = [&](const std::array<std::string, 5>& row) {
    for (std::size_t c = 0; c < 5; ++c) {
      if (c > 0) out += " | ";
      const auto pad = std::string(width[c] - row[c].size(), ' ');
      out += c == 0 ? row[c] + pad : pad + row[c];
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += '\n';
  };
  line(rows[0]);
  for (std::size_t c = 0; c < 5; ++c) {
    if (c > 0) out += "-+-";
    out += std::string(width[c], '-');
  }
  out += '\n';
  for (std::size_t i = 1; i < rows.size(); ++i) line(rows[i]);
  return out;
}

}  // namespace attri::eval
