#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "attri/attention.hpp"
#include "attri/attristory/generate.hpp"
#include "attri/attristory/lexicon.hpp"
#include "attri/attristory/story.hpp"
#include "attri/attristory/validate.hpp"
#include "attri/evaluation/image.hpp"
#include "attri/evaluation/report.hpp"
#include "attri/evaluation/run_manifest.hpp"
#include "attri/evaluation/scorer.hpp"
#include "attri/guidance.hpp"
#include "attri/text.hpp"
#include "attri/toy_denoiser.hpp"

namespace attri::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

inline constexpr const char* kModelCacheEnv = "ATTRI_MODEL_CACHE";

/// Raised for bad invocations: unknown backend or scorer, missing inputs, conflicting flags.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Maps library errors onto the exit-code contract: 2 for usage and I/O, 1 for everything else.
inline int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const story::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

/// Runs `work(i)` for i in [0, n) on up to `jobs` threads.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& work) {
  const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) work(i);
    });
  }
  for (auto& t : pool) t.join();
}

inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------------------------
// gen-benchmark

struct GenBenchmarkOptions {
  fs::path out;
  int quota = 20;                   // stories per style
  std::vector<std::string> styles;  // empty = all ten
  std::string client = "stub";      // "stub" or "scripted:<responses.json>"
  fs::path instruction_template;    // empty = built-in
  std::uint64_t seed = 0;
  int max_retries = 2;
  int jobs = 1;
};

inline int cmd_gen_benchmark(const GenBenchmarkOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.out.empty()) throw UsageError("--out is required");
    if (o.quota < 0) throw UsageError("--quota must be non-negative");
    std::vector<std::string> styles;
    for (const auto& s : o.styles.empty() ? std::vector<std::string>(story::kStyles.begin(), story::kStyles.end()) : o.styles) {
      const auto c = story::canonical_style(s);
      if (c.empty()) throw UsageError("unknown style \"" + s + "\"");
      styles.push_back(c);
    }
    const std::string tmpl = o.instruction_template.empty() ? std::string(story::kDefaultInstructionTemplate)
                                                            : story::read_file(o.instruction_template);

    struct Job {
      std::string id, style;
      std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (const auto& style : styles) {
      for (int i = 1; i <= o.quota; ++i) {
        char num[16];
        std::snprintf(num, sizeof num, "%03d", i);
        const auto id = text::slug(style) + "-" + num;
        jobs.push_back({id, style, o.seed ^ text::fnv1a(id)});
      }
    }

    std::error_code ec;
    fs::create_directories(o.out / "stories", ec);
    if (ec || !fs::is_directory(o.out / "stories")) throw IoError("cannot create output directory " + o.out.string());

    std::vector<std::optional<story::Story>> results(jobs.size());
    std::vector<std::string> failures(jobs.size());
    story::GenerationOptions gen;
    gen.max_retries = o.max_retries;
    const story::Lexicon lexicon;
    auto attempt = [&](auto& client, std::size_t i) {
      auto opts = gen;
      opts.id = jobs[i].id;
      try {
        results[i] = story::generate_story(client, jobs[i].style, tmpl, jobs[i].seed, opts, lexicon).story;
      } catch (const story::ValidationFailure& e) {
        failures[i] = e.what();
      } catch (const story::GenerationFailure& e) {
        failures[i] = e.what();
      }
    };
    if (o.client == "stub") {
      const story::SyntheticStoryWriter writer;
      parallel_for(jobs.size(), o.jobs, [&](std::size_t i) {
        auto w = writer;
        attempt(w, i);
      });
    } else if (o.client.rfind("scripted:", 0) == 0) {
      const auto doc = Json::parse(story::read_file(o.client.substr(9)), nullptr, false);
      if (!doc.is_array()) throw UsageError("scripted client file must be a JSON array of reply strings");
      std::vector<std::string> replies;
      for (const auto& r : doc) replies.push_back(r.is_string() ? r.get<std::string>() : r.dump());
      story::ScriptedClient client(std::move(replies));
      for (std::size_t i = 0; i < jobs.size(); ++i) attempt(client, i);
    } else {
      throw UsageError("unknown client \"" + o.client + "\"");
    }

    story::Manifest manifest;
    std::size_t failed = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (!results[i]) {
        ++failed;
        err << jobs[i].id << ": " << failures[i] << "\n";
        continue;
      }
      const auto rel = "stories/" + jobs[i].id + ".json";
      story::write_file(o.out / rel, story::serialize(*results[i]));
      manifest.stories.push_back(rel);
    }
    story::write_file(o.out / "manifest.json", story::serialize(manifest));
    out << "wrote " << manifest.stories.size() << " stories to " << o.out.string();
    if (failed) out << "; " << failed << " failed";
    out << "\n";
    return failed ? kFailure : kOk;
  });
}

// ---------------------------------------------------------------------------------------------
// validate

struct ValidateOptions {
  fs::path benchmark;
  fs::path lexicon;  // empty = built-in
  bool stats = false;
};

inline int cmd_validate(const ValidateOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.benchmark.empty()) throw UsageError("--benchmark is required");
    const auto lexicon = o.lexicon.empty() ? story::Lexicon() : story::Lexicon::load(o.lexicon);
    const auto bench = story::load_benchmark(o.benchmark);
    std::size_t count = 0;
    for (const auto& s : bench.stories) {
      for (const auto& v : story::validate_story(s, lexicon)) {
        out << s.id << ": " << story::to_string(v) << "\n";
        ++count;
      }
    }
    if (o.stats) out << story::to_json(story::compute_stats(bench.stories, lexicon)).dump(2) << "\n";
    err << bench.stories.size() << " stories, " << count << " violations\n";
    return count ? kFailure : kOk;
  });
}

// ---------------------------------------------------------------------------------------------
// run

/// Registers the built-in toy backend. Options: {"prompts": [...], "seed": n}.
inline void register_builtin_backends() {
  auto& reg = BackendRegistry::instance();
  if (reg.contains("toy")) return;
  reg.add("toy", [](const nlohmann::json& options) -> std::unique_ptr<Denoiser> {
    toy::ToyConfig config;
    config.seed = options.value("seed", std::uint64_t{0});
    const auto prompts = options.value("prompts", std::vector<std::string>{});
    config.vocab = toy::vocab_for_prompts(prompts, config.latent.channels, config.seed);
    return std::make_unique<toy::ToyDenoiser>(std::move(config));
  });
}

struct RunOptions {
  fs::path benchmark;
  fs::path out;
  std::string backend;            // flag; falls back to config "backend", then "toy"
  fs::path config;
  std::optional<std::uint64_t> seed;
  std::string method;
  int jobs = 1;
  bool no_guidance = false;
  bool dump_maps = false;
};

/// Latent preview: the first three channels, each min-max scaled, upsampled `scale` times.
inline std::string latent_png(const Tensor3& z, std::uint32_t scale = 16) {
  const auto& s = z.shape;
  const auto w = static_cast<std::uint32_t>(s.width) * scale;
  const auto h = static_cast<std::uint32_t>(s.height) * scale;
  std::vector<unsigned char> rgb(std::size_t{3} * w * h);
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t src = std::min(c, s.channels - 1);
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t i = 0; i < s.height * s.width; ++i) {
      lo = std::min(lo, z.values[src * s.height * s.width + i]);
      hi = std::max(hi, z.values[src * s.height * s.width + i]);
    }
    for (std::uint32_t y = 0; y < h; ++y) {
      for (std::uint32_t x = 0; x < w; ++x) {
        const double v = z.at(src, y / scale, x / scale);
        const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
        rgb[(std::size_t{y} * w + x) * 3 + c] = static_cast<unsigned char>(std::lround(255.0 * t));
      }
    }
  }
  return eval::encode_png(w, h, rgb);
}

inline std::string latent_json(const Tensor3& z) {
  Json j;
  j["shape"] = {z.shape.channels, z.shape.height, z.shape.width};
  j["values"] = z.values;
  return j.dump() + "\n";
}

inline int cmd_run(const RunOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.benchmark.empty()) throw UsageError("--benchmark is required");
    if (o.out.empty()) throw UsageError("--out is required");
    register_builtin_backends();

    nlohmann::ordered_json file = nlohmann::ordered_json::object();
    if (!o.config.empty()) {
      file = nlohmann::ordered_json::parse(story::read_file(o.config), nullptr, false);
      if (file.is_discarded() || !file.is_object()) throw ConfigError(o.config.string() + ": not a JSON object");
    }
    const std::string backend_name = !o.backend.empty() ? o.backend : file.value("backend", std::string("toy"));
    if (!BackendRegistry::instance().contains(backend_name)) throw UsageError("unknown backend \"" + backend_name + "\"");
    const std::uint64_t seed = o.seed ? *o.seed : file.value("seed", std::uint64_t{0});
    auto config = guidance_config_from_json(file);
    if (o.no_guidance) config.enabled = false;

    const auto bench = story::load_benchmark(o.benchmark);
    std::vector<eval::RunScene> scenes;
    std::vector<std::string> prompts;
    for (const auto& s : bench.stories) {
      for (std::size_t k = 0; k < s.scenes.size(); ++k) {
        eval::RunScene rs;
        rs.story_id = s.id;
        rs.scene = static_cast<int>(k) + 1;
        rs.prompt = story::scene_prompt(s, k);
        rs.pairs = s.scenes[k].pairs();
        const auto stem = s.id + "/scene_" + std::to_string(rs.scene);
        rs.image = stem + ".png";
        rs.latent = stem + ".latent.json";
        rs.trace = stem + ".trace.jsonl";
        prompts.push_back(rs.prompt);
        scenes.push_back(std::move(rs));
      }
    }

    const auto backend = BackendRegistry::instance().create(backend_name, {{"prompts", prompts}, {"seed", seed}});
    const bool explicit_target = file.contains("aggregation") && file["aggregation"].contains("target_resolution");
    if (!explicit_target && backend->native_resolution()) config.aggregation.target = *backend->native_resolution();

    std::error_code ec;
    fs::create_directories(o.out, ec);
    if (ec || !fs::is_directory(o.out)) throw IoError("cannot create output directory " + o.out.string());

    parallel_for(scenes.size(), backend->concurrent() ? o.jobs : 1, [&](std::size_t i) {
      auto& rs = scenes[i];
      const std::uint64_t scene_seed = (seed ^ text::fnv1a(rs.story_id)) + static_cast<std::uint64_t>(rs.scene);
      try {
        const auto run = run_guided_denoise(*backend, rs.prompt, rs.pairs, config, scene_seed);
        story::write_file(o.out / rs.image, latent_png(run.final_state.tensor));
        story::write_file(o.out / rs.latent, latent_json(run.final_state.tensor));
        story::write_file(o.out / rs.trace, to_jsonl(run.trace));
        if (o.dump_maps && !rs.pairs.empty()) {
          const auto spans = pair_spans(*backend, rs.prompt, rs.pairs);
          const auto att = backend->predict(run.final_state, rs.prompt).attention;
          const auto maps = aggregate_attention(att, spans, config.aggregation);
          const auto dir = o.out / (rs.story_id + "/scene_" + std::to_string(rs.scene) + ".maps");
          for (const auto& [word, m] : maps) {
            const auto stem = text::slug(word);
            story::write_file(dir / (stem + ".pfm"), eval::encode_pfm(m.values));
            Json side;
            side["word"] = word;
            side["resolution"] = {m.values.height, m.values.width};
            side["timestep_index"] = run.final_state.timestep_index;
            side["policy"] = to_json(config)["aggregation"];
            story::write_file(dir / (stem + ".json"), side.dump(2) + "\n");
          }
        }
      } catch (const std::exception& e) {
        rs.status = "failed";
        rs.error = e.what();
      }
    });

    eval::RunManifest manifest;
    manifest.benchmark = o.benchmark.generic_string();
    manifest.backend = backend_name;
    manifest.method = !o.method.empty() ? o.method : (config.enabled ? "+ AttriLoss" : backend_name);
    manifest.seed = seed;
    manifest.guidance_enabled = config.enabled;
    manifest.guidance = to_json(config);
    manifest.scenes = std::move(scenes);
    story::write_file(o.out / "manifest.json", eval::to_json(manifest).dump(2) + "\n");

    std::size_t failed = 0;
    for (const auto& s : manifest.scenes) {
      if (s.status != "ok") {
        ++failed;
        err << s.story_id << " scene " << s.scene << ": " << s.error << "\n";
      }
    }
    out << "ran " << manifest.scenes.size() << " scenes on " << backend_name << " (" << failed << " failed)\n";
    return failed ? kFailure : kOk;
  });
}

// ---------------------------------------------------------------------------------------------
// score

struct ScoreOptions {
  fs::path run;
  fs::path out;
  std::string scorer = "stub";
  std::string method;  // overrides the manifest's label
  fs::path merge;      // existing report.json whose methods are kept alongside this one
  fs::path diagnostics;
  bool negative = false;
  int jobs = 1;
};

inline void write_diagnostics(const fs::path& path, const fs::path& run_dir, const eval::RunManifest& m) {
  std::string csv = "story_id,scene,timestep_index,attribute,object,polarity,iou\n";
  for (const auto& s : m.scenes) {
    if (s.trace.empty() || !fs::exists(run_dir / s.trace)) continue;
    for (const auto& r : trace_from_jsonl(story::read_file(run_dir / s.trace)).records) {
      for (const auto& p : r.pair_iou) {
        csv += s.story_id + "," + std::to_string(s.scene) + "," + std::to_string(r.timestep_index) + "," +
               p.pair.attribute + "," + p.pair.object + "," + (p.positive ? "positive" : "negative") + "," +
               fixed(p.iou) + "\n";
      }
    }
  }
  story::write_file(path, csv);
}

inline int cmd_score(const ScoreOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.run.empty()) throw UsageError("--run is required");
    if (o.out.empty()) throw UsageError("--out is required");
    const auto& reg = eval::ScorerRegistry::instance();
    if (!reg.contains(o.scorer)) throw UsageError("unknown scorer \"" + o.scorer + "\"");
    const char* cache = std::getenv(kModelCacheEnv);
    const auto scorer = reg.create(o.scorer, cache ? cache : "");

    const auto manifest = eval::load_run_manifest(o.run);
    if (manifest.scenes.empty()) {
      err << "run has no scenes\n";
      return kFailure;
    }

    std::vector<std::optional<eval::SceneScores>> scored(manifest.scenes.size());
    std::vector<std::optional<eval::Image>> images(manifest.scenes.size());
    std::vector<std::string> problems(manifest.scenes.size());
    parallel_for(manifest.scenes.size(), scorer->concurrent() ? o.jobs : 1, [&](std::size_t i) {
      const auto& s = manifest.scenes[i];
      if (s.status != "ok") {
        problems[i] = "generation failed: " + s.error;
        return;
      }
      try {
        eval::SceneResult r{s.story_id, s.scene, o.run / s.image, s.prompt, s.pairs};
        auto sc = eval::score_scene(r, *scorer, o.negative);
        sc.image = s.image;
        scored[i] = std::move(sc);
        images[i] = eval::load_image(o.run / s.image);
      } catch (const std::exception& e) {
        problems[i] = e.what();
      }
    });

    std::map<std::string, std::vector<std::size_t>> stories;
    for (std::size_t i = 0; i < manifest.scenes.size(); ++i) stories[manifest.scenes[i].story_id].push_back(i);
    std::vector<eval::SceneScores> scene_scores;
    std::map<std::string, eval::ConsistencyScores> story_scores;
    std::size_t incomplete = 0;
    for (const auto& [id, idx] : stories) {
      std::vector<std::string> bad;
      for (auto i : idx) {
        if (!problems[i].empty()) bad.push_back("scene " + std::to_string(manifest.scenes[i].scene) + ": " + problems[i]);
      }
      std::set<int> present;
      for (auto i : idx) present.insert(manifest.scenes[i].scene);
      for (int k = 1; k <= story::kSceneCount; ++k) {
        if (!present.count(k)) bad.push_back("scene " + std::to_string(k) + ": not in the run manifest");
      }
      if (!bad.empty()) {
        ++incomplete;
        for (const auto& b : bad) err << id << " " << b << "\n";
        continue;
      }
      std::vector<eval::Image> imgs;
      for (auto i : idx) {
        scene_scores.push_back(*scored[i]);
        imgs.push_back(*images[i]);
      }
      story_scores[id] = eval::score_story_consistency(imgs, *scorer);
    }
    if (story_scores.empty()) {
      err << "no complete story to report\n";
      return kFailure;
    }

    const auto method = !o.method.empty() ? o.method : (!manifest.method.empty() ? manifest.method : manifest.backend);
    auto report = eval::aggregate_report(scene_scores, story_scores, method, scorer->identity(), story::kSceneCount);
    std::error_code ec;
    fs::create_directories(o.out, ec);
    if (ec || !fs::is_directory(o.out)) throw IoError("cannot create output directory " + o.out.string());
    report.run_dir = fs::weakly_canonical(fs::absolute(o.run))
                         .lexically_relative(fs::weakly_canonical(fs::absolute(o.out)))
                         .generic_string();

    std::vector<eval::MetricReport> reports;
    if (!o.merge.empty()) {
      const auto doc = nlohmann::ordered_json::parse(story::read_file(o.merge), nullptr, false);
      if (doc.is_discarded()) throw ConfigError(o.merge.string() + ": not valid JSON");
      reports = eval::reports_from_document(doc);
    }
    reports = eval::merge_reports(std::move(reports), {report});
    story::write_file(o.out / "report.json", eval::report_document(reports).dump(2) + "\n");
    story::write_file(o.out / "report.txt", eval::render_table(reports));
    if (!o.diagnostics.empty()) write_diagnostics(o.diagnostics, o.run, manifest);
    out << eval::render_table(reports);
    if (incomplete) {
      err << incomplete << " incomplete stories left out of the report\n";
      return kFailure;
    }
    return kOk;
  });
}

// ---------------------------------------------------------------------------------------------
// report

struct ReportOptions {
  std::vector<fs::path> inputs;
  fs::path out;  // html file
};

inline std::string html_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline int cmd_report(const ReportOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.inputs.empty()) throw UsageError("at least one score file is required");
    if (o.out.empty()) throw UsageError("--out is required");
    struct Source {
      fs::path dir;
      eval::MetricReport report;
    };
    std::vector<Source> sources;
    for (const auto& in : o.inputs) {
      const auto doc = nlohmann::ordered_json::parse(story::read_file(in), nullptr, false);
      if (doc.is_discarded()) throw ConfigError(in.string() + ": not valid JSON");
      try {
        for (auto& r : eval::reports_from_document(doc)) sources.push_back({in.parent_path(), std::move(r)});
      } catch (const ConfigError& e) {
        throw ConfigError(in.string() + ": " + e.what());
      }
    }

    std::vector<eval::MetricReport> reports;
    for (const auto& s : sources) reports = eval::merge_reports(std::move(reports), {s.report});
    const auto page_dir = fs::absolute(o.out).parent_path();
    std::size_t missing = 0;
    std::string body;
    for (const auto& s : sources) {
      body += "<h2>" + html_escape(s.report.method) + "</h2>\n<table class=\"grid\">\n";
      for (const auto& row : s.report.rows) {
        body += "<tr><th>" + html_escape(row.story_id) + "</th>";
        for (const auto& sc : row.scenes) {
          const auto img = fs::absolute(s.dir / s.report.run_dir / sc.image).lexically_normal();
          body += "<td>";
          if (fs::exists(img)) {
            body += "<img src=\"" + html_escape(img.lexically_relative(page_dir).generic_string()) + "\" alt=\"scene " +
                    std::to_string(sc.scene) + "\">";
          } else {
            ++missing;
            body += "<div class=\"missing\">missing: " + html_escape(sc.image) + "</div>";
          }
          body += "<br>VQA " + fixed(sc.vqa, 4) + "</td>";
        }
        body += "</tr>\n";
      }
      body += "</table>\n";
    }

    std::string page =
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>AttriStory results</title>\n<style>\n"
        "body { font-family: sans-serif; margin: 2em; }\n"
        "pre { background: #f4f4f4; padding: 1em; }\n"
        "table.grid td { text-align: center; padding: 4px; font-size: 0.8em; }\n"
        "table.grid img { width: 128px; height: 128px; image-rendering: pixelated; }\n"
        ".missing { width: 128px; height: 128px; background: #ddd; display: flex; align-items: center; }\n"
        "</style>\n</head>\n<body>\n<h1>AttriStory results</h1>\n<pre>" +
        html_escape(eval::render_table(reports)) + "</pre>\n";
    if (missing) page += "<p class=\"warning\">" + std::to_string(missing) + " missing images</p>\n";
    page += body + "</body>\n</html>\n";
    story::write_file(o.out, page);
    out << "wrote " << o.out.string() << " (" << reports.size() << " methods";
    if (missing) out << ", " << missing << " missing images";
    out << ")\n";
    if (missing) err << "warning: " << missing << " missing images\n";
    return kOk;
  });
}

}  // namespace attri::cli
