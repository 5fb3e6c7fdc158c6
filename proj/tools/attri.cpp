// attri: benchmark generation, validation, guided toy runs, scoring and reports.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attri/cli/commands.hpp"

int main(int argc, char** argv) {
  using namespace attri::cli;
  CLI::App app{"AttriLoss guidance and AttriStory benchmark tools"};
  app.require_subcommand(1);

  GenBenchmarkOptions gen;
  auto* g = app.add_subcommand("gen-benchmark", "generate and validate benchmark stories");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--quota", gen.quota, "stories per style")->capture_default_str();
  g->add_option("--style", gen.styles, "restrict to these styles (repeatable)");
  g->add_option("--client", gen.client, "stub | scripted:<replies.json>")->capture_default_str();
  g->add_option("--template", gen.instruction_template, "instruction template file");
  g->add_option("--seed", gen.seed, "base seed")->capture_default_str();
  g->add_option("--max-retries", gen.max_retries, "repair attempts per story")->capture_default_str();
  g->add_option("--jobs", gen.jobs, "worker threads")->capture_default_str();

  ValidateOptions val;
  auto* v = app.add_subcommand("validate", "check a benchmark against the story invariants");
  v->add_option("--benchmark", val.benchmark, "benchmark directory or manifest")->required();
  v->add_option("--lexicon", val.lexicon, "attribute lexicon JSON");
  v->add_flag("--stats", val.stats, "print dataset statistics");

  RunOptions run;
  std::uint64_t run_seed = 0;
  auto* r = app.add_subcommand("run", "guided generation over a benchmark");
  r->add_option("--benchmark", run.benchmark, "benchmark directory or manifest")->required();
  r->add_option("--out", run.out, "run directory")->required();
  r->add_option("--backend", run.backend, "denoiser backend (default toy)");
  r->add_option("--config", run.config, "guidance config JSON");
  auto* seed_opt = r->add_option("--seed", run_seed, "base seed");
  r->add_option("--method", run.method, "method label for reports");
  r->add_option("--jobs", run.jobs, "worker threads")->capture_default_str();
  r->add_flag("--no-guidance", run.no_guidance, "disable guidance (baseline)");
  r->add_flag("--dump-maps", run.dump_maps, "export final per-word attention maps");

  ScoreOptions score;
  auto* s = app.add_subcommand("score", "score a run directory");
  s->add_option("--run", score.run, "run directory")->required();
  s->add_option("--out", score.out, "report directory")->required();
  s->add_option("--scorer", score.scorer, "scorer name")->capture_default_str();
  s->add_option("--method", score.method, "method label (overrides the run manifest)");
  s->add_option("--merge", score.merge, "existing report.json to extend");
  s->add_option("--diagnostics", score.diagnostics, "per-pair IoU trajectory CSV");
  s->add_flag("--negative", score.negative, "also score negative pairs");
  s->add_option("--jobs", score.jobs, "worker threads")->capture_default_str();

  ReportOptions rep;
  auto* p = app.add_subcommand("report", "static HTML summary of score files");
  p->add_option("inputs", rep.inputs, "report.json files");
  p->add_option("--out", rep.out, "HTML file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (*g) return cmd_gen_benchmark(gen, std::cout, std::cerr);
  if (*v) return cmd_validate(val, std::cout, std::cerr);
  if (*r) {
    if (*seed_opt) run.seed = run_seed;
    return cmd_run(run, std::cout, std::cerr);
  }
  if (*s) return cmd_score(score, std::cout, std::cerr);
  return cmd_report(rep, std::cout, std::cerr);
}
