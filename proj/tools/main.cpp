// Experiment runner CLI: builds synthetic language families, pretrains the
// many-to-many expert, extends it to a new language with imitation or the
// reference regimes, evaluates all directions and emits result tables.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "imitmt/baselines.hpp"
#include "imitmt/corpus.hpp"
#include "imitmt/harness.hpp"
#include "imitmt/hash.hpp"

namespace fs = std::filesystem;
using namespace imitmt;

namespace {

ExperimentPlan load_plan(const std::string& config) {
  if (config.empty()) return default_desk_plan();
  return plan_from_json_file(config);
}

int cmd_family(const std::string& config, uint64_t seed_flag, bool have_seed,
               const std::string& out) {
  FamilySpec spec;
  uint64_t seed = 7;
  if (!config.empty()) {
    spec = family_spec_from_json_file(config, &seed);
  } else {
    ExperimentPlan p = default_desk_plan();
    spec = p.family;
    seed = p.family_seed;
  }
  if (have_seed) seed = seed_flag;
  LanguageFamily fam = make_language_family(spec, seed);
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream f(out + "/family.json", std::ios::binary);
    f << fam.to_json();
  }
  std::cout << "pivot\t" << fam.pivot.code << "\n";
  std::cout << "originals";
  for (const auto& t : fam.originals) std::cout << '\t' << t.code;
  std::cout << "\nnew";
  for (const auto& t : fam.new_langs) std::cout << '\t' << t.code;
  std::cout << "\nlexicon_size\t" << fam.lexicon_size() << "\n";
  std::cout << "seed\t" << seed << "\n";
  return 0;
}

int cmd_pretrain(const std::string& config, uint64_t seed_flag, bool have_seed,
                 const std::string& out) {
  ExperimentPlan plan = load_plan(config);
  Workspace ws = build_workspace(plan, out);
  const uint64_t seed =
      have_seed ? seed_flag : derive_seed(plan.family_seed, "expert-of-plan");
  ExpertTrainConfig cfg;
  cfg.model = plan.model;
  cfg.model.seed = seed;
  cfg.steps = plan.expert_steps;
  cfg.batch_size = plan.expert_batch;
  cfg.lr = plan.expert_lr;
  cfg.seed = seed;
  Model expert = train_expert(ws.family, ws.train, ws.tokenizer, cfg, &ws.direct);
  fs::create_directories(out + "/experts/shared");
  const std::string ckpt = out + "/experts/shared/checkpoint.bin";
  expert.save(ckpt);
  std::cout << "checkpoint\t" << ckpt << "\n";
  std::cout << "param_hash\t" << expert.param_hash() << "\n";
  return 0;
}

int cmd_extend(const std::string& config, const std::string& method_str, uint64_t seed_flag,
               bool have_seed, const std::string& expert_path, const std::string& out) {
  ExperimentPlan plan = load_plan(config);
  const uint64_t seed = have_seed ? seed_flag : plan.seeds.front();
  Workspace ws = build_workspace(plan, out);

  std::string ckpt = expert_path;
  if (ckpt.empty()) ckpt = out + "/experts/shared/checkpoint.bin";
  if (!fs::exists(ckpt))
    throw std::runtime_error("expert checkpoint not found: " + ckpt + " (run pretrain first)");
  Model expert = Model::load(ckpt, ws.tokenizer);
  if (expert.role() != Role::Expert) expert.freeze_expert();

  Method method = method_from_name(method_str);
  ImitRunConfig cfg;
  cfg.k = 0;
  for (const auto& m : plan.methods)
    if (m.method == method) cfg.k = m.k;
  cfg.direction = plan.directions.front();
  cfg.steps = plan.ext_steps;
  cfg.lr = plan.ext_lr;
  cfg.batch_size = plan.ext_batch;
  cfg.beam = plan.ext_beam;
  cfg.seed = seed;
  cfg.weights_mode = plan.weights_mode;

  LanguageWeights weights = plan.weights_mode == WeightsMode::Bleu && method != Method::Finetune
                                ? compute_language_weights(expert, ws.dev, std::max(1, cfg.k),
                                                           plan.eval_beam)
                                : LanguageWeights::uniform(ws.family.originals, std::max(1, cfg.k));

  TrainRunResult run = [&] {
    switch (method) {
      case Method::Finetune: return run_finetune(expert, ws.new_gold, cfg);
      case Method::Imit: return train_imit(expert, ws.new_gold, weights, cfg);
      case Method::OnTheFly: return run_on_the_fly(expert, ws.new_gold, weights, cfg);
    }
    throw std::runtime_error("bad method");
  }();

  const std::string rdir = out + "/extend_" + method_name(method) + "_s" + std::to_string(seed);
  fs::create_directories(rdir);
  run.learner.save(rdir + "/checkpoint.bin");
  write_train_log(rdir + "/train_log.tsv", run.log);
  std::cout << "checkpoint\t" << rdir << "/checkpoint.bin\n";
  std::cout << "expert_hash\t" << expert.param_hash() << "\n";
  std::cout << "learner_hash\t" << run.learner.param_hash() << "\n";
  return 0;
}

int cmd_eval(const std::string& config, const std::string& checkpoint,
             const std::string& directions, const std::string& out) {
  ExperimentPlan plan = load_plan(config);
  Workspace ws = build_workspace(plan, out.empty() ? "imitmt_eval_tmp" : out);
  Model m = Model::load(checkpoint, ws.tokenizer);

  std::vector<std::pair<LanguageTag, LanguageTag>> dirs;
  std::stringstream ss(directions);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t dash = item.find('-');
    if (dash == std::string::npos)
      throw std::runtime_error("bad direction (want src-tgt): " + item);
    dirs.emplace_back(LanguageTag(item.substr(0, dash)), LanguageTag(item.substr(dash + 1)));
  }
  if (dirs.empty()) throw std::runtime_error("no directions given");

  std::cout << "src\ttgt\tbleu\tchrfpp\tcr\totr\tT\n";
  for (const auto& [src, tgt] : dirs) {
    DirectionEval ev = evaluate_direction(m, ws.family, src, tgt, plan.test_size,
                                          plan.family_seed, plan.eval_beam);
    char line[256];
    std::snprintf(line, sizeof(line), "%s\t%s\t%.2f\t%.2f\t%.4f\t%.4f\t%ld\n", src.code.c_str(),
                  tgt.code.c_str(), ev.report.bleu, ev.report.chrfpp, ev.report.cr, ev.report.otr,
                  ev.report.T);
    std::cout << line;
  }
  return 0;
}

int cmd_run(const std::string& config, const std::string& out) {
  ExperimentPlan plan = load_plan(config);
  ResultsTable results = run_experiment(plan, out);
  long failed = 0;
  for (const auto& c : results.cells)
    if (c.failed) ++failed;
  std::cout << "cells\t" << results.cells.size() << "\n";
  std::cout << "trained\t" << results.cells_trained << "\n";
  std::cout << "failed\t" << failed << "\n";
  std::cout << "tables\t" << out << "/table_q1.tsv " << out << "/table_q2.tsv\n";
  return failed == 0 ? 0 : 1;
}

int cmd_report(const std::string& config, const std::string& out, const std::string& style) {
  ExperimentPlan plan = load_plan(config);
  // Rebuild the table from persisted manifests; completed cells are reused.
  ResultsTable results = run_experiment(plan, out);
  const std::string path = emit_tables(results, style, out);
  std::ifstream f(path);
  std::cout << f.rdbuf();
  return 0;
}

int cmd_metrics(const std::string& metric, const std::string& hyp_path,
                const std::string& hyp_b_path, const std::string& ref_path,
                const std::string& src_path, const std::string& family_path,
                const std::string& expected_lang, int iterations, double alpha, uint64_t seed) {
  if (metric == "bleu" || metric == "chrfpp") {
    auto hyps = load_sentences(hyp_path);
    auto refs = load_sentences(ref_path);
    const Scalar v = metric == "bleu" ? corpus_bleu(hyps, refs) : chrf_pp(hyps, refs);
    std::printf("%s\t%.6f\n", metric.c_str(), v);
    std::printf("%s=%.6f\n", metric.c_str(), v);
    return 0;
  }
  if (metric == "cr") {
    auto hyps = load_sentences(hyp_path);
    auto srcs = load_sentences(src_path);
    const Scalar v = copy_ratio(srcs, hyps);
    std::printf("cr\t%.6f\n", v);
    std::printf("cr=%.6f\n", v);
    return 0;
  }
  if (metric == "otr") {
    auto hyps = load_sentences(hyp_path);
    std::ifstream f(family_path);
    if (!f) throw std::runtime_error("cannot open family: " + family_path);
    std::stringstream ss;
    ss << f.rdbuf();
    LanguageFamily fam = LanguageFamily::from_json(ss.str());
    const Scalar v = off_target_ratio(hyps, LanguageTag(expected_lang), fam);
    std::printf("otr\t%.6f\n", v);
    std::printf("otr=%.6f\n", v);
    return 0;
  }
  if (metric == "bootstrap") {
    auto hyps_a = load_sentences(hyp_path);
    auto hyps_b = load_sentences(hyp_b_path);
    auto refs = load_sentences(ref_path);
    BootstrapResult r = bootstrap_significance(hyps_a, hyps_b, refs, iterations, alpha, seed);
    std::printf("p=%g significant=%d\n", r.p, r.significant ? 1 : 0);
    return 0;
  }
  throw std::runtime_error("unknown metric: " + metric);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"imitmt: desk-scale lab for extending a multilingual translation model "
               "to a new language by imitating a frozen expert"};
  app.require_subcommand(1);

  std::string config, out = "imitmt_out";
  uint64_t seed = 0;
  bool have_seed = false;
  app.add_option("--config", config, "plan / family config file (JSON)");
  app.add_option("--out", out, "output directory");
  auto* seed_opt = app.add_option("--seed", seed, "seed override");

  auto* family = app.add_subcommand("family", "build and inspect a language family");
  auto* pretrain = app.add_subcommand("pretrain", "train the expert model");
  auto* extend = app.add_subcommand("extend", "extend the expert to the new language");
  std::string method = "imit";
  std::string expert_path;
  extend->add_option("--method", method, "imit|finetune|on-the-fly")->required();
  extend->add_option("--expert", expert_path, "expert checkpoint path");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on directions");
  std::string checkpoint, directions;
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--directions", directions, "comma list of src-tgt pairs")->required();
  auto* report = app.add_subcommand("report", "emit result tables from a finished run");
  std::string style = "q1";
  report->add_option("--style", style, "q1|q2");
  auto* run = app.add_subcommand("run", "run the full experiment plan");
  auto* metrics = app.add_subcommand("metrics", "standalone metric mode");
  std::string metric, hyp, hyp_b, ref, src, family_file, expected;
  int iterations = 1000;
  double alpha = 0.01;
  metrics->add_option("--metric", metric, "bleu|chrfpp|cr|otr|bootstrap")->required();
  metrics->add_option("--hyp", hyp, "hypothesis file (one sentence per line)");
  metrics->add_option("--hyp-b", hyp_b, "second hypothesis file (bootstrap)");
  metrics->add_option("--ref", ref, "reference file");
  metrics->add_option("--src", src, "source file (cr)");
  metrics->add_option("--family", family_file, "family json (otr)");
  metrics->add_option("--expected", expected, "expected language code (otr)");
  metrics->add_option("--iterations", iterations, "bootstrap iterations");
  metrics->add_option("--alpha", alpha, "significance level");

  try {
    app.parse(argc, argv);
    have_seed = seed_opt->count() > 0;
    if (family->parsed()) return cmd_family(config, seed, have_seed, out);
    if (pretrain->parsed()) return cmd_pretrain(config, seed, have_seed, out);
    if (extend->parsed()) return cmd_extend(config, method, seed, have_seed, expert_path, out);
    if (eval->parsed()) return cmd_eval(config, checkpoint, directions, out);
    if (report->parsed()) return cmd_report(config, out, style);
    if (run->parsed()) return cmd_run(config, out);
    if (metrics->parsed())
      return cmd_metrics(metric, hyp, hyp_b, ref, src, family_file, expected, iterations, alpha,
                         seed_opt->count() > 0 ? seed : 12345);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
