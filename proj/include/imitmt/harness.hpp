#pragma once

#include <map>
#include <string>
#include <vector>

#include "imitmt/baselines.hpp"
#include "imitmt/metrics.hpp"

namespace imitmt {

struct PlanMethod {
  Method method = Method::Finetune;
  int k = 0;  // 0 for finetune
};

/// Full description of one experiment grid: family, corpus sizes, expert and
/// extension training settings, the method x k x direction x seed grid, and
/// the fixed probe set of original pairs used for forgetting.
struct ExperimentPlan {
  FamilySpec family;
  uint64_t family_seed = 7;
  std::vector<long> gold_sizes;  // per original language, declaration order
  long new_gold_size = 2000;
  int tokenizer_vocab = 640;

  ModelConfig model;
  int expert_steps = 3000;
  Scalar expert_lr = 2e-3;
  int expert_batch = 16;

  int ext_steps = 1500;
  Scalar ext_lr = 1e-3;
  int ext_batch = 16;
  int ext_beam = 2;
  WeightsMode weights_mode = WeightsMode::Bleu;

  int eval_beam = 4;
  int dev_size = 64;
  int test_size = 80;

  /// Fraction of min(pair sizes) used for the direct original<->original
  /// corpora the expert trains on (the expert substitute, like the model it
  /// stands in for, supports non-pivot directions). 0 disables.
  Scalar direct_pair_fraction = 0.15;

  std::vector<PlanMethod> methods;
  std::vector<Direction> directions;
  std::vector<uint64_t> seeds;
  TierSpec tiers;
  std::vector<std::pair<std::string, std::string>> probe_pairs;

  int bootstrap_iterations = 1000;
  Scalar bootstrap_alpha = 0.01;

  long gold_size_of(const std::string& code) const;
};

ExperimentPlan default_desk_plan();
ExperimentPlan plan_from_json_file(const std::string& path);
void validate_plan(const ExperimentPlan& plan);

/// Deterministically derived family, corpora and tokenizer for a plan.
struct Workspace {
  LanguageFamily family;
  Tokenizer tokenizer;
  std::map<LanguageTag, ParallelCorpus> train;  // originals, preprocessed
  ParallelCorpus new_gold;                      // preprocessed
  std::map<LanguageTag, ParallelCorpus> dev;    // weights dev sets
  std::vector<ParallelCorpus> direct;           // original<->original expert data
};

/// Builds (or reuses persisted) family/tokenizer/corpora under out_dir.
Workspace build_workspace(const ExperimentPlan& plan, const std::string& out_dir);

struct ExpertResult {
  uint64_t seed = 0;
  std::string checkpoint_hash;
  std::vector<EvalReport> tier_reports;      // pivot -> each original
  std::vector<EvalReport> probe_reports;     // fixed original pairs
  std::vector<EvalReport> new_pair_reports;  // new <-> original directions
  std::vector<std::pair<std::string, Scalar>> weights_bleu;
};

struct CellResult {
  Method method = Method::Finetune;
  int k = 0;
  Direction direction = Direction::NewToOriginal;
  uint64_t seed = 0;
  bool failed = false;
  std::string error;
  std::string checkpoint_hash;
  std::vector<EvalReport> new_pair_reports;  // training-direction new pairs
  std::vector<EvalReport> probe_reports;     // fixed original pairs
};

struct SignificanceResult {
  uint64_t seed = 0;
  Direction direction = Direction::NewToOriginal;
  Scalar p = 1.0;
  bool significant = false;
};

struct ResultsTable {
  ExperimentPlan plan;
  std::vector<ExpertResult> experts;
  std::vector<CellResult> cells;
  std::vector<SignificanceResult> significance;  // imit vs on-the-fly, high tier
  long cells_trained = 0;  // trained in this invocation (0 when fully resumed)
};

/// Executes every cell of the plan under out_dir. Completed cells (matching
/// config hash) are skipped on rerun. Cell failures are recorded in-table
/// and the run continues.
ResultsTable run_experiment(const ExperimentPlan& plan, const std::string& out_dir);

/// style "q1": method rows x (original language, tier) mean-BLEU columns per
/// training direction. style "q2": original-pair grid with a delta row per
/// method against the expert. TSV, two decimals. Throws on unknown style.
std::string emit_tables(const ResultsTable& results, const std::string& style,
                        const std::string& out_dir);

void write_results_json(const ResultsTable& results, const std::string& path);

/// Per-direction evaluation used by cells and the standalone `eval` command.
struct DirectionEval {
  EvalReport report;
  std::vector<Sentence> srcs, hyps, refs;
};

DirectionEval evaluate_direction(const Model& m, const LanguageFamily& family,
                                 const LanguageTag& src, const LanguageTag& tgt, int n,
                                 uint64_t sample_seed, int beam);

/// Shared deterministic test-set construction: pivot sentences drawn from
/// (family_seed, direction codes), oracle-translated to both sides.
void make_test_set(const LanguageFamily& family, const LanguageTag& src, const LanguageTag& tgt,
                   int n, uint64_t sample_seed, std::vector<Sentence>* srcs,
                   std::vector<Sentence>* refs);

}  // namespace imitmt
