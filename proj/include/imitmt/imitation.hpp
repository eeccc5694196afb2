#pragma once

#include <map>
#include <string>
#include <vector>

#include "imitmt/model.hpp"

namespace imitmt {

/// k original languages drawn uniformly without replacement; resampled
/// every batch.
struct KLanguageSample {
  std::vector<LanguageTag> langs;
};

KLanguageSample sample_k_languages(const std::vector<LanguageTag>& originals, int k, Rng& rng);

/// Gold pair with its raw sentences retained for pseudo generation.
struct GoldExample {
  Sentence new_side;
  Sentence pivot_side;
  EncodedPair enc;
};

struct PseudoPair {
  TokenSequence src;
  TokenSequence tgt;
  LanguageTag orig_lang;  // the sampled original language of this pair
};

/// Expert-generated k-way pseudo pairs for one batch, stamped with the
/// parameter hash of the model that generated them.
struct PseudoCorpus {
  std::vector<PseudoPair> pairs;
  std::string generator_hash;
  int beam = 0;
  long dropped = 0;  // generations that came back empty

  uint64_t fingerprint() const;
};

/// Eq-1 construction: for every gold pair and every sampled language, the
/// pivot side is translated into that language by the frozen expert's beam
/// search and paired with the new-language side. Requires expert role.
PseudoCorpus build_pseudo_batch(const Model& expert, const std::vector<const GoldExample*>& gold,
                                const KLanguageSample& sample, Direction direction, int beam,
                                const LanguageTag& new_lang, const LanguageTag& pivot);

/// Per-language expert BLEU and the derived importance weights.
struct LanguageWeights {
  std::vector<LanguageTag> langs;
  std::vector<Scalar> bleu;     // B(pivot, lang)
  std::vector<Scalar> weights;  // normalized over `langs`, sums to k
  int k = 0;
  bool uniform_fallback = false;

  Scalar bleu_of(const LanguageTag& lang) const;
  /// Weights renormalized over one batch's sampled languages so they sum to
  /// the sample size. All-zero BLEU over the sample falls back to uniform 1.
  std::vector<Scalar> normalized_for(const std::vector<LanguageTag>& sample) const;
  static LanguageWeights uniform(const std::vector<LanguageTag>& langs, int k);
};

/// B = expert corpus BLEU on each pivot->language dev set; W = B / sum(B) * k.
/// All-zero BLEU falls back to uniform weights with a warning.
LanguageWeights compute_language_weights(const Model& expert,
                                         const std::map<LanguageTag, ParallelCorpus>& devsets,
                                         int k, int beam = 4);

struct ImitLossBreakdown {
  Scalar gold_loss = 0;
  std::vector<std::pair<LanguageTag, Scalar>> imit_losses;  // mean NLL per language
  Scalar weighted_imit = 0;  // sum of W(l) * imit_loss(l)
  Scalar total = 0;          // gold_loss + weighted_imit
  Scalar grad_norm = 0;
};

/// One optimizer step on L_total = L_gold + sum_k W(l_k) * L_imit(l_k).
/// Throws when the pseudo corpus was not generated by the expected model
/// (guards the expert/learner separation).
ImitLossBreakdown imit_loss_step(Model& learner, AdamState& opt,
                                 const std::vector<EncodedPair>& gold_batch,
                                 const PseudoCorpus& pseudo,
                                 const std::vector<LanguageTag>& sample_langs,
                                 const std::vector<Scalar>& sample_weights, Scalar lr,
                                 const std::string& expected_generator_hash, Rng* dropout_rng);

enum class WeightsMode { Bleu, Uniform };

inline std::string weights_mode_name(WeightsMode m) {
  return m == WeightsMode::Bleu ? "bleu" : "uniform";
}

/// Who generates the pseudo data each batch: the frozen expert (imitation)
/// or the current, already-updated model (On-the-Fly).
enum class GeneratorMode { FrozenExpert, Drifting };

struct ImitRunConfig {
  int k = 4;
  Direction direction = Direction::NewToOriginal;
  int steps = 1500;
  Scalar lr = 1e-3;
  int batch_size = 16;
  int beam = 2;
  uint64_t seed = 1;
  WeightsMode weights_mode = WeightsMode::Bleu;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::string checkpoint_dir;
};

struct StepRecord {
  int step = 0;
  Scalar gold_loss = 0;
  Scalar weighted_imit = 0;
  Scalar total = 0;
  std::vector<std::string> langs;
  std::string generator_hash;
  uint64_t pseudo_fingerprint = 0;
};

struct TrainRunResult {
  Model learner;
  std::vector<StepRecord> log;
};

/// Shared extension loop: initialize learner from the expert, then per batch
/// resample languages, build pseudo data with the configured generator and
/// minimize L_total. k = 0 trains on gold only.
TrainRunResult run_extension_loop(const Model& expert, const ParallelCorpus& gold,
                                  const LanguageWeights& weights, const ImitRunConfig& cfg,
                                  GeneratorMode mode);

/// The imitation method: frozen-expert generation.
TrainRunResult train_imit(const Model& expert, const ParallelCorpus& gold,
                          const LanguageWeights& weights, const ImitRunConfig& cfg);

/// One line per step: step, gold_loss, weighted_imit_loss, total, sampled
/// language codes — TAB separated, codes comma-joined.
void write_train_log(const std::string& path, const std::vector<StepRecord>& log);

}  // namespace imitmt
