#pragma once

#include <map>
#include <string>
#include <vector>

#include "imitmt/synthlang.hpp"
#include "imitmt/types.hpp"

namespace imitmt {

/// Corpus BLEU: clipped n-gram precisions n=1..4 with brevity penalty,
/// add-one smoothing on n>=2 precisions whose match count is zero. In [0, 100].
Scalar corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs);

/// chrF++: character n-grams n=1..6 (whitespace removed) plus word n-grams
/// n=1..2, beta = 2, F-scores from corpus-aggregated statistics averaged over
/// orders. In [0, 100].
Scalar chrf_pp(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs);

/// Copy ratio: (source-copied tokens + consecutively repeated tokens) over
/// hypothesis tokens, corpus level. Copies are clipped per token by the
/// source-side multiset multiplicity. May exceed 1; reported unclamped.
Scalar copy_ratio(const std::vector<Sentence>& srcs, const std::vector<Sentence>& hyps);

/// Fraction of hypotheses whose oracle language id differs from `expected`
/// ("unknown" counts as off-target). In [0, 1].
Scalar off_target_ratio(const std::vector<Sentence>& hyps, const LanguageTag& expected,
                        const LanguageFamily& family);

enum class Tier { Low, Mid, High };

std::string tier_name(Tier t);

/// Two strictly increasing sentence-count cutoffs; a size exactly at a
/// cutoff lands in the higher bucket.
struct TierSpec {
  long low_cutoff = 1000;
  long high_cutoff = 4000;
};

Tier tier_of(long corpus_size, const TierSpec& spec);

struct BootstrapResult {
  Scalar p = 1.0;
  bool significant = false;
};

/// Paired bootstrap resampling over sentence indices: p is the fraction of
/// resamples where system A's corpus BLEU <= system B's; significant iff
/// p < alpha. Deterministic for a fixed seed.
BootstrapResult bootstrap_significance(const std::vector<Sentence>& hyps_a,
                                       const std::vector<Sentence>& hyps_b,
                                       const std::vector<Sentence>& refs, int iterations,
                                       Scalar alpha, uint64_t seed);

/// Per-direction evaluation summary.
struct EvalReport {
  LanguageTag src;
  LanguageTag tgt;
  Scalar bleu = 0;
  Scalar chrfpp = 0;
  Scalar cr = 0;
  Scalar otr = 0;
  long T = 0;  // sentence count
  Tier tier = Tier::Low;
  Scalar delta_vs_expert = 0;
};

/// Extended-model BLEU minus expert BLEU per direction. Throws when the
/// extended set misses a direction present in the expert set.
std::map<std::pair<std::string, std::string>, Scalar> forgetting_delta(
    const std::vector<EvalReport>& extended, const std::vector<EvalReport>& expert);

}  // namespace imitmt
