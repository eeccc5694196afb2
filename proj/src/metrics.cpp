#include "imitmt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "imitmt/rng.hpp"

namespace imitmt {

namespace {

constexpr int kBleuOrder = 4;

struct BleuSentenceStats {
  long correct[kBleuOrder] = {0, 0, 0, 0};
  long total[kBleuOrder] = {0, 0, 0, 0};
  long hyp_len = 0;
  long ref_len = 0;
};

using Ngram = std::vector<std::string>;

std::map<Ngram, long> count_ngrams(const std::vector<std::string>& toks, int n) {
  std::map<Ngram, long> out;
  if (static_cast<int>(toks.size()) < n) return out;
  for (size_t i = 0; i + n <= toks.size(); ++i)
    out[Ngram(toks.begin() + i, toks.begin() + i + n)]++;
  return out;
}

BleuSentenceStats bleu_sentence_stats(const Sentence& hyp, const Sentence& ref) {
  BleuSentenceStats s;
  s.hyp_len = static_cast<long>(hyp.tokens.size());
  s.ref_len = static_cast<long>(ref.tokens.size());
  for (int n = 1; n <= kBleuOrder; ++n) {
    auto hyp_ngrams = count_ngrams(hyp.tokens, n);
    auto ref_ngrams = count_ngrams(ref.tokens, n);
    long total = 0, correct = 0;
    for (const auto& [g, c] : hyp_ngrams) {
      total += c;
      auto it = ref_ngrams.find(g);
      if (it != ref_ngrams.end()) correct += std::min(c, it->second);
    }
    s.total[n - 1] = total;
    s.correct[n - 1] = correct;
  }
  return s;
}

Scalar bleu_from_stats(const BleuSentenceStats& agg) {
  if (agg.hyp_len == 0 || agg.correct[0] == 0) return 0.0;
  Scalar log_prec = 0;
  for (int n = 0; n < kBleuOrder; ++n) {
    Scalar p;
    if (agg.correct[n] > 0)
      p = static_cast<Scalar>(agg.correct[n]) / static_cast<Scalar>(agg.total[n]);
    else
      p = 1.0 / static_cast<Scalar>(agg.total[n] + 1);  // add-one smoothing, n >= 2
    log_prec += std::log(p);
  }
  Scalar bp = 1.0;
  if (agg.hyp_len < agg.ref_len)
    bp = std::exp(1.0 - static_cast<Scalar>(agg.ref_len) / static_cast<Scalar>(agg.hyp_len));
  return 100.0 * bp * std::exp(log_prec / kBleuOrder);
}

void accumulate(BleuSentenceStats& agg, const BleuSentenceStats& s) {
  for (int n = 0; n < kBleuOrder; ++n) {
    agg.correct[n] += s.correct[n];
    agg.total[n] += s.total[n];
  }
  agg.hyp_len += s.hyp_len;
  agg.ref_len += s.ref_len;
}

std::vector<std::string> codepoints(const std::string& s) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if ((c & 0xe0) == 0xc0) len = 2;
    else if ((c & 0xf0) == 0xe0) len = 3;
    else if ((c & 0xf8) == 0xf0) len = 4;
    len = std::min(len, s.size() - i);
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

}  // namespace

Scalar corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  if (hyps.size() != refs.size())
    throw std::runtime_error("corpus_bleu: hypothesis/reference length mismatch");
  if (hyps.empty()) throw std::runtime_error("corpus_bleu: empty corpus");
  BleuSentenceStats agg;
  for (size_t i = 0; i < hyps.size(); ++i) accumulate(agg, bleu_sentence_stats(hyps[i], refs[i]));
  return bleu_from_stats(agg);
}

Scalar chrf_pp(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  if (hyps.size() != refs.size())
    throw std::runtime_error("chrf_pp: hypothesis/reference length mismatch");
  if (hyps.empty()) throw std::runtime_error("chrf_pp: empty corpus");

  constexpr int kCharOrder = 6, kWordOrder = 2;
  constexpr Scalar beta2 = 4.0;  // beta = 2
  const int orders = kCharOrder + kWordOrder;
  std::vector<Scalar> match(orders, 0), hyp_count(orders, 0), ref_count(orders, 0);

  auto add_order = [&](int slot, const std::vector<std::string>& h,
                       const std::vector<std::string>& r, int n) {
    auto hn = count_ngrams(h, n);
    auto rn = count_ngrams(r, n);
    for (const auto& [g, c] : hn) {
      hyp_count[slot] += static_cast<Scalar>(c);
      auto it = rn.find(g);
      if (it != rn.end()) match[slot] += static_cast<Scalar>(std::min(c, it->second));
    }
    for (const auto& [g, c] : rn) ref_count[slot] += static_cast<Scalar>(c);
  };

  for (size_t i = 0; i < hyps.size(); ++i) {
    std::string hyp_flat, ref_flat;
    for (const auto& t : hyps[i].tokens) hyp_flat += t;
    for (const auto& t : refs[i].tokens) ref_flat += t;
    const auto hyp_chars = codepoints(hyp_flat);
    const auto ref_chars = codepoints(ref_flat);
    for (int n = 1; n <= kCharOrder; ++n) add_order(n - 1, hyp_chars, ref_chars, n);
    for (int n = 1; n <= kWordOrder; ++n)
      add_order(kCharOrder + n - 1, hyps[i].tokens, refs[i].tokens, n);
  }

  Scalar f_sum = 0;
  int f_orders = 0;
  for (int o = 0; o < orders; ++o) {
    if (hyp_count[o] + ref_count[o] == 0) continue;  // no such n-grams anywhere
    const Scalar p = hyp_count[o] > 0 ? match[o] / hyp_count[o] : 0.0;
    const Scalar r = ref_count[o] > 0 ? match[o] / ref_count[o] : 0.0;
    const Scalar f = (p + r) > 0 ? (1.0 + beta2) * p * r / (beta2 * p + r) : 0.0;
    f_sum += f;
    f_orders += 1;
  }
  return f_orders > 0 ? 100.0 * f_sum / static_cast<Scalar>(f_orders) : 0.0;
}

Scalar copy_ratio(const std::vector<Sentence>& srcs, const std::vector<Sentence>& hyps) {
  if (srcs.size() != hyps.size())
    throw std::runtime_error("copy_ratio: source/hypothesis length mismatch");
  if (srcs.empty()) throw std::runtime_error("copy_ratio: empty corpus");
  long copied = 0, repeated = 0, count = 0;
  for (size_t i = 0; i < hyps.size(); ++i) {
    std::map<std::string, long> src_multiset;
    for (const auto& t : srcs[i].tokens) src_multiset[t]++;
    for (size_t j = 0; j < hyps[i].tokens.size(); ++j) {
      const std::string& t = hyps[i].tokens[j];
      auto it = src_multiset.find(t);
      if (it != src_multiset.end() && it->second > 0) {
        copied += 1;
        it->second -= 1;
      }
      if (j > 0 && t == hyps[i].tokens[j - 1]) repeated += 1;
    }
    count += static_cast<long>(hyps[i].tokens.size());
  }
  if (count == 0) throw std::runtime_error("copy_ratio: all hypotheses are empty");
  return static_cast<Scalar>(copied) / static_cast<Scalar>(count) +
         static_cast<Scalar>(repeated) / static_cast<Scalar>(count);
}

Scalar off_target_ratio(const std::vector<Sentence>& hyps, const LanguageTag& expected,
                        const LanguageFamily& family) {
  if (hyps.empty()) throw std::runtime_error("off_target_ratio: empty corpus");
  long off = 0;
  for (const auto& h : hyps) {
    auto id = oracle_langid(family, h);
    if (!id || *id != expected) off += 1;
  }
  return static_cast<Scalar>(off) / static_cast<Scalar>(hyps.size());
}

std::string tier_name(Tier t) {
  switch (t) {
    case Tier::Low: return "Low";
    case Tier::Mid: return "Mid";
    case Tier::High: return "High";
  }
  throw std::runtime_error("bad tier");
}

Tier tier_of(long corpus_size, const TierSpec& spec) {
  if (spec.low_cutoff >= spec.high_cutoff)
    throw std::runtime_error("tier_of: cutoffs must be strictly increasing");
  if (corpus_size < spec.low_cutoff) return Tier::Low;
  if (corpus_size < spec.high_cutoff) return Tier::Mid;
  return Tier::High;
}

BootstrapResult bootstrap_significance(const std::vector<Sentence>& hyps_a,
                                       const std::vector<Sentence>& hyps_b,
                                       const std::vector<Sentence>& refs, int iterations,
                                       Scalar alpha, uint64_t seed) {
  if (hyps_a.size() != refs.size() || hyps_b.size() != refs.size())
    throw std::runtime_error("bootstrap_significance: corpus length mismatch");
  if (refs.empty()) throw std::runtime_error("bootstrap_significance: empty corpus");
  if (iterations < 100) throw std::runtime_error("bootstrap_significance: iterations must be >= 100");

  const size_t n = refs.size();
  std::vector<BleuSentenceStats> stats_a(n), stats_b(n);
  for (size_t i = 0; i < n; ++i) {
    stats_a[i] = bleu_sentence_stats(hyps_a[i], refs[i]);
    stats_b[i] = bleu_sentence_stats(hyps_b[i], refs[i]);
  }

  Rng rng(derive_seed(seed, "bootstrap"));
  long a_not_better = 0;
  for (int it = 0; it < iterations; ++it) {
    BleuSentenceStats agg_a, agg_b;
    for (size_t i = 0; i < n; ++i) {
      const auto idx = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n) - 1));
      accumulate(agg_a, stats_a[idx]);
      accumulate(agg_b, stats_b[idx]);
    }
    if (bleu_from_stats(agg_a) <= bleu_from_stats(agg_b)) a_not_better += 1;
  }
  BootstrapResult out;
  out.p = static_cast<Scalar>(a_not_better) / static_cast<Scalar>(iterations);
  out.significant = out.p < alpha;
  return out;
}

std::map<std::pair<std::string, std::string>, Scalar> forgetting_delta(
    const std::vector<EvalReport>& extended, const std::vector<EvalReport>& expert) {
  std::map<std::pair<std::string, std::string>, Scalar> ext_bleu;
  for (const auto& r : extended) ext_bleu[{r.src.code, r.tgt.code}] = r.bleu;
  std::map<std::pair<std::string, std::string>, Scalar> out;
  for (const auto& r : expert) {
    auto it = ext_bleu.find({r.src.code, r.tgt.code});
    if (it == ext_bleu.end())
      throw std::runtime_error("forgetting_delta: missing direction " + r.src.code + "-" +
                               r.tgt.code);
    out[{r.src.code, r.tgt.code}] = it->second - r.bleu;
  }
  return out;
}

}  // namespace imitmt
