#include "imitmt/imitation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "imitmt/metrics.hpp"

namespace imitmt {

KLanguageSample sample_k_languages(const std::vector<LanguageTag>& originals, int k, Rng& rng) {
  const int n = static_cast<int>(originals.size());
  if (k < 1 || k > n)
    throw std::runtime_error("sample_k_languages: k=" + std::to_string(k) +
                             " out of range [1, " + std::to_string(n) + "]");
  std::vector<LanguageTag> pool = originals;
  KLanguageSample out;
  out.langs.reserve(k);
  for (int i = 0; i < k; ++i) {
    const auto j = static_cast<size_t>(rng.uniform_int(i, n - 1));
    std::swap(pool[i], pool[j]);
    out.langs.push_back(pool[i]);
  }
  return out;
}

uint64_t PseudoCorpus::fingerprint() const {
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  for (const auto& pr : pairs) {
    for (int id : pr.src.ids) mix(static_cast<uint64_t>(id) + 1);
    mix(0xffffULL);
    for (int id : pr.tgt.ids) mix(static_cast<uint64_t>(id) + 1);
    mix(0xfffeULL);
  }
  return h;
}

namespace {

// Shared by build_pseudo_batch (frozen expert) and the On-the-Fly loop
// (drifting generator); role is checked by the public entry point only.
PseudoCorpus generate_pseudo(const Model& generator,
                             const std::vector<const GoldExample*>& gold,
                             const KLanguageSample& sample, Direction direction, int beam,
                             const LanguageTag& new_lang, const LanguageTag& pivot) {
  const Tokenizer& tok = generator.tokenizer();
  PseudoCorpus out;
  out.generator_hash = generator.param_hash();
  out.beam = beam;
  const int max_len = std::max(4, generator.config().max_decode_len - 3);

  std::vector<TokenSequence> pivot_srcs;
  pivot_srcs.reserve(gold.size());
  for (const GoldExample* g : gold)
    pivot_srcs.push_back(tok.encode_source(g->pivot_side, pivot, pivot));

  for (const LanguageTag& lang : sample.langs) {
    std::vector<TokenSequence> gen =
        beam_search_batch(generator, pivot_srcs, lang, beam, max_len);
    for (size_t i = 0; i < gold.size(); ++i) {
      if (gen[i].size() <= 2) {  // bos+eos only: empty generation
        out.dropped++;
        continue;
      }
      PseudoPair pp;
      pp.orig_lang = lang;
      if (direction == Direction::NewToOriginal) {
        pp.src = tok.encode_source(gold[i]->new_side, new_lang, lang);
        pp.tgt = gen[i];
      } else {
        TokenSequence src;
        src.ids.push_back(tok.tag_id(lang));
        src.ids.push_back(tok.tag_id(new_lang));
        src.ids.insert(src.ids.end(), gen[i].ids.begin() + 1, gen[i].ids.end());
        pp.src = std::move(src);  // [lang-tag, new-tag, subwords..., eos]
        pp.tgt = tok.encode_target(gold[i]->new_side);
      }
      out.pairs.push_back(std::move(pp));
    }
  }
  return out;
}

}  // namespace

PseudoCorpus build_pseudo_batch(const Model& expert, const std::vector<const GoldExample*>& gold,
                                const KLanguageSample& sample, Direction direction, int beam,
                                const LanguageTag& new_lang, const LanguageTag& pivot) {
  if (expert.role() != Role::Expert)
    throw std::runtime_error("build_pseudo_batch: generator must have expert role");
  return generate_pseudo(expert, gold, sample, direction, beam, new_lang, pivot);
}

Scalar LanguageWeights::bleu_of(const LanguageTag& lang) const {
  for (size_t i = 0; i < langs.size(); ++i)
    if (langs[i] == lang) return bleu[i];
  throw std::runtime_error("language weights: unknown language " + lang.code);
}

std::vector<Scalar> LanguageWeights::normalized_for(const std::vector<LanguageTag>& sample) const {
  std::vector<Scalar> b(sample.size());
  Scalar sum = 0;
  for (size_t i = 0; i < sample.size(); ++i) {
    b[i] = bleu_of(sample[i]);
    sum += b[i];
  }
  std::vector<Scalar> w(sample.size(), 1.0);
  if (sum > 0) {
    for (size_t i = 0; i < sample.size(); ++i)
      w[i] = b[i] / sum * static_cast<Scalar>(sample.size());
  }
  return w;
}

LanguageWeights LanguageWeights::uniform(const std::vector<LanguageTag>& langs, int k) {
  LanguageWeights w;
  w.langs = langs;
  w.bleu.assign(langs.size(), 1.0);
  w.weights.assign(langs.size(), 1.0);
  w.k = k;
  return w;
}

LanguageWeights compute_language_weights(const Model& expert,
                                         const std::map<LanguageTag, ParallelCorpus>& devsets,
                                         int k, int beam) {
  if (devsets.empty()) throw std::runtime_error("compute_language_weights: no dev sets");
  const Tokenizer& tok = expert.tokenizer();
  LanguageWeights out;
  out.k = k;
  const int max_len = std::max(4, expert.config().max_decode_len - 3);
  for (const auto& [lang, dev] : devsets) {
    std::vector<TokenSequence> srcs;
    std::vector<Sentence> refs;
    srcs.reserve(dev.pairs.size());
    for (const auto& [lang_side, pivot_side] : dev.pairs) {
      srcs.push_back(tok.encode_source(pivot_side, dev.tgt_lang, lang));
      refs.push_back(lang_side);
    }
    std::vector<TokenSequence> gen = beam_search_batch(expert, srcs, lang, beam, max_len);
    std::vector<Sentence> hyps;
    hyps.reserve(gen.size());
    for (const auto& g : gen) hyps.push_back(tok.decode(g));
    out.langs.push_back(lang);
    out.bleu.push_back(corpus_bleu(hyps, refs));
  }
  Scalar sum = 0;
  for (Scalar b : out.bleu) sum += b;
  out.weights.assign(out.langs.size(), 1.0);
  if (sum > 0) {
    for (size_t i = 0; i < out.bleu.size(); ++i)
      out.weights[i] = out.bleu[i] / sum * static_cast<Scalar>(k);
  } else {
    out.uniform_fallback = true;
    std::fprintf(stderr,
                 "warning: expert BLEU is zero for every language; using uniform weights\n");
  }
  return out;
}

ImitLossBreakdown imit_loss_step(Model& learner, AdamState& opt,
                                 const std::vector<EncodedPair>& gold_batch,
                                 const PseudoCorpus& pseudo,
                                 const std::vector<LanguageTag>& sample_langs,
                                 const std::vector<Scalar>& sample_weights, Scalar lr,
                                 const std::string& expected_generator_hash, Rng* dropout_rng) {
  if (pseudo.generator_hash != expected_generator_hash)
    throw std::runtime_error("imit_loss_step: pseudo corpus generator hash mismatch (expected " +
                             expected_generator_hash + ", got " + pseudo.generator_hash + ")");
  if (sample_langs.size() != sample_weights.size())
    throw std::runtime_error("imit_loss_step: weights do not cover the sampled languages");

  std::vector<std::vector<EncodedPair>> lang_groups(sample_langs.size());
  for (const auto& pp : pseudo.pairs) {
    bool placed = false;
    for (size_t i = 0; i < sample_langs.size(); ++i) {
      if (pp.orig_lang == sample_langs[i]) {
        lang_groups[i].push_back({pp.src, pp.tgt});
        placed = true;
        break;
      }
    }
    if (!placed)
      throw std::runtime_error("imit_loss_step: pseudo pair for unsampled language " +
                               pp.orig_lang.code);
  }

  std::vector<LossGroup> groups;
  groups.push_back({&gold_batch, 1.0});
  for (size_t i = 0; i < lang_groups.size(); ++i)
    groups.push_back({&lang_groups[i], sample_weights[i]});

  GroupLossReport rep = weighted_train_step(learner, opt, groups, lr, dropout_rng);

  ImitLossBreakdown out;
  out.gold_loss = rep.group_mean[0];
  for (size_t i = 0; i < sample_langs.size(); ++i) {
    out.imit_losses.emplace_back(sample_langs[i], rep.group_mean[i + 1]);
    out.weighted_imit += sample_weights[i] * rep.group_mean[i + 1];
  }
  out.total = rep.total;
  out.grad_norm = rep.grad_norm;
  return out;
}

TrainRunResult run_extension_loop(const Model& expert, const ParallelCorpus& gold,
                                  const LanguageWeights& weights, const ImitRunConfig& cfg,
                                  GeneratorMode mode) {
  if (expert.role() != Role::Expert)
    throw std::runtime_error("extension loop: starting model must have expert role");
  if (gold.pairs.empty()) throw std::runtime_error("extension loop: empty gold corpus");
  if (cfg.k > 0 && cfg.k > static_cast<int>(weights.langs.size()))
    throw std::runtime_error("extension loop: k exceeds the weighted language set");

  const Tokenizer& tok = expert.tokenizer();
  const LanguageTag new_lang = gold.src_lang;
  const LanguageTag pivot = gold.tgt_lang;
  const std::string expert_hash = expert.param_hash();

  std::vector<GoldExample> pool;
  pool.reserve(gold.pairs.size());
  for (const auto& [new_side, pivot_side] : gold.pairs) {
    GoldExample g;
    g.new_side = new_side;
    g.pivot_side = pivot_side;
    if (cfg.direction == Direction::NewToOriginal)
      g.enc = {tok.encode_source(new_side, new_lang, pivot), tok.encode_target(pivot_side)};
    else
      g.enc = {tok.encode_source(pivot_side, pivot, new_lang), tok.encode_target(new_side)};
    pool.push_back(std::move(g));
  }

  TrainRunResult res{expert.fork_learner(), {}};
  Model& learner = res.learner;
  AdamState opt;
  Rng rng(derive_seed(cfg.seed, "extend"));

  std::vector<size_t> order(pool.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t pos = order.size();

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const GoldExample*> raw;
    std::vector<EncodedPair> gold_batch;
    while (static_cast<int>(gold_batch.size()) < cfg.batch_size) {
      if (pos == order.size()) {
        rng.shuffle(order);
        pos = 0;
      }
      raw.push_back(&pool[order[pos]]);
      gold_batch.push_back(pool[order[pos]].enc);
      ++pos;
    }

    StepRecord rec;
    rec.step = step;
    if (cfg.k > 0) {
      KLanguageSample sample = sample_k_languages(weights.langs, cfg.k, rng);
      const Model& generator = mode == GeneratorMode::FrozenExpert ? expert : learner;
      PseudoCorpus pseudo = generate_pseudo(generator, raw, sample, cfg.direction, cfg.beam,
                                            new_lang, pivot);
      const std::string expected =
          mode == GeneratorMode::FrozenExpert ? expert_hash : pseudo.generator_hash;
      std::vector<Scalar> w = weights.normalized_for(sample.langs);
      ImitLossBreakdown bd = imit_loss_step(learner, opt, gold_batch, pseudo, sample.langs, w,
                                            cfg.lr, expected, &rng);
      rec.gold_loss = bd.gold_loss;
      rec.weighted_imit = bd.weighted_imit;
      rec.total = bd.total;
      for (const auto& l : sample.langs) rec.langs.push_back(l.code);
      rec.generator_hash = pseudo.generator_hash;
      rec.pseudo_fingerprint = pseudo.fingerprint();
    } else {
      TrainStepReport rep = train_step(learner, opt, gold_batch, cfg.lr, &rng);
      rec.gold_loss = rep.loss;
      rec.weighted_imit = 0;
      rec.total = rep.loss;
    }
    res.log.push_back(std::move(rec));

    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
        (step + 1) % cfg.checkpoint_every == 0)
      learner.save(cfg.checkpoint_dir + "/step_" + std::to_string(step + 1) + ".ckpt");
  }
  return res;
}

TrainRunResult train_imit(const Model& expert, const ParallelCorpus& gold,
                          const LanguageWeights& weights, const ImitRunConfig& cfg) {
  return run_extension_loop(expert, gold, weights, cfg, GeneratorMode::FrozenExpert);
}

void write_train_log(const std::string& path, const std::vector<StepRecord>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write train log: " + path);
  char buf[64];
  for (const auto& rec : log) {
    std::string langs;
    for (size_t i = 0; i < rec.langs.size(); ++i) {
      if (i) langs += ',';
      langs += rec.langs[i];
    }
    out << rec.step << '\t';
    std::snprintf(buf, sizeof(buf), "%.17g", rec.gold_loss);
    out << buf << '\t';
    std::snprintf(buf, sizeof(buf), "%.17g", rec.weighted_imit);
    out << buf << '\t';
    std::snprintf(buf, sizeof(buf), "%.17g", rec.total);
    out << buf << '\t' << langs << '\n';
  }
}

}  // namespace imitmt
