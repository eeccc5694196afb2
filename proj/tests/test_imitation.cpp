#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "imitmt/baselines.hpp"
#include "imitmt/imitation.hpp"

using namespace imitmt;

namespace {

FamilySpec spec3() {
  FamilySpec s;
  s.pivot = "piv";
  s.originals = {"aaa", "bbb", "ccc"};
  s.new_langs = {"nov"};
  s.lexicon_size = 50;
  return s;
}

struct Fixture {
  LanguageFamily fam;
  Tokenizer tok;
  ParallelCorpus gold;  // nov <-> piv
  Model expert;

  static Model build(Fixture& f) {
    ParallelCorpus a = sample_gold_corpus(f.fam, f.fam.originals[0], 50, 1);
    ParallelCorpus b = sample_gold_corpus(f.fam, f.fam.originals[1], 50, 2);
    ParallelCorpus c = sample_gold_corpus(f.fam, f.fam.originals[2], 50, 3);
    f.gold = preprocess(sample_gold_corpus(f.fam, f.fam.new_langs[0], 40, 4), 120, f.fam);
    f.tok = Tokenizer::train({&a, &b, &c, &f.gold}, 300, f.fam.all_languages());
    ModelConfig cfg;
    cfg.embed_dim = 10;
    cfg.hidden_dim = 12;
    cfg.num_layers = 1;
    cfg.dropout = 0.0;
    cfg.max_decode_len = 90;
    cfg.seed = 5;
    std::map<LanguageTag, ParallelCorpus> tiered{
        {f.fam.originals[0], preprocess(a, 120, f.fam)},
        {f.fam.originals[1], preprocess(b, 120, f.fam)},
        {f.fam.originals[2], preprocess(c, 120, f.fam)}};
    ExpertTrainConfig ecfg;
    ecfg.model = cfg;
    ecfg.steps = 30;
    ecfg.batch_size = 8;
    ecfg.lr = 2e-3;
    ecfg.seed = 9;
    return train_expert(f.fam, tiered, f.tok, ecfg);
  }

  Fixture() : fam(make_language_family(spec3(), 7)), expert(build(*this)) {}
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

ImitRunConfig tiny_run(int k, int steps, uint64_t seed) {
  ImitRunConfig cfg;
  cfg.k = k;
  cfg.direction = Direction::NewToOriginal;
  cfg.steps = steps;
  cfg.lr = 1e-3;
  cfg.batch_size = 4;
  cfg.beam = 1;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("sample_k_languages: bounds, full set, singleton") {
  auto& f = fixture();
  Rng rng(1);
  CHECK_THROWS(sample_k_languages(f.fam.originals, 0, rng));
  CHECK_THROWS(sample_k_languages(f.fam.originals, 4, rng));

  KLanguageSample full = sample_k_languages(f.fam.originals, 3, rng);
  std::set<std::string> codes;
  for (const auto& t : full.langs) codes.insert(t.code);
  CHECK(codes == std::set<std::string>{"aaa", "bbb", "ccc"});

  KLanguageSample one = sample_k_languages(f.fam.originals, 1, rng);
  CHECK(one.langs.size() == 1);
  CHECK(codes.count(one.langs[0].code) == 1);
}

TEST_CASE("sample_k_languages: inclusion frequency within 3 sigma of k/|L|") {
  std::vector<LanguageTag> langs;
  for (const char* c : {"l1", "l2", "l3", "l4", "l5", "l6"}) langs.emplace_back(c);
  Rng rng(42);
  std::map<std::string, long> count;
  const int draws = 10000, k = 2;
  for (int i = 0; i < draws; ++i) {
    KLanguageSample s = sample_k_languages(langs, k, rng);
    std::set<std::string> uniq;
    for (const auto& t : s.langs) CHECK(uniq.insert(t.code).second);  // no duplicates
    for (const auto& t : s.langs) count[t.code]++;
  }
  const double p = static_cast<double>(k) / 6.0;
  const double mean = draws * p;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (const auto& l : langs) CHECK(std::abs(count[l.code] - mean) <= 3 * sigma);
}

TEST_CASE("language weights: hand case, uniformity, scale invariance") {
  LanguageWeights w;
  w.langs = {LanguageTag("l1"), LanguageTag("l2")};
  w.bleu = {10.0, 30.0};
  w.k = 2;
  auto ws = w.normalized_for(w.langs);
  CHECK(ws[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(ws[1] == doctest::Approx(1.5).epsilon(1e-12));

  w.bleu = {20.0, 20.0};
  ws = w.normalized_for(w.langs);
  CHECK(ws[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ws[1] == doctest::Approx(1.0).epsilon(1e-12));

  w.bleu = {10.0, 30.0};
  auto base = w.normalized_for(w.langs);
  w.bleu = {30.0, 90.0};
  auto scaled = w.normalized_for(w.langs);
  CHECK(std::abs(base[0] - scaled[0]) < 1e-12);
  CHECK(std::abs(base[1] - scaled[1]) < 1e-12);

  w.bleu = {0.0, 0.0};
  ws = w.normalized_for(w.langs);
  CHECK(ws[0] == 1.0);
  CHECK(ws[1] == 1.0);
}

TEST_CASE("weight normalization: sum over any sample equals k, all weights >= 0") {
  auto& f = fixture();
  LanguageWeights w;
  w.langs = f.fam.originals;
  w.bleu = {3.0, 17.5, 42.0};
  w.k = 2;
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = static_cast<int>(rng.uniform_int(1, 3));
    KLanguageSample s = sample_k_languages(f.fam.originals, k, rng);
    auto ws = w.normalized_for(s.langs);
    double sum = 0;
    for (double x : ws) {
      CHECK(x >= 0.0);
      sum += x;
    }
    CHECK(std::abs(sum - k) < 1e-9);
  }
}

TEST_CASE("compute_language_weights falls back to uniform on an all-zero expert") {
  auto& f = fixture();
  ModelConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 8;
  cfg.dropout = 0.0;
  cfg.max_decode_len = 90;
  cfg.seed = 2;
  Model blank = Model::init(cfg, f.tok);  // zero output head: uniform logits
  blank.freeze_expert();
  std::map<LanguageTag, ParallelCorpus> dev;
  for (const auto& lang : f.fam.originals) dev[lang] = sample_gold_corpus(f.fam, lang, 6, 99);
  LanguageWeights w = compute_language_weights(blank, dev, 2, 1);
  CHECK(w.uniform_fallback);
  for (double x : w.weights) CHECK(x == 1.0);
}

TEST_CASE("build_pseudo_batch: cardinality, frozen expert, tags, role check") {
  auto& f = fixture();
  Rng rng(3);
  KLanguageSample sample = sample_k_languages(f.fam.originals, 3, rng);

  std::vector<GoldExample> gold;
  for (int i = 0; i < 2; ++i) {
    GoldExample g;
    g.new_side = f.gold.pairs[i].first;
    g.pivot_side = f.gold.pairs[i].second;
    g.enc = {f.tok.encode_source(g.new_side, f.gold.src_lang, f.gold.tgt_lang),
             f.tok.encode_target(g.pivot_side)};
    gold.push_back(std::move(g));
  }
  std::vector<const GoldExample*> ptrs{&gold[0], &gold[1]};

  const std::string before = f.expert.param_hash();
  PseudoCorpus ps = build_pseudo_batch(f.expert, ptrs, sample, Direction::NewToOriginal, 2,
                                       f.fam.new_langs[0], f.fam.pivot);
  CHECK(f.expert.param_hash() == before);
  CHECK(ps.generator_hash == before);
  CHECK(ps.pairs.size() + static_cast<size_t>(ps.dropped) == 6);  // 2 gold pairs x k=3

  for (const auto& pp : ps.pairs) {
    CHECK(pp.src.ids[0] == f.tok.tag_id(f.fam.new_langs[0]));
    CHECK(pp.src.ids[1] == f.tok.tag_id(pp.orig_lang));
    CHECK(pp.tgt.ids.front() == Tokenizer::kBos);
    CHECK(pp.tgt.ids.back() == Tokenizer::kEos);
  }

  PseudoCorpus ps2 = build_pseudo_batch(f.expert, ptrs, sample, Direction::OriginalToNew, 2,
                                        f.fam.new_langs[0], f.fam.pivot);
  for (const auto& pp : ps2.pairs) {
    CHECK(pp.src.ids[0] == f.tok.tag_id(pp.orig_lang));
    CHECK(pp.src.ids[1] == f.tok.tag_id(f.fam.new_langs[0]));
  }

  Model learner = f.expert.fork_learner();
  CHECK_THROWS(build_pseudo_batch(learner, ptrs, sample, Direction::NewToOriginal, 2,
                                  f.fam.new_langs[0], f.fam.pivot));
}

TEST_CASE("imit_loss_step: decomposition, reductions, hash guard") {
  auto& f = fixture();
  Model learner = f.expert.fork_learner();
  AdamState opt;

  std::vector<EncodedPair> gold_batch;
  for (int i = 0; i < 3; ++i)
    gold_batch.push_back(
        {f.tok.encode_source(f.gold.pairs[i].first, f.gold.src_lang, f.gold.tgt_lang),
         f.tok.encode_target(f.gold.pairs[i].second)});

  Rng rng(17);
  KLanguageSample sample = sample_k_languages(f.fam.originals, 2, rng);
  std::vector<GoldExample> gold;
  for (int i = 0; i < 3; ++i) {
    GoldExample g;
    g.new_side = f.gold.pairs[i].first;
    g.pivot_side = f.gold.pairs[i].second;
    g.enc = gold_batch[i];
    gold.push_back(std::move(g));
  }
  std::vector<const GoldExample*> ptrs;
  for (auto& g : gold) ptrs.push_back(&g);
  PseudoCorpus ps = build_pseudo_batch(f.expert, ptrs, sample, Direction::NewToOriginal, 1,
                                       f.fam.new_langs[0], f.fam.pivot);

  SUBCASE("total = gold + sum of weighted imit within 1e-9") {
    std::vector<Scalar> w{0.5, 1.5};
    ImitLossBreakdown bd = imit_loss_step(learner, opt, gold_batch, ps, sample.langs, w, 1e-3,
                                          ps.generator_hash, nullptr);
    double recomputed = bd.gold_loss;
    for (size_t i = 0; i < bd.imit_losses.size(); ++i)
      recomputed += w[i] * bd.imit_losses[i].second;
    CHECK(std::abs(bd.total - recomputed) < 1e-9);
    CHECK(bd.gold_loss >= 0);
  }

  SUBCASE("all weights zero reduces exactly to the gold loss") {
    std::vector<Scalar> w{0.0, 0.0};
    ImitLossBreakdown bd = imit_loss_step(learner, opt, gold_batch, ps, sample.langs, w, 1e-3,
                                          ps.generator_hash, nullptr);
    CHECK(bd.total == bd.gold_loss);
  }

  SUBCASE("empty pseudo corpus reduces to the gold loss") {
    PseudoCorpus empty;
    empty.generator_hash = f.expert.param_hash();
    ImitLossBreakdown bd = imit_loss_step(learner, opt, gold_batch, empty, {}, {}, 1e-3,
                                          empty.generator_hash, nullptr);
    CHECK(bd.total == bd.gold_loss);
    CHECK(bd.weighted_imit == 0.0);
  }

  SUBCASE("generator hash mismatch is rejected") {
    std::vector<Scalar> w{0.5, 1.5};
    CHECK_THROWS(
        imit_loss_step(learner, opt, gold_batch, ps, sample.langs, w, 1e-3, "deadbeef", nullptr));
  }
}

TEST_CASE("train_imit: steps=0 copies the expert; expert untouched by training") {
  auto& f = fixture();
  LanguageWeights w = LanguageWeights::uniform(f.fam.originals, 2);

  TrainRunResult zero = train_imit(f.expert, f.gold, w, tiny_run(2, 0, 1));
  CHECK(zero.learner.param_hash() == f.expert.param_hash());
  CHECK(zero.learner.role() == Role::Learner);

  const std::string before = f.expert.param_hash();
  TrainRunResult run = train_imit(f.expert, f.gold, w, tiny_run(2, 5, 1));
  CHECK(f.expert.param_hash() == before);
  CHECK(run.learner.param_hash() != before);
  CHECK(run.log.size() == 5);
  for (const auto& rec : run.log) {
    CHECK(rec.langs.size() == 2);
    CHECK(rec.generator_hash == before);  // frozen generator
    CHECK(std::abs(rec.total - (rec.gold_loss + rec.weighted_imit)) < 1e-9);
  }
}

TEST_CASE("train_imit resamples languages across batches") {
  auto& f = fixture();
  LanguageWeights w = LanguageWeights::uniform(f.fam.originals, 2);
  ImitRunConfig cfg = tiny_run(2, 30, 3);
  cfg.batch_size = 2;
  TrainRunResult run = train_imit(f.expert, f.gold, w, cfg);
  std::set<std::vector<std::string>> samples;
  for (const auto& rec : run.log) samples.insert(rec.langs);
  CHECK(samples.size() >= 2);
}

TEST_CASE("train log format: TAB separated, reassembles the objective") {
  auto& f = fixture();
  LanguageWeights w = LanguageWeights::uniform(f.fam.originals, 2);
  TrainRunResult run = train_imit(f.expert, f.gold, w, tiny_run(2, 4, 5));
  const std::string path = "test_imitation_log.tsv";
  write_train_log(path, run.log);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    std::istringstream is(line);
    std::string step, gold, wimit, total, langs;
    REQUIRE(std::getline(is, step, '\t'));
    REQUIRE(std::getline(is, gold, '\t'));
    REQUIRE(std::getline(is, wimit, '\t'));
    REQUIRE(std::getline(is, total, '\t'));
    REQUIRE(std::getline(is, langs, '\t'));
    CHECK(std::abs(std::stod(total) - (std::stod(gold) + std::stod(wimit))) < 1e-9);
    CHECK(langs.find(',') != std::string::npos);  // two codes comma-joined
    ++lines;
  }
  CHECK(lines == 4);
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// Baselines

TEST_CASE("finetune is bit-identical to train_imit with k = 0 under a shared seed") {
  auto& f = fixture();
  ImitRunConfig cfg = tiny_run(0, 12, 21);
  TrainRunResult ft = run_finetune(f.expert, f.gold, cfg);
  LanguageWeights none;
  TrainRunResult k0 = run_extension_loop(f.expert, f.gold, none, cfg, GeneratorMode::FrozenExpert);
  CHECK(ft.learner.param_hash() == k0.learner.param_hash());
  REQUIRE(ft.log.size() == k0.log.size());
  for (size_t i = 0; i < ft.log.size(); ++i) {
    CHECK(ft.log[i].gold_loss == k0.log[i].gold_loss);  // bitwise
    CHECK(ft.log[i].total == k0.log[i].total);
    CHECK(ft.log[i].weighted_imit == 0.0);
  }
}

TEST_CASE("finetune with steps = 0 equals the expert") {
  auto& f = fixture();
  TrainRunResult r = run_finetune(f.expert, f.gold, tiny_run(0, 0, 2));
  CHECK(r.learner.param_hash() == f.expert.param_hash());
}

TEST_CASE("on-the-fly: first batch identical to imit, then the generator drifts") {
  auto& f = fixture();
  LanguageWeights w = LanguageWeights::uniform(f.fam.originals, 2);
  ImitRunConfig cfg = tiny_run(2, 3, 77);

  TrainRunResult imit = train_imit(f.expert, f.gold, w, cfg);
  TrainRunResult otf = run_on_the_fly(f.expert, f.gold, w, cfg);

  CHECK(otf.log[0].generator_hash == imit.log[0].generator_hash);
  CHECK(otf.log[0].pseudo_fingerprint == imit.log[0].pseudo_fingerprint);

  CHECK(otf.log[1].generator_hash != otf.log[0].generator_hash);
  CHECK(imit.log[1].generator_hash == imit.log[0].generator_hash);

  CHECK(f.expert.param_hash() == imit.log[0].generator_hash);

  CHECK_THROWS(run_on_the_fly(f.expert, f.gold, w, tiny_run(0, 2, 1)));
}

TEST_CASE("baseline config differs from imit config in exactly the kind field") {
  BaselineRunConfig a;
  a.kind = Method::OnTheFly;
  a.trainer = tiny_run(2, 10, 1);
  BaselineRunConfig b;
  b.kind = Method::Imit;
  b.trainer = tiny_run(2, 10, 1);
  CHECK(a.kind != b.kind);
  CHECK(a.trainer.k == b.trainer.k);
  CHECK(a.trainer.steps == b.trainer.steps);
  CHECK(a.trainer.seed == b.trainer.seed);
  CHECK((a.trainer.direction == b.trainer.direction));
}
