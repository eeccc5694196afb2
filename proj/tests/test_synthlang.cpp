#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "imitmt/synthlang.hpp"

using namespace imitmt;

namespace {

FamilySpec spec6() {
  FamilySpec s;
  s.pivot = "piv";
  s.originals = {"aaa", "bbb", "ccc", "ddd", "eee", "fff"};
  s.new_langs = {"nov"};
  s.lexicon_size = 60;
  return s;
}

}  // namespace

TEST_CASE("family has requested languages and pairwise-disjoint lexicons") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  CHECK(fam.originals.size() == 6);
  CHECK(fam.new_langs.size() == 1);
  CHECK(fam.lexicon_size() == 60);

  std::set<std::string> all(fam.pivot_lexicon.begin(), fam.pivot_lexicon.end());
  size_t expected = fam.pivot_lexicon.size();
  for (const auto& [code, tr] : fam.transforms) {
    for (const auto& w : tr.surface) all.insert(w);
    expected += tr.surface.size();
  }
  CHECK(all.size() == expected);  // no surface shared between any two languages
}

TEST_CASE("family generation is deterministic per (spec, seed)") {
  LanguageFamily a = make_language_family(spec6(), 7);
  LanguageFamily b = make_language_family(spec6(), 7);
  CHECK(a.to_json() == b.to_json());

  LanguageFamily c = make_language_family(spec6(), 8);
  CHECK(a.to_json() != c.to_json());
}

TEST_CASE("family spec validation") {
  FamilySpec s = spec6();
  s.lexicon_size = 10;
  CHECK_THROWS(make_language_family(s, 7));
  s = spec6();
  s.originals = {"aaa"};
  CHECK_THROWS(make_language_family(s, 7));
  s = spec6();
  s.new_langs.clear();
  CHECK_THROWS(make_language_family(s, 7));
}

TEST_CASE("oracle_translate identity and inverse") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  Rng rng(99);
  const LanguageTag a = fam.originals[0];
  const LanguageTag b = fam.originals[3];
  Sentence s = sample_sentence(fam, a, rng);
  CHECK(oracle_translate(fam, s, a, a) == s);
  Sentence t = oracle_translate(fam, s, a, b);
  CHECK(oracle_translate(fam, t, b, a) == s);
}

TEST_CASE("oracle_translate round-trips 1000 sampled sentences exactly") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  Rng rng(123);
  auto langs = fam.all_languages();
  int exact = 0;
  for (int i = 0; i < 1000; ++i) {
    const LanguageTag& a = langs[rng.uniform_int(0, static_cast<int64_t>(langs.size()) - 1)];
    const LanguageTag& b = langs[rng.uniform_int(0, static_cast<int64_t>(langs.size()) - 1)];
    Sentence s = sample_sentence(fam, a, rng);
    Sentence back = oracle_translate(fam, oracle_translate(fam, s, a, b), b, a);
    if (back == s) ++exact;
  }
  CHECK(exact == 1000);
}

TEST_CASE("oracle_translate rejects unknown tokens by name") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  Sentence bad({"zzzzzz"});
  try {
    oracle_translate(fam, bad, fam.originals[0], fam.pivot);
    FAIL("expected error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("zzzzzz") != std::string::npos);
  }
}

TEST_CASE("oracle_langid majority rule") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  const LanguageTag a = fam.originals[0];
  const LanguageTag b = fam.originals[1];
  Rng rng(5);
  Sentence sa = sample_sentence(fam, a, rng);
  auto id = oracle_langid(fam, sa);
  REQUIRE(id.has_value());
  CHECK(*id == a);

  // 50/50 mix has no strict majority.
  const auto& ta = fam.transforms.at(a.code);
  const auto& tb = fam.transforms.at(b.code);
  Sentence mix({ta.surface[0], ta.surface[1], tb.surface[2], tb.surface[3]});
  CHECK(!oracle_langid(fam, mix).has_value());
}

TEST_CASE("oracle_langid agrees with oracle_translate on 1000 samples") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  Rng rng(17);
  auto langs = fam.all_languages();
  int correct = 0;
  for (int i = 0; i < 1000; ++i) {
    const LanguageTag& a = langs[rng.uniform_int(0, static_cast<int64_t>(langs.size()) - 1)];
    const LanguageTag& b = langs[rng.uniform_int(0, static_cast<int64_t>(langs.size()) - 1)];
    Sentence s = sample_sentence(fam, a, rng);
    Sentence t = oracle_translate(fam, s, a, b);
    auto id = oracle_langid(fam, t);
    if (id && *id == b) ++correct;
  }
  CHECK(correct == 1000);
}

TEST_CASE("sample_gold_corpus pairs are oracle consistent") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  const LanguageTag lang = fam.originals[2];

  ParallelCorpus one = sample_gold_corpus(fam, lang, 1, 3);
  CHECK(one.pairs.size() == 1);

  ParallelCorpus c = sample_gold_corpus(fam, lang, 200, 3);
  for (const auto& [src, tgt] : c.pairs)
    CHECK(oracle_translate(fam, src, lang, fam.pivot) == tgt);

  ParallelCorpus c2 = sample_gold_corpus(fam, lang, 200, 3);
  REQUIRE(c.pairs.size() == c2.pairs.size());
  for (size_t i = 0; i < c.pairs.size(); ++i) {
    CHECK(c.pairs[i].first == c2.pairs[i].first);
    CHECK(c.pairs[i].second == c2.pairs[i].second);
  }
}

TEST_CASE("disjoint seeds give near-disjoint samples") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  const LanguageTag lang = fam.originals[0];
  std::vector<std::set<std::string>> runs;
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    ParallelCorpus c = sample_gold_corpus(fam, lang, 100, seed);
    std::set<std::string> keys;
    for (const auto& [src, tgt] : c.pairs) keys.insert(src.joined());
    runs.push_back(std::move(keys));
  }
  long worst = 0;
  for (size_t i = 0; i < runs.size(); ++i)
    for (size_t j = i + 1; j < runs.size(); ++j) {
      long overlap = 0;
      for (const auto& k : runs[i])
        if (runs[j].count(k)) ++overlap;
      worst = std::max(worst, overlap);
    }
  CHECK(worst <= 10);  // <= 10% of 100 sentences shared between any two seeds
}

TEST_CASE("sample_gold_corpus rejects n < 1") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  CHECK_THROWS(sample_gold_corpus(fam, fam.originals[0], 0, 3));
}

TEST_CASE("family json round-trip preserves oracle behavior") {
  LanguageFamily fam = make_language_family(spec6(), 7);
  LanguageFamily back = LanguageFamily::from_json(fam.to_json());
  CHECK(back.to_json() == fam.to_json());
  Rng rng(4);
  Sentence s = sample_sentence(fam, fam.originals[1], rng);
  CHECK(oracle_translate(back, s, fam.originals[1], fam.pivot) ==
        oracle_translate(fam, s, fam.originals[1], fam.pivot));
}
