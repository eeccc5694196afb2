#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "imitmt/corpus.hpp"
#include "imitmt/tokenizer.hpp"

using namespace imitmt;

namespace {

FamilySpec small_spec() {
  FamilySpec s;
  s.pivot = "piv";
  s.originals = {"aaa", "bbb"};
  s.new_langs = {"nov"};
  s.lexicon_size = 50;
  return s;
}

Sentence words_of(const LanguageFamily& fam, const std::string& code, std::vector<int> idx) {
  Sentence s;
  for (int i : idx)
    s.tokens.push_back(code == fam.pivot.code ? fam.pivot_lexicon[i]
                                              : fam.transforms.at(code).surface[i]);
  return s;
}

}  // namespace

TEST_CASE("preprocess drops duplicates keeping one copy, order preserved") {
  LanguageFamily fam = make_language_family(small_spec(), 7);
  ParallelCorpus c = sample_gold_corpus(fam, fam.originals[0], 5, 1);
  c.src_lang = fam.originals[0];
  c.tgt_lang = fam.pivot;
  ParallelCorpus dup = c;
  dup.pairs.push_back(c.pairs[2]);
  dup.pairs.push_back(c.pairs[2]);

  ParallelCorpus out = preprocess(dup, 120, fam);
  // survivors keep the original order; later duplicates vanish
  CHECK(out.pairs.size() <= 5);
  std::set<std::string> seen;
  for (const auto& [s, t] : out.pairs) CHECK(seen.insert(s.joined() + "\t" + t.joined()).second);
}

TEST_CASE("preprocess token-limit boundary: 121 dropped, 120 kept") {
  LanguageFamily fam = make_language_family(small_spec(), 7);
  const LanguageTag lang = fam.originals[0];
  ParallelCorpus c;
  c.src_lang = lang;
  c.tgt_lang = fam.pivot;

  Sentence piv120, piv121;
  for (int i = 0; i < 120; ++i) piv120.tokens.push_back(fam.pivot_lexicon[i % 50]);
  piv121 = piv120;
  piv121.tokens.push_back(fam.pivot_lexicon[0]);

  c.pairs.emplace_back(oracle_translate(fam, piv120, fam.pivot, lang), piv120);
  c.pairs.emplace_back(oracle_translate(fam, piv121, fam.pivot, lang), piv121);

  ParallelCorpus out = preprocess(c, 120, fam);
  REQUIRE(out.pairs.size() == 1);
  CHECK(out.pairs[0].second.size() == 120);
}

TEST_CASE("preprocess filters language-mismatched pairs") {
  LanguageFamily fam = make_language_family(small_spec(), 7);
  const LanguageTag lang = fam.originals[0];
  ParallelCorpus c = sample_gold_corpus(fam, lang, 100, 2);
  ParallelCorpus clean = preprocess(c, 120, fam);
  const size_t n_clean = clean.pairs.size();

  // 5 pairs whose source side is in the wrong language
  ParallelCorpus mixed = clean;
  for (int i = 0; i < 5; ++i) {
    Sentence wrong = oracle_translate(fam, clean.pairs[i].first, lang, fam.originals[1]);
    mixed.pairs.emplace_back(wrong, clean.pairs[i].second);
  }
  ParallelCorpus out = preprocess(mixed, 120, fam);
  CHECK(out.pairs.size() == n_clean);
}

TEST_CASE("preprocess is idempotent and drops empty sides") {
  LanguageFamily fam = make_language_family(small_spec(), 7);
  ParallelCorpus c = sample_gold_corpus(fam, fam.originals[0], 50, 3);
  c.pairs.emplace_back(Sentence{}, c.pairs[0].second);
  ParallelCorpus once = preprocess(c, 120, fam);
  ParallelCorpus twice = preprocess(once, 120, fam);
  REQUIRE(once.pairs.size() == twice.pairs.size());
  for (size_t i = 0; i < once.pairs.size(); ++i) {
    CHECK(once.pairs[i].first == twice.pairs[i].first);
    CHECK(once.pairs[i].second == twice.pairs[i].second);
  }
}

TEST_CASE("corpus file round-trip") {
  LanguageFamily fam = make_language_family(small_spec(), 7);
  ParallelCorpus c = sample_gold_corpus(fam, fam.originals[1], 40, 9);
  const std::string path = "test_corpus_roundtrip.tsv";
  save_corpus(path, c);
  ParallelCorpus back = load_corpus(path, c.src_lang, c.tgt_lang);
  REQUIRE(back.pairs.size() == c.pairs.size());
  for (size_t i = 0; i < c.pairs.size(); ++i) {
    CHECK(back.pairs[i].first == c.pairs[i].first);
    CHECK(back.pairs[i].second == c.pairs[i].second);
  }
  std::filesystem::remove(path);
}

// ---------------------------------------------------------------------------
// Tokenizer

namespace {

ParallelCorpus tiny_corpus(const std::vector<std::pair<std::string, std::string>>& lines) {
  ParallelCorpus c;
  c.src_lang = LanguageTag("aaa");
  c.tgt_lang = LanguageTag("piv");
  for (const auto& [s, t] : lines) {
    Sentence src, tgt;
    std::istringstream is(s), it(t);
    std::string w;
    while (is >> w) src.tokens.push_back(w);
    while (it >> w) tgt.tokens.push_back(w);
    c.pairs.emplace_back(src, tgt);
  }
  return c;
}

std::vector<LanguageTag> tags2() { return {LanguageTag("aaa"), LanguageTag("piv")}; }

}  // namespace

TEST_CASE("zero merge budget splits to characters") {
  ParallelCorpus c = tiny_corpus({{"ab", "cd"}});
  // charset: boundary + a,b,c,d = 5; reserved 4 + 2 tags = 6; total 11
  Tokenizer tok = Tokenizer::train({&c}, 11, tags2());
  CHECK(tok.vocab_size() == 11);
  TokenSequence t = tok.encode_target(Sentence({"ab"}));
  // bos + boundary + 'a' + 'b' + eos
  CHECK(t.size() == 5);
}

TEST_CASE("vocab_size below reserved+charset is rejected") {
  ParallelCorpus c = tiny_corpus({{"ab", "cd"}});
  CHECK_THROWS(Tokenizer::train({&c}, 8, tags2()));
}

TEST_CASE("most frequent pair is merged first") {
  // "ab" appears 5 times: the boundary+a pair and a+b pair lead the counts;
  // hand count: (▁,a)=5, (a,b)=5, (▁,c)=1, (c,d)=1 -> tie broken
  // lexicographically puts (▁,a) after (a,b)? byte order: '▁' (0xE2...) > 'a',
  // so (a,b) is the lexicographically smallest max-count pair.
  ParallelCorpus c = tiny_corpus({{"ab ab ab", "ab ab cd"}});
  Tokenizer tok = Tokenizer::train({&c}, 40, tags2());
  const std::string text = tok.to_text();
  const std::string first_line = text.substr(0, text.find('\n'));
  CHECK(first_line == "a b");
}

TEST_CASE("encode/decode round-trip on family corpora") {
  LanguageFamily fam = make_language_family(small_spec(), 7);
  ParallelCorpus a = sample_gold_corpus(fam, fam.originals[0], 150, 1);
  ParallelCorpus b = sample_gold_corpus(fam, fam.originals[1], 150, 2);
  ParallelCorpus n = sample_gold_corpus(fam, fam.new_langs[0], 150, 3);
  Tokenizer tok = Tokenizer::train({&a, &b, &n}, 400, fam.all_languages());

  for (const ParallelCorpus* c : {&a, &b, &n}) {
    for (const auto& [src, tgt] : c->pairs) {
      CHECK(tok.decode(tok.encode_source(src, c->src_lang, c->tgt_lang)) == src);
      CHECK(tok.decode(tok.encode_target(tgt)) == tgt);
    }
  }
}

TEST_CASE("source encoding starts with the two tag ids") {
  LanguageFamily fam = make_language_family(small_spec(), 7);
  ParallelCorpus a = sample_gold_corpus(fam, fam.originals[0], 50, 1);
  Tokenizer tok = Tokenizer::train({&a}, 300, fam.all_languages());
  Sentence s = a.pairs[0].first;

  TokenSequence enc = tok.encode_source(s, fam.originals[0], fam.pivot);
  CHECK(enc.ids[0] == tok.tag_id(fam.originals[0]));
  CHECK(enc.ids[1] == tok.tag_id(fam.pivot));
  CHECK(enc.ids.back() == Tokenizer::kEos);

  TokenSequence tgt = tok.encode_target(s);
  CHECK(tgt.ids.front() == Tokenizer::kBos);
  CHECK(tgt.ids.back() == Tokenizer::kEos);

  // swapping the target tag changes exactly one id
  TokenSequence enc2 = tok.encode_source(s, fam.originals[0], fam.originals[1]);
  REQUIRE(enc.size() == enc2.size());
  int diff = 0;
  for (size_t i = 0; i < enc.size(); ++i)
    if (enc.ids[i] != enc2.ids[i]) ++diff;
  CHECK(diff == 1);
}

TEST_CASE("encode_for_model dispatches by side") {
  LanguageFamily fam = make_language_family(small_spec(), 7);
  ParallelCorpus a = sample_gold_corpus(fam, fam.originals[0], 20, 1);
  Tokenizer tok = Tokenizer::train({&a}, 300, fam.all_languages());
  Sentence s = a.pairs[0].first;
  CHECK(encode_for_model(tok, s, fam.originals[0], fam.pivot, Side::Source) ==
        tok.encode_source(s, fam.originals[0], fam.pivot));
  CHECK(encode_for_model(tok, s, fam.originals[0], fam.pivot, Side::Target) ==
        tok.encode_target(s));
}

TEST_CASE("unknown characters encode to unk without failing") {
  ParallelCorpus c = tiny_corpus({{"ab", "cd"}});
  Tokenizer tok = Tokenizer::train({&c}, 20, tags2());
  TokenSequence t = tok.encode_target(Sentence({"xy"}));
  bool has_unk = false;
  for (int id : t.ids) has_unk |= id == Tokenizer::kUnk;
  CHECK(has_unk);
}

TEST_CASE("tokenizer serialization round-trip and stable hash") {
  LanguageFamily fam = make_language_family(small_spec(), 7);
  ParallelCorpus a = sample_gold_corpus(fam, fam.originals[0], 100, 1);
  Tokenizer tok = Tokenizer::train({&a}, 350, fam.all_languages());
  Tokenizer back = Tokenizer::from_text(tok.to_text());
  CHECK(back.to_text() == tok.to_text());
  CHECK(back.hash() == tok.hash());
  CHECK(back.vocab_size() == tok.vocab_size());
  CHECK(back.tag_id(fam.pivot) == tok.tag_id(fam.pivot));
  Sentence s = a.pairs[0].first;
  CHECK(back.encode_source(s, fam.originals[0], fam.pivot) ==
        tok.encode_source(s, fam.originals[0], fam.pivot));

  // determinism of training
  Tokenizer tok2 = Tokenizer::train({&a}, 350, fam.all_languages());
  CHECK(tok2.to_text() == tok.to_text());
}
