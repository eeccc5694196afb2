#include "imitmt/synthlang.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace imitmt {

using json = nlohmann::ordered_json;

namespace {

// Pronounceable CV(C) word generator over a fixed alphabet.
const char* kConsonants = "bdfgklmnprstvz";
const char* kVowels = "aeiou";

std::string random_word(Rng& rng) {
  const int syllables = static_cast<int>(rng.uniform_int(2, 3));
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w += kConsonants[rng.uniform_int(0, 13)];
    w += kVowels[rng.uniform_int(0, 4)];
  }
  if (rng.uniform_real() < 0.3) w += kConsonants[rng.uniform_int(0, 13)];
  return w;
}

std::string fresh_word(Rng& rng, std::set<std::string>& used) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::string w = random_word(rng);
    if (used.insert(w).second) return w;
  }
  throw std::runtime_error("lexicon too small: cannot draw enough disjoint surface words");
}

std::vector<double> zipf_cdf(int n, double exponent) {
  std::vector<double> cdf(n);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    total += std::pow(static_cast<double>(i + 1), -exponent);
    cdf[i] = total;
  }
  for (double& c : cdf) c /= total;
  return cdf;
}

}  // namespace

std::vector<LanguageTag> LanguageFamily::all_languages() const {
  std::vector<LanguageTag> all;
  all.push_back(pivot);
  all.insert(all.end(), originals.begin(), originals.end());
  all.insert(all.end(), new_langs.begin(), new_langs.end());
  return all;
}

bool LanguageFamily::has_language(const LanguageTag& t) const {
  for (const auto& l : all_languages())
    if (l == t) return true;
  return false;
}

const std::string* LanguageFamily::owner_of(const std::string& token) const {
  auto it = token_owner_.find(token);
  return it == token_owner_.end() ? nullptr : &it->second;
}

void LanguageFamily::rebuild_indexes() {
  token_owner_.clear();
  for (size_t i = 0; i < pivot_lexicon.size(); ++i) token_owner_[pivot_lexicon[i]] = pivot.code;
  for (auto& [code, tr] : transforms) {
    tr.surface_to_index.clear();
    for (size_t i = 0; i < tr.surface.size(); ++i) {
      tr.surface_to_index[tr.surface[i]] = static_cast<int>(i);
      token_owner_[tr.surface[i]] = code;
    }
  }
}

LanguageFamily make_language_family(const FamilySpec& spec, uint64_t seed) {
  if (spec.pivot.empty()) throw std::runtime_error("family spec: pivot required");
  if (spec.originals.size() < 2) throw std::runtime_error("family spec: need >= 2 original languages");
  if (spec.new_langs.empty()) throw std::runtime_error("family spec: need >= 1 new language");
  if (spec.lexicon_size < 50) throw std::runtime_error("family spec: lexicon_size must be >= 50");

  std::set<std::string> codes(spec.originals.begin(), spec.originals.end());
  codes.insert(spec.pivot);
  for (const auto& c : spec.new_langs) codes.insert(c);
  if (codes.size() != spec.originals.size() + spec.new_langs.size() + 1)
    throw std::runtime_error("family spec: language codes must be unique");

  LanguageFamily fam;
  fam.pivot = LanguageTag(spec.pivot);
  for (const auto& c : spec.originals) fam.originals.emplace_back(c);
  for (const auto& c : spec.new_langs) fam.new_langs.emplace_back(c);

  Rng rng(derive_seed(seed, "family"));
  std::set<std::string> used;
  fam.pivot_lexicon.reserve(spec.lexicon_size);
  for (int i = 0; i < spec.lexicon_size; ++i) fam.pivot_lexicon.push_back(fresh_word(rng, used));

  std::vector<std::string> non_pivot;
  for (const auto& t : fam.originals) non_pivot.push_back(t.code);
  for (const auto& t : fam.new_langs) non_pivot.push_back(t.code);

  for (const auto& code : non_pivot) {
    LanguageTransform tr;
    tr.suffix = std::string(1, kVowels[rng.uniform_int(0, 4)]) +
                kConsonants[rng.uniform_int(0, 13)];
    tr.swap_adjacent = rng.uniform_real() < 0.5;
    // Random bijection pivot index -> surface word; every 5th mapped word
    // carries the language suffix, so 20% of the lexicon is affixed.
    std::vector<int> perm(spec.lexicon_size);
    for (int i = 0; i < spec.lexicon_size; ++i) perm[i] = i;
    rng.shuffle(perm);
    tr.surface.resize(spec.lexicon_size);
    for (int i = 0; i < spec.lexicon_size; ++i) {
      std::string w = fresh_word(rng, used);
      if (perm[i] % 5 == 0) {
        w += tr.suffix;
        if (!used.insert(w).second)
          throw std::runtime_error("lexicon too small: suffixed surface collision");
      }
      tr.surface[i] = w;
    }
    fam.transforms[code] = std::move(tr);
  }

  fam.rebuild_indexes();
  return fam;
}

namespace {

// pivot -> lang: substitute each word, then apply the language's reordering.
Sentence pivot_to_lang(const LanguageFamily& fam, const Sentence& s, const std::string& code) {
  const LanguageTransform& tr = fam.transforms.at(code);
  Sentence out;
  out.tokens.reserve(s.tokens.size());
  for (const auto& w : s.tokens) {
    auto it = std::find(fam.pivot_lexicon.begin(), fam.pivot_lexicon.end(), w);
    if (it == fam.pivot_lexicon.end())
      throw std::runtime_error("oracle_translate: unknown token '" + w + "' for language " +
                               fam.pivot.code);
    out.tokens.push_back(tr.surface[it - fam.pivot_lexicon.begin()]);
  }
  if (tr.swap_adjacent)
    for (size_t i = 0; i + 1 < out.tokens.size(); i += 2) std::swap(out.tokens[i], out.tokens[i + 1]);
  return out;
}

// lang -> pivot: undo the reordering (an involution), then substitute back.
Sentence lang_to_pivot(const LanguageFamily& fam, const Sentence& s, const std::string& code) {
  const LanguageTransform& tr = fam.transforms.at(code);
  Sentence mid = s;
  if (tr.swap_adjacent)
    for (size_t i = 0; i + 1 < mid.tokens.size(); i += 2) std::swap(mid.tokens[i], mid.tokens[i + 1]);
  Sentence out;
  out.tokens.reserve(mid.tokens.size());
  for (const auto& w : mid.tokens) {
    auto it = tr.surface_to_index.find(w);
    if (it == tr.surface_to_index.end())
      throw std::runtime_error("oracle_translate: unknown token '" + w + "' for language " + code);
    out.tokens.push_back(fam.pivot_lexicon[it->second]);
  }
  return out;
}

}  // namespace

Sentence oracle_translate(const LanguageFamily& family, const Sentence& s,
                          const LanguageTag& src, const LanguageTag& tgt) {
  if (!family.has_language(src)) throw std::runtime_error("unknown source language " + src.code);
  if (!family.has_language(tgt)) throw std::runtime_error("unknown target language " + tgt.code);
  Sentence as_pivot = (src == family.pivot) ? s : lang_to_pivot(family, s, src.code);
  if (src == family.pivot) {
    // Validate pivot tokens even for identity translations.
    for (const auto& w : s.tokens) {
      const std::string* owner = family.owner_of(w);
      if (owner == nullptr || *owner != family.pivot.code)
        throw std::runtime_error("oracle_translate: unknown token '" + w + "' for language " +
                                 family.pivot.code);
    }
  }
  if (tgt == family.pivot) return as_pivot;
  return pivot_to_lang(family, as_pivot, tgt.code);
}

std::optional<LanguageTag> oracle_langid(const LanguageFamily& family, const Sentence& s) {
  if (s.tokens.empty()) return std::nullopt;
  std::map<std::string, size_t> counts;
  for (const auto& w : s.tokens) {
    const std::string* owner = family.owner_of(w);
    if (owner != nullptr) counts[*owner]++;
  }
  for (const auto& [code, n] : counts)
    if (2 * n > s.tokens.size()) return LanguageTag(code);
  return std::nullopt;
}

Sentence sample_sentence(const LanguageFamily& family, const LanguageTag& lang, Rng& rng) {
  static thread_local std::vector<double> cdf_cache;
  static thread_local size_t cdf_n = 0;
  const size_t n = family.pivot_lexicon.size();
  if (cdf_n != n) {
    cdf_cache = zipf_cdf(static_cast<int>(n), 1.1);
    cdf_n = n;
  }
  const int len = static_cast<int>(rng.uniform_int(3, 20));
  Sentence pivot_sent;
  pivot_sent.tokens.reserve(len);
  for (int i = 0; i < len; ++i) {
    const double u = rng.uniform_real();
    const auto it = std::lower_bound(cdf_cache.begin(), cdf_cache.end(), u);
    const size_t idx = std::min(n - 1, static_cast<size_t>(it - cdf_cache.begin()));
    pivot_sent.tokens.push_back(family.pivot_lexicon[idx]);
  }
  if (lang == family.pivot) return pivot_sent;
  return pivot_to_lang(family, pivot_sent, lang.code);
}

ParallelCorpus sample_gold_corpus(const LanguageFamily& family, const LanguageTag& lang,
                                  int n, uint64_t seed) {
  if (n < 1) throw std::runtime_error("sample_gold_corpus: n must be >= 1");
  if (!family.has_language(lang)) throw std::runtime_error("unknown language " + lang.code);
  Rng rng(derive_seed(seed, "gold:" + lang.code));
  ParallelCorpus c;
  c.src_lang = lang;
  c.tgt_lang = family.pivot;
  c.pairs.reserve(n);
  for (int i = 0; i < n; ++i) {
    Sentence pivot_side = sample_sentence(family, family.pivot, rng);
    Sentence lang_side =
        (lang == family.pivot) ? pivot_side : pivot_to_lang(family, pivot_side, lang.code);
    c.pairs.emplace_back(std::move(lang_side), std::move(pivot_side));
  }
  return c;
}

std::string LanguageFamily::to_json() const {
  json j;
  j["pivot"] = pivot.code;
  json originals_j = json::array();
  for (const auto& t : originals) originals_j.push_back(t.code);
  j["originals"] = originals_j;
  json new_j = json::array();
  for (const auto& t : new_langs) new_j.push_back(t.code);
  j["new"] = new_j;
  j["lexicon"] = pivot_lexicon;
  json tr_j = json::object();
  for (const auto& [code, tr] : transforms) {
    json t;
    t["surface"] = tr.surface;
    t["suffix"] = tr.suffix;
    t["swap_adjacent"] = tr.swap_adjacent;
    tr_j[code] = t;
  }
  j["transforms"] = tr_j;
  return j.dump(2);
}

LanguageFamily family_from_json_impl(const std::string& text) {
  json j = json::parse(text);
  LanguageFamily fam;
  fam.pivot = LanguageTag(j.at("pivot").get<std::string>());
  for (const auto& c : j.at("originals")) fam.originals.emplace_back(c.get<std::string>());
  for (const auto& c : j.at("new")) fam.new_langs.emplace_back(c.get<std::string>());
  fam.pivot_lexicon = j.at("lexicon").get<std::vector<std::string>>();
  for (const auto& [code, t] : j.at("transforms").items()) {
    LanguageTransform tr;
    tr.surface = t.at("surface").get<std::vector<std::string>>();
    tr.suffix = t.at("suffix").get<std::string>();
    tr.swap_adjacent = t.at("swap_adjacent").get<bool>();
    fam.transforms[code] = std::move(tr);
  }
  fam.rebuild_indexes();
  return fam;
}

LanguageFamily LanguageFamily::from_json(const std::string& text) {
  return family_from_json_impl(text);
}

FamilySpec family_spec_from_json_file(const std::string& path, uint64_t* seed_out) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open family spec: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j = json::parse(ss.str());
  FamilySpec spec;
  spec.pivot = j.at("pivot").get<std::string>();
  spec.originals = j.at("originals").get<std::vector<std::string>>();
  spec.new_langs = j.at("new").get<std::vector<std::string>>();
  spec.lexicon_size = j.value("lexicon_size", 60);
  if (seed_out != nullptr) *seed_out = j.value("seed", static_cast<uint64_t>(7));
  return spec;
}

}  // namespace imitmt
