#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "imitmt/rng.hpp"
#include "imitmt/types.hpp"

namespace imitmt {

/// Configuration of a synthetic language family.
struct FamilySpec {
  std::string pivot;
  std::vector<std::string> originals;
  std::vector<std::string> new_langs;
  int lexicon_size = 60;
};

/// One non-pivot language: an invertible word substitution over the pivot
/// lexicon plus a deterministic local-reordering rule. The per-language
/// suffix is baked into the stored surface forms at construction time.
struct LanguageTransform {
  std::vector<std::string> surface;  // surface[i] translates pivot word i
  std::string suffix;
  bool swap_adjacent = false;
  std::unordered_map<std::string, int> surface_to_index;
};

/// A pivot language plus derived original/new languages related by exact,
/// invertible transformations. Provides oracle translation and oracle
/// language identification for every sentence the family can produce.
class LanguageFamily {
 public:
  LanguageTag pivot;
  std::vector<LanguageTag> originals;
  std::vector<LanguageTag> new_langs;
  std::vector<std::string> pivot_lexicon;
  std::map<std::string, LanguageTransform> transforms;  // keyed by code, pivot excluded

  std::vector<LanguageTag> all_languages() const;
  bool has_language(const LanguageTag& t) const;
  int lexicon_size() const { return static_cast<int>(pivot_lexicon.size()); }

  /// Maps a surface token to the code of the language owning it, or empty.
  const std::string* owner_of(const std::string& token) const;

  std::string to_json() const;
  static LanguageFamily from_json(const std::string& text);

 private:
  friend LanguageFamily make_language_family(const FamilySpec&, uint64_t);
  friend LanguageFamily family_from_json_impl(const std::string&);
  void rebuild_indexes();
  std::unordered_map<std::string, std::string> token_owner_;
};

/// Builds a family deterministically from (spec, seed). Throws if the spec
/// names too few languages or the lexicon is too small to keep per-language
/// surface lexicons pairwise disjoint.
LanguageFamily make_language_family(const FamilySpec& spec, uint64_t seed);

/// Exact translation via src -> pivot -> tgt composition. Throws on a token
/// unknown to the source language, naming the token.
Sentence oracle_translate(const LanguageFamily& family, const Sentence& s,
                          const LanguageTag& src, const LanguageTag& tgt);

/// Language owning a strict majority (>50%) of the sentence's tokens;
/// nullopt when no language does ("unknown"). Total function.
std::optional<LanguageTag> oracle_langid(const LanguageFamily& family, const Sentence& s);

/// Draws one sentence of `lang`: pivot-side length uniform in [3, 20],
/// words Zipf(1.1) over the lexicon, then transformed to `lang`.
Sentence sample_sentence(const LanguageFamily& family, const LanguageTag& lang, Rng& rng);

/// n oracle-consistent (lang, pivot) pairs, deterministic per (family, lang, n, seed).
ParallelCorpus sample_gold_corpus(const LanguageFamily& family, const LanguageTag& lang,
                                  int n, uint64_t seed);

FamilySpec family_spec_from_json_file(const std::string& path, uint64_t* seed_out);

}  // namespace imitmt
