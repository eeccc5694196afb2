#pragma once

#include <string>

#include "imitmt/synthlang.hpp"
#include "imitmt/types.hpp"

namespace imitmt {

/// Cleaning pipeline: drops empty-sided pairs, exact duplicates, pairs with
/// a side longer than max_tokens whitespace words (sides of exactly
/// max_tokens are kept), and pairs where either side is not identified as
/// its declared language. Never fails; survivor order is preserved.
ParallelCorpus preprocess(const ParallelCorpus& c, int max_tokens, const LanguageFamily& family);

constexpr int kDefaultMaxTokens = 120;

/// One pair per line, source and target separated by a single TAB, tokens
/// separated by single spaces.
void save_corpus(const std::string& path, const ParallelCorpus& c);
ParallelCorpus load_corpus(const std::string& path, const LanguageTag& src_lang,
                           const LanguageTag& tgt_lang);

/// One sentence per line, tokens separated by single spaces.
void save_sentences(const std::string& path, const std::vector<Sentence>& sents);
std::vector<Sentence> load_sentences(const std::string& path);

}  // namespace imitmt
