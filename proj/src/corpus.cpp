#include "imitmt/corpus.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace imitmt {

ParallelCorpus preprocess(const ParallelCorpus& c, int max_tokens, const LanguageFamily& family) {
  if (max_tokens < 1) throw std::runtime_error("preprocess: max_tokens must be >= 1");
  ParallelCorpus out;
  out.src_lang = c.src_lang;
  out.tgt_lang = c.tgt_lang;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& [src, tgt] : c.pairs) {
    if (src.tokens.empty() || tgt.tokens.empty()) continue;
    if (static_cast<int>(src.tokens.size()) > max_tokens ||
        static_cast<int>(tgt.tokens.size()) > max_tokens)
      continue;
    auto src_id = oracle_langid(family, src);
    auto tgt_id = oracle_langid(family, tgt);
    if (!src_id || *src_id != c.src_lang) continue;
    if (!tgt_id || *tgt_id != c.tgt_lang) continue;
    if (!seen.insert({src.joined(), tgt.joined()}).second) continue;
    out.pairs.emplace_back(src, tgt);
  }
  return out;
}

namespace {

Sentence parse_sentence(const std::string& text) {
  Sentence s;
  std::istringstream is(text);
  std::string w;
  while (is >> w) s.tokens.push_back(w);
  return s;
}

}  // namespace

void save_corpus(const std::string& path, const ParallelCorpus& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus: " + path);
  for (const auto& [src, tgt] : c.pairs) out << src.joined() << '\t' << tgt.joined() << '\n';
}

ParallelCorpus load_corpus(const std::string& path, const LanguageTag& src_lang,
                           const LanguageTag& tgt_lang) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus: " + path);
  ParallelCorpus c;
  c.src_lang = src_lang;
  c.tgt_lang = tgt_lang;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": missing TAB separator");
    c.pairs.emplace_back(parse_sentence(line.substr(0, tab)), parse_sentence(line.substr(tab + 1)));
  }
  return c;
}

void save_sentences(const std::string& path, const std::vector<Sentence>& sents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write sentences: " + path);
  for (const auto& s : sents) out << s.joined() << '\n';
}

std::vector<Sentence> load_sentences(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open sentences: " + path);
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(parse_sentence(line));
  return out;
}

}  // namespace imitmt
