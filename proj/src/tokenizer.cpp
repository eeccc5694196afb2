#include "imitmt/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "imitmt/hash.hpp"

namespace imitmt {

namespace {

const std::string kBoundary = "\xe2\x96\x81";  // "▁", marks a word start

// Splits a UTF-8 string into codepoint-sized symbol strings.
std::vector<std::string> utf8_chars(const std::string& s) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if ((c & 0x80) == 0x00) len = 1;
    else if ((c & 0xe0) == 0xc0) len = 2;
    else if ((c & 0xf0) == 0xe0) len = 3;
    else if ((c & 0xf8) == 0xf0) len = 4;
    len = std::min(len, s.size() - i);
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> word_symbols(const std::string& word) {
  std::vector<std::string> syms;
  syms.push_back(kBoundary);
  for (auto& c : utf8_chars(word)) syms.push_back(c);
  return syms;
}

std::string tag_token(const std::string& code) { return "__" + code + "__"; }

}  // namespace

Tokenizer Tokenizer::train(const std::vector<const ParallelCorpus*>& corpora, int vocab_size,
                           const std::vector<LanguageTag>& tags) {
  // Word frequencies over every side of every corpus.
  std::map<std::string, long> word_freq;
  for (const ParallelCorpus* c : corpora) {
    for (const auto& [src, tgt] : c->pairs) {
      for (const auto& w : src.tokens) word_freq[w]++;
      for (const auto& w : tgt.tokens) word_freq[w]++;
    }
  }
  if (word_freq.empty()) throw std::runtime_error("train_tokenizer: empty training corpora");

  std::set<std::string> charset;
  charset.insert(kBoundary);
  for (const auto& [w, f] : word_freq)
    for (auto& c : utf8_chars(w)) charset.insert(c);

  Tokenizer tok;
  tok.tags_ = tags;
  tok.id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& t : tags) tok.id_to_token_.push_back(tag_token(t.code));
  for (const auto& c : charset) tok.id_to_token_.push_back(c);

  const int base = static_cast<int>(tok.id_to_token_.size());
  if (vocab_size < base)
    throw std::runtime_error("train_tokenizer: vocab_size " + std::to_string(vocab_size) +
                             " smaller than reserved+charset " + std::to_string(base));

  // Working state: each distinct word as a symbol sequence with its frequency.
  std::vector<std::pair<std::vector<std::string>, long>> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) words.emplace_back(word_symbols(w), f);

  std::set<std::string> vocab_set(tok.id_to_token_.begin(), tok.id_to_token_.end());
  while (static_cast<int>(tok.id_to_token_.size()) < vocab_size) {
    std::map<std::pair<std::string, std::string>, long> pair_freq;
    for (const auto& [syms, f] : words)
      for (size_t i = 0; i + 1 < syms.size(); ++i)
        pair_freq[{syms[i], syms[i + 1]}] += f;
    if (pair_freq.empty()) break;
    // Highest count wins; ties resolved lexicographically by the map order.
    auto best = pair_freq.begin();
    for (auto it = pair_freq.begin(); it != pair_freq.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [left, right] = best->first;
    if (best->second <= 0) break;

    tok.merge_rank_[{left, right}] = static_cast<int>(tok.merges_.size());
    tok.merges_.emplace_back(left, right);
    const std::string merged = left + right;
    if (vocab_set.insert(merged).second) tok.id_to_token_.push_back(merged);

    for (auto& [syms, f] : words) {
      std::vector<std::string> out;
      out.reserve(syms.size());
      size_t i = 0;
      while (i < syms.size()) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          out.push_back(merged);
          i += 2;
        } else {
          out.push_back(syms[i]);
          i += 1;
        }
      }
      syms = std::move(out);
    }
  }

  // Corpus exhausted before reaching the requested size: pad with inert ids
  // so the id space is dense and exactly vocab_size.
  int filler = 0;
  while (static_cast<int>(tok.id_to_token_.size()) < vocab_size)
    tok.id_to_token_.push_back("<unused_" + std::to_string(filler++) + ">");

  for (size_t i = 0; i < tok.id_to_token_.size(); ++i)
    tok.token_to_id_[tok.id_to_token_[i]] = static_cast<int>(i);
  return tok;
}

int Tokenizer::tag_id(const LanguageTag& tag) const {
  auto it = token_to_id_.find(tag_token(tag.code));
  if (it == token_to_id_.end())
    throw std::runtime_error("tokenizer: unknown language tag " + tag.code);
  return it->second;
}

std::vector<int> Tokenizer::encode_word(const std::string& word) const {
  std::vector<std::string> syms = word_symbols(word);
  // Apply merges in rank order: repeatedly take the lowest-ranked applicable pair.
  while (syms.size() > 1) {
    int best_rank = -1;
    size_t best_pos = 0;
    for (size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = merge_rank_.find({syms[i], syms[i + 1]});
      if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
        best_rank = it->second;
        best_pos = i;
      }
    }
    if (best_rank < 0) break;
    const auto& [left, right] = merges_[best_rank];
    std::vector<std::string> out;
    out.reserve(syms.size());
    size_t i = 0;
    while (i < syms.size()) {
      if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
        out.push_back(left + right);
        i += 2;
      } else {
        out.push_back(syms[i]);
        i += 1;
      }
    }
    syms = std::move(out);
  }
  std::vector<int> ids;
  ids.reserve(syms.size());
  for (const auto& s : syms) {
    auto it = token_to_id_.find(s);
    ids.push_back(it == token_to_id_.end() ? kUnk : it->second);
  }
  return ids;
}

TokenSequence Tokenizer::encode_source(const Sentence& s, const LanguageTag& src,
                                       const LanguageTag& tgt) const {
  TokenSequence seq;
  seq.ids.push_back(tag_id(src));
  seq.ids.push_back(tag_id(tgt));
  for (const auto& w : s.tokens) {
    auto ids = encode_word(w);
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  }
  seq.ids.push_back(kEos);
  return seq;
}

TokenSequence Tokenizer::encode_target(const Sentence& s) const {
  TokenSequence seq;
  seq.ids.push_back(kBos);
  for (const auto& w : s.tokens) {
    auto ids = encode_word(w);
    seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  }
  seq.ids.push_back(kEos);
  return seq;
}

Sentence Tokenizer::decode(const TokenSequence& seq) const {
  std::string flat;
  for (int id : seq.ids) {
    if (id < 0 || id >= vocab_size())
      throw std::runtime_error("decode: id out of range: " + std::to_string(id));
    if (is_special(id)) continue;
    flat += id_to_token_[id];
  }
  Sentence out;
  size_t pos = 0;
  while (pos < flat.size()) {
    size_t next = flat.find(kBoundary, pos + 1);
    if (next == std::string::npos) next = flat.size();
    std::string piece = flat.substr(pos, next - pos);
    if (piece.rfind(kBoundary, 0) == 0) piece = piece.substr(kBoundary.size());
    if (!piece.empty()) out.tokens.push_back(piece);
    pos = next;
  }
  return out;
}

std::string Tokenizer::to_text() const {
  std::ostringstream os;
  for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
  for (size_t i = 0; i < id_to_token_.size(); ++i) os << id_to_token_[i] << '\t' << i << '\n';
  return os.str();
}

Tokenizer Tokenizer::from_text(const std::string& text) {
  Tokenizer tok;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      const size_t sp = line.find(' ');
      if (sp == std::string::npos) throw std::runtime_error("tokenizer: bad merge line: " + line);
      std::string l = line.substr(0, sp), r = line.substr(sp + 1);
      tok.merge_rank_[{l, r}] = static_cast<int>(tok.merges_.size());
      tok.merges_.emplace_back(l, r);
    } else {
      const std::string token = line.substr(0, tab);
      const int id = std::stoi(line.substr(tab + 1));
      if (id != static_cast<int>(tok.id_to_token_.size()))
        throw std::runtime_error("tokenizer: non-dense vocab ids");
      tok.id_to_token_.push_back(token);
    }
  }
  for (size_t i = 0; i < tok.id_to_token_.size(); ++i)
    tok.token_to_id_[tok.id_to_token_[i]] = static_cast<int>(i);
  // Tags occupy the contiguous reserved block after pad/bos/eos/unk and are
  // the only multi-char "__code__" entries before the base character set.
  for (size_t i = 4; i < tok.id_to_token_.size(); ++i) {
    const std::string& t = tok.id_to_token_[i];
    if (t.size() > 4 && t.rfind("__", 0) == 0 && t.compare(t.size() - 2, 2, "__") == 0)
      tok.tags_.emplace_back(t.substr(2, t.size() - 4));
    else
      break;
  }
  return tok;
}

void Tokenizer::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write tokenizer: " + path);
  out << to_text();
}

Tokenizer Tokenizer::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open tokenizer: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

std::string Tokenizer::hash() const { return sha256_hex(to_text()); }

TokenSequence encode_for_model(const Tokenizer& t, const Sentence& s, const LanguageTag& src,
                               const LanguageTag& tgt, Side side) {
  return side == Side::Source ? t.encode_source(s, src, tgt) : t.encode_target(s);
}

}  // namespace imitmt
