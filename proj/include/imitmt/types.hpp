#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace imitmt {

/// Floating point precision used by all model math.
using Scalar = double;
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Short identifier of one language within a family (e.g. "piv", "aaa").
struct LanguageTag {
  std::string code;

  LanguageTag() = default;
  explicit LanguageTag(std::string c) : code(std::move(c)) {}

  bool operator==(const LanguageTag& o) const { return code == o.code; }
  bool operator!=(const LanguageTag& o) const { return code != o.code; }
  bool operator<(const LanguageTag& o) const { return code < o.code; }
};

/// Surface sentence: non-empty sequence of non-empty word strings.
struct Sentence {
  std::vector<std::string> tokens;

  Sentence() = default;
  explicit Sentence(std::vector<std::string> t) : tokens(std::move(t)) {}

  bool operator==(const Sentence& o) const { return tokens == o.tokens; }
  bool empty() const { return tokens.empty(); }
  size_t size() const { return tokens.size(); }

  std::string joined() const {
    std::string s;
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (i) s += ' ';
      s += tokens[i];
    }
    return s;
  }
};

/// Parallel sentence pairs between a fixed (src_lang, tgt_lang) pair.
struct ParallelCorpus {
  LanguageTag src_lang;
  LanguageTag tgt_lang;
  std::vector<std::pair<Sentence, Sentence>> pairs;

  size_t size() const { return pairs.size(); }
};

/// Sequence of vocabulary ids as consumed/produced by the model.
struct TokenSequence {
  std::vector<int> ids;

  TokenSequence() = default;
  explicit TokenSequence(std::vector<int> v) : ids(std::move(v)) {}

  bool operator==(const TokenSequence& o) const { return ids == o.ids; }
  size_t size() const { return ids.size(); }
};

enum class Direction { NewToOriginal, OriginalToNew };

inline std::string direction_name(Direction d) {
  return d == Direction::NewToOriginal ? "new2orig" : "orig2new";
}

inline Direction direction_from_name(const std::string& s) {
  if (s == "new2orig") return Direction::NewToOriginal;
  if (s == "orig2new") return Direction::OriginalToNew;
  throw std::runtime_error("unknown direction: " + s);
}

}  // namespace imitmt
