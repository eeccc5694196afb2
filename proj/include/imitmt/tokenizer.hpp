#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "imitmt/types.hpp"

namespace imitmt {

enum class Side { Source, Target };

/// Pair-merge subword tokenizer shared by expert and learner. Reserved ids
/// 0..3 are pad/bos/eos/unk, followed by one tag id per language, then the
/// base character set, then merge products. Immutable after training; safe
/// for concurrent reads.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  /// Learns merges from every side of every corpus until the vocabulary has
  /// exactly `vocab_size` entries. Throws when vocab_size cannot cover the
  /// reserved symbols plus base character set.
  static Tokenizer train(const std::vector<const ParallelCorpus*>& corpora, int vocab_size,
                         const std::vector<LanguageTag>& tags);

  int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
  int tag_id(const LanguageTag& tag) const;
  const std::vector<LanguageTag>& tags() const { return tags_; }
  bool is_special(int id) const { return id < 4 + static_cast<int>(tags_.size()); }

  /// [src-tag, tgt-tag, subwords..., eos]
  TokenSequence encode_source(const Sentence& s, const LanguageTag& src,
                              const LanguageTag& tgt) const;
  /// [bos, subwords..., eos]
  TokenSequence encode_target(const Sentence& s) const;
  /// Inverse of either encoding: strips specials, reassembles words.
  Sentence decode(const TokenSequence& seq) const;

  std::string to_text() const;
  static Tokenizer from_text(const std::string& text);
  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);

  /// SHA-256 of the serialized form; stored in model checkpoints.
  std::string hash() const;

 private:
  std::vector<int> encode_word(const std::string& word) const;

  std::vector<std::pair<std::string, std::string>> merges_;
  std::map<std::pair<std::string, std::string>, int> merge_rank_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<LanguageTag> tags_;
};

/// Spec'd operation name: dispatches to encode_source / encode_target.
TokenSequence encode_for_model(const Tokenizer& t, const Sentence& s, const LanguageTag& src,
                               const LanguageTag& tgt, Side side);

}  // namespace imitmt
