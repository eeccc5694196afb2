#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "imitmt/corpus.hpp"
#include "imitmt/rng.hpp"
#include "imitmt/synthlang.hpp"
#include "imitmt/tokenizer.hpp"
#include "imitmt/types.hpp"

namespace imitmt {

struct ModelConfig {
  int embed_dim = 32;
  int hidden_dim = 64;
  int num_layers = 1;
  Scalar dropout = 0.1;
  int max_decode_len = 64;
  uint64_t seed = 1;
};

/// GRU layer weights. Gate order inside packed tensors: update, reset, candidate.
struct GruLayer {
  Mat wx;     // in x 3H
  Mat wh_zr;  // H x 2H
  Mat wh_g;   // H x H (applied to r ⊙ h_prev)
  Mat b;      // 1 x 3H
};

/// All model tensors. tensors() enumerates them in the fixed order used for
/// initialization, checkpoint serialization and parameter hashing.
struct Params {
  Mat embedding;  // V x E, shared by encoder and decoder
  std::vector<GruLayer> encoder;
  std::vector<GruLayer> decoder;
  Mat combine_w;  // 2H x E
  Mat combine_b;  // 1 x E
  Mat out_w;      // E x V
  Mat out_b;      // 1 x V

  std::vector<std::pair<std::string, Mat*>> tensors();
  std::vector<std::pair<std::string, const Mat*>> tensors() const;
  void setZero();
  static Params zeros_like(const Params& shape);
};

enum class Role { Learner, Expert };

/// Source-and-target token ids as fed to the loss: src carries the two
/// language tags and eos, tgt is bos...eos.
struct EncodedPair {
  TokenSequence src;
  TokenSequence tgt;
};

/// Encoder-decoder translation model with exact hand-derived gradients.
/// An expert-role model rejects every mutation path; a learner is owned by
/// one training loop at a time.
class Model {
 public:
  static Model init(const ModelConfig& cfg, const Tokenizer& tok);

  const ModelConfig& config() const { return cfg_; }
  Role role() const { return role_; }
  /// One-way transition; there is no API back to learner.
  void freeze_expert() { role_ = Role::Expert; }
  /// Deep copy with role reset to learner (Alg. line "initialize learner from expert").
  Model fork_learner() const;

  const Params& params() const { return p_; }
  Params& mutable_params();

  const Tokenizer& tokenizer() const { return *tok_; }
  int vocab_size() const { return vocab_; }
  const std::string& tokenizer_hash() const { return tok_hash_; }

  /// SHA-256 over the little-endian f32 tensor stream (checkpoint payload).
  std::string param_hash() const;

  void save(const std::string& path) const;
  static Model load(const std::string& path, const Tokenizer& tok);

  /// Teacher-forced sum of per-step negative log-probabilities of tgt given
  /// src. Dropout off. Throws when either sequence exceeds max_decode_len.
  Scalar nll_loss(const TokenSequence& src, const TokenSequence& tgt) const;
  /// Analytic gradient of nll_loss wrt every parameter.
  Params nll_gradient(const TokenSequence& src, const TokenSequence& tgt,
                      Scalar* loss_out = nullptr) const;

 private:
  Model() = default;
  friend struct ModelOps;

  ModelConfig cfg_;
  Params p_;
  Role role_ = Role::Learner;
  const Tokenizer* tok_ = nullptr;
  std::string tok_hash_;
  int vocab_ = 0;
};

// ---------------------------------------------------------------------------
// Training

class AdamState {
 public:
  AdamState() = default;
  /// beta1/beta2/eps fixed at 0.9 / 0.999 / 1e-8.
  void apply(Params& params, const Params& grads, Scalar lr);
  long step_count() const { return t_; }

 private:
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

struct TrainStepReport {
  Scalar loss = 0;       // pre-update mean per-token loss
  Scalar grad_norm = 0;  // L2 over all parameter gradients
  long tokens = 0;       // target tokens contributing to the loss
};

/// A group of pairs whose mean per-token NLL enters the objective with a
/// multiplicative weight. The total objective of a step is
/// sum_g weight_g * mean_nll_g.
struct LossGroup {
  const std::vector<EncodedPair>* pairs = nullptr;
  Scalar weight = 1.0;
};

struct GroupLossReport {
  std::vector<Scalar> group_mean;  // mean per-token NLL per group, unweighted
  std::vector<long> group_tokens;
  Scalar total = 0;  // sum of weight_g * group_mean[g]
  Scalar grad_norm = 0;
  long tokens = 0;
};

/// One optimizer step on the weighted group objective. Draws dropout masks
/// from dropout_rng when the model config has dropout > 0 (pass nullptr to
/// disable). Throws on non-finite loss, leaving parameters unchanged.
GroupLossReport weighted_train_step(Model& m, AdamState& opt, const std::vector<LossGroup>& groups,
                                    Scalar lr, Rng* dropout_rng);

/// Plain step on one batch (single group, weight 1).
TrainStepReport train_step(Model& m, AdamState& opt, const std::vector<EncodedPair>& batch,
                           Scalar lr, Rng* dropout_rng);

/// Forward-only mean per-token NLL of a batch (no update, dropout off).
Scalar batch_mean_nll(const Model& m, const std::vector<EncodedPair>& batch);

// ---------------------------------------------------------------------------
// Generation

/// Beam search with cumulative log-probability pruning and final selection by
/// length-normalized score (log-prob divided by generated length). One beam
/// slot always follows the greedy continuation, so the returned score never
/// falls below the greedy hypothesis. Ties break towards lower token ids.
/// Returns a full target sequence [bos, ..., eos].
TokenSequence beam_search(const Model& m, const TokenSequence& src, const LanguageTag& tgt_lang,
                          int beam, int max_len);

/// Lock-step batched variant; output i equals beam_search on srcs[i].
std::vector<TokenSequence> beam_search_batch(const Model& m,
                                             const std::vector<TokenSequence>& srcs,
                                             const LanguageTag& tgt_lang, int beam, int max_len);

// ---------------------------------------------------------------------------
// Expert pretraining

struct ExpertTrainConfig {
  ModelConfig model;
  int steps = 3000;
  int batch_size = 16;
  Scalar lr = 2e-3;
  uint64_t seed = 1;
};

/// Trains the many-to-many expert on original<->pivot corpora (both
/// directions of every pair mixed) and returns it frozen in expert role.
/// extra_corpora optionally adds further direction pairs (e.g. direct
/// original<->original data), also mixed in both directions.
Model train_expert(const LanguageFamily& family,
                   const std::map<LanguageTag, ParallelCorpus>& tiered_corpora,
                   const Tokenizer& tok, const ExpertTrainConfig& cfg,
                   const std::vector<ParallelCorpus>* extra_corpora = nullptr);

/// Encodes a corpus in its declared direction: src side tagged for the
/// target language, tgt side wrapped in bos/eos.
std::vector<EncodedPair> encode_corpus(const Tokenizer& tok, const ParallelCorpus& c);

}  // namespace imitmt
