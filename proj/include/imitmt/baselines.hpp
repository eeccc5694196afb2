#pragma once

#include "imitmt/imitation.hpp"

namespace imitmt {

enum class Method { Imit, Finetune, OnTheFly };

std::string method_name(Method m);
Method method_from_name(const std::string& s);

/// Reference regime configuration; k applies to on_the_fly only.
struct BaselineRunConfig {
  Method kind = Method::Finetune;
  ImitRunConfig trainer;
};

/// Continued training on the gold corpus only; exactly the k = 0 extension
/// loop, so trajectories are bit-identical to train_imit with k = 0.
TrainRunResult run_finetune(const Model& expert, const ParallelCorpus& gold,
                            const ImitRunConfig& cfg);

/// Same loop as train_imit except the pseudo data of each batch is generated
/// by the current, already-updated model instead of the frozen expert.
TrainRunResult run_on_the_fly(const Model& expert, const ParallelCorpus& gold,
                              const LanguageWeights& weights, const ImitRunConfig& cfg);

}  // namespace imitmt
