#include "imitmt/baselines.hpp"

#include <stdexcept>

namespace imitmt {

std::string method_name(Method m) {
  switch (m) {
    case Method::Imit: return "imit";
    case Method::Finetune: return "finetune";
    case Method::OnTheFly: return "on-the-fly";
  }
  throw std::runtime_error("bad method");
}

Method method_from_name(const std::string& s) {
  if (s == "imit") return Method::Imit;
  if (s == "finetune") return Method::Finetune;
  if (s == "on-the-fly" || s == "on_the_fly") return Method::OnTheFly;
  throw std::runtime_error("unknown method: " + s);
}

TrainRunResult run_finetune(const Model& expert, const ParallelCorpus& gold,
                            const ImitRunConfig& cfg) {
  ImitRunConfig c = cfg;
  c.k = 0;
  LanguageWeights none;
  return run_extension_loop(expert, gold, none, c, GeneratorMode::FrozenExpert);
}

TrainRunResult run_on_the_fly(const Model& expert, const ParallelCorpus& gold,
                              const LanguageWeights& weights, const ImitRunConfig& cfg) {
  if (cfg.k < 1) throw std::runtime_error("on_the_fly: k must be >= 1");
  return run_extension_loop(expert, gold, weights, cfg, GeneratorMode::Drifting);
}

}  // namespace imitmt
