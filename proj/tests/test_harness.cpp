#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "imitmt/corpus.hpp"
#include "imitmt/harness.hpp"

using namespace imitmt;
namespace fs = std::filesystem;

namespace {

ExperimentPlan tiny_plan() {
  ExperimentPlan p;
  p.family.pivot = "piv";
  p.family.originals = {"aaa", "bbb"};
  p.family.new_langs = {"nov"};
  p.family.lexicon_size = 50;
  p.family_seed = 7;
  p.gold_sizes = {300, 1200};
  p.new_gold_size = 240;
  p.tokenizer_vocab = 320;

  p.model.embed_dim = 12;
  p.model.hidden_dim = 16;
  p.model.num_layers = 1;
  p.model.dropout = 0.0;
  p.model.max_decode_len = 90;

  p.expert_steps = 120;
  p.expert_lr = 3e-3;
  p.expert_batch = 8;
  p.ext_steps = 30;
  p.ext_lr = 1e-3;
  p.ext_batch = 8;
  p.ext_beam = 1;
  p.eval_beam = 2;
  p.dev_size = 12;
  p.test_size = 16;

  p.methods = {{Method::Finetune, 0}, {Method::Imit, 1}, {Method::OnTheFly, 1}};
  p.directions = {Direction::NewToOriginal};
  p.seeds = {1};
  p.tiers = {500, 1000};
  p.probe_pairs = {{"aaa", "bbb"}, {"bbb", "aaa"}};
  p.bootstrap_iterations = 200;
  p.bootstrap_alpha = 0.01;
  return p;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TmpDir {
  std::string path;
  explicit TmpDir(const std::string& p) : path(p) { fs::remove_all(path); }
  ~TmpDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("plan validation") {
  ExperimentPlan p = tiny_plan();
  CHECK_NOTHROW(validate_plan(p));
  p.methods[0].k = 2;  // finetune with k != 0
  CHECK_THROWS(validate_plan(p));
  p = tiny_plan();
  p.gold_sizes = {300};
  CHECK_THROWS(validate_plan(p));
  p = tiny_plan();
  p.probe_pairs = {{"aaa", "zzz"}};
  CHECK_THROWS(validate_plan(p));
}

TEST_CASE("workspace is deterministic and persisted") {
  TmpDir tmp("harness_ws_tmp");
  ExperimentPlan p = tiny_plan();
  Workspace a = build_workspace(p, tmp.path);
  CHECK(a.train.size() == 2);
  CHECK(a.new_gold.pairs.size() > 200);
  CHECK(fs::exists(tmp.path + "/family.json"));
  CHECK(fs::exists(tmp.path + "/tokenizer.txt"));
  CHECK(fs::exists(tmp.path + "/corpora/train_aaa.tsv"));

  Workspace b = build_workspace(p, tmp.path);
  CHECK(a.family.to_json() == b.family.to_json());
  CHECK(a.tokenizer.hash() == b.tokenizer.hash());

  // every family sentence round-trips through the tokenizer
  Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    for (const auto& lang : a.family.all_languages()) {
      Sentence s = sample_sentence(a.family, lang, rng);
      CHECK(a.tokenizer.decode(a.tokenizer.encode_target(s)) == s);
    }
  }
}

TEST_CASE("run_experiment: full tiny grid, resumable, byte-identical tables") {
  TmpDir tmp("harness_run_tmp");
  ExperimentPlan p = tiny_plan();

  ResultsTable r1 = run_experiment(p, tmp.path);
  CHECK(r1.cells.size() == 3);
  CHECK(r1.cells_trained == 3);
  for (const auto& c : r1.cells) {
    CHECK(!c.failed);
    CHECK(c.new_pair_reports.size() == 2);
    CHECK(c.probe_reports.size() == 2);
    for (const auto& rep : c.new_pair_reports) {
      CHECK(rep.bleu >= 0.0);
      CHECK(rep.bleu <= 100.0);
      CHECK(rep.otr >= 0.0);
      CHECK(rep.otr <= 1.0);
      CHECK(rep.cr >= 0.0);
      CHECK(rep.T == 16);
    }
  }
  CHECK(r1.experts.size() == 1);
  CHECK(r1.experts[0].tier_reports.size() == 2);
  CHECK(!r1.significance.empty());

  const std::string q1 = slurp(tmp.path + "/table_q1.tsv");
  const std::string q2 = slurp(tmp.path + "/table_q2.tsv");
  const std::string rj = slurp(tmp.path + "/results.json");

  // column order follows plan declaration order
  std::istringstream hs(q1);
  std::string header;
  std::getline(hs, header);
  CHECK(header == "method\tk\tdirection\taaa(Low)\tbbb(High)\tmean");

  ResultsTable r2 = run_experiment(p, tmp.path);
  CHECK(r2.cells_trained == 0);  // fully resumed, zero retraining
  CHECK(slurp(tmp.path + "/table_q1.tsv") == q1);
  CHECK(slurp(tmp.path + "/table_q2.tsv") == q2);
  CHECK(slurp(tmp.path + "/results.json") == rj);

  // every table number is recomputable from the persisted hypothesis files
  for (const auto& c : r2.cells) {
    if (c.method != Method::Imit) continue;
    const std::string cdir = tmp.path + "/cells/imit_k1_new2orig_s1/eval";
    for (const auto& rep : c.new_pair_reports) {
      const std::string base = cdir + "/" + rep.src.code + "2" + rep.tgt.code;
      auto hyps = load_sentences(base + ".hyp");
      auto refs = load_sentences(base + ".ref");
      auto srcs = load_sentences(base + ".src");
      CHECK(corpus_bleu(hyps, refs) == doctest::Approx(rep.bleu).epsilon(1e-9));
      CHECK(chrf_pp(hyps, refs) == doctest::Approx(rep.chrfpp).epsilon(1e-9));
      CHECK(copy_ratio(srcs, hyps) == doctest::Approx(rep.cr).epsilon(1e-9));
    }
  }

  // delta column agrees with the eval module's forgetting_delta
  const CellResult* imit_cell = nullptr;
  for (const auto& c : r2.cells)
    if (c.method == Method::Imit) imit_cell = &c;
  REQUIRE(imit_cell != nullptr);
  auto deltas = forgetting_delta(imit_cell->probe_reports, r2.experts[0].probe_reports);
  for (const auto& rep : imit_cell->probe_reports)
    CHECK(deltas[{rep.src.code, rep.tgt.code}] == doctest::Approx(rep.delta_vs_expert).epsilon(1e-9));
}

TEST_CASE("emit_tables rejects unknown styles") {
  ResultsTable r;
  r.plan = tiny_plan();
  r.experts.emplace_back();
  CHECK_THROWS(emit_tables(r, "q3", "."));
}

TEST_CASE("plan json round-trip via file") {
  TmpDir tmp("harness_plan_tmp");
  fs::create_directories(tmp.path);
  const std::string path = tmp.path + "/plan.json";
  {
    std::ofstream f(path);
    f << R"({
      "family": {"pivot": "piv", "originals": ["aaa", "bbb"], "new": ["nov"], "lexicon_size": 50},
      "family_seed": 9,
      "gold_sizes": [200, 800],
      "new_gold_size": 100,
      "steps": 17,
      "lr": 0.002,
      "batch_size": 4,
      "beam": 2,
      "weights_mode": "uniform",
      "methods": [{"method": "finetune"}, {"method": "imit", "k": 2}],
      "directions": ["orig2new"],
      "seeds": [5],
      "probe_pairs": [["aaa", "bbb"]]
    })";
  }
  ExperimentPlan p = plan_from_json_file(path);
  CHECK(p.family_seed == 9);
  CHECK(p.gold_sizes == std::vector<long>{200, 800});
  CHECK(p.ext_steps == 17);
  CHECK(p.ext_lr == doctest::Approx(0.002));
  CHECK(p.ext_batch == 4);
  CHECK(p.ext_beam == 2);
  CHECK(p.weights_mode == WeightsMode::Uniform);
  CHECK(p.methods.size() == 2);
  CHECK(p.methods[1].k == 2);
  CHECK(p.directions == std::vector<Direction>{Direction::OriginalToNew});
  CHECK(p.seeds == std::vector<uint64_t>{5});
}
