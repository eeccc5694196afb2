#include "imitmt/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "imitmt/corpus.hpp"
#include "imitmt/hash.hpp"

namespace imitmt {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

long ExperimentPlan::gold_size_of(const std::string& code) const {
  for (size_t i = 0; i < family.originals.size(); ++i)
    if (family.originals[i] == code) return gold_sizes[i];
  throw std::runtime_error("plan: unknown original language " + code);
}

ExperimentPlan default_desk_plan() {
  ExperimentPlan p;
  p.family.pivot = "piv";
  p.family.originals = {"aaa", "bbb", "ccc", "ddd", "eee", "fff"};
  p.family.new_langs = {"nov"};
  p.family.lexicon_size = 60;
  p.family_seed = 7;
  p.gold_sizes = {500, 500, 2000, 2000, 8000, 8000};
  p.new_gold_size = 2000;
  p.tokenizer_vocab = 640;

  p.model.embed_dim = 48;
  p.model.hidden_dim = 64;
  p.model.num_layers = 1;
  p.model.dropout = 0.1;
  p.model.max_decode_len = 80;

  p.expert_steps = 4000;
  p.expert_lr = 3e-3;
  p.expert_batch = 64;
  p.ext_steps = 1500;
  p.ext_lr = 1e-3;
  p.ext_batch = 16;
  p.ext_beam = 2;
  p.eval_beam = 4;
  p.dev_size = 64;
  p.test_size = 80;

  p.methods = {{Method::Finetune, 0}, {Method::Imit, 2}, {Method::Imit, 4}, {Method::OnTheFly, 4}};
  p.directions = {Direction::NewToOriginal, Direction::OriginalToNew};
  p.seeds = {11, 12, 13};
  p.tiers = {1000, 4000};
  p.probe_pairs = {{"aaa", "ccc"}, {"ccc", "eee"}, {"eee", "fff"},
                   {"ddd", "bbb"}, {"fff", "aaa"}, {"bbb", "ddd"}};
  p.bootstrap_iterations = 1000;
  p.bootstrap_alpha = 0.01;
  return p;
}

void validate_plan(const ExperimentPlan& plan) {
  if (plan.family.originals.size() < 2) throw std::runtime_error("plan: need >= 2 originals");
  if (plan.gold_sizes.size() != plan.family.originals.size())
    throw std::runtime_error("plan: gold_sizes must match originals");
  if (plan.family.new_langs.empty()) throw std::runtime_error("plan: need a new language");
  if (plan.methods.empty() || plan.seeds.empty() || plan.directions.empty())
    throw std::runtime_error("plan: empty method/seed/direction grid");
  for (const auto& m : plan.methods) {
    if (m.method == Method::Finetune && m.k != 0)
      throw std::runtime_error("plan: finetune must have k = 0");
    if (m.method != Method::Finetune &&
        (m.k < 1 || m.k > static_cast<int>(plan.family.originals.size())))
      throw std::runtime_error("plan: k out of range for " + method_name(m.method));
  }
  for (const auto& [a, b] : plan.probe_pairs) {
    plan.gold_size_of(a);
    plan.gold_size_of(b);
    if (a == b) throw std::runtime_error("plan: degenerate probe pair " + a);
  }
}

ExperimentPlan plan_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open plan: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json j = json::parse(ss.str());
  ExperimentPlan p = default_desk_plan();
  if (j.contains("family")) {
    const auto& f = j["family"];
    p.family.pivot = f.value("pivot", p.family.pivot);
    if (f.contains("originals")) p.family.originals = f["originals"].get<std::vector<std::string>>();
    if (f.contains("new")) p.family.new_langs = f["new"].get<std::vector<std::string>>();
    p.family.lexicon_size = f.value("lexicon_size", p.family.lexicon_size);
  }
  p.family_seed = j.value("family_seed", p.family_seed);
  if (j.contains("gold_sizes")) p.gold_sizes = j["gold_sizes"].get<std::vector<long>>();
  p.new_gold_size = j.value("new_gold_size", p.new_gold_size);
  p.tokenizer_vocab = j.value("tokenizer_vocab", p.tokenizer_vocab);
  if (j.contains("model")) {
    const auto& m = j["model"];
    p.model.embed_dim = m.value("embed_dim", p.model.embed_dim);
    p.model.hidden_dim = m.value("hidden_dim", p.model.hidden_dim);
    p.model.num_layers = m.value("num_layers", p.model.num_layers);
    p.model.dropout = m.value("dropout", p.model.dropout);
    p.model.max_decode_len = m.value("max_decode_len", p.model.max_decode_len);
  }
  p.expert_steps = j.value("expert_steps", p.expert_steps);
  p.expert_lr = j.value("expert_lr", p.expert_lr);
  p.expert_batch = j.value("expert_batch", p.expert_batch);
  p.ext_steps = j.value("steps", p.ext_steps);
  p.ext_lr = j.value("lr", p.ext_lr);
  p.ext_batch = j.value("batch_size", p.ext_batch);
  p.ext_beam = j.value("beam", p.ext_beam);
  if (j.contains("weights_mode"))
    p.weights_mode =
        j["weights_mode"].get<std::string>() == "uniform" ? WeightsMode::Uniform : WeightsMode::Bleu;
  p.eval_beam = j.value("eval_beam", p.eval_beam);
  p.dev_size = j.value("dev_size", p.dev_size);
  p.test_size = j.value("test_size", p.test_size);
  if (j.contains("methods")) {
    p.methods.clear();
    for (const auto& m : j["methods"]) {
      PlanMethod pm;
      pm.method = method_from_name(m.at("method").get<std::string>());
      pm.k = m.value("k", 0);
      p.methods.push_back(pm);
    }
  }
  if (j.contains("directions")) {
    p.directions.clear();
    for (const auto& d : j["directions"]) p.directions.push_back(direction_from_name(d));
  }
  if (j.contains("seeds")) p.seeds = j["seeds"].get<std::vector<uint64_t>>();
  if (j.contains("tiers")) {
    p.tiers.low_cutoff = j["tiers"].value("low_cutoff", p.tiers.low_cutoff);
    p.tiers.high_cutoff = j["tiers"].value("high_cutoff", p.tiers.high_cutoff);
  }
  if (j.contains("probe_pairs")) {
    p.probe_pairs.clear();
    for (const auto& pr : j["probe_pairs"])
      p.probe_pairs.emplace_back(pr.at(0).get<std::string>(), pr.at(1).get<std::string>());
  }
  p.bootstrap_iterations = j.value("bootstrap_iterations", p.bootstrap_iterations);
  p.bootstrap_alpha = j.value("bootstrap_alpha", p.bootstrap_alpha);
  validate_plan(p);
  return p;
}

// ---------------------------------------------------------------------------
// Workspace

Workspace build_workspace(const ExperimentPlan& plan, const std::string& out_dir) {
  validate_plan(plan);
  fs::create_directories(out_dir);
  fs::create_directories(out_dir + "/corpora");

  Workspace ws{make_language_family(plan.family, plan.family_seed), Tokenizer{}, {}, {}, {}};
  {
    std::ofstream f(out_dir + "/family.json", std::ios::binary);
    f << ws.family.to_json();
  }

  const uint64_t train_seed = derive_seed(plan.family_seed, "train");
  const uint64_t dev_seed = derive_seed(plan.family_seed, "dev");
  const LanguageTag new_lang = ws.family.new_langs[0];

  for (size_t i = 0; i < ws.family.originals.size(); ++i) {
    const LanguageTag& lang = ws.family.originals[i];
    ParallelCorpus c = sample_gold_corpus(ws.family, lang, static_cast<int>(plan.gold_sizes[i]),
                                          train_seed);
    ws.train[lang] = preprocess(c, kDefaultMaxTokens, ws.family);
    save_corpus(out_dir + "/corpora/train_" + lang.code + ".tsv", ws.train[lang]);
    ParallelCorpus d = sample_gold_corpus(ws.family, lang, plan.dev_size, dev_seed);
    ws.dev[lang] = preprocess(d, kDefaultMaxTokens, ws.family);
    save_corpus(out_dir + "/corpora/dev_" + lang.code + ".tsv", ws.dev[lang]);
  }
  {
    ParallelCorpus c = sample_gold_corpus(ws.family, new_lang,
                                          static_cast<int>(plan.new_gold_size), train_seed);
    ws.new_gold = preprocess(c, kDefaultMaxTokens, ws.family);
    save_corpus(out_dir + "/corpora/train_" + new_lang.code + ".tsv", ws.new_gold);
  }

  // Direct original<->original corpora: multi-parallel draws sized by the
  // smaller side of each pair, keeping the pivot-centric imbalance.
  if (plan.direct_pair_fraction > 0) {
    for (size_t i = 0; i < ws.family.originals.size(); ++i) {
      for (size_t j = i + 1; j < ws.family.originals.size(); ++j) {
        const LanguageTag& a = ws.family.originals[i];
        const LanguageTag& b = ws.family.originals[j];
        const long n = static_cast<long>(
            std::ceil(plan.direct_pair_fraction *
                      static_cast<Scalar>(std::min(plan.gold_sizes[i], plan.gold_sizes[j]))));
        if (n < 1) continue;
        Rng rng(derive_seed(plan.family_seed, "xpair:" + a.code + ":" + b.code));
        ParallelCorpus c;
        c.src_lang = a;
        c.tgt_lang = b;
        for (long s = 0; s < n; ++s) {
          Sentence piv = sample_sentence(ws.family, ws.family.pivot, rng);
          c.pairs.emplace_back(oracle_translate(ws.family, piv, ws.family.pivot, a),
                               oracle_translate(ws.family, piv, ws.family.pivot, b));
        }
        ws.direct.push_back(preprocess(c, kDefaultMaxTokens, ws.family));
        save_corpus(out_dir + "/corpora/direct_" + a.code + "_" + b.code + ".tsv",
                    ws.direct.back());
      }
    }
  }

  // Tokenizer training input: every corpus plus a coverage corpus holding the
  // full surface lexicon of every language, so any family sentence encodes
  // without unks.
  ParallelCorpus coverage;
  coverage.src_lang = ws.family.pivot;
  coverage.tgt_lang = ws.family.pivot;
  {
    Sentence piv_lex(ws.family.pivot_lexicon);
    coverage.pairs.emplace_back(piv_lex, piv_lex);
    for (const auto& [code, tr] : ws.family.transforms) {
      Sentence lex(tr.surface);
      coverage.pairs.emplace_back(lex, lex);
    }
  }
  std::vector<const ParallelCorpus*> tok_input;
  for (const auto& lang : ws.family.originals) tok_input.push_back(&ws.train.at(lang));
  tok_input.push_back(&ws.new_gold);
  tok_input.push_back(&coverage);
  ws.tokenizer = Tokenizer::train(tok_input, plan.tokenizer_vocab, ws.family.all_languages());
  ws.tokenizer.save(out_dir + "/tokenizer.txt");
  return ws;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

void make_test_set(const LanguageFamily& family, const LanguageTag& src, const LanguageTag& tgt,
                   int n, uint64_t sample_seed, std::vector<Sentence>* srcs,
                   std::vector<Sentence>* refs) {
  Rng rng(derive_seed(sample_seed, "test:" + src.code + ":" + tgt.code));
  srcs->clear();
  refs->clear();
  for (int i = 0; i < n; ++i) {
    Sentence piv = sample_sentence(family, family.pivot, rng);
    srcs->push_back(oracle_translate(family, piv, family.pivot, src));
    refs->push_back(oracle_translate(family, piv, family.pivot, tgt));
  }
}

DirectionEval evaluate_direction(const Model& m, const LanguageFamily& family,
                                 const LanguageTag& src, const LanguageTag& tgt, int n,
                                 uint64_t sample_seed, int beam) {
  DirectionEval ev;
  make_test_set(family, src, tgt, n, sample_seed, &ev.srcs, &ev.refs);
  const Tokenizer& tok = m.tokenizer();
  std::vector<TokenSequence> enc;
  enc.reserve(ev.srcs.size());
  for (const auto& s : ev.srcs) enc.push_back(tok.encode_source(s, src, tgt));
  const int max_len = std::max(4, m.config().max_decode_len - 3);
  std::vector<TokenSequence> gen = beam_search_batch(m, enc, tgt, beam, max_len);
  ev.hyps.reserve(gen.size());
  for (const auto& g : gen) ev.hyps.push_back(tok.decode(g));
  ev.report.src = src;
  ev.report.tgt = tgt;
  ev.report.bleu = corpus_bleu(ev.hyps, ev.refs);
  ev.report.chrfpp = chrf_pp(ev.hyps, ev.refs);
  long hyp_tokens = 0;
  for (const auto& h : ev.hyps) hyp_tokens += static_cast<long>(h.size());
  // A model can legitimately emit nothing but empty hypotheses (e.g. an
  // untrained expert asked for an unknown direction); report zero copying.
  ev.report.cr = hyp_tokens > 0 ? copy_ratio(ev.srcs, ev.hyps) : 0.0;
  ev.report.otr = off_target_ratio(ev.hyps, tgt, family);
  ev.report.T = static_cast<long>(ev.hyps.size());
  return ev;
}

namespace {

json report_to_json(const EvalReport& r) {
  json j;
  j["src"] = r.src.code;
  j["tgt"] = r.tgt.code;
  j["bleu"] = r.bleu;
  j["chrfpp"] = r.chrfpp;
  j["cr"] = r.cr;
  j["otr"] = r.otr;
  j["T"] = r.T;
  j["tier"] = tier_name(r.tier);
  j["delta"] = r.delta_vs_expert;
  return j;
}

EvalReport report_from_json(const json& j) {
  EvalReport r;
  r.src = LanguageTag(j.at("src").get<std::string>());
  r.tgt = LanguageTag(j.at("tgt").get<std::string>());
  r.bleu = j.at("bleu").get<Scalar>();
  r.chrfpp = j.at("chrfpp").get<Scalar>();
  r.cr = j.at("cr").get<Scalar>();
  r.otr = j.at("otr").get<Scalar>();
  r.T = j.at("T").get<long>();
  const std::string t = j.at("tier").get<std::string>();
  r.tier = t == "Low" ? Tier::Low : (t == "Mid" ? Tier::Mid : Tier::High);
  r.delta_vs_expert = j.at("delta").get<Scalar>();
  return r;
}

std::string plan_config_hash(const ExperimentPlan& plan) {
  json j;
  j["pivot"] = plan.family.pivot;
  j["originals"] = plan.family.originals;
  j["new"] = plan.family.new_langs;
  j["lexicon_size"] = plan.family.lexicon_size;
  j["family_seed"] = plan.family_seed;
  j["gold_sizes"] = plan.gold_sizes;
  j["new_gold_size"] = plan.new_gold_size;
  j["vocab"] = plan.tokenizer_vocab;
  j["model"] = {plan.model.embed_dim, plan.model.hidden_dim, plan.model.num_layers,
                plan.model.dropout, plan.model.max_decode_len};
  j["expert"] = {plan.expert_steps, plan.expert_lr, plan.expert_batch};
  j["ext"] = {plan.ext_steps, plan.ext_lr, plan.ext_batch, plan.ext_beam};
  j["weights_mode"] = weights_mode_name(plan.weights_mode);
  j["eval"] = {plan.eval_beam, plan.dev_size, plan.test_size};
  return sha256_hex(j.dump());
}

std::string cell_name(Method method, int k, Direction dir, uint64_t seed) {
  std::string n = method_name(method);
  if (k > 0) n += "_k" + std::to_string(k);
  n += "_" + direction_name(dir) + "_s" + std::to_string(seed);
  return n;
}

void save_eval_files(const std::string& dir, const DirectionEval& ev) {
  const std::string base = dir + "/" + ev.report.src.code + "2" + ev.report.tgt.code;
  save_sentences(base + ".src", ev.srcs);
  save_sentences(base + ".hyp", ev.hyps);
  save_sentences(base + ".ref", ev.refs);
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return json::parse(ss.str());
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::string fmt2(Scalar v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// run_experiment

ResultsTable run_experiment(const ExperimentPlan& plan, const std::string& out_dir) {
  validate_plan(plan);
  Workspace ws = build_workspace(plan, out_dir);
  const std::string cfg_hash = plan_config_hash(plan);
  const LanguageTag new_lang = ws.family.new_langs[0];
  const LanguageTag pivot = ws.family.pivot;

  ResultsTable results;
  results.plan = plan;

  auto tier_of_code = [&](const std::string& code) {
    return tier_of(plan.gold_size_of(code), plan.tiers);
  };

  // --- the shared expert: one fixed artifact per plan, extended by every cell
  std::map<uint64_t, Model> expert_cache;
  std::map<uint64_t, LanguageWeights> weights_cache;
  const uint64_t expert_seed = derive_seed(plan.family_seed, "expert-of-plan");

  auto expert_dir_of = [&](uint64_t) { return out_dir + "/experts/shared"; };

  for (uint64_t seed : {expert_seed}) {
    const std::string edir = expert_dir_of(seed);
    const std::string manifest = edir + "/manifest.json";
    ExpertResult er;
    er.seed = seed;
    bool resumed = false;
    if (fs::exists(manifest)) {
      json j = load_json_file(manifest);
      if (j.value("config_hash", "") == cfg_hash && j.value("status", "") == "done") {
        er.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
        for (const auto& r : j.at("tier_reports")) er.tier_reports.push_back(report_from_json(r));
        for (const auto& r : j.at("probe_reports")) er.probe_reports.push_back(report_from_json(r));
        for (const auto& r : j.at("new_pair_reports"))
          er.new_pair_reports.push_back(report_from_json(r));
        for (const auto& w : j.at("weights_bleu"))
          er.weights_bleu.emplace_back(w.at(0).get<std::string>(), w.at(1).get<Scalar>());
        resumed = true;
      }
    }
    if (!resumed) {
      fs::create_directories(edir + "/eval");
      ExpertTrainConfig ecfg;
      ecfg.model = plan.model;
      ecfg.model.seed = seed;
      ecfg.steps = plan.expert_steps;
      ecfg.batch_size = plan.expert_batch;
      ecfg.lr = plan.expert_lr;
      ecfg.seed = seed;
      Model trained = train_expert(ws.family, ws.train, ws.tokenizer, ecfg, &ws.direct);
      trained.save(edir + "/checkpoint.bin");
      // Reload so every downstream consumer sees the f32 checkpoint params,
      // whether this run trained the expert or a later run resumed it.
      Model expert = Model::load(edir + "/checkpoint.bin", ws.tokenizer);
      er.checkpoint_hash = expert.param_hash();

      for (const auto& lang : ws.family.originals) {
        DirectionEval ev = evaluate_direction(expert, ws.family, pivot, lang, plan.test_size,
                                              plan.family_seed, plan.eval_beam);
        ev.report.tier = tier_of_code(lang.code);
        save_eval_files(edir + "/eval", ev);
        er.tier_reports.push_back(ev.report);
      }
      for (const auto& [a, b] : plan.probe_pairs) {
        DirectionEval ev = evaluate_direction(expert, ws.family, LanguageTag(a), LanguageTag(b),
                                              plan.test_size, plan.family_seed, plan.eval_beam);
        ev.report.tier = tier_of_code(b);
        save_eval_files(edir + "/eval", ev);
        er.probe_reports.push_back(ev.report);
      }
      for (Direction dir : plan.directions) {
        for (const auto& lang : ws.family.originals) {
          const LanguageTag s = dir == Direction::NewToOriginal ? new_lang : lang;
          const LanguageTag t = dir == Direction::NewToOriginal ? lang : new_lang;
          DirectionEval ev = evaluate_direction(expert, ws.family, s, t, plan.test_size,
                                                plan.family_seed, plan.eval_beam);
          ev.report.tier = tier_of_code(lang.code);
          save_eval_files(edir + "/eval", ev);
          er.new_pair_reports.push_back(ev.report);
        }
      }
      LanguageWeights w =
          plan.weights_mode == WeightsMode::Bleu
              ? compute_language_weights(expert, ws.dev, 1, plan.eval_beam)
              : LanguageWeights::uniform(ws.family.originals, 1);
      for (size_t i = 0; i < w.langs.size(); ++i)
        er.weights_bleu.emplace_back(w.langs[i].code, w.bleu[i]);

      json j;
      j["config_hash"] = cfg_hash;
      j["status"] = "done";
      j["seed"] = seed;
      j["checkpoint_hash"] = er.checkpoint_hash;
      json tr = json::array(), pr = json::array(), nr = json::array(), wb = json::array();
      for (const auto& r : er.tier_reports) tr.push_back(report_to_json(r));
      for (const auto& r : er.probe_reports) pr.push_back(report_to_json(r));
      for (const auto& r : er.new_pair_reports) nr.push_back(report_to_json(r));
      for (const auto& [c, b] : er.weights_bleu) wb.push_back(json::array({c, b}));
      j["tier_reports"] = tr;
      j["probe_reports"] = pr;
      j["new_pair_reports"] = nr;
      j["weights_bleu"] = wb;
      write_json_file(manifest, j);
      expert_cache.emplace(seed, std::move(expert));
    }
    results.experts.push_back(std::move(er));
  }

  auto get_expert = [&](uint64_t seed) -> const Model& {
    auto it = expert_cache.find(seed);
    if (it != expert_cache.end()) return it->second;
    Model m = Model::load(expert_dir_of(seed) + "/checkpoint.bin", ws.tokenizer);
    return expert_cache.emplace(seed, std::move(m)).first->second;
  };
  auto get_weights = [&](uint64_t seed) -> const LanguageWeights& {
    auto it = weights_cache.find(seed);
    if (it != weights_cache.end()) return it->second;
    const ExpertResult* er = nullptr;
    for (const auto& e : results.experts)
      if (e.seed == seed) er = &e;
    LanguageWeights w;
    if (plan.weights_mode == WeightsMode::Uniform) {
      w = LanguageWeights::uniform(ws.family.originals, 1);
    } else {
      w.k = 1;
      for (const auto& [code, b] : er->weights_bleu) {
        w.langs.emplace_back(code);
        w.bleu.push_back(b);
        w.weights.push_back(1.0);
      }
    }
    return weights_cache.emplace(seed, std::move(w)).first->second;
  };

  auto find_expert_result = [&](uint64_t seed) -> const ExpertResult& {
    for (const auto& e : results.experts)
      if (e.seed == seed) return e;
    throw std::runtime_error("missing expert result");
  };

  // --- method cells
  for (const PlanMethod& pm : plan.methods) {
    for (Direction dir : plan.directions) {
      for (uint64_t seed : plan.seeds) {
        const std::string name = cell_name(pm.method, pm.k, dir, seed);
        const std::string cdir = out_dir + "/cells/" + name;
        const std::string manifest = cdir + "/manifest.json";
        CellResult cr;
        cr.method = pm.method;
        cr.k = pm.k;
        cr.direction = dir;
        cr.seed = seed;

        if (fs::exists(manifest)) {
          json j = load_json_file(manifest);
          if (j.value("config_hash", "") == cfg_hash && j.value("status", "") != "") {
            cr.failed = j.value("status", "") == "failed";
            cr.error = j.value("error", "");
            cr.checkpoint_hash = j.value("checkpoint_hash", "");
            if (j.contains("new_pair_reports"))
              for (const auto& r : j["new_pair_reports"])
                cr.new_pair_reports.push_back(report_from_json(r));
            if (j.contains("probe_reports"))
              for (const auto& r : j["probe_reports"]) cr.probe_reports.push_back(report_from_json(r));
            results.cells.push_back(std::move(cr));
            continue;
          }
        }

        fs::create_directories(cdir + "/eval");
        try {
          const Model& expert = get_expert(expert_seed);
          const ExpertResult& er = find_expert_result(expert_seed);
          ImitRunConfig cfg;
          cfg.k = pm.k;
          cfg.direction = dir;
          cfg.steps = plan.ext_steps;
          cfg.lr = plan.ext_lr;
          cfg.batch_size = plan.ext_batch;
          cfg.beam = plan.ext_beam;
          cfg.seed = seed;
          cfg.weights_mode = plan.weights_mode;

          TrainRunResult run = [&] {
            switch (pm.method) {
              case Method::Finetune:
                return run_finetune(expert, ws.new_gold, cfg);
              case Method::Imit:
                return train_imit(expert, ws.new_gold, get_weights(expert_seed), cfg);
              case Method::OnTheFly:
                return run_on_the_fly(expert, ws.new_gold, get_weights(expert_seed), cfg);
            }
            throw std::runtime_error("bad method");
          }();

          write_train_log(cdir + "/train_log.tsv", run.log);
          run.learner.save(cdir + "/checkpoint.bin");
          Model learner = Model::load(cdir + "/checkpoint.bin", ws.tokenizer);
          cr.checkpoint_hash = learner.param_hash();

          for (const auto& lang : ws.family.originals) {
            const LanguageTag s = dir == Direction::NewToOriginal ? new_lang : lang;
            const LanguageTag t = dir == Direction::NewToOriginal ? lang : new_lang;
            DirectionEval ev = evaluate_direction(learner, ws.family, s, t, plan.test_size,
                                                  plan.family_seed, plan.eval_beam);
            ev.report.tier = tier_of_code(lang.code);
            for (const auto& x : er.new_pair_reports)
              if (x.src == ev.report.src && x.tgt == ev.report.tgt)
                ev.report.delta_vs_expert = ev.report.bleu - x.bleu;
            save_eval_files(cdir + "/eval", ev);
            cr.new_pair_reports.push_back(ev.report);
          }
          for (const auto& [a, b] : plan.probe_pairs) {
            DirectionEval ev = evaluate_direction(learner, ws.family, LanguageTag(a),
                                                  LanguageTag(b), plan.test_size,
                                                  plan.family_seed, plan.eval_beam);
            ev.report.tier = tier_of_code(b);
            for (const auto& x : er.probe_reports)
              if (x.src == ev.report.src && x.tgt == ev.report.tgt)
                ev.report.delta_vs_expert = ev.report.bleu - x.bleu;
            save_eval_files(cdir + "/eval", ev);
            cr.probe_reports.push_back(ev.report);
          }
          results.cells_trained += 1;
        } catch (const std::exception& e) {
          cr.failed = true;
          cr.error = e.what();
        }

        json j;
        j["config_hash"] = cfg_hash;
        j["status"] = cr.failed ? "failed" : "done";
        if (cr.failed) j["error"] = cr.error;
        j["method"] = method_name(pm.method);
        j["k"] = pm.k;
        j["direction"] = direction_name(dir);
        j["seed"] = seed;
        j["checkpoint_hash"] = cr.checkpoint_hash;
        json nr = json::array(), pr = json::array();
        for (const auto& r : cr.new_pair_reports) nr.push_back(report_to_json(r));
        for (const auto& r : cr.probe_reports) pr.push_back(report_to_json(r));
        j["new_pair_reports"] = nr;
        j["probe_reports"] = pr;
        write_json_file(manifest, j);
        results.cells.push_back(std::move(cr));
      }
    }
  }

  // --- significance: imit vs on-the-fly at the largest shared k, high tier
  int k_imit = 0, k_otf = 0;
  for (const auto& m : plan.methods) {
    if (m.method == Method::Imit) k_imit = std::max(k_imit, m.k);
    if (m.method == Method::OnTheFly) k_otf = std::max(k_otf, m.k);
  }
  const int k_sig = std::min(k_imit, k_otf);
  if (k_sig > 0) {
    for (uint64_t seed : plan.seeds) {
      for (Direction dir : plan.directions) {
        std::vector<Sentence> hyp_a, hyp_b, refs;
        bool ok = true;
        for (const auto& lang : ws.family.originals) {
          if (tier_of_code(lang.code) != Tier::High) continue;
          const LanguageTag s = dir == Direction::NewToOriginal ? new_lang : lang;
          const LanguageTag t = dir == Direction::NewToOriginal ? lang : new_lang;
          const std::string base = "/eval/" + s.code + "2" + t.code;
          const std::string a_dir = out_dir + "/cells/" + cell_name(Method::Imit, k_sig, dir, seed);
          const std::string b_dir =
              out_dir + "/cells/" + cell_name(Method::OnTheFly, k_sig, dir, seed);
          if (!fs::exists(a_dir + base + ".hyp") || !fs::exists(b_dir + base + ".hyp")) {
            ok = false;
            break;
          }
          auto ha = load_sentences(a_dir + base + ".hyp");
          auto hb = load_sentences(b_dir + base + ".hyp");
          auto rr = load_sentences(a_dir + base + ".ref");
          hyp_a.insert(hyp_a.end(), ha.begin(), ha.end());
          hyp_b.insert(hyp_b.end(), hb.begin(), hb.end());
          refs.insert(refs.end(), rr.begin(), rr.end());
        }
        if (!ok || refs.empty()) continue;
        BootstrapResult br = bootstrap_significance(hyp_a, hyp_b, refs, plan.bootstrap_iterations,
                                                    plan.bootstrap_alpha, seed);
        results.significance.push_back({seed, dir, br.p, br.significant});
      }
    }
  }

  write_results_json(results, out_dir + "/results.json");
  emit_tables(results, "q1", out_dir);
  emit_tables(results, "q2", out_dir);
  return results;
}

// ---------------------------------------------------------------------------
// Output

void write_results_json(const ResultsTable& results, const std::string& path) {
  json j;
  j["family_seed"] = results.plan.family_seed;
  json experts = json::array();
  for (const auto& e : results.experts) {
    json je;
    je["seed"] = e.seed;
    je["checkpoint_hash"] = e.checkpoint_hash;
    json tr = json::array(), pr = json::array(), nr = json::array(), wb = json::array();
    for (const auto& r : e.tier_reports) tr.push_back(report_to_json(r));
    for (const auto& r : e.probe_reports) pr.push_back(report_to_json(r));
    for (const auto& r : e.new_pair_reports) nr.push_back(report_to_json(r));
    for (const auto& [c, b] : e.weights_bleu) wb.push_back(json::array({c, b}));
    je["tier_reports"] = tr;
    je["probe_reports"] = pr;
    je["new_pair_reports"] = nr;
    je["weights_bleu"] = wb;
    experts.push_back(je);
  }
  j["experts"] = experts;
  json cells = json::array();
  for (const auto& c : results.cells) {
    json jc;
    jc["method"] = method_name(c.method);
    jc["k"] = c.k;
    jc["direction"] = direction_name(c.direction);
    jc["seed"] = c.seed;
    jc["status"] = c.failed ? "failed" : "done";
    if (c.failed) jc["error"] = c.error;
    jc["checkpoint_hash"] = c.checkpoint_hash;
    json nr = json::array(), pr = json::array();
    for (const auto& r : c.new_pair_reports) nr.push_back(report_to_json(r));
    for (const auto& r : c.probe_reports) pr.push_back(report_to_json(r));
    jc["new_pair_reports"] = nr;
    jc["probe_reports"] = pr;
    cells.push_back(jc);
  }
  j["cells"] = cells;
  json sig = json::array();
  for (const auto& s : results.significance) {
    json js;
    js["seed"] = s.seed;
    js["direction"] = direction_name(s.direction);
    js["p"] = s.p;
    js["significant"] = s.significant;
    sig.push_back(js);
  }
  j["significance"] = sig;
  write_json_file(path, j);
}

namespace {

// Mean of per-seed BLEU for one (method, k, direction, src->tgt) cell group.
struct TableAccum {
  Scalar sum = 0;
  int n = 0;
  void add(Scalar v) {
    sum += v;
    ++n;
  }
  bool empty() const { return n == 0; }
  Scalar mean() const { return sum / static_cast<Scalar>(n); }
  std::string str() const { return empty() ? "NA" : fmt2(mean()); }
};

}  // namespace

std::string emit_tables(const ResultsTable& results, const std::string& style,
                        const std::string& out_dir) {
  const ExperimentPlan& plan = results.plan;
  if (results.cells.empty() && results.experts.empty())
    throw std::runtime_error("emit_tables: empty results");
  const std::string new_code = plan.family.new_langs[0];

  auto tier_label = [&](const std::string& code) {
    return tier_name(tier_of(plan.gold_size_of(code), plan.tiers));
  };

  if (style == "q1") {
    std::ostringstream os;
    os << "method\tk\tdirection";
    for (const auto& code : plan.family.originals) os << '\t' << code << '(' << tier_label(code) << ')';
    os << "\tmean\n";
    for (Direction dir : plan.directions) {
      {
        std::vector<TableAccum> acc(plan.family.originals.size());
        TableAccum mean_acc;
        for (const auto& e : results.experts)
          for (const auto& r : e.new_pair_reports) {
            const std::string orig = dir == Direction::NewToOriginal ? r.tgt.code : r.src.code;
            const std::string expect_src = dir == Direction::NewToOriginal ? new_code : orig;
            if (r.src.code != expect_src) continue;
            for (size_t i = 0; i < plan.family.originals.size(); ++i)
              if (plan.family.originals[i] == orig) acc[i].add(r.bleu);
            mean_acc.add(r.bleu);
          }
        os << "expert\t-\t" << direction_name(dir);
        for (auto& a : acc) os << '\t' << a.str();
        os << '\t' << mean_acc.str() << '\n';
      }
      for (const auto& pm : plan.methods) {
        std::vector<TableAccum> acc(plan.family.originals.size());
        TableAccum mean_acc;
        for (const auto& c : results.cells) {
          if (c.method != pm.method || c.k != pm.k || c.direction != dir || c.failed) continue;
          for (const auto& r : c.new_pair_reports) {
            const std::string orig =
                dir == Direction::NewToOriginal ? r.tgt.code : r.src.code;
            for (size_t i = 0; i < plan.family.originals.size(); ++i)
              if (plan.family.originals[i] == orig) acc[i].add(r.bleu);
            mean_acc.add(r.bleu);
          }
        }
        os << method_name(pm.method) << '\t' << (pm.k > 0 ? std::to_string(pm.k) : "-") << '\t'
           << direction_name(dir);
        for (auto& a : acc) os << '\t' << a.str();
        os << '\t' << mean_acc.str() << '\n';
      }
    }
    const std::string path = out_dir + "/table_q1.tsv";
    std::ofstream f(path, std::ios::binary);
    f << os.str();
    return path;
  }
  if (style == "q2") {
    std::ostringstream os;
    os << "method\tk\tdirection";
    for (const auto& [a, b] : plan.probe_pairs) os << '\t' << a << '>' << b;
    os << "\tmean\n";
    {
      std::vector<TableAccum> acc(plan.probe_pairs.size());
      TableAccum mean_acc;
      for (const auto& e : results.experts)
        for (size_t i = 0; i < plan.probe_pairs.size(); ++i)
          for (const auto& r : e.probe_reports)
            if (r.src.code == plan.probe_pairs[i].first &&
                r.tgt.code == plan.probe_pairs[i].second) {
              acc[i].add(r.bleu);
              mean_acc.add(r.bleu);
            }
      os << "expert\t-\t-";
      for (auto& a : acc) os << '\t' << a.str();
      os << '\t' << mean_acc.str() << '\n';
    }
    for (const auto& pm : plan.methods) {
      for (Direction dir : plan.directions) {
        std::vector<TableAccum> acc(plan.probe_pairs.size()), dacc(plan.probe_pairs.size());
        TableAccum mean_acc, dmean_acc;
        for (const auto& c : results.cells) {
          if (c.method != pm.method || c.k != pm.k || c.direction != dir || c.failed) continue;
          for (size_t i = 0; i < plan.probe_pairs.size(); ++i)
            for (const auto& r : c.probe_reports)
              if (r.src.code == plan.probe_pairs[i].first &&
                  r.tgt.code == plan.probe_pairs[i].second) {
                acc[i].add(r.bleu);
                mean_acc.add(r.bleu);
                dacc[i].add(r.delta_vs_expert);
                dmean_acc.add(r.delta_vs_expert);
              }
        }
        const std::string kcol = pm.k > 0 ? std::to_string(pm.k) : "-";
        os << method_name(pm.method) << '\t' << kcol << '\t' << direction_name(dir);
        for (auto& a : acc) os << '\t' << a.str();
        os << '\t' << mean_acc.str() << '\n';
        os << method_name(pm.method) << "_delta\t" << kcol << '\t' << direction_name(dir);
        for (auto& a : dacc) os << '\t' << a.str();
        os << '\t' << dmean_acc.str() << '\n';
      }
    }
    const std::string path = out_dir + "/table_q2.tsv";
    std::ofstream f(path, std::ios::binary);
    f << os.str();
    return path;
  }
  throw std::runtime_error("emit_tables: unknown style " + style);
}

}  // namespace imitmt
