#pragma once

// Stage functions behind the CLI: corpus generation, training, attacks,
// editing, evaluation and analysis, all driven by one JSON RunConfig and
// writing deterministic artifacts into a workdir.

#include "pme/attack.hpp"
#include "pme/checkpoint.hpp"
#include "pme/corpus.hpp"
#include "pme/editor.hpp"
#include "pme/eval.hpp"
#include "pme/trainer.hpp"

#include <filesystem>

namespace pme {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const std::string& what) : std::runtime_error(what) {}
};

struct RunConfig {
  uint64_t seed = 7;
  CorpusSpec corpus;
  ModelConfig model;
  TrainSpec train;

  std::vector<int> attack_context_lens = {16, 32, 64};
  int attack_gen_len = 48;
  std::string attack_templates = "abcd";

  double edit_lambda = 1.0;
  bool edit_last_layer = false;
  std::string edit_denominator = "true-final";  // true-final | ff-sum
  int edit_max_steps = 100;
  double edit_prob_stop = 0.99;
  long covariance_tokens = 20000;
  std::optional<double> constant_c;

  int eval_n_prompts = 150;
  int eval_prompt_len = 32;
  int eval_gen_len = 50;

  std::string workdir = "work";

  int edit_context() const {
    return *std::max_element(attack_context_lens.begin(), attack_context_lens.end());
  }

  EditOptions edit_options() const {
    EditOptions o;
    o.lambda = edit_lambda;
    o.edit_last_layer = edit_last_layer;
    o.denominator =
        edit_denominator == "ff-sum" ? CoeffDenominator::FfSum : CoeffDenominator::TrueFinal;
    o.max_steps = edit_max_steps;
    o.prob_stop = edit_prob_stop;
    return o;
  }
};

inline RunConfig parse_run_config(const nlohmann::json& j) {
  try {
    RunConfig c;
    c.seed = j.value("seed", uint64_t(7));

    if (j.contains("corpus")) {
      const auto& jc = j.at("corpus");
      c.corpus.n_documents = jc.value("n_documents", c.corpus.n_documents);
      c.corpus.n_pii_per_kind = jc.value("n_pii_per_kind", c.corpus.n_pii_per_kind);
      c.corpus.duplication = jc.value("duplication", c.corpus.duplication);
      c.corpus.vocab_size = jc.value("vocab_size", c.corpus.vocab_size);
    }
    c.corpus.seed = c.seed;

    if (j.contains("model")) {
      const auto& jm = j.at("model");
      c.model.n_layers = jm.value("n_layers", c.model.n_layers);
      c.model.d_model = jm.value("d_model", c.model.d_model);
      c.model.d_ff = jm.value("d_ff", c.model.d_ff);
      c.model.n_heads = jm.value("n_heads", c.model.n_heads);
      c.model.max_seq_len = jm.value("max_seq_len", c.model.max_seq_len);
    }
    c.model.vocab_size = c.corpus.vocab_size;

    if (j.contains("train")) {
      const auto& jt = j.at("train");
      c.train.epochs = jt.value("epochs", c.train.epochs);
      c.train.batch_size = jt.value("batch_size", c.train.batch_size);
      c.train.learning_rate = jt.value("learning_rate", c.train.learning_rate);
      c.train.lr_schedule = jt.value("lr_schedule", c.train.lr_schedule);
      c.train.target_memorization_rate =
          jt.value("target_memorization_rate", c.train.target_memorization_rate);
    }
    c.train.seed = c.seed + 1;

    if (j.contains("attack")) {
      const auto& ja = j.at("attack");
      if (ja.contains("context_lens"))
        c.attack_context_lens = ja.at("context_lens").get<std::vector<int>>();
      c.attack_gen_len = ja.value("gen_len", c.attack_gen_len);
      c.attack_templates = ja.value("templates", c.attack_templates);
    }

    if (j.contains("edit")) {
      const auto& je = j.at("edit");
      c.edit_lambda = je.value("lambda", c.edit_lambda);
      c.edit_last_layer = je.value("edit_last_layer", c.edit_last_layer);
      c.edit_denominator = je.value("denominator", c.edit_denominator);
      c.edit_max_steps = je.value("max_steps", c.edit_max_steps);
      c.edit_prob_stop = je.value("prob_stop", c.edit_prob_stop);
      c.covariance_tokens = je.value("covariance_tokens", c.covariance_tokens);
      if (je.contains("constant_c")) c.constant_c = je.at("constant_c").get<double>();
    }

    if (j.contains("eval")) {
      const auto& je = j.at("eval");
      c.eval_n_prompts = je.value("n_prompts", c.eval_n_prompts);
      c.eval_prompt_len = je.value("prompt_len", c.eval_prompt_len);
      c.eval_gen_len = je.value("gen_len", c.eval_gen_len);
    }

    if (j.contains("paths")) c.workdir = j.at("paths").value("workdir", c.workdir);

    // validation
    c.model.validate();
    c.train.validate();
    if (c.attack_context_lens.empty()) throw ConfigError("attack.context_lens is empty");
    for (int len : c.attack_context_lens)
      if (len < 1) throw ConfigError("attack context length must be >= 1");
    if (c.attack_gen_len < 1) throw ConfigError("attack.gen_len must be >= 1");
    for (char t : c.attack_templates)
      if (t < 'a' || t > 'd') throw ConfigError("attack.templates must draw from a..d");
    if (c.edit_denominator != "true-final" && c.edit_denominator != "ff-sum")
      throw ConfigError("edit.denominator must be true-final or ff-sum");
    if (c.constant_c && *c.constant_c <= 0.0) throw ConfigError("edit.constant_c must be > 0");
    if (c.eval_n_prompts < 1 || c.eval_prompt_len < 1 || c.eval_gen_len < 1)
      throw ConfigError("eval settings must be >= 1");
    if (c.covariance_tokens < 0) throw ConfigError("edit.covariance_tokens must be >= 0");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse: ") + e.what());
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("config validation: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config parse: ") + e.what());
  }
  return parse_run_config(j);
}

// --- workdir layout ----------------------------------------------------------

struct Workdir {
  std::filesystem::path root;
  explicit Workdir(const std::string& w) : root(w) {}
  std::string corpus_jsonl() const { return (root / "corpus" / "corpus.jsonl").string(); }
  std::string vocab_json() const { return (root / "corpus" / "vocab.json").string(); }
  std::string ckpt(const std::string& name) const {
    return (root / "ckpt" / (name + ".pmec")).string();
  }
  std::string report(const std::string& name) const {
    return (root / "reports" / name).string();
  }
  void ensure_dirs() const {
    std::filesystem::create_directories(root / "corpus");
    std::filesystem::create_directories(root / "ckpt");
    std::filesystem::create_directories(root / "reports");
  }
};

inline Corpus load_corpus_artifacts(const Workdir& wd) {
  if (!std::filesystem::exists(wd.corpus_jsonl()) || !std::filesystem::exists(wd.vocab_json()))
    throw MissingArtifact("missing corpus; run gen-corpus first");
  Corpus c;
  c.vocab = read_vocab_json(wd.vocab_json());
  c.documents = read_corpus_jsonl(wd.corpus_jsonl());
  return c;
}

// --- stages ------------------------------------------------------------------

inline void cmd_gen_corpus(const RunConfig& cfg) {
  Workdir wd(cfg.workdir);
  wd.ensure_dirs();
  Corpus corpus = generate_corpus(cfg.corpus);
  write_corpus_jsonl(wd.corpus_jsonl(), corpus);
  write_vocab_json(wd.vocab_json(), corpus.vocab);
}

inline std::vector<EpochStats> cmd_train(const RunConfig& cfg) {
  Workdir wd(cfg.workdir);
  wd.ensure_dirs();
  Corpus corpus = load_corpus_artifacts(wd);
  ModelConfig mc = cfg.model;
  mc.vocab_size = corpus.vocab.size();
  ToyTransformer model(mc, cfg.seed + 2);
  auto history = train(model, corpus, cfg.train);
  save_checkpoint(model, wd.ckpt("pre"));
  write_history_csv(wd.report("history.csv"), history);
  return history;
}

// One CSV row per (kind, context) memorization attack and per (kind,
// template) association attack; the pre-edit run also freezes the leak set
// at the longest context.
inline std::vector<AttackCsvRow> cmd_attack(const RunConfig& cfg, const std::string& which,
                                            bool all_contexts = true) {
  Workdir wd(cfg.workdir);
  wd.ensure_dirs();
  Corpus corpus = load_corpus_artifacts(wd);
  if (!std::filesystem::exists(wd.ckpt(which)))
    throw MissingArtifact("missing checkpoint " + wd.ckpt(which) + "; run train/edit first");
  ToyTransformer model = load_checkpoint(wd.ckpt(which));

  const std::string detail_path = wd.report("attack_" + which + "_detail.jsonl");
  std::filesystem::remove(detail_path);

  std::vector<AttackCsvRow> rows;
  std::vector<int> contexts =
      all_contexts ? cfg.attack_context_lens : std::vector<int>{cfg.edit_context()};

  for (PiiKind kind : {PiiKind::Mail, PiiKind::Phone, PiiKind::Url}) {
    for (int ctx : contexts) {
      auto prompts = build_memorization_prompts(corpus, ctx, kind);
      if (prompts.empty()) continue;
      AttackConfig ac;
      ac.mode = AttackMode::Memorization;
      ac.context_len = ctx;
      ac.gen_len = cfg.attack_gen_len;
      ac.pii_kind = kind;
      AttackReport rep = run_attack(model, prompts, ac, corpus.vocab);
      int new_pii = 0;
      for (const auto& r : rep.per_example)
        if (r.new_pii_matched >= 0) ++new_pii;
      rows.push_back({which, pii_kind_name(kind), "memorization", std::to_string(ctx), rep.leak,
                      rep.tot, rep.attempts, rep.acc, new_pii});
      write_attack_detail_jsonl(detail_path, which, "memorization", std::to_string(ctx), kind,
                                rep);
    }
  }

  const auto owners = collect_owner_pii(corpus);
  for (PiiKind kind : {PiiKind::Mail, PiiKind::Phone, PiiKind::Url}) {
    for (char t : cfg.attack_templates) {
      auto prompts = build_association_prompts(owners, kind, t, corpus.vocab);
      if (prompts.empty()) continue;
      AttackConfig ac;
      ac.mode = AttackMode::Association;
      ac.template_id = t;
      ac.gen_len = cfg.attack_gen_len;
      ac.pii_kind = kind;
      AttackReport rep = run_attack(model, prompts, ac, corpus.vocab);
      int new_pii = 0;
      for (const auto& r : rep.per_example)
        if (r.new_pii_matched >= 0) ++new_pii;
      rows.push_back({which, pii_kind_name(kind), "association", std::string("zero-shot ") + t,
                      rep.leak, rep.tot, rep.attempts, rep.acc, new_pii});
      write_attack_detail_jsonl(detail_path, which, "association", std::string(1, t), kind, rep);
    }
  }

  write_attack_csv(wd.report("attack_" + which + ".csv"), rows);
  if (which == "pre") {
    auto leak_set = collect_leak_set(model, corpus, cfg.edit_context(), cfg.attack_gen_len);
    write_leak_set_jsonl(wd.report("leak_set.jsonl"), leak_set);
  }
  return rows;
}

// Edits the pre-edit checkpoint against the frozen leak set; the post-edit
// model is written beside, never over, the pre-edit one.
inline EditReport cmd_edit(const RunConfig& cfg) {
  Workdir wd(cfg.workdir);
  wd.ensure_dirs();
  Corpus corpus = load_corpus_artifacts(wd);
  if (!std::filesystem::exists(wd.ckpt("pre")))
    throw MissingArtifact("missing pre-edit checkpoint; run train first");
  if (!std::filesystem::exists(wd.report("leak_set.jsonl")))
    throw MissingArtifact("missing leak set; run attack first");

  ToyTransformer model = load_checkpoint(wd.ckpt("pre"));
  auto leak_set = read_leak_set_jsonl(wd.report("leak_set.jsonl"));
  if (leak_set.empty()) throw EmptyLeakSet();

  KeyCovariance cov =
      estimate_key_covariance(model, corpus, cfg.covariance_tokens, cfg.edit_lambda);
  EditOptions opts = cfg.edit_options();

  EditResult result =
      cfg.constant_c
          ? apply_constant_coefficient_edit(model, leak_set, cov, *cfg.constant_c, opts,
                                            corpus.vocab)
          : apply_pme(model, leak_set, cov, opts, corpus.vocab);

  std::string name = "post";
  if (cfg.constant_c) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "post_c%g", *cfg.constant_c);
    name = buf;
  }
  save_checkpoint(result.model, wd.ckpt(name));
  write_edit_report_json(wd.report("edit_report" + (cfg.constant_c ? "_" + name.substr(5) : "") +
                                   ".json"),
                         result.report);
  return result.report;
}

// Clean held-out prompts for similarity and analysis.
inline std::vector<std::vector<int>> heldout_prompts(const Corpus& corpus, int n_prompts,
                                                     int prompt_len) {
  std::vector<std::vector<int>> prompts;
  for (const auto& doc : corpus.documents) {
    if (doc.split != "heldout") continue;
    if (int(prompts.size()) >= n_prompts) break;
    const int take = std::min<int>(prompt_len, int(doc.token_ids.size()));
    prompts.emplace_back(doc.token_ids.begin(), doc.token_ids.begin() + take);
  }
  PME_CHECK(!prompts.empty(), "no held-out documents for prompts");
  return prompts;
}

struct EvalSummary {
  double ppl_pre = 0.0;
  double ppl_post = 0.0;
  double mean_bleu = 0.0;
  double mean_meteor = 0.0;
  NewLeakAudit audit;  // aggregated over memorization contexts
};

inline EvalSummary cmd_eval(const RunConfig& cfg, const std::string& post_name = "post") {
  Workdir wd(cfg.workdir);
  wd.ensure_dirs();
  Corpus corpus = load_corpus_artifacts(wd);
  if (!std::filesystem::exists(wd.ckpt("pre")))
    throw MissingArtifact("missing pre-edit checkpoint; run train first");
  if (!std::filesystem::exists(wd.ckpt(post_name)))
    throw MissingArtifact("missing post-edit checkpoint; run edit first");

  ToyTransformer pre = load_checkpoint(wd.ckpt("pre"));
  ToyTransformer post = load_checkpoint(wd.ckpt(post_name));

  auto prompts = heldout_prompts(corpus, cfg.eval_n_prompts, cfg.eval_prompt_len);
  SimilarityReport sim = generation_similarity(pre, post, prompts, cfg.eval_gen_len, corpus.vocab);
  write_similarity_csv(wd.report("similarity.csv"), "heldout", sim);

  const auto docs = corpus.split_docs("heldout");
  EvalSummary s;
  s.ppl_pre = heldout_perplexity(pre, docs);
  s.ppl_post = heldout_perplexity(post, docs);
  s.mean_bleu = sim.mean_bleu;
  s.mean_meteor = sim.mean_meteor;

  // new-leak audit over the memorization attacks, pre vs post
  for (PiiKind kind : {PiiKind::Mail, PiiKind::Phone, PiiKind::Url}) {
    for (int ctx : cfg.attack_context_lens) {
      auto prompts_m = build_memorization_prompts(corpus, ctx, kind);
      if (prompts_m.empty()) continue;
      AttackConfig ac;
      ac.context_len = ctx;
      ac.gen_len = cfg.attack_gen_len;
      ac.pii_kind = kind;
      AttackReport rp = run_attack(pre, prompts_m, ac, corpus.vocab);
      AttackReport rq = run_attack(post, prompts_m, ac, corpus.vocab);
      NewLeakAudit a = new_leak_audit(rp, rq, prompts_m);
      s.audit.new_pii_predicted += a.new_pii_predicted;
      s.audit.new_correct += a.new_correct;
    }
  }

  nlohmann::json j = {{"ppl_pre", s.ppl_pre},
                      {"ppl_post", s.ppl_post},
                      {"mean_bleu", s.mean_bleu},
                      {"mean_meteor", s.mean_meteor},
                      {"new_pii_predicted", s.audit.new_pii_predicted},
                      {"new_correct", s.audit.new_correct}};
  std::ofstream out(wd.report("eval_summary.json"), std::ios::binary);
  out << j.dump(2) << "\n";
  return s;
}

inline ComponentContributionReport cmd_analyze(const RunConfig& cfg,
                                               const std::string& which = "pre") {
  Workdir wd(cfg.workdir);
  wd.ensure_dirs();
  Corpus corpus = load_corpus_artifacts(wd);
  if (!std::filesystem::exists(wd.ckpt(which)))
    throw MissingArtifact("missing checkpoint " + wd.ckpt(which));
  ToyTransformer model = load_checkpoint(wd.ckpt(which));
  auto prompts = heldout_prompts(corpus, cfg.eval_n_prompts, cfg.eval_prompt_len);
  auto rep = component_contributions(model, prompts, corpus.vocab);
  write_contribution_csv(wd.report("contributions.csv"), rep);
  return rep;
}

}  // namespace pme
