// pme: desk-scale privacy-editing lab.
//
//   pme gen-corpus|train|attack|edit|eval|analyze -c <config.json> [flags]
//
// Exit codes: 0 ok, 1 runtime error, 2 config error.

#include "pme/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using namespace pme;

int main(int argc, char** argv) {
  CLI::App app{"Private memorization editing lab"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("-c,--config", config_path, "run configuration JSON")->required();

  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  auto* train_cmd = app.add_subcommand("train", "train the pre-edit model");
  auto* attack_cmd = app.add_subcommand("attack", "run extraction attacks");
  auto* edit_cmd = app.add_subcommand("edit", "apply the closed-form edit");
  auto* eval_cmd = app.add_subcommand("eval", "score post-edit reliability");
  auto* analyze_cmd = app.add_subcommand("analyze", "per-block contribution analysis");

  std::string attack_ckpt = "pre";
  bool all_contexts = false;
  attack_cmd->add_option("--ckpt", attack_ckpt, "checkpoint to attack (pre|post|post_cX)");
  attack_cmd->add_flag("--all-contexts", all_contexts,
                       "one CSV row per (kind, context) and (kind, template)");

  double lambda = -1.0, constant_c = -1.0, prob_stop = -1.0;
  int max_steps = -1;
  bool edit_last_layer = false;
  std::string denominator;
  edit_cmd->add_option("--lambda", lambda, "key covariance scale");
  edit_cmd->add_flag("--edit-last-layer", edit_last_layer, "include the final layer in the edit");
  edit_cmd->add_option("--constant-c", constant_c, "constant contribution coefficient ablation");
  edit_cmd->add_option("--denominator", denominator, "coefficient denominator: true-final|ff-sum");
  edit_cmd->add_option("--max-steps", max_steps, "target optimization step cap");
  edit_cmd->add_option("--prob-stop", prob_stop, "early-stop probability for the dummy");

  std::string eval_post = "post";
  eval_cmd->add_option("--post", eval_post, "post-edit checkpoint name");
  std::string analyze_ckpt = "pre";
  analyze_cmd->add_option("--ckpt", analyze_ckpt, "checkpoint to analyze");

  CLI11_PARSE(app, argc, argv);

  RunConfig cfg;
  try {
    cfg = load_run_config(config_path);
    if (edit_cmd->parsed()) {
      if (lambda > 0) cfg.edit_lambda = lambda;
      if (edit_last_layer) cfg.edit_last_layer = true;
      if (constant_c > 0) cfg.constant_c = constant_c;
      if (!denominator.empty()) {
        if (denominator != "true-final" && denominator != "ff-sum")
          throw ConfigError("denominator must be true-final or ff-sum");
        cfg.edit_denominator = denominator;
      }
      if (max_steps > 0) cfg.edit_max_steps = max_steps;
      if (prob_stop > 0) cfg.edit_prob_stop = prob_stop;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  }

  try {
    if (gen->parsed()) {
      cmd_gen_corpus(cfg);
      std::printf("corpus written to %s\n", cfg.workdir.c_str());
    } else if (train_cmd->parsed()) {
      auto history = cmd_train(cfg);
      if (!history.empty())
        std::printf("trained %zu epochs, loss %.4f, memorization %.2f\n", history.size(),
                    history.back().loss, history.back().memorization_rate);
      else
        std::printf("trained 0 epochs\n");
    } else if (attack_cmd->parsed()) {
      auto rows = cmd_attack(cfg, attack_ckpt, all_contexts);
      for (const auto& r : rows)
        std::printf("%s %s %s leak=%d tot=%d attempts=%d acc=%.1f%%\n", r.pii_kind.c_str(),
                    r.mode.c_str(), r.config.c_str(), r.leak, r.tot, r.attempts, 100.0 * r.acc);
    } else if (edit_cmd->parsed()) {
      EditReport rep = cmd_edit(cfg);
      for (const auto& l : rep.layers)
        std::printf("layer %d |delta|_F=%.4f residual=%.2e\n", l.layer, l.frobenius_delta,
                    l.residual_norm);
    } else if (eval_cmd->parsed()) {
      EvalSummary s = cmd_eval(cfg, eval_post);
      std::printf("bleu=%.4f meteor=%.4f ppl %.4f -> %.4f, new pii pred=%d correct=%d\n",
                  s.mean_bleu, s.mean_meteor, s.ppl_pre, s.ppl_post, s.audit.new_pii_predicted,
                  s.audit.new_correct);
    } else if (analyze_cmd->parsed()) {
      auto rep = cmd_analyze(cfg, analyze_ckpt);
      for (size_t l = 0; l < rep.attn_mean.size(); ++l)
        std::printf("layer %zu attention=%.4f ff=%.4f\n", l, rep.attn_mean[l], rep.ff_mean[l]);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
