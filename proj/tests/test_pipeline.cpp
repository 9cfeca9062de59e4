#include "pme/pipeline.hpp"

#include <doctest.h>

#include <filesystem>

using namespace pme;

namespace {

namespace fs = std::filesystem;

nlohmann::json tiny_config_json(const std::string& workdir) {
  return {
      {"seed", 11},
      {"corpus", {{"n_documents", 24}, {"n_pii_per_kind", 3}, {"duplication", 2}}},
      {"model",
       {{"n_layers", 2}, {"d_model", 16}, {"d_ff", 32}, {"n_heads", 2}, {"max_seq_len", 160}}},
      {"train",
       {{"epochs", 1}, {"batch_size", 8}, {"learning_rate", 0.2}, {"target_memorization_rate", 1.0}}},
      {"attack", {{"context_lens", {8, 16}}, {"gen_len", 12}}},
      {"edit", {{"lambda", 1.0}, {"covariance_tokens", 300}, {"max_steps", 5}}},
      {"eval", {{"n_prompts", 4}, {"prompt_len", 12}, {"gen_len", 10}}},
      {"paths", {{"workdir", workdir}}},
  };
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("pme_pipe_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config validation failures throw ConfigError") {
  nlohmann::json j = tiny_config_json("x");
  j["edit"]["denominator"] = "bogus";
  CHECK_THROWS_AS(parse_run_config(j), ConfigError);
  j = tiny_config_json("x");
  j["attack"]["context_lens"] = nlohmann::json::array();
  CHECK_THROWS_AS(parse_run_config(j), ConfigError);
  j = tiny_config_json("x");
  j["edit"]["constant_c"] = -2.0;
  CHECK_THROWS_AS(parse_run_config(j), ConfigError);
  j = tiny_config_json("x");
  j["model"]["d_model"] = 9;  // not divisible by heads
  CHECK_THROWS_AS(parse_run_config(j), ConfigError);
}

TEST_CASE("stages demand their upstream artifacts") {
  TempDir tmp;
  RunConfig cfg = parse_run_config(tiny_config_json((tmp.path / "w").string()));
  CHECK_THROWS_AS(cmd_train(cfg), MissingArtifact);
  cmd_gen_corpus(cfg);
  CHECK_THROWS_AS(cmd_attack(cfg, "pre"), MissingArtifact);
  CHECK_THROWS_AS(cmd_edit(cfg), MissingArtifact);  // no checkpoint yet
  cmd_train(cfg);
  CHECK_THROWS_AS(cmd_edit(cfg), MissingArtifact);  // no leak set yet
  CHECK_THROWS_AS(cmd_eval(cfg), MissingArtifact);  // no post checkpoint
}

TEST_CASE("gen-corpus twice produces identical files") {
  TempDir tmp;
  RunConfig cfg = parse_run_config(tiny_config_json((tmp.path / "w").string()));
  cmd_gen_corpus(cfg);
  auto read = [&](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  Workdir wd(cfg.workdir);
  const std::string first = read(wd.corpus_jsonl());
  cmd_gen_corpus(cfg);
  CHECK(read(wd.corpus_jsonl()) == first);
}

TEST_CASE("attack emits one CSV row per kind and context plus association rows") {
  TempDir tmp;
  RunConfig cfg = parse_run_config(tiny_config_json((tmp.path / "w").string()));
  cmd_gen_corpus(cfg);
  cmd_train(cfg);
  auto rows = cmd_attack(cfg, "pre", /*all_contexts=*/true);
  int memo = 0, assoc = 0;
  for (const auto& r : rows) {
    if (r.mode == "memorization") ++memo;
    if (r.mode == "association") ++assoc;
  }
  CHECK(memo == 3 * 2);      // kinds x contexts
  CHECK(assoc == 3 * 4);     // kinds x templates
  Workdir wd(cfg.workdir);
  CHECK(fs::exists(wd.report("attack_pre.csv")));
  CHECK(fs::exists(wd.report("attack_pre_detail.jsonl")));
  CHECK(fs::exists(wd.report("leak_set.jsonl")));
}

TEST_CASE("edit fails cleanly on an empty leak set") {
  TempDir tmp;
  RunConfig cfg = parse_run_config(tiny_config_json((tmp.path / "w").string()));
  cmd_gen_corpus(cfg);
  cmd_train(cfg);
  cmd_attack(cfg, "pre");
  // untrained-ish model: the leak set is empty, edit must refuse
  Workdir wd(cfg.workdir);
  auto leaks = read_leak_set_jsonl(wd.report("leak_set.jsonl"));
  if (leaks.empty()) {
    CHECK_THROWS_AS(cmd_edit(cfg), EmptyLeakSet);
  }
}

TEST_CASE("seed propagates into corpus and train specs") {
  nlohmann::json j = tiny_config_json("w");
  j["seed"] = 1234;
  RunConfig cfg = parse_run_config(j);
  CHECK(cfg.corpus.seed == 1234);
  CHECK(cfg.train.seed == 1235);
  CHECK(cfg.edit_context() == 16);
}
