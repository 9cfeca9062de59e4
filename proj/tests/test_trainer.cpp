#include "pme/checkpoint.hpp"
#include "pme/trainer.hpp"

#include <doctest.h>

using namespace pme;

namespace {

struct TrainFixture {
  Corpus corpus;
  ModelConfig mc;

  TrainFixture() {
    CorpusSpec spec;
    spec.n_documents = 20;
    spec.n_pii_per_kind = 2;
    spec.duplication = 2;
    spec.seed = 60;
    corpus = generate_corpus(spec);
    mc.n_layers = 2;
    mc.d_model = 16;
    mc.d_ff = 32;
    mc.n_heads = 2;
    mc.vocab_size = corpus.vocab.size();
    mc.max_seq_len = 160;
  }
};

}  // namespace

TEST_CASE("zero epochs leave the model unchanged with empty history") {
  TrainFixture fx;
  ToyTransformer model(fx.mc, 70);
  ToyTransformer before = model;
  TrainSpec spec;
  spec.epochs = 0;
  auto history = train(model, fx.corpus, spec);
  CHECK(history.empty());
  bool identical = true;
  model.params.visit([&](const std::string& name, Matrix& m) {
    before.params.visit([&](const std::string& n2, Matrix& m2) {
      if (n2 == name && !(m == m2)) identical = false;
    });
  });
  CHECK(identical);
}

TEST_CASE("a few epochs reduce the loss and keep it finite") {
  TrainFixture fx;
  ToyTransformer model(fx.mc, 71);
  TrainSpec spec;
  spec.epochs = 3;
  spec.batch_size = 8;
  spec.learning_rate = 0.3;
  spec.seed = 5;
  auto history = train(model, fx.corpus, spec);
  REQUIRE(history.size() == 3);
  for (const auto& h : history) CHECK(std::isfinite(h.loss));
  CHECK(history.back().loss < history.front().loss);
}

TEST_CASE("training is bitwise deterministic") {
  TrainFixture fx;
  TrainSpec spec;
  spec.epochs = 2;
  spec.batch_size = 8;
  spec.learning_rate = 0.2;
  spec.seed = 6;

  ToyTransformer a(fx.mc, 72);
  ToyTransformer b(fx.mc, 72);
  auto ha = train(a, fx.corpus, spec);
  auto hb = train(b, fx.corpus, spec);
  REQUIRE(ha.size() == hb.size());
  for (size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].loss == hb[i].loss);

  bool identical = true;
  a.params.visit([&](const std::string& name, Matrix& m) {
    b.params.visit([&](const std::string& n2, Matrix& m2) {
      if (n2 == name && !(m == m2)) identical = false;
    });
  });
  CHECK(identical);
}

TEST_CASE("a non-finite loss raises Diverged with the last good epoch") {
  TrainFixture fx;
  ToyTransformer model(fx.mc, 73);
  model.params.lnf_g(0, 0) = std::nan("");  // poisoned weights surface as NaN loss
  TrainSpec spec;
  spec.epochs = 5;
  spec.batch_size = 8;
  spec.learning_rate = 0.1;
  try {
    train(model, fx.corpus, spec);
    FAIL("expected Diverged");
  } catch (const Diverged& e) {
    CHECK(e.last_good_epoch == -1);
  }
}

TEST_CASE("history CSV carries epoch, loss and memorization rate") {
  std::vector<EpochStats> history = {{0, 2.5, 0.0}, {1, 1.25, 0.1}};
  const auto dir = std::filesystem::temp_directory_path();
  const std::string path = (dir / "pme_history.csv").string();
  write_history_csv(path, history);
  std::ifstream in(path);
  std::string header, l0, l1;
  std::getline(in, header);
  std::getline(in, l0);
  std::getline(in, l1);
  CHECK(header == "epoch,loss,memorization_rate");
  CHECK(l0 == "0,2.500000,0.0000");
  CHECK(l1 == "1,1.250000,0.1000");
  std::filesystem::remove(path);
}

TEST_CASE("train spec validation rejects bad settings") {
  TrainSpec spec;
  spec.learning_rate = 0.0;
  CHECK_THROWS_AS(spec.validate(), ShapeError);
  spec.learning_rate = 0.1;
  spec.lr_schedule = "exotic";
  CHECK_THROWS_AS(spec.validate(), ShapeError);
  spec.lr_schedule = "cosine";
  spec.target_memorization_rate = 1.5;
  CHECK_THROWS_AS(spec.validate(), ShapeError);
}
