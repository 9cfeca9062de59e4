#pragma once

// Memorization trainer: SGD with momentum 0.9 and global gradient-norm
// clipping at 1.0, cosine or constant schedule. Batch gradients are
// accumulated over a fixed number of shards and reduced in shard order,
// which keeps the final checkpoint bitwise reproducible no matter how
// many threads actually run.

#include "pme/attack.hpp"
#include "pme/corpus.hpp"
#include "pme/model.hpp"

#include <fstream>
#include <thread>

namespace pme {

class Diverged : public std::runtime_error {
 public:
  explicit Diverged(int last_good)
      : std::runtime_error("training diverged; last good epoch " + std::to_string(last_good)),
        last_good_epoch(last_good) {}
  int last_good_epoch;
};

struct TrainSpec {
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 0.3;
  std::string lr_schedule = "cosine";  // cosine | constant
  uint64_t seed = 1;
  double target_memorization_rate = 1.0;  // early stop once reached

  void validate() const {
    PME_CHECK(epochs >= 0 && batch_size >= 1, "bad epochs/batch_size");
    PME_CHECK(learning_rate > 0.0, "learning_rate must be > 0");
    PME_CHECK(lr_schedule == "cosine" || lr_schedule == "constant", "unknown lr_schedule");
    PME_CHECK(target_memorization_rate >= 0.0 && target_memorization_rate <= 1.0,
              "target_memorization_rate must be in [0,1]");
  }
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double memorization_rate = 0.0;
};

constexpr int kGradShards = 4;
constexpr int kProbeContext = 32;
constexpr int kProbeGenLen = 40;

// Fraction of a 10% planted-PII sample leaked by a context-32 attack;
// the same harness scores the final evaluation.
inline double memorization_probe(const ToyTransformer& model, const Corpus& corpus) {
  std::set<std::string> sampled;
  {
    std::set<std::string> all;
    for (const auto& doc : corpus.documents)
      for (const auto& span : doc.pii_spans) {
        std::vector<int> range(doc.token_ids.begin() + span.begin,
                               doc.token_ids.begin() + span.end);
        all.insert(detokenize(range, corpus.vocab));
      }
    int i = 0;
    for (const auto& s : all)
      if (i++ % 10 == 0) sampled.insert(s);
  }
  if (sampled.empty()) return 0.0;

  std::set<std::string> leaked;
  for (PiiKind kind : {PiiKind::Mail, PiiKind::Phone, PiiKind::Url}) {
    auto prompts = build_memorization_prompts(corpus, kProbeContext, kind);
    std::erase_if(prompts, [&](const AttackPrompt& p) { return !sampled.count(p.target); });
    if (prompts.empty()) continue;
    AttackConfig cfg;
    cfg.context_len = kProbeContext;
    cfg.gen_len = kProbeGenLen;
    cfg.pii_kind = kind;
    AttackReport report = run_attack(model, prompts, cfg, corpus.vocab);
    for (size_t i = 0; i < prompts.size(); ++i)
      if (report.per_example[i].leaked) leaked.insert(prompts[i].target);
  }
  return double(leaked.size()) / double(sampled.size());
}

inline std::vector<EpochStats> train(ToyTransformer& model, const Corpus& corpus,
                                     const TrainSpec& spec) {
  spec.validate();
  std::vector<std::vector<int>> docs;
  for (const auto& d : corpus.documents)
    if (d.split == "train") docs.push_back(d.token_ids);
  PME_CHECK(!docs.empty(), "train: corpus has no training documents");

  std::vector<EpochStats> history;
  if (spec.epochs == 0) return history;

  ModelParams velocity = ModelParams::zeros_like(model.cfg);
  std::vector<ModelParams> shard_grads;
  for (int s = 0; s < kGradShards; ++s) shard_grads.push_back(ModelParams::zeros_like(model.cfg));
  ModelParams total = ModelParams::zeros_like(model.cfg);

  Rng order_rng(spec.seed);
  const long steps_per_epoch = long((docs.size() + spec.batch_size - 1) / spec.batch_size);
  const long total_steps = steps_per_epoch * spec.epochs;
  long step = 0;

  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    const std::vector<int> order = order_rng.permutation(int(docs.size()));
    double epoch_loss_sum = 0.0;
    long epoch_targets = 0;

    for (size_t at = 0; at < order.size(); at += size_t(spec.batch_size)) {
      const size_t end = std::min(order.size(), at + size_t(spec.batch_size));
      std::vector<std::vector<int>> shard_batches[kGradShards];
      for (size_t i = at; i < end; ++i)
        shard_batches[(i - at) % kGradShards].push_back(docs[size_t(order[i])]);

      LossSum shard_sums[kGradShards];
      for (auto& g : shard_grads) g.visit([](const std::string&, Matrix& m) { m.set_zero(); });
      {
        std::vector<std::thread> pool;
        const int n_threads = std::min(worker_threads(), kGradShards);
        std::atomic<int> next{0};
        auto work = [&] {
          for (;;) {
            const int s = next.fetch_add(1);
            if (s >= kGradShards) return;
            if (!shard_batches[s].empty())
              shard_sums[s] = loss_and_grads_sum(model, shard_batches[s], shard_grads[size_t(s)]);
          }
        };
        for (int t = 1; t < n_threads; ++t) pool.emplace_back(work);
        work();
        for (auto& t : pool) t.join();
      }

      LossSum batch_sum;
      for (int s = 0; s < kGradShards; ++s) {
        batch_sum.sum += shard_sums[s].sum;
        batch_sum.n_targets += shard_sums[s].n_targets;
      }
      if (batch_sum.n_targets == 0) continue;
      if (!std::isfinite(batch_sum.sum)) throw Diverged(epoch - 1);

      total.visit([](const std::string&, Matrix& m) { m.set_zero(); });
      for (int s = 0; s < kGradShards; ++s) {
        size_t ti = 0;
        std::vector<Matrix*> dst;
        total.visit([&](const std::string&, Matrix& m) { dst.push_back(&m); });
        shard_grads[size_t(s)].visit([&](const std::string&, Matrix& m) {
          add_inplace(*dst[ti++], m);
        });
      }
      const double inv_n = 1.0 / double(batch_sum.n_targets);
      total.visit([&](const std::string&, Matrix& m) { scale_inplace(m, inv_n); });

      double sq = 0.0;
      total.visit([&](const std::string&, Matrix& m) {
        const double f = frobenius_norm(m);
        sq += f * f;
      });
      const double gnorm = std::sqrt(sq);
      const double clip = gnorm > 1.0 ? 1.0 / gnorm : 1.0;

      double lr = spec.learning_rate;
      if (spec.lr_schedule == "cosine")
        lr *= 0.5 * (1.0 + std::cos(M_PI * double(step) / double(std::max(1L, total_steps))));
      ++step;

      // momentum update in fixed visit order
      std::vector<Matrix*> vel;
      velocity.visit([&](const std::string&, Matrix& m) { vel.push_back(&m); });
      std::vector<Matrix*> par;
      model.params.visit([&](const std::string&, Matrix& m) { par.push_back(&m); });
      size_t ti = 0;
      total.visit([&](const std::string&, Matrix& g) {
        Matrix& v = *vel[ti];
        Matrix& p = *par[ti];
        ++ti;
        scale_inplace(v, 0.9);
        add_inplace(v, g, -lr * clip);
        add_inplace(p, v);
      });

      epoch_loss_sum += batch_sum.sum;
      epoch_targets += batch_sum.n_targets;
    }

    EpochStats st;
    st.epoch = epoch;
    st.loss = epoch_targets > 0 ? epoch_loss_sum / double(epoch_targets) : 0.0;
    if (!std::isfinite(st.loss)) throw Diverged(epoch - 1);
    st.memorization_rate = memorization_probe(model, corpus);
    history.push_back(st);
    if (st.memorization_rate >= spec.target_memorization_rate) break;
  }
  return history;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,loss,memorization_rate\n";
  char buf[96];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.4f\n", h.epoch, h.loss, h.memorization_rate);
    out << buf;
  }
}

}  // namespace pme
