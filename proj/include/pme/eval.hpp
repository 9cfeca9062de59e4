#pragma once

// Post-edit reliability measurement: pre/post generation similarity
// (BLEU-4 with add-one smoothing, exact-match METEOR), held-out
// perplexity, per-block contribution analysis and the new-leak audit.

#include "pme/attack.hpp"
#include "pme/corpus.hpp"
#include "pme/model.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace pme {

class MismatchedPromptSets : public std::runtime_error {
 public:
  MismatchedPromptSets() : std::runtime_error("pre and post reports cover different prompts") {}
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// BLEU-4, add-one smoothed on every order, brevity penalty exp(1 - r/c).
inline double bleu4(const std::vector<std::string>& candidate,
                    const std::vector<std::string>& reference) {
  if (candidate.empty() || reference.empty()) return candidate == reference ? 1.0 : 0.0;
  double log_sum = 0.0;
  for (int order = 1; order <= 4; ++order) {
    std::map<std::vector<std::string>, int> ref_counts;
    for (int i = 0; i + order <= int(reference.size()); ++i)
      ++ref_counts[std::vector<std::string>(reference.begin() + i, reference.begin() + i + order)];
    std::map<std::vector<std::string>, int> cand_counts;
    for (int i = 0; i + order <= int(candidate.size()); ++i)
      ++cand_counts[std::vector<std::string>(candidate.begin() + i, candidate.begin() + i + order)];
    long total = 0, matched = 0;
    for (const auto& [ngram, count] : cand_counts) {
      total += count;
      auto it = ref_counts.find(ngram);
      if (it != ref_counts.end()) matched += std::min(count, it->second);
    }
    log_sum += 0.25 * std::log(double(matched + 1) / double(total + 1));
  }
  const double c = double(candidate.size()), r = double(reference.size());
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum);
}

// Exact-match METEOR: in-order unigram alignment, F-mean with alpha=0.9,
// chunk penalty gamma=0.5, beta=3. The fragmentation uses (chunks-1)/m so
// identical texts score exactly 1.
inline double meteor(const std::vector<std::string>& candidate,
                     const std::vector<std::string>& reference) {
  if (candidate.empty() || reference.empty()) return candidate == reference ? 1.0 : 0.0;
  std::vector<int> match_ref(candidate.size(), -1);
  std::vector<bool> used(reference.size(), false);
  int m = 0;
  for (size_t i = 0; i < candidate.size(); ++i) {
    for (size_t j = 0; j < reference.size(); ++j) {
      if (used[j] || reference[j] != candidate[i]) continue;
      match_ref[i] = int(j);
      used[j] = true;
      ++m;
      break;
    }
  }
  if (m == 0) return 0.0;
  int chunks = 0;
  int prev_ref = -2;
  for (size_t i = 0; i < candidate.size(); ++i) {
    if (match_ref[i] < 0) continue;
    if (match_ref[i] != prev_ref + 1) ++chunks;
    prev_ref = match_ref[i];
  }
  const double p = double(m) / double(candidate.size());
  const double r = double(m) / double(reference.size());
  const double f_mean = p * r / (0.9 * p + 0.1 * r);
  const double penalty = 0.5 * std::pow(double(chunks - 1) / double(m), 3.0);
  return f_mean * (1.0 - penalty);
}

// --- generation similarity ------------------------------------------------

struct SimilarityScore {
  int prompt_id = 0;
  double bleu = 0.0;
  double meteor = 0.0;
};

struct SimilarityReport {
  std::vector<SimilarityScore> per_prompt;
  double mean_bleu = 0.0, std_bleu = 0.0;
  double mean_meteor = 0.0, std_meteor = 0.0;
};

inline void finalize_similarity(SimilarityReport& rep) {
  const double n = double(rep.per_prompt.size());
  if (n == 0) return;
  double sb = 0, sm = 0;
  for (const auto& s : rep.per_prompt) {
    sb += s.bleu;
    sm += s.meteor;
  }
  rep.mean_bleu = sb / n;
  rep.mean_meteor = sm / n;
  double vb = 0, vm = 0;
  for (const auto& s : rep.per_prompt) {
    vb += (s.bleu - rep.mean_bleu) * (s.bleu - rep.mean_bleu);
    vm += (s.meteor - rep.mean_meteor) * (s.meteor - rep.mean_meteor);
  }
  rep.std_bleu = std::sqrt(vb / n);
  rep.std_meteor = std::sqrt(vm / n);
}

// Both models continue the same clean prompts greedily; the post-edit
// generation is scored against the pre-edit one.
inline SimilarityReport generation_similarity(const ToyTransformer& model_pre,
                                              const ToyTransformer& model_post,
                                              const std::vector<std::vector<int>>& prompts,
                                              int gen_len, const Vocab& vocab) {
  SimilarityReport rep;
  rep.per_prompt.resize(prompts.size());
  std::atomic<size_t> cursor{0};
  auto work = [&] {
    for (;;) {
      const size_t i = cursor.fetch_add(1);
      if (i >= prompts.size()) return;
      const auto seq = with_bos(prompts[i], vocab);
      const auto ref = split_words(detokenize(model_pre.generate_greedy(seq, gen_len, vocab.eos), vocab));
      const auto cand =
          split_words(detokenize(model_post.generate_greedy(seq, gen_len, vocab.eos), vocab));
      rep.per_prompt[i] = {int(i), bleu4(cand, ref), meteor(cand, ref)};
    }
  };
  std::vector<std::thread> pool;
  const int n_threads = std::min<int>(worker_threads(), int(prompts.size()));
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  finalize_similarity(rep);
  return rep;
}

inline void write_similarity_csv(const std::string& path, const std::string& subcorpus,
                                 const SimilarityReport& rep) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "subcorpus,prompt_id,bleu,meteor\n";
  char buf[96];
  for (const auto& s : rep.per_prompt) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.6f,%.6f\n", subcorpus.c_str(), s.prompt_id, s.bleu,
                  s.meteor);
    out << buf;
  }
}

// --- perplexity -------------------------------------------------------------

// exp of the mean next-token cross-entropy over every held-out token
inline double heldout_perplexity(const ToyTransformer& model,
                                 const std::vector<const Document*>& docs) {
  PME_CHECK(!docs.empty(), "heldout_perplexity: empty split");
  double sum = 0.0;
  long count = 0;
  for (const Document* doc : docs) {
    const auto& ids = doc->token_ids;
    if (ids.size() < 2) continue;
    ForwardCache c;
    model.forward(ids, &c);
    for (int i = 0; i + 1 < int(ids.size()); ++i) {
      std::vector<double> p(c.logits.row(i).begin(), c.logits.row(i).end());
      softmax_row_inplace(p);
      sum -= std::log(std::max(p[size_t(ids[size_t(i) + 1])], 1e-300));
      ++count;
    }
  }
  PME_CHECK(count > 0, "heldout_perplexity: no targets");
  return std::exp(sum / double(count));
}

// --- component contributions -------------------------------------------------

struct ComponentContributionReport {
  // relative coefficients, normalized per example over all 2L blocks
  std::vector<double> attn_mean, attn_std;  // per layer
  std::vector<double> ff_mean, ff_std;
  // raw projection partition per example: embedding + blocks == 1
  std::vector<double> embedding_raw;
};

inline ComponentContributionReport component_contributions(
    const ToyTransformer& model, const std::vector<std::vector<int>>& prompts,
    const Vocab& vocab) {
  PME_CHECK(!prompts.empty(), "component_contributions: no prompts");
  const int L = model.cfg.n_layers;
  std::vector<std::vector<double>> attn, ff;
  attn.resize(size_t(L));
  ff.resize(size_t(L));
  ComponentContributionReport rep;

  for (const auto& prompt : prompts) {
    ForwardTrace tr = model.forward_with_trace(with_bos(prompt, vocab));
    double norm_sq = 0.0;
    for (double v : tr.x_final) norm_sq += v * v;
    if (std::sqrt(norm_sq) < 1e-12) throw DegenerateTrace();
    auto proj = [&](const std::vector<double>& v) {
      double s = 0.0;
      for (size_t j = 0; j < v.size(); ++j) s += v[j] * tr.x_final[j];
      return s / norm_sq;
    };
    double block_sum = 0.0;
    std::vector<double> oa, oh;
    oa.resize(size_t(L));
    oh.resize(size_t(L));
    for (int l = 0; l < L; ++l) {
      oa[size_t(l)] = proj(tr.a[size_t(l)]);
      oh[size_t(l)] = proj(tr.h[size_t(l)]);
      block_sum += oa[size_t(l)] + oh[size_t(l)];
    }
    rep.embedding_raw.push_back(proj(tr.x0));
    for (int l = 0; l < L; ++l) {
      attn[size_t(l)].push_back(oa[size_t(l)] / block_sum);
      ff[size_t(l)].push_back(oh[size_t(l)] / block_sum);
    }
  }

  auto mean_std = [](const std::vector<double>& v) {
    const double n = double(v.size());
    double mu = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double var = 0.0;
    for (double x : v) var += (x - mu) * (x - mu);
    return std::pair<double, double>(mu, std::sqrt(var / n));
  };
  for (int l = 0; l < L; ++l) {
    auto [am, as] = mean_std(attn[size_t(l)]);
    auto [fm, fs] = mean_std(ff[size_t(l)]);
    rep.attn_mean.push_back(am);
    rep.attn_std.push_back(as);
    rep.ff_mean.push_back(fm);
    rep.ff_std.push_back(fs);
  }
  return rep;
}

inline void write_contribution_csv(const std::string& path,
                                   const ComponentContributionReport& rep) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "layer,block,mean_coeff,std\n";
  char buf[96];
  for (size_t l = 0; l < rep.attn_mean.size(); ++l) {
    std::snprintf(buf, sizeof(buf), "%zu,attention,%.6f,%.6f\n", l, rep.attn_mean[l],
                  rep.attn_std[l]);
    out << buf;
    std::snprintf(buf, sizeof(buf), "%zu,ff,%.6f,%.6f\n", l, rep.ff_mean[l], rep.ff_std[l]);
    out << buf;
  }
}

// --- new-leak audit -------------------------------------------------------------

struct NewLeakAudit {
  int new_pii_predicted = 0;  // prompts whose post-edit generation holds a PII absent pre-edit
  int new_correct = 0;        // of those, PII equal to some other example's true PII
};

inline NewLeakAudit new_leak_audit(const AttackReport& pre, const AttackReport& post,
                                   const std::vector<AttackPrompt>& prompts) {
  if (pre.per_example.size() != post.per_example.size() ||
      pre.per_example.size() != prompts.size())
    throw MismatchedPromptSets();
  for (size_t i = 0; i < prompts.size(); ++i)
    if (pre.per_example[i].example_id != post.per_example[i].example_id)
      throw MismatchedPromptSets();

  std::map<std::string, int> target_ids;
  for (const auto& p : prompts) target_ids.emplace(p.target, p.example_id);

  NewLeakAudit audit;
  for (size_t i = 0; i < prompts.size(); ++i) {
    auto extract = [&](const std::string& text) {
      std::set<std::string> found;
      for (auto it = std::sregex_iterator(text.begin(), text.end(), pii_regex(prompts[i].kind));
           it != std::sregex_iterator(); ++it)
        found.insert(it->str());
      return found;
    };
    const auto pre_pii = extract(pre.per_example[i].generated);
    const auto post_pii = extract(post.per_example[i].generated);
    bool any_new = false, any_correct = false;
    for (const auto& s : post_pii) {
      if (pre_pii.count(s)) continue;
      any_new = true;
      auto hit = target_ids.find(s);
      if (hit != target_ids.end() && hit->second != prompts[i].example_id) any_correct = true;
    }
    if (any_new) ++audit.new_pii_predicted;
    if (any_correct) ++audit.new_correct;
  }
  return audit;
}

}  // namespace pme
