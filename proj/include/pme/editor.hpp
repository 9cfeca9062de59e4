#pragma once

// The closed-form memory editor. Per leaked example it captures a trace,
// optimizes the final-layer representation until the dummy token is the
// argmax, splits that target across layers by projection-based
// contribution coefficients, and solves one regularized least-squares
// system per layer:
//
//   Delta = (V* - V0*) K*^T (K0 K0^T + K* K*^T)^-1
//
// Layers are edited in order, with keys and current values recomputed
// against the partially edited model before each solve.

#include "pme/attack.hpp"
#include "pme/corpus.hpp"
#include "pme/matrix.hpp"
#include "pme/model.hpp"

#include <functional>
#include <optional>

namespace pme {

class EmptyLeakSet : public std::runtime_error {
 public:
  EmptyLeakSet() : std::runtime_error("nothing to edit: leak set is empty") {}
};

class InvalidCoefficient : public std::runtime_error {
 public:
  explicit InvalidCoefficient(double c)
      : std::runtime_error("constant coefficient must be > 0, got " + std::to_string(c)) {}
};

class LayerSolveError : public std::runtime_error {
 public:
  LayerSolveError(int layer, const NotPositiveDefinite& inner)
      : std::runtime_error("layer " + std::to_string(layer) + ": " + inner.what()),
        layer_index(layer),
        pivot_index(inner.pivot_index) {}
  int layer_index;
  int pivot_index;
};

enum class CoeffDenominator { TrueFinal, FfSum };

struct ContributionProfile {
  std::vector<double> w_p;  // raw projections per edited layer
  std::vector<double> w;    // normalized coefficients
  bool degenerate = false;  // raw projections cancelled; fell back to uniform
};

struct TargetRepresentation {
  std::vector<double> x_star;
  double delta_norm = 0.0;
  int steps_used = 0;
  double achieved_prob = 0.0;
  bool converged = true;
};

struct LayerEdit {
  int layer = 0;
  Matrix k_star;   // d_ff x N, columns are keys
  Matrix v0_star;  // d x N, current outputs for those keys
  Matrix v_star;   // d x N, target values
  Matrix delta;    // d x d_ff update (column-vector convention)
  double residual_norm = 0.0;
};

struct KeyCovariance {
  std::vector<Matrix> c0;  // per layer, d_ff x d_ff, ridged
  long sample_count = 0;
  double lambda = 1.0;
};

struct EditOptions {
  double lambda = 1.0;
  bool edit_last_layer = false;
  CoeffDenominator denominator = CoeffDenominator::TrueFinal;
  double step = 0.5;
  int max_steps = 100;
  double prob_stop = 0.99;
  bool recompute_v0 = true;  // false freezes keys/values at the pre-edit trace
};

struct EditReport {
  struct LayerStats {
    int layer = 0;
    double frobenius_delta = 0.0;
    double residual_norm = 0.0;
  };
  struct ExampleStats {
    int id = 0;
    int steps_used = 0;
    double achieved_prob = 0.0;
    bool degenerate_profile = false;
    bool converged = true;
  };
  std::vector<LayerStats> layers;
  std::vector<ExampleStats> examples;
};

// --- target representation -----------------------------------------------

// Evaluates the target's log-probability, probability, argmax and the
// gradient of log-prob with respect to the state.
using HeadFn = std::function<ToyTransformer::HeadResult(std::span<const double>)>;

// Plain gradient ascent on log P(target), stopping early once the target
// is the argmax with probability >= prob_stop.
inline TargetRepresentation optimize_target_core(const HeadFn& head,
                                                 std::span<const double> x_init,
                                                 int dummy_token, const EditOptions& opts) {
  TargetRepresentation out;
  out.x_star.assign(x_init.begin(), x_init.end());
  for (int it = 0; it <= opts.max_steps; ++it) {
    const auto r = head(out.x_star);
    out.achieved_prob = r.prob;
    out.steps_used = it;
    if (r.argmax == dummy_token && r.prob >= opts.prob_stop) {
      out.converged = true;
      break;
    }
    if (it == opts.max_steps) {
      out.converged = false;
      break;
    }
    for (size_t j = 0; j < out.x_star.size(); ++j)
      out.x_star[size_t(j)] += opts.step * r.grad[size_t(j)];
  }
  double sq = 0.0;
  for (size_t j = 0; j < out.x_star.size(); ++j) {
    const double d = out.x_star[j] - x_init[j];
    sq += d * d;
  }
  out.delta_norm = std::sqrt(sq);
  return out;
}

inline TargetRepresentation optimize_target_representation(const ToyTransformer& model,
                                                           const ForwardTrace& trace,
                                                           int dummy_token,
                                                           const EditOptions& opts) {
  HeadFn head = [&](std::span<const double> x) {
    return model.final_head_logprob(x, dummy_token);
  };
  return optimize_target_core(head, trace.x_final, dummy_token, opts);
}

// --- contribution coefficients ---------------------------------------------

inline int edited_layer_count(int n_layers, bool edit_last_layer) {
  return edit_last_layer ? n_layers : n_layers - 1;
}

// w_p[l] = (sum_{i<=l} h_i) . x_L / ||x_L||^2 over the edited layers, then
// normalized to sum 1. A cancelling raw sum falls back to uniform.
inline ContributionProfile contribution_coefficients(
    const ForwardTrace& trace, bool edit_last_layer = false,
    CoeffDenominator denom = CoeffDenominator::TrueFinal) {
  const int n_layers = int(trace.h.size());
  const int n_edit = edited_layer_count(n_layers, edit_last_layer);
  PME_CHECK(n_edit >= 1, "model too shallow to edit");
  const size_t d = trace.x_final.size();

  std::vector<double> target;
  if (denom == CoeffDenominator::TrueFinal) {
    target = trace.x_final;
  } else {
    target.assign(d, 0.0);
    for (int l = 0; l < n_layers; ++l)
      for (size_t j = 0; j < d; ++j) target[j] += trace.h[size_t(l)][j];
  }
  double norm_sq = 0.0;
  for (double v : target) norm_sq += v * v;
  if (std::sqrt(norm_sq) < 1e-12) throw DegenerateTrace();

  ContributionProfile prof;
  std::vector<double> cum(d, 0.0);
  for (int l = 0; l < n_edit; ++l) {
    for (size_t j = 0; j < d; ++j) cum[j] += trace.h[size_t(l)][j];
    double proj = 0.0;
    for (size_t j = 0; j < d; ++j) proj += cum[j] * target[j];
    prof.w_p.push_back(proj / norm_sq);
  }

  double sum = 0.0;
  for (double v : prof.w_p) sum += v;
  if (std::abs(sum) < 1e-6 * double(n_edit)) {
    prof.degenerate = true;
    prof.w.assign(size_t(n_edit), 1.0 / double(n_edit));
  } else {
    for (double v : prof.w_p) prof.w.push_back(v / sum);
  }
  return prof;
}

// --- keys, values, covariance ----------------------------------------------

// The key is the traced FF inner activation at the last prompt position.
inline const std::vector<double>& compute_key(const ForwardTrace& trace, int layer) {
  return trace.m.at(size_t(layer));
}

struct ValuePair {
  std::vector<double> v0_star;  // current output of the layer for this key
  std::vector<double> v_star;   // fraction of x* assigned to this layer
};

inline ValuePair compute_values(const ContributionProfile& profile,
                                const std::vector<double>& x_star, const ForwardTrace& trace,
                                int layer) {
  ValuePair out;
  out.v0_star = trace.h.at(size_t(layer));
  const double w = profile.w.at(size_t(layer));
  out.v_star.resize(x_star.size());
  for (size_t j = 0; j < x_star.size(); ++j) out.v_star[j] = w * x_star[j];
  return out;
}

// Accumulates lambda * sum(k k^T) over FF inner activations at every token
// position of clean documents, one matrix per layer, plus the ridge
// (1e-8 * trace/dim) that guards rank deficiency.
inline KeyCovariance estimate_key_covariance(const ToyTransformer& model, const Corpus& corpus,
                                             long n_tokens_sample, double lambda = 1.0) {
  const int dff = model.cfg.d_ff;
  KeyCovariance cov;
  cov.lambda = lambda;
  cov.c0.assign(size_t(model.cfg.n_layers), Matrix(dff, dff));

  for (const auto& doc : corpus.documents) {
    if (cov.sample_count >= n_tokens_sample) break;
    if (doc.split != "heldout") continue;
    const long take = std::min<long>(long(doc.token_ids.size()), n_tokens_sample - cov.sample_count);
    if (take <= 0) break;
    std::vector<int> ids(doc.token_ids.begin(), doc.token_ids.begin() + take);
    if (ids.size() < 1) continue;
    ForwardCache cache;
    model.forward(ids, &cache);
    for (int l = 0; l < model.cfg.n_layers; ++l) {
      const Matrix& m = cache.layers[size_t(l)].m;  // T x d_ff
      cov.c0[size_t(l)].map().noalias() += m.map().transpose() * m.map();
    }
    cov.sample_count += take;
  }

  for (auto& c : cov.c0) {
    scale_inplace(c, lambda);
    // exact symmetry; the GEMM result can differ across the diagonal
    for (int i = 0; i < dff; ++i)
      for (int j = i + 1; j < dff; ++j) {
        const double v = 0.5 * (c(i, j) + c(j, i));
        c(i, j) = v;
        c(j, i) = v;
      }
    double tr = 0.0;
    for (int i = 0; i < dff; ++i) tr += c(i, i);
    const double ridge = cov.sample_count > 0 ? 1e-8 * tr / dff : 1e-8;
    for (int i = 0; i < dff; ++i) c(i, i) += ridge;
  }
  return cov;
}

// --- the per-layer solve ------------------------------------------------------

// Solves (C0 + K* K*^T) X = K* (V* - V0*)^T; the returned edit holds
// Delta = X^T, and X is exactly the row-convention update to w_out.
inline LayerEdit solve_layer_delta(int layer, const Matrix& k_star, const Matrix& v0_star,
                                   const Matrix& v_star, const Matrix& c0) {
  const int dff = k_star.rows();
  PME_CHECK(v0_star.same_shape(v_star), "value shapes differ");
  PME_CHECK(v0_star.cols() == k_star.cols(), "key/value counts differ");
  PME_CHECK(c0.rows() == dff && c0.cols() == dff, "covariance shape");

  Matrix a = matmul_nt(k_star, k_star);
  for (int i = 0; i < dff; ++i)
    for (int j = i + 1; j < dff; ++j) {
      const double v = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = v;
      a(j, i) = v;
    }
  add_inplace(a, c0);

  Matrix rhs = matmul_nt(k_star, subtract(v_star, v0_star));  // K* (V*-V0*)^T
  SpdSolveResult solved = [&] {
    try {
      return spd_solve(a, rhs);
    } catch (const NotPositiveDefinite& e) {
      throw LayerSolveError(layer, e);
    }
  }();

  LayerEdit edit;
  edit.layer = layer;
  edit.k_star = k_star;
  edit.v0_star = v0_star;
  edit.v_star = v_star;
  edit.delta = transpose(solved.solution);
  edit.residual_norm = solved.residual_norm;
  return edit;
}

// --- the full algorithm --------------------------------------------------------

struct EditResult {
  ToyTransformer model;
  EditReport report;
};

namespace detail {

// constant_c == nullopt uses the projection-based coefficients
inline EditResult apply_edit(const ToyTransformer& model,
                             const std::vector<MemorizedExample>& leak_set,
                             const KeyCovariance& cov, const EditOptions& opts,
                             std::optional<double> constant_c, const Vocab& vocab) {
  if (leak_set.empty()) throw EmptyLeakSet();
  if (constant_c && *constant_c <= 0.0) throw InvalidCoefficient(*constant_c);
  const int n_edit = edited_layer_count(model.cfg.n_layers, opts.edit_last_layer);
  PME_CHECK(int(cov.c0.size()) >= n_edit, "covariance missing layers");

  const size_t n = leak_set.size();
  std::vector<std::vector<int>> sequences(n);
  for (size_t i = 0; i < n; ++i) sequences[i] = with_bos(leak_set[i].prompt, vocab);

  // phase 1: trace, coefficients and x* per example on the pre-edit model
  std::vector<ContributionProfile> profiles(n);
  std::vector<TargetRepresentation> targets(n);
  {
    std::atomic<size_t> cursor{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto work = [&] {
      for (;;) {
        const size_t i = cursor.fetch_add(1);
        if (i >= n) return;
        try {
          ForwardTrace tr = model.forward_with_trace(sequences[i]);
          if (constant_c) {
            ContributionProfile p;
            p.w_p.assign(size_t(n_edit), *constant_c);
            p.w.assign(size_t(n_edit), *constant_c);
            profiles[i] = std::move(p);
          } else {
            profiles[i] = contribution_coefficients(tr, opts.edit_last_layer, opts.denominator);
          }
          targets[i] =
              optimize_target_representation(model, tr, leak_set[i].dummy, opts);
        } catch (...) {
          std::lock_guard<std::mutex> lk(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    const int n_threads = std::min<int>(worker_threads(), int(n));
    for (int t = 1; t < n_threads; ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  // phase 2: sequential layer solves against the partially edited model
  ToyTransformer edited = model;
  EditReport report;
  const int d = model.cfg.d_model, dff = model.cfg.d_ff;

  std::vector<ForwardTrace> frozen;
  if (!opts.recompute_v0) {
    frozen.resize(n);
    for (size_t i = 0; i < n; ++i) frozen[i] = model.forward_with_trace(sequences[i]);
  }

  for (int l = 0; l < n_edit; ++l) {
    std::vector<ForwardTrace> traces(n);
    if (opts.recompute_v0) {
      std::atomic<size_t> cursor{0};
      auto work = [&] {
        for (;;) {
          const size_t i = cursor.fetch_add(1);
          if (i >= n) return;
          traces[i] = edited.forward_with_trace(sequences[i]);
        }
      };
      std::vector<std::thread> pool;
      const int n_threads = std::min<int>(worker_threads(), int(n));
      for (int t = 1; t < n_threads; ++t) pool.emplace_back(work);
      work();
      for (auto& t : pool) t.join();
    }

    Matrix k_star(dff, int(n)), v0_star(d, int(n)), v_star(d, int(n));
    for (size_t i = 0; i < n; ++i) {
      const ForwardTrace& tr = opts.recompute_v0 ? traces[i] : frozen[i];
      const auto& key = compute_key(tr, l);
      const auto vals = compute_values(profiles[i], targets[i].x_star, tr, l);
      for (int r = 0; r < dff; ++r) k_star(r, int(i)) = key[size_t(r)];
      for (int r = 0; r < d; ++r) {
        v0_star(r, int(i)) = vals.v0_star[size_t(r)];
        v_star(r, int(i)) = vals.v_star[size_t(r)];
      }
    }

    LayerEdit edit = solve_layer_delta(l, k_star, v0_star, v_star, cov.c0[size_t(l)]);
    // w_out += Delta^T, performed in the row convention of the forward pass
    Matrix update = transpose(edit.delta);  // d_ff x d
    add_inplace(edited.params.layers[size_t(l)].w_out, update);
    report.layers.push_back({l, frobenius_norm(edit.delta), edit.residual_norm});
  }

  for (size_t i = 0; i < n; ++i)
    report.examples.push_back({leak_set[i].id, targets[i].steps_used, targets[i].achieved_prob,
                               profiles[i].degenerate, targets[i].converged});
  return {std::move(edited), std::move(report)};
}

}  // namespace detail

inline EditResult apply_pme(const ToyTransformer& model,
                            const std::vector<MemorizedExample>& leak_set,
                            const KeyCovariance& cov, const EditOptions& opts,
                            const Vocab& vocab) {
  return detail::apply_edit(model, leak_set, cov, opts, std::nullopt, vocab);
}

// The constant-coefficient ablation: w^l is replaced by c at every edited
// layer, with no normalization.
inline EditResult apply_constant_coefficient_edit(const ToyTransformer& model,
                                                  const std::vector<MemorizedExample>& leak_set,
                                                  const KeyCovariance& cov, double c,
                                                  const EditOptions& opts, const Vocab& vocab) {
  return detail::apply_edit(model, leak_set, cov, opts, c, vocab);
}

inline void write_edit_report_json(const std::string& path, const EditReport& report) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : report.layers)
    layers.push_back(
        {{"l", l.layer}, {"frobenius_delta", l.frobenius_delta}, {"residual_norm", l.residual_norm}});
  nlohmann::json examples = nlohmann::json::array();
  for (const auto& e : report.examples)
    examples.push_back({{"id", e.id},
                        {"steps_used", e.steps_used},
                        {"achieved_prob", e.achieved_prob},
                        {"degenerate_profile", e.degenerate_profile},
                        {"converged", e.converged}});
  nlohmann::json j = {{"layers", layers}, {"examples", examples}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace pme
