#pragma once

// Editable pre-norm decoder-only transformer. The residual stream is an
// exact sum of block outputs, so the trace reconstruction
//   x0 + sum_l a_l + sum_l h_l == x_L
// holds to rounding error; the final norm sits between x_L and the
// unembedding. Forward, backward and greedy decoding all run per
// sequence with Eigen doing the matrix products.

#include "pme/matrix.hpp"
#include "pme/rng.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace pme {

class PromptTooLong : public std::runtime_error {
 public:
  PromptTooLong(int len, int max_len)
      : std::runtime_error("prompt length " + std::to_string(len) +
                           " exceeds max_seq_len " + std::to_string(max_len)) {}
};

class NotEnoughTokens : public std::runtime_error {
 public:
  NotEnoughTokens() : std::runtime_error("batch contains no next-token targets") {}
};

class DegenerateTrace : public std::runtime_error {
 public:
  DegenerateTrace() : std::runtime_error("trace has vanishing final representation") {}
};

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int d_ff = 512;
  int n_heads = 4;
  int vocab_size = 160;
  int max_seq_len = 256;
  std::string activation = "gelu";

  void validate() const {
    PME_CHECK(n_layers >= 1, "n_layers must be >= 1");
    PME_CHECK(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    PME_CHECK(d_ff >= d_model, "d_ff must be >= d_model");
    PME_CHECK(vocab_size >= 2 && max_seq_len >= 2, "degenerate config");
    PME_CHECK(activation == "gelu", "only gelu is supported");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Matrix ln1_g, ln1_b;      // 1 x d
  Matrix wq, wk, wv, wo;    // d x d
  Matrix ln2_g, ln2_b;      // 1 x d
  Matrix w_in;              // d x d_ff
  Matrix w_out;             // d_ff x d
};

struct ModelParams {
  Matrix w_embed;  // V x d
  Matrix w_pos;    // max_seq x d
  std::vector<LayerParams> layers;
  Matrix lnf_g, lnf_b;  // 1 x d
  Matrix w_unembed;     // d x V

  static ModelParams zeros_like(const ModelConfig& c) {
    ModelParams p;
    p.w_embed = Matrix(c.vocab_size, c.d_model);
    p.w_pos = Matrix(c.max_seq_len, c.d_model);
    p.layers.resize(size_t(c.n_layers));
    for (auto& l : p.layers) {
      l.ln1_g = Matrix(1, c.d_model);
      l.ln1_b = Matrix(1, c.d_model);
      l.wq = Matrix(c.d_model, c.d_model);
      l.wk = Matrix(c.d_model, c.d_model);
      l.wv = Matrix(c.d_model, c.d_model);
      l.wo = Matrix(c.d_model, c.d_model);
      l.ln2_g = Matrix(1, c.d_model);
      l.ln2_b = Matrix(1, c.d_model);
      l.w_in = Matrix(c.d_model, c.d_ff);
      l.w_out = Matrix(c.d_ff, c.d_model);
    }
    p.lnf_g = Matrix(1, c.d_model);
    p.lnf_b = Matrix(1, c.d_model);
    p.w_unembed = Matrix(c.d_model, c.vocab_size);
    return p;
  }

  template <typename F>
  void visit(F&& f) {
    f("w_embed", w_embed);
    f("w_pos", w_pos);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      f(p + "ln1_g", layers[l].ln1_g);
      f(p + "ln1_b", layers[l].ln1_b);
      f(p + "wq", layers[l].wq);
      f(p + "wk", layers[l].wk);
      f(p + "wv", layers[l].wv);
      f(p + "wo", layers[l].wo);
      f(p + "ln2_g", layers[l].ln2_g);
      f(p + "ln2_b", layers[l].ln2_b);
      f(p + "w_in", layers[l].w_in);
      f(p + "w_out", layers[l].w_out);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
    f("w_unembed", w_unembed);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<ModelParams*>(this)->visit(
        [&](const std::string& n, Matrix& m) { f(n, const_cast<const Matrix&>(m)); });
  }
};

// --- small kernels ----------------------------------------------------------

constexpr double kLnEps = 1e-5;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_deriv(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
  return cdf + x * pdf;
}

// y = (x - mean) * rstd * g + b, row-wise; mean/rstd saved for backward
inline void layernorm_forward(const Matrix& x, const Matrix& g, const Matrix& b, Matrix& y,
                              std::vector<double>& mean, std::vector<double>& rstd) {
  const int t = x.rows(), d = x.cols();
  y.resize(t, d);
  mean.assign(size_t(t), 0.0);
  rstd.assign(size_t(t), 0.0);
  for (int i = 0; i < t; ++i) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x(i, j);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = x(i, j) - mu;
      var += c * c;
    }
    var /= d;
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    mean[size_t(i)] = mu;
    rstd[size_t(i)] = rs;
    for (int j = 0; j < d; ++j) y(i, j) = (x(i, j) - mu) * rs * g(0, j) + b(0, j);
  }
}

inline void layernorm_backward(const Matrix& x, const Matrix& g, const std::vector<double>& mean,
                               const std::vector<double>& rstd, const Matrix& dy, Matrix& dx,
                               Matrix& dg, Matrix& db) {
  const int t = x.rows(), d = x.cols();
  PME_CHECK(dx.rows() == t && dx.cols() == d, "layernorm_backward: dx shape");
  for (int i = 0; i < t; ++i) {
    const double mu = mean[size_t(i)], rs = rstd[size_t(i)];
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int j = 0; j < d; ++j) {
      const double xhat = (x(i, j) - mu) * rs;
      const double dxhat = dy(i, j) * g(0, j);
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
      dg(0, j) += dy(i, j) * xhat;
      db(0, j) += dy(i, j);
    }
    for (int j = 0; j < d; ++j) {
      const double xhat = (x(i, j) - mu) * rs;
      const double dxhat = dy(i, j) * g(0, j);
      dx(i, j) += rs * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
    }
  }
}

inline void softmax_row_inplace(std::span<double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

// --- forward cache ----------------------------------------------------------

struct LayerCache {
  Matrix x_in;   // T x d residual entering the layer
  Matrix u;      // ln1 output
  std::vector<double> ln1_mean, ln1_rstd;
  Matrix q, k, v;             // T x d
  std::vector<Matrix> probs;  // per head, T x T attention weights
  Matrix att;                 // T x d concatenated head outputs (pre-wo)
  Matrix a;                   // T x d attention block output
  Matrix xa;                  // T x d residual after attention
  Matrix v2;                  // ln2 output
  std::vector<double> ln2_mean, ln2_rstd;
  Matrix z;         // T x d_ff pre-activation
  Matrix gelu_cdf;  // T x d_ff, 0.5*(1+erf(z/sqrt(2))), reused in backward
  Matrix m;         // T x d_ff key precursor (post-gelu)
  Matrix h;         // T x d FF block output
  Matrix x_out;     // T x d residual leaving the layer
};

struct ForwardCache {
  Matrix x0;  // T x d embedding + position
  std::vector<LayerCache> layers;
  Matrix xl;  // T x d final pre-norm state
  Matrix y;   // T x d after final norm
  std::vector<double> lnf_mean, lnf_rstd;
  Matrix logits;  // T x V
};

// Per-layer residual states, attention and FF outputs at the last prompt
// position; every symbol of the residual-sum decomposition.
struct ForwardTrace {
  int last_pos = 0;
  std::vector<double> x0;                   // d
  std::vector<std::vector<double>> a;       // L x d
  std::vector<std::vector<double>> h;       // L x d
  std::vector<std::vector<double>> m;       // L x d_ff
  std::vector<std::vector<double>> x;       // L x d, residual after each layer
  std::vector<double> x_final;              // d, pre-final-norm
  std::vector<double> logits;               // V at the last position
};

// --- the model ---------------------------------------------------------------

class ToyTransformer {
 public:
  ModelConfig cfg;
  ModelParams params;

  ToyTransformer() = default;
  ToyTransformer(const ModelConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    params = ModelParams::zeros_like(cfg);
    Rng rng(seed);
    const double std0 = 0.02;
    const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    params.visit([&](const std::string& name, Matrix& m) {
      const bool is_gain = name.find("_g") != std::string::npos && name.find("ln") != std::string::npos;
      const bool is_bias = name.find("_b") != std::string::npos && name.find("ln") != std::string::npos;
      if (is_gain) {
        m.fill(1.0);
      } else if (is_bias) {
        m.fill(0.0);
      } else {
        double s = std0;
        if (name.ends_with(".wo") || name.ends_with(".w_out")) s = std0 * resid_scale;
        for (int i = 0; i < m.rows(); ++i)
          for (int j = 0; j < m.cols(); ++j) m(i, j) = s * rng.normal();
      }
    });
  }

  int head_dim() const { return cfg.d_model / cfg.n_heads; }

  // Full forward over a token sequence, filling the cache (logits for
  // every position land in c.logits). The cache's buffers are reused
  // across calls.
  void forward_into(std::span<const int> ids, ForwardCache& c) const {
    const int t = int(ids.size());
    PME_CHECK(t >= 1, "empty prompt");
    if (t > cfg.max_seq_len) throw PromptTooLong(t, cfg.max_seq_len);
    const int d = cfg.d_model, dff = cfg.d_ff, nh = cfg.n_heads, dh = head_dim();

    if (c.layers.size() != size_t(cfg.n_layers)) c.layers.resize(size_t(cfg.n_layers));

    c.x0.resize(t, d);
    for (int i = 0; i < t; ++i) {
      PME_CHECK(ids[size_t(i)] >= 0 && ids[size_t(i)] < cfg.vocab_size, "token id out of range");
      for (int j = 0; j < d; ++j)
        c.x0(i, j) = params.w_embed(ids[size_t(i)], j) + params.w_pos(i, j);
    }

    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    const Matrix* x = &c.x0;
    for (int l = 0; l < cfg.n_layers; ++l) {
      const LayerParams& lp = params.layers[size_t(l)];
      LayerCache& lc = c.layers[size_t(l)];
      lc.x_in = *x;

      layernorm_forward(lc.x_in, lp.ln1_g, lp.ln1_b, lc.u, lc.ln1_mean, lc.ln1_rstd);
      matmul_into(lc.q, lc.u, lp.wq);
      matmul_into(lc.k, lc.u, lp.wk);
      matmul_into(lc.v, lc.u, lp.wv);

      lc.att.resize(t, d);
      if (lc.probs.size() != size_t(nh)) lc.probs.resize(size_t(nh));
      for (int hIdx = 0; hIdx < nh; ++hIdx) {
        Matrix& p = lc.probs[size_t(hIdx)];
        p.resize(t, t);
        const int off = hIdx * dh;
        auto q_h = lc.q.map().middleCols(off, dh);
        auto k_h = lc.k.map().middleCols(off, dh);
        auto v_h = lc.v.map().middleCols(off, dh);
        p.map().noalias() = q_h * k_h.transpose() * inv_sqrt_dh;
        // causal softmax: row i normalizes over j <= i, the rest is zeroed
        for (int i = 0; i < t; ++i) {
          auto row = p.row(i);
          softmax_row_inplace(row.subspan(0, size_t(i) + 1));
          for (int j = i + 1; j < t; ++j) row[size_t(j)] = 0.0;
        }
        lc.att.map().middleCols(off, dh).noalias() = p.map() * v_h;
      }
      matmul_into(lc.a, lc.att, lp.wo);

      lc.xa = lc.x_in;
      add_inplace(lc.xa, lc.a);

      layernorm_forward(lc.xa, lp.ln2_g, lp.ln2_b, lc.v2, lc.ln2_mean, lc.ln2_rstd);
      matmul_into(lc.z, lc.v2, lp.w_in);
      lc.gelu_cdf.resize(t, dff);
      lc.m.resize(t, dff);
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < dff; ++j) {
          const double cdf = 0.5 * (1.0 + std::erf(lc.z(i, j) * M_SQRT1_2));
          lc.gelu_cdf(i, j) = cdf;
          lc.m(i, j) = lc.z(i, j) * cdf;
        }
      matmul_into(lc.h, lc.m, lp.w_out);

      lc.x_out = lc.xa;
      add_inplace(lc.x_out, lc.h);
      x = &lc.x_out;
    }

    c.xl = *x;
    layernorm_forward(c.xl, params.lnf_g, params.lnf_b, c.y, c.lnf_mean, c.lnf_rstd);
    matmul_into(c.logits, c.y, params.w_unembed);
  }

  Matrix forward(std::span<const int> ids, ForwardCache* cache = nullptr) const {
    if (cache) {
      forward_into(ids, *cache);
      return cache->logits;
    }
    ForwardCache local;
    forward_into(ids, local);
    return std::move(local.logits);
  }

  ForwardTrace forward_with_trace(std::span<const int> ids) const {
    static thread_local ForwardCache c;
    forward_into(ids, c);
    const int n = int(ids.size()) - 1;
    ForwardTrace tr;
    tr.last_pos = n;
    auto row_vec = [](const Matrix& m, int i) {
      return std::vector<double>(m.row(i).begin(), m.row(i).end());
    };
    tr.x0 = row_vec(c.x0, n);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const LayerCache& lc = c.layers[size_t(l)];
      tr.a.push_back(row_vec(lc.a, n));
      tr.h.push_back(row_vec(lc.h, n));
      tr.m.push_back(row_vec(lc.m, n));
      std::vector<double> x_out = row_vec(lc.xa, n);
      for (int j = 0; j < cfg.d_model; ++j) x_out[size_t(j)] += lc.h(n, j);
      tr.x.push_back(std::move(x_out));
    }
    tr.x_final = row_vec(c.xl, n);
    tr.logits = row_vec(c.logits, n);
    return tr;
  }

  // Greedy argmax decoding; stops early at eos_id (pass -1 to disable).
  std::vector<int> generate_greedy(std::span<const int> prompt, int n_tokens,
                                   int eos_id = -1) const {
    PME_CHECK(!prompt.empty(), "generate_greedy: empty prompt");
    PME_CHECK(n_tokens >= 1, "generate_greedy: n_tokens must be >= 1");
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    static thread_local ForwardCache c;
    for (int step = 0; step < n_tokens; ++step) {
      if (int(seq.size()) >= cfg.max_seq_len) break;
      forward_into(seq, c);
      const int last = c.logits.rows() - 1;
      int best = 0;
      double best_v = c.logits(last, 0);
      for (int j = 1; j < cfg.vocab_size; ++j)
        if (c.logits(last, j) > best_v) {
          best_v = c.logits(last, j);
          best = j;
        }
      out.push_back(best);
      seq.push_back(best);
      if (best == eos_id) break;
    }
    return out;
  }

  // log-probabilities of the final head applied to a single pre-norm state:
  // softmax(layernorm(x) W_U). Returns logp of `target`, the probability,
  // the argmax, and d logp(target) / d x.
  struct HeadResult {
    double logp;
    double prob;
    int argmax;
    std::vector<double> grad;
  };

  HeadResult final_head_logprob(std::span<const double> x_state, int target) const {
    const int d = cfg.d_model, v = cfg.vocab_size;
    PME_CHECK(int(x_state.size()) == d, "final_head_logprob: bad state size");
    Matrix x(1, d);
    for (int j = 0; j < d; ++j) x(0, j) = x_state[size_t(j)];
    Matrix y;
    std::vector<double> mean, rstd;
    layernorm_forward(x, params.lnf_g, params.lnf_b, y, mean, rstd);
    Matrix logits = matmul(y, params.w_unembed);
    std::vector<double> p(logits.row(0).begin(), logits.row(0).end());
    softmax_row_inplace(p);
    int argmax = 0;
    for (int j = 1; j < v; ++j)
      if (p[size_t(j)] > p[size_t(argmax)]) argmax = j;

    // d logp(target)/d logits = onehot - p; chain through W_U and the norm
    Matrix dy(1, d);
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int kk = 0; kk < v; ++kk) {
        const double dl = (kk == target ? 1.0 : 0.0) - p[size_t(kk)];
        s += dl * params.w_unembed(j, kk);
      }
      dy(0, j) = s;
    }
    Matrix dx(1, d), dg(1, d), db(1, d);
    layernorm_backward(x, params.lnf_g, mean, rstd, dy, dx, dg, db);
    HeadResult r;
    r.prob = p[size_t(target)];
    r.logp = std::log(std::max(r.prob, 1e-300));
    r.argmax = argmax;
    r.grad.assign(dx.row(0).begin(), dx.row(0).end());
    return r;
  }
};

// --- loss and gradients -------------------------------------------------------

struct LossSum {
  double sum = 0.0;   // summed next-token cross-entropy
  long n_targets = 0;
};

namespace detail {

// per-thread backward scratch, reused across examples
struct BackwardScratch {
  ForwardCache cache;
  Matrix dlogits, dy, dx, dm, dz, dv2, datt, dq, dk, dv, dp, ds, du, tmp;
};

}  // namespace detail

// Summed (unnormalized) cross-entropy and gradients, accumulated into
// `grads`. The trainer shards batches over this and normalizes once, so
// the reduction order stays fixed.
inline LossSum loss_and_grads_sum(const ToyTransformer& model,
                                  const std::vector<std::vector<int>>& batch,
                                  ModelParams& grads) {
  const ModelConfig& cfg = model.cfg;
  const int d = cfg.d_model, dff = cfg.d_ff, nh = cfg.n_heads, dh = model.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

  LossSum out;
  for (const auto& seq : batch) out.n_targets += std::max<long>(0, long(seq.size()) - 1);

  static thread_local detail::BackwardScratch w;
  double loss = 0.0;
  for (const auto& seq : batch) {
    const int t = int(seq.size());
    if (t < 2) continue;
    ForwardCache& c = w.cache;
    model.forward_into(seq, c);

    // softmax + CE at positions 0..t-2; the last row has no target
    w.dlogits.resize(t, cfg.vocab_size);
    std::vector<double> p(size_t(cfg.vocab_size));
    for (int i = 0; i + 1 < t; ++i) {
      p.assign(c.logits.row(i).begin(), c.logits.row(i).end());
      softmax_row_inplace(p);
      const int target = seq[size_t(i) + 1];
      loss -= std::log(std::max(p[size_t(target)], 1e-300));
      for (int j = 0; j < cfg.vocab_size; ++j)
        w.dlogits(i, j) = p[size_t(j)] - (j == target ? 1.0 : 0.0);
    }
    for (int j = 0; j < cfg.vocab_size; ++j) w.dlogits(t - 1, j) = 0.0;

    // unembedding and final norm
    matmul_nt_into(w.dy, w.dlogits, model.params.w_unembed);
    w.tmp.resize(d, cfg.vocab_size);
    w.tmp.map().noalias() = c.y.map().transpose() * w.dlogits.map();
    add_inplace(grads.w_unembed, w.tmp);
    w.dx.resize(t, d);
    w.dx.set_zero();
    layernorm_backward(c.xl, model.params.lnf_g, c.lnf_mean, c.lnf_rstd, w.dy, w.dx,
                       grads.lnf_g, grads.lnf_b);

    auto accum_tn = [&](Matrix& dst, const Matrix& a, const Matrix& b) {
      dst.map().noalias() += a.map().transpose() * b.map();
    };

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
      const LayerParams& lp = model.params.layers[size_t(l)];
      LayerParams& lg = grads.layers[size_t(l)];
      const LayerCache& lc = c.layers[size_t(l)];

      // FF block: x = xa + h, h = gelu(v2 w_in) w_out
      Matrix& dh_out = w.dx;  // gradient w.r.t. h equals dx (residual)
      matmul_nt_into(w.dm, dh_out, lp.w_out);
      accum_tn(lg.w_out, lc.m, dh_out);
      w.dz.resize(t, dff);
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < dff; ++j) {
          const double z = lc.z(i, j);
          const double pdf = std::exp(-0.5 * z * z) * 0.3989422804014326779;
          w.dz(i, j) = w.dm(i, j) * (lc.gelu_cdf(i, j) + z * pdf);
        }
      matmul_nt_into(w.dv2, w.dz, lp.w_in);
      accum_tn(lg.w_in, lc.v2, w.dz);
      // dx stays (residual path) and gains the norm path
      layernorm_backward(lc.xa, lp.ln2_g, lc.ln2_mean, lc.ln2_rstd, w.dv2, w.dx, lg.ln2_g,
                         lg.ln2_b);

      // attention block: xa = x_in + att wo
      Matrix& da = w.dx;
      matmul_nt_into(w.datt, da, lp.wo);
      accum_tn(lg.wo, lc.att, da);

      w.dq.resize(t, d);
      w.dk.resize(t, d);
      w.dv.resize(t, d);
      w.dp.resize(t, t);
      w.ds.resize(t, t);
      for (int hIdx = 0; hIdx < nh; ++hIdx) {
        const Matrix& p2 = lc.probs[size_t(hIdx)];
        const int off = hIdx * dh;
        auto q_h = lc.q.map().middleCols(off, dh);
        auto k_h = lc.k.map().middleCols(off, dh);
        auto v_h = lc.v.map().middleCols(off, dh);
        auto datt_h = w.datt.map().middleCols(off, dh);

        w.dp.map().noalias() = datt_h * v_h.transpose();
        // softmax backward per row; masked columns have p == 0 so ds == 0
        for (int i = 0; i < t; ++i) {
          double dot_dp_p = 0.0;
          for (int j = 0; j <= i; ++j) dot_dp_p += w.dp(i, j) * p2(i, j);
          for (int j = 0; j <= i; ++j)
            w.ds(i, j) = p2(i, j) * (w.dp(i, j) - dot_dp_p) * inv_sqrt_dh;
          for (int j = i + 1; j < t; ++j) w.ds(i, j) = 0.0;
        }
        w.dq.map().middleCols(off, dh).noalias() = w.ds.map() * k_h;
        w.dk.map().middleCols(off, dh).noalias() = w.ds.map().transpose() * q_h;
        w.dv.map().middleCols(off, dh).noalias() = p2.map().transpose() * datt_h;
      }

      matmul_nt_into(w.du, w.dq, lp.wq);
      accum_tn(lg.wq, lc.u, w.dq);
      w.du.map().noalias() += w.dk.map() * lp.wk.map().transpose();
      accum_tn(lg.wk, lc.u, w.dk);
      w.du.map().noalias() += w.dv.map() * lp.wv.map().transpose();
      accum_tn(lg.wv, lc.u, w.dv);

      layernorm_backward(lc.x_in, lp.ln1_g, lc.ln1_mean, lc.ln1_rstd, w.du, w.dx, lg.ln1_g,
                         lg.ln1_b);
    }

    // embedding + positions
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < d; ++j) {
        grads.w_embed(seq[size_t(i)], j) += w.dx(i, j);
        grads.w_pos(i, j) += w.dx(i, j);
      }
  }
  out.sum = loss;
  return out;
}

// Mean next-token cross-entropy over every in-sequence target in the
// batch, with gradients of that mean accumulated into `grads`.
inline double loss_and_grads(const ToyTransformer& model,
                             const std::vector<std::vector<int>>& batch, ModelParams& grads) {
  const LossSum s = loss_and_grads_sum(model, batch, grads);
  if (s.n_targets == 0) throw NotEnoughTokens();
  grads.visit([&](const std::string&, Matrix& m) { scale_inplace(m, 1.0 / double(s.n_targets)); });
  return s.sum / double(s.n_targets);
}

}  // namespace pme
