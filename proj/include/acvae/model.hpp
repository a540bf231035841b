#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "acvae/data.hpp"
#include "acvae/optimizer.hpp"
#include "acvae/rng.hpp"
#include "acvae/tensor.hpp"

namespace acvae::model {

enum class ContrastiveForm { literal, canonical };

struct ModelConfig {
  int32_t V = 0;  // item vocab size including the padding slot
  int32_t embedding_dim = 128;
  int32_t hidden_dim = 100;
  int32_t latent_dim = 64;
  int32_t conv_width = 3;
  int32_t M = 200;
  double alpha = 0.05;
  double beta = 0.5;
  ContrastiveForm contrastive_form = ContrastiveForm::literal;
  bool use_cnn = true;  // false: per-timestep fully connected layer instead of the causal conv
  int32_t mlp_hidden = 256;
  double leaky_slope = 0.2;

  void validate() const {
    if (V < 2) throw ShapeError("model config: V must be >= 2");
    if (embedding_dim < 1 || hidden_dim < 1 || latent_dim < 1 || conv_width < 1 || M < 2 ||
        mlp_hidden < 1)
      throw ShapeError("model config: all dimensions must be >= 1");
    if (alpha < 0 || beta < 0) throw ShapeError("model config: alpha and beta must be >= 0");
  }
};

// All learnable state, partitioned the way Algorithm-style alternating updates
// need them: phi (encoder), theta (decoder), psi (adversary), omega
// (contrastive discriminator).
template <class S>
struct ModelParams {
  ModelConfig cfg;

  ad::Param<S> embedding;  // [V x e], row 0 is the frozen all-zero padding row
  ad::Param<S> gru_Wz, gru_Uz, gru_bz;
  ad::Param<S> gru_Wr, gru_Ur, gru_br;
  ad::Param<S> gru_Wh, gru_Uh, gru_bh;
  ad::Param<S> conv_filter;  // [m x 1]
  ad::Param<S> fc_W, fc_b;   // no-CNN replacement layer
  ad::Param<S> enc_W, enc_b;
  ad::Param<S> dec_W, dec_b;
  ad::Param<S> adv_W1, adv_b1, adv_W2, adv_b2, adv_W3, adv_b3;
  ad::Param<S> con_W1, con_b1, con_W2, con_b2, con_W3, con_b3;

  explicit ModelParams(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    const int64_t V = c.V, e = c.embedding_dim, d = c.hidden_dim, z = c.latent_dim;
    const int64_t m = c.conv_width, hh = c.mlp_hidden, in = e + z;
    embedding = {"embedding", {V, e}};
    gru_Wz = {"gru_Wz", {e, d}}; gru_Uz = {"gru_Uz", {d, d}}; gru_bz = {"gru_bz", {1, d}};
    gru_Wr = {"gru_Wr", {e, d}}; gru_Ur = {"gru_Ur", {d, d}}; gru_br = {"gru_br", {1, d}};
    gru_Wh = {"gru_Wh", {e, d}}; gru_Uh = {"gru_Uh", {d, d}}; gru_bh = {"gru_bh", {1, d}};
    conv_filter = {"conv_filter", {m, 1}};
    fc_W = {"fc_W", {d, d}}; fc_b = {"fc_b", {1, d}};
    enc_W = {"enc_W", {d, z}}; enc_b = {"enc_b", {1, z}};
    dec_W = {"dec_W", {z, V}}; dec_b = {"dec_b", {1, V}};
    adv_W1 = {"adv_W1", {in, hh}}; adv_b1 = {"adv_b1", {1, hh}};
    adv_W2 = {"adv_W2", {hh, hh}}; adv_b2 = {"adv_b2", {1, hh}};
    adv_W3 = {"adv_W3", {hh, 1}}; adv_b3 = {"adv_b3", {1, 1}};
    con_W1 = {"con_W1", {in, hh}}; con_b1 = {"con_b1", {1, hh}};
    con_W2 = {"con_W2", {hh, hh}}; con_b2 = {"con_b2", {1, hh}};
    con_W3 = {"con_W3", {hh, 1}}; con_b3 = {"con_b3", {1, 1}};
  }

  // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, zero
  // padding-embedding row
  void init(uint64_t seed) {
    auto rng = make_stream(seed, RngStream::init);
    auto fill = [&rng](ad::Param<S>& p, int64_t fan_in) {
      double s = 1.0 / std::sqrt(double(fan_in));
      for (auto& v : p.value) v = S(rng.uniform(-s, s));
    };
    fill(embedding, cfg.embedding_dim);
    for (int64_t i = 0; i < cfg.embedding_dim; ++i) embedding.value[size_t(i)] = S(0);
    fill(gru_Wz, cfg.hidden_dim); fill(gru_Uz, cfg.hidden_dim);
    fill(gru_Wr, cfg.hidden_dim); fill(gru_Ur, cfg.hidden_dim);
    fill(gru_Wh, cfg.hidden_dim); fill(gru_Uh, cfg.hidden_dim);
    fill(conv_filter, cfg.conv_width);
    fill(fc_W, cfg.hidden_dim);
    fill(enc_W, cfg.hidden_dim);
    fill(dec_W, cfg.latent_dim);
    fill(adv_W1, cfg.embedding_dim + cfg.latent_dim);
    fill(adv_W2, cfg.mlp_hidden);
    fill(adv_W3, cfg.mlp_hidden);
    fill(con_W1, cfg.embedding_dim + cfg.latent_dim);
    fill(con_W2, cfg.mlp_hidden);
    fill(con_W3, cfg.mlp_hidden);
  }

  std::vector<ad::Param<S>*> phi() {
    std::vector<ad::Param<S>*> v{&embedding, &gru_Wz, &gru_Uz, &gru_bz, &gru_Wr, &gru_Ur,
                                 &gru_br,    &gru_Wh, &gru_Uh, &gru_bh, &enc_W,  &enc_b};
    if (cfg.use_cnn) {
      v.push_back(&conv_filter);
    } else {
      v.push_back(&fc_W);
      v.push_back(&fc_b);
    }
    return v;
  }
  std::vector<ad::Param<S>*> theta() { return {&dec_W, &dec_b}; }
  std::vector<ad::Param<S>*> psi() {
    return {&adv_W1, &adv_b1, &adv_W2, &adv_b2, &adv_W3, &adv_b3};
  }
  std::vector<ad::Param<S>*> omega() {
    return {&con_W1, &con_b1, &con_W2, &con_b2, &con_W3, &con_b3};
  }
  std::vector<ad::Param<S>*> all() {
    auto v = phi();
    for (auto* p : theta()) v.push_back(p);
    for (auto* p : psi()) v.push_back(p);
    for (auto* p : omega()) v.push_back(p);
    return v;
  }
  // every buffer regardless of ablation (for checkpoints)
  std::vector<ad::Param<S>*> all_buffers() {
    return {&embedding, &gru_Wz, &gru_Uz, &gru_bz, &gru_Wr, &gru_Ur, &gru_br, &gru_Wh, &gru_Uh,
            &gru_bh,    &conv_filter, &fc_W, &fc_b, &enc_W, &enc_b, &dec_W, &dec_b,
            &adv_W1, &adv_b1, &adv_W2, &adv_b2, &adv_W3, &adv_b3,
            &con_W1, &con_b1, &con_W2, &con_b2, &con_W3, &con_b3};
  }
};

// Index bookkeeping shared by the training and evaluation graphs. Sequence
// tensors are time-major: row t*b + i holds user slot i at timestep t.
struct PreparedBatch {
  int32_t b = 0;
  int32_t T = 0;  // active length: max window over the batch
  std::vector<int32_t> inputs_tm;     // [T*b] item indices, 0 = padding
  std::vector<int32_t> window_len;    // per user slot
  std::vector<int32_t> compact_rows;  // time-major rows with a real next-item target
  std::vector<int32_t> compact_targets;
  std::vector<int32_t> compact_items;  // input item at each compact row
  std::vector<int32_t> compact_user;   // user slot of each compact row
  std::vector<int32_t> compact_t;      // timestep of each compact row
  std::vector<int32_t> last_rows;      // (window-1)*b + i per user slot (ranking input)
  int64_t n_mask() const { return int64_t(compact_rows.size()); }
};

inline PreparedBatch prepare_batch(const data::PaddedBatch& batch) {
  PreparedBatch p;
  p.b = batch.b;
  p.window_len = batch.window_len;
  p.T = *std::max_element(batch.window_len.begin(), batch.window_len.end());
  p.T = std::max(p.T, 1);
  p.inputs_tm.assign(size_t(p.T) * batch.b, 0);
  for (int i = 0; i < batch.b; ++i)
    for (int t = 0; t < p.T && t < batch.M; ++t)
      p.inputs_tm[size_t(t) * batch.b + i] = batch.input(i, t);
  for (int t = 0; t < p.T; ++t) {
    for (int i = 0; i < batch.b; ++i) {
      if (t < batch.M && batch.masked(i, t)) {
        p.compact_rows.push_back(int32_t(t) * batch.b + i);
        p.compact_targets.push_back(batch.target(i, t));
        p.compact_items.push_back(batch.input(i, t));
        p.compact_user.push_back(i);
        p.compact_t.push_back(t);
      }
    }
  }
  p.last_rows.resize(size_t(batch.b));
  for (int i = 0; i < batch.b; ++i) {
    int W = std::max(1, std::min(batch.window_len[size_t(i)], p.T));
    p.last_rows[size_t(i)] = int32_t(W - 1) * batch.b + i;
  }
  return p;
}

template <class S>
struct MlpRefs {
  ad::Tensor<S> W1, b1, W2, b2, W3, b3;
};

// 2-hidden-layer MLP with leaky-rectifier activations, one scalar per row.
template <class S>
ad::Tensor<S> mlp3(ad::Tape<S>& tp, ad::Tensor<S> in, const MlpRefs<S>& m, S slope) {
  auto h1 = tp.leaky_relu(tp.add_bias(tp.matmul(in, m.W1), m.b1), slope);
  auto h2 = tp.leaky_relu(tp.add_bias(tp.matmul(h1, m.W2), m.b2), slope);
  return tp.add_bias(tp.matmul(h2, m.W3), m.b3);
}

// Builds model subgraphs on a tape. with_grad attaches parameter gradient
// buffers; forward-only callers leave it off and never run backward().
template <class S>
class GraphBuilder {
 public:
  GraphBuilder(ad::Tape<S>& tp, ModelParams<S>& P, bool with_grad)
      : tp_(tp), P_(P), with_grad_(with_grad) {}

  ad::Tensor<S> leaf(ad::Param<S>& p) {
    return tp_.leaf(p.value.data(), p.rows(), p.cols(), with_grad_ ? p.grad.data() : nullptr);
  }

  // Encoder pipeline: embed -> GRU (softplus on the recurrent state) ->
  // additive noise -> causal conv with residual (or FC replacement) ->
  // softplus -> affine to latent size. Returns the time-major [T*b x z] latent
  // sequence.
  ad::Tensor<S> encode(const PreparedBatch& pb, std::span<const S> eps) {
    const int64_t b = pb.b, T = pb.T, d = P_.cfg.hidden_dim;
    auto emb = leaf(P_.embedding);
    ad::GruGates<S> g{leaf(P_.gru_Wz), leaf(P_.gru_Uz), leaf(P_.gru_bz),
                      leaf(P_.gru_Wr), leaf(P_.gru_Ur), leaf(P_.gru_br),
                      leaf(P_.gru_Wh), leaf(P_.gru_Uh), leaf(P_.gru_bh)};
    std::vector<ad::Tensor<S>> hs;
    hs.reserve(size_t(T));
    auto h = tp_.zeros(b, d);
    for (int64_t t = 0; t < T; ++t) {
      auto x_t = tp_.embed_gather(emb, pb.inputs_tm.data() + t * b, b);
      h = tp_.softplus(gru_cell(tp_, x_t, h, g));
      hs.push_back(h);
    }
    auto H = tp_.stack_rows(hs);
    ad::Tensor<S> Hn = H;
    if (!eps.empty()) {
      if (int64_t(eps.size()) != T * b * d) throw ShapeError("encode: eps size mismatch");
      Hn = tp_.add(H, tp_.constant(eps, T * b, d));
    }
    ad::Tensor<S> C;
    if (P_.cfg.use_cnn) {
      C = tp_.add(Hn, tp_.causal_conv(Hn, leaf(P_.conv_filter), T, b));
    } else {
      C = tp_.add(Hn, tp_.add_bias(tp_.matmul(Hn, leaf(P_.fc_W)), leaf(P_.fc_b)));
    }
    return tp_.add_bias(tp_.matmul(tp_.softplus(C), leaf(P_.enc_W)), leaf(P_.enc_b));
  }

  ad::Tensor<S> decode(ad::Tensor<S> z) {
    return tp_.add_bias(tp_.matmul(z, leaf(P_.dec_W)), leaf(P_.dec_b));
  }

  ad::Tensor<S> embed_items(const int32_t* items, int64_t n) {
    return tp_.embed_gather(leaf(P_.embedding), items, n);
  }

  ad::Tensor<S> adversary_scores(ad::Tensor<S> emb, ad::Tensor<S> z) {
    MlpRefs<S> m{leaf(P_.adv_W1), leaf(P_.adv_b1), leaf(P_.adv_W2),
                 leaf(P_.adv_b2), leaf(P_.adv_W3), leaf(P_.adv_b3)};
    return mlp3(tp_, tp_.concat_cols(emb, z), m, S(P_.cfg.leaky_slope));
  }

  ad::Tensor<S> contrast_scores(ad::Tensor<S> emb, ad::Tensor<S> z) {
    MlpRefs<S> m{leaf(P_.con_W1), leaf(P_.con_b1), leaf(P_.con_W2),
                 leaf(P_.con_b2), leaf(P_.con_W3), leaf(P_.con_b3)};
    return mlp3(tp_, tp_.concat_cols(emb, z), m, S(P_.cfg.leaky_slope));
  }

  ad::Tape<S>& tape() { return tp_; }

 private:
  ad::Tape<S>& tp_;
  ModelParams<S>& P_;
  bool with_grad_;
};

// log(sigmoid(x)) = -softplus(-x); log(1 - sigmoid(x)) = -softplus(x)

// Negative log-likelihood of the next items, mean over masked positions.
template <class S>
ad::Tensor<S> reconstruction_term(ad::Tape<S>& tp, ad::Tensor<S> logits_compact,
                                  const std::vector<int32_t>& targets) {
  return tp.softmax_xent(logits_compact, targets.data(), nullptr);
}

// Discriminator objective for the adversary update: per-user sum over real
// timesteps of log s(T(x,z_post)) + log(1 - s(T(x,z_prior))), mean over the
// batch. Maximized in psi; callers minimize the negation.
template <class S>
ad::Tensor<S> adversary_objective(ad::Tape<S>& tp, ad::Tensor<S> scores_posterior,
                                  ad::Tensor<S> scores_prior, int64_t batch_size) {
  auto pos = tp.neg(tp.softplus(tp.neg(scores_posterior)));
  auto neg = tp.neg(tp.softplus(scores_prior));
  return tp.scaled_sum(tp.add(pos, neg), nullptr, double(batch_size));
}

// Contrastive loss over positive scores G(x,z) and negative scores G(x,z~):
//   literal:   -sum_t [log s(G_pos) + log s(1 - G_neg)]
//   canonical: -sum_t [log s(G_pos) + log(1 - s(G_neg))]
// per-user time sum, mean over the batch.
template <class S>
ad::Tensor<S> contrastive_loss(ad::Tape<S>& tp, ad::Tensor<S> pos_scores, ad::Tensor<S> neg_scores,
                               ContrastiveForm form, int64_t batch_size) {
  auto pos_term = tp.softplus(tp.neg(pos_scores));  // -log s(G_pos)
  ad::Tensor<S> neg_term;
  if (form == ContrastiveForm::literal) {
    // -log s(1 - G_neg) = softplus(G_neg - 1)
    std::vector<S> ones(size_t(neg_scores.rows() * neg_scores.cols()), S(1));
    neg_term = tp.softplus(tp.sub(neg_scores, tp.constant(ones, neg_scores.rows(), neg_scores.cols())));
  } else {
    neg_term = tp.softplus(neg_scores);  // -log(1 - s(G_neg))
  }
  return tp.scaled_sum(tp.add(pos_term, neg_term), nullptr, double(batch_size));
}

// Compact-row index of the in-batch negative for each compact row: the same
// timestep of the deranged source user, clamped into that user's real range.
inline std::vector<int32_t> negative_row_indices(const PreparedBatch& pb,
                                                 const std::vector<int32_t>& derangement_over,
                                                 const std::vector<int32_t>& perm) {
  // first compact index per (user, t): build a lookup
  const int64_t N = pb.n_mask();
  std::vector<int32_t> first_row(size_t(pb.b), -1);   // first compact index of each user
  std::vector<int32_t> count_rows(size_t(pb.b), 0);   // masked rows per user
  std::vector<std::vector<int32_t>> by_user(size_t(pb.b));
  for (int64_t r = 0; r < N; ++r) {
    int32_t u = pb.compact_user[size_t(r)];
    if (first_row[size_t(u)] < 0) first_row[size_t(u)] = int32_t(r);
    count_rows[size_t(u)]++;
    by_user[size_t(u)].push_back(int32_t(r));
  }
  // map user -> deranged source user (identity for users outside the subset)
  std::vector<int32_t> src_of(size_t(pb.b), -1);
  for (size_t k = 0; k < derangement_over.size(); ++k)
    src_of[size_t(derangement_over[k])] = derangement_over[size_t(perm[k])];
  std::vector<int32_t> out(size_t(N), 0);
  for (int64_t r = 0; r < N; ++r) {
    int32_t u = pb.compact_user[size_t(r)];
    int32_t src = src_of[size_t(u)];
    if (src < 0) throw ShapeError("contrastive negatives: user missing from derangement");
    const auto& rows = by_user[size_t(src)];
    if (rows.empty()) throw ShapeError("contrastive negatives: source user has no real rows");
    int32_t t = pb.compact_t[size_t(r)];
    int32_t k = std::min<int32_t>(t, int32_t(rows.size()) - 1);  // rows are t-ascending
    out[size_t(r)] = rows[size_t(k)];
  }
  return out;
}

// Users with at least one real next-item target; contrastive negatives are
// drawn among these.
inline std::vector<int32_t> users_with_targets(const PreparedBatch& pb) {
  std::vector<uint8_t> has(size_t(pb.b), 0);
  for (int32_t u : pb.compact_user) has[size_t(u)] = 1;
  std::vector<int32_t> subset;
  for (int32_t i = 0; i < pb.b; ++i)
    if (has[size_t(i)]) subset.push_back(i);
  return subset;
}

template <class S>
struct Objective {
  S total = 0, recon = 0, adv_term = 0, contrast = 0;
};

// The phi/theta/omega loss to minimize:
//   recon + alpha * mean_masked(T_psi scores) + beta * contrastive_loss
// Subgraphs for alpha == 0 / beta == 0 are not built at all, so their
// parameters receive exactly zero gradient contributions.
template <class S>
ad::Tensor<S> build_full_objective(ad::Tape<S>& tp, ModelParams<S>& P, const PreparedBatch& pb,
                                   std::type_identity_t<std::span<const S>> eps,
                                   SplitMix64& derange_rng, bool with_grad,
                                   Objective<S>* diag = nullptr) {
  GraphBuilder<S> gb(tp, P, with_grad);
  const int64_t N = pb.n_mask();
  auto Z = gb.encode(pb, eps);
  auto Zc = tp.gather_rows(Z, pb.compact_rows.data(), N);
  auto logits = gb.decode(Zc);
  auto recon = reconstruction_term(tp, logits, pb.compact_targets);
  ad::Tensor<S> total = recon;
  Objective<S> d;
  d.recon = recon.scalar();

  ad::Tensor<S> emb_c;
  if (P.cfg.alpha != 0 || P.cfg.beta != 0) emb_c = gb.embed_items(pb.compact_items.data(), N);

  if (P.cfg.alpha != 0) {
    auto scores = gb.adversary_scores(emb_c, Zc);
    auto kl = tp.scaled_sum(scores, nullptr, double(N));
    d.adv_term = kl.scalar();
    total = tp.add(total, tp.scale(kl, S(P.cfg.alpha)));
  }
  if (P.cfg.beta != 0) {
    auto subset = users_with_targets(pb);
    auto perm = derangement(derange_rng, int32_t(subset.size()));
    const int32_t* neg_rows = tp.own_indices(negative_row_indices(pb, subset, perm));
    auto pos = gb.contrast_scores(emb_c, Zc);
    auto neg = gb.contrast_scores(emb_c, tp.gather_rows(Zc, neg_rows, N));
    auto cl = contrastive_loss(tp, pos, neg, P.cfg.contrastive_form, pb.b);
    d.contrast = cl.scalar();
    total = tp.add(total, tp.scale(cl, S(P.cfg.beta)));
  }
  d.total = total.scalar();
  if (diag) *diag = d;
  return total;
}

// The psi loss to minimize: the negated discriminator objective, with the
// encoder's latents passed in as detached values (the encoder is frozen on
// psi iterations; its graph is never recorded here).
template <class S>
ad::Tensor<S> build_psi_objective(ad::Tape<S>& tp, ModelParams<S>& P, const PreparedBatch& pb,
                                  std::type_identity_t<std::span<const S>> z_posterior_rows,
                                  std::type_identity_t<std::span<const S>> z_prior_rows,
                                  S* objective_value = nullptr) {
  GraphBuilder<S> gb(tp, P, true);
  const int64_t N = pb.n_mask();
  auto emb_c = gb.embed_items(pb.compact_items.data(), N);
  auto s_post = gb.adversary_scores(emb_c, tp.constant(z_posterior_rows, N, P.cfg.latent_dim));
  auto s_prior = gb.adversary_scores(emb_c, tp.constant(z_prior_rows, N, P.cfg.latent_dim));
  auto obj = adversary_objective(tp, s_post, s_prior, pb.b);
  if (objective_value) *objective_value = obj.scalar();
  return tp.neg(obj);
}

// Forward-only encoder returning the compacted latent rows (detached values
// for psi iterations).
template <class S>
std::vector<S> encode_compact_values(ModelParams<S>& P, const PreparedBatch& pb,
                                     std::type_identity_t<std::span<const S>> eps) {
  ad::Tape<S> tp;
  GraphBuilder<S> gb(tp, P, false);
  auto Z = gb.encode(pb, eps);
  auto Zc = tp.gather_rows(Z, pb.compact_rows.data(), pb.n_mask());
  return {Zc.values().begin(), Zc.values().end()};
}

// ---- plain-value (forward only) model API ----------------------------------

// Per-user-per-timestep latents in user-major [b x M x z] layout plus the
// noise seed that produced them.
template <class S>
struct LatentSeq {
  int32_t b = 0, M = 0, z_dim = 0;
  uint64_t epsilon_seed = 0;
  std::vector<S> z;
  S at(int i, int t, int k) const { return z[(size_t(i) * M + t) * z_dim + k]; }
};

template <class S>
std::vector<S> draw_epsilon(const PreparedBatch& pb, int64_t hidden_dim, uint64_t seed,
                            uint64_t epoch, uint64_t iter) {
  std::vector<S> eps(size_t(pb.T) * pb.b * hidden_dim);
  auto rng = make_stream(seed, RngStream::epsilon, epoch, iter);
  fill_gaussian<S>(rng, eps);
  return eps;
}

// Stochastic encoder pass; eps_seed == 0 and sample_noise == false give the
// deterministic evaluation encoding.
template <class S>
LatentSeq<S> encode(ModelParams<S>& params, const data::PaddedBatch& batch, uint64_t eps_seed,
                    bool sample_noise) {
  PreparedBatch pb = prepare_batch(batch);
  ad::Tape<S> tp;
  GraphBuilder<S> gb(tp, params, false);
  std::vector<S> eps;
  if (sample_noise) {
    eps.resize(size_t(pb.T) * pb.b * params.cfg.hidden_dim);
    auto rng = make_stream(eps_seed, RngStream::epsilon);
    fill_gaussian<S>(rng, eps);
  }
  auto Z = gb.encode(pb, eps);
  LatentSeq<S> out;
  out.b = pb.b;
  out.M = batch.M;
  out.z_dim = params.cfg.latent_dim;
  out.epsilon_seed = eps_seed;
  out.z.assign(size_t(pb.b) * batch.M * params.cfg.latent_dim, S(0));
  auto zv = Z.values();
  for (int t = 0; t < pb.T; ++t)
    for (int i = 0; i < pb.b; ++i)
      for (int k = 0; k < params.cfg.latent_dim; ++k)
        out.z[(size_t(i) * batch.M + t) * params.cfg.latent_dim + k] =
            zv[(size_t(t) * pb.b + i) * params.cfg.latent_dim + k];
  return out;
}

// Decoder logits for a block of latent rows.
template <class S>
std::vector<S> decode_rows(ModelParams<S>& params, std::type_identity_t<std::span<const S>> z_rows,
                           int64_t n_rows) {
  ad::Tape<S> tp;
  GraphBuilder<S> gb(tp, params, false);
  auto logits = gb.decode(tp.constant(z_rows, n_rows, params.cfg.latent_dim));
  return {logits.values().begin(), logits.values().end()};
}

// Adversary scores per (user, timestep); masked positions report 0.
template <class S>
std::vector<S> adversary_score(ModelParams<S>& params, const data::PaddedBatch& batch,
                               const LatentSeq<S>& z) {
  PreparedBatch pb = prepare_batch(batch);
  ad::Tape<S> tp;
  GraphBuilder<S> gb(tp, params, false);
  const int64_t N = pb.n_mask();
  std::vector<S> z_rows(size_t(N) * params.cfg.latent_dim);
  for (int64_t r = 0; r < N; ++r)
    for (int k = 0; k < params.cfg.latent_dim; ++k)
      z_rows[size_t(r) * params.cfg.latent_dim + k] =
          z.at(pb.compact_user[size_t(r)], pb.compact_t[size_t(r)], k);
  auto emb = gb.embed_items(pb.compact_items.data(), N);
  auto scores = gb.adversary_scores(emb, tp.constant(z_rows, N, params.cfg.latent_dim));
  std::vector<S> out(size_t(batch.b) * batch.M, S(0));
  for (int64_t r = 0; r < N; ++r)
    out[size_t(pb.compact_user[size_t(r)]) * batch.M + pb.compact_t[size_t(r)]] =
        scores.values()[size_t(r)];
  return out;
}

// Batch-axis shuffle of latent sequences by a sampled derangement; returns the
// permutation used (z~[i] = z[perm[i]]).
template <class S>
std::vector<int32_t> shuffle_latents(LatentSeq<S>& z, SplitMix64& rng) {
  auto perm = derangement(rng, z.b);
  std::vector<S> shuffled(z.z.size());
  const size_t stride = size_t(z.M) * z.z_dim;
  for (int32_t i = 0; i < z.b; ++i)
    std::copy_n(z.z.begin() + long(stride * size_t(perm[size_t(i)])), stride,
                shuffled.begin() + long(stride * size_t(i)));
  z.z = std::move(shuffled);
  return perm;
}

}  // namespace acvae::model
