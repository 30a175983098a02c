#pragma once

// Relation-aware multi-head self-attention. Content scores are the usual
// scaled dot products; relation heads reweight them with nonnegative
// geometric weights derived from pairwise box relations (embedded, gated by
// per-layer scale weights, passed through a small MLP). Heads beyond the
// relation-head count fall back to plain softmax attention, so zero relation
// heads is exactly the standard layer.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "detlab/geometry.hpp"
#include "detlab/optim.hpp"
#include "detlab/rng.hpp"
#include "detlab/tensor.hpp"

namespace detlab {

inline constexpr double kDenominatorFloor = 1e-9;

// Uniform Xavier-style init keyed off a forked rng stream.
inline Tensor xavier_init(Rng& rng, int fan_in, int fan_out) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros({fan_in, fan_out});
  for (auto& v : t.data) v = rng.uniform(-a, a);
  return t;
}

// ---------------------------------------------------------------------------
// Parameter bundles

struct MhaParams {
  Param w_q, w_k, w_v, w_o, b_o;

  void init(const std::string& prefix, int d_model, Rng& rng) {
    Rng r0 = rng.fork(0), r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3);
    w_q = Param(prefix + ".w_q", xavier_init(r0, d_model, d_model));
    w_k = Param(prefix + ".w_k", xavier_init(r1, d_model, d_model));
    w_v = Param(prefix + ".w_v", xavier_init(r2, d_model, d_model));
    w_o = Param(prefix + ".w_o", xavier_init(r3, d_model, d_model));
    b_o = Param(prefix + ".b_o", Tensor::zeros({d_model}));
  }
  void collect(std::vector<Param*>& out) {
    out.push_back(&w_q);
    out.push_back(&w_k);
    out.push_back(&w_v);
    out.push_back(&w_o);
    out.push_back(&b_o);
  }
};

struct MhaNodes {
  Tensor w_q, w_k, w_v, w_o, b_o;
};

inline MhaNodes push(Tape& t, MhaParams& p) {
  return {p.w_q.push(t), p.w_k.push(t), p.w_v.push(t), p.w_o.push(t), p.b_o.push(t)};
}

// Two-layer gate MLP turning a 240-dim relation embedding into K nonnegative
// per-head geometric weights. The output bias starts at 1 so fresh models
// begin at constant geometry (plain attention) instead of dead ReLUs.
struct GateParams {
  Param w1, b1, w2, b2;

  void init(const std::string& prefix, int embed_dim, int hidden, int heads, Rng& rng) {
    Rng r0 = rng.fork(0), r1 = rng.fork(1);
    w1 = Param(prefix + ".w1", xavier_init(r0, embed_dim, hidden));
    b1 = Param(prefix + ".b1", Tensor::zeros({hidden}));
    w2 = Param(prefix + ".w2", xavier_init(r1, hidden, heads));
    b2 = Param(prefix + ".b2", Tensor::full({heads}, 1.0));
  }
  void collect(std::vector<Param*>& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
  }
};

struct GateNodes {
  Tensor w1, b1, w2, b2;
};

inline GateNodes push(Tape& t, GateParams& p) {
  return {p.w1.push(t), p.b1.push(t), p.w2.push(t), p.b2.push(t)};
}

// Per-layer mixing weights over the three metric scales. Stored as logits;
// the effective weights are a row softmax, so each layer's row lives on the
// simplex and zero logits give equal thirds. Non-progressive mode pins the
// gate to pure local.
struct ScaleWeights {
  Param logits;
  bool progressive = true;
  int num_layers = 0;

  void init(int L, bool progressive_mode) {
    num_layers = L;
    progressive = progressive_mode;
    logits = Param("scale_weights.logits", Tensor::zeros({L, 3}));
  }
  void collect(std::vector<Param*>& out) { out.push_back(&logits); }

  // Tracked L x 3 effective weights (constant local-only rows when not
  // progressive).
  Tensor effective(Tape& t) {
    if (!progressive) {
      Tensor rows = Tensor::zeros({num_layers, 3});
      for (int l = 0; l < num_layers; ++l) rows.at(l, 0) = 1.0;
      return rows;
    }
    return softmax_rows(t, logits.push(t));
  }

  // Plain-value effective weights for traces and reports.
  std::vector<std::array<double, 3>> effective_values() const {
    std::vector<std::array<double, 3>> rows(static_cast<std::size_t>(num_layers));
    for (int l = 0; l < num_layers; ++l) {
      if (!progressive) {
        rows[static_cast<std::size_t>(l)] = {1.0, 0.0, 0.0};
        continue;
      }
      double mx = logits.value.at(l, 0);
      for (int j = 1; j < 3; ++j) mx = std::max(mx, logits.value.at(l, j));
      double den = 0.0;
      std::array<double, 3> e{};
      for (int j = 0; j < 3; ++j) {
        e[static_cast<std::size_t>(j)] = std::exp(logits.value.at(l, j) - mx);
        den += e[static_cast<std::size_t>(j)];
      }
      for (int j = 0; j < 3; ++j) e[static_cast<std::size_t>(j)] /= den;
      rows[static_cast<std::size_t>(l)] = e;
    }
    return rows;
  }
};

// ---------------------------------------------------------------------------
// Relation embeddings (constants; boxes enter detached)

// The three 80-dim embedding blocks for all ordered pairs of one box set at
// one layer, row-major over (i, j). Constants on any tape.
struct RelationEmbeds {
  Tensor local;         // N^2 x 5*d_pos
  Tensor medium;        // N^2 x 5*d_pos
  Tensor global_block;  // N^2 x 5*d_pos
  int n = 0;
};

inline RelationEmbeds relation_embeds(const std::vector<BBox>& boxes, int layer,
                                      int num_layers, const EmbedConfig& cfg = {}) {
  const int n = static_cast<int>(boxes.size());
  const int block = 5 * cfg.d_pos;
  RelationEmbeds out;
  out.n = n;
  out.local = Tensor::zeros({n * n, block});
  out.medium = Tensor::zeros({n * n, block});
  out.global_block = Tensor::zeros({n * n, block});

  // the global metric is all ones for every pair; embed once and tile
  std::array<double, 5> ones{1, 1, 1, 1, 1};
  std::vector<double> grow = sinusoidal_embed(ones, cfg);

  const double damp = 1.0 + 2.0 * static_cast<double>(layer) / num_layers;
  if (layer < 1 || layer > num_layers)
    throw std::invalid_argument("relation_embeds: layer " + std::to_string(layer) +
                                " outside 1.." + std::to_string(num_layers));
  std::array<double, 5> metric{}, med{};
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const int row = i * n + j;
      metric = relation_metric(boxes[static_cast<std::size_t>(i)],
                               boxes[static_cast<std::size_t>(j)]);
      for (int k = 0; k < 4; ++k) med[static_cast<std::size_t>(k)] = metric[static_cast<std::size_t>(k)] / damp;
      med[4] = metric[4];
      sinusoidal_embed_into(metric.data(), 5, cfg,
                            out.local.data.data() + static_cast<std::size_t>(row) * block);
      sinusoidal_embed_into(med.data(), 5, cfg,
                            out.medium.data.data() + static_cast<std::size_t>(row) * block);
      std::copy(grow.begin(), grow.end(),
                out.global_block.data.begin() + static_cast<std::size_t>(row) * block);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward pieces

// Geometric weights for all pairs and heads: gate the three embedding blocks
// by this layer's effective scale weights, then run the MLP. Output N^2 x K,
// nonnegative.
inline Tensor geometric_weights(Tape& t, const RelationEmbeds& embeds,
                                const Tensor& lambda_row, const GateNodes& gate) {
  Tensor lam_l = slice_cols(t, lambda_row, 0, 1);
  Tensor lam_m = slice_cols(t, lambda_row, 1, 2);
  Tensor lam_g = slice_cols(t, lambda_row, 2, 3);
  Tensor gated = concat_last_dim(t, {mul_scalar(t, embeds.local, lam_l),
                                     mul_scalar(t, embeds.medium, lam_m),
                                     mul_scalar(t, embeds.global_block, lam_g)});
  Tensor hidden = relu(t, add_rowvec(t, matmul(t, gated, gate.w1), gate.b1));
  return relu(t, add_rowvec(t, matmul(t, hidden, gate.w2), gate.b2));
}

// Geometric-weighted softmax over content scores. Each geometry row is
// normalized by its max (a detached constant; the ratio is scale-invariant,
// so values and gradients are unchanged) which makes the constant-geometry
// case reduce to the plain stabilized softmax arithmetic exactly. The
// denominator floor only matters for all-zero geometry rows.
inline Tensor relation_softmax(Tape& t, const Tensor& scores, const Tensor& geo) {
  detail::require(scores.shape == geo.shape && scores.shape.size() == 2,
                  "relation_softmax: scores " + shape_str(scores.shape) +
                      " vs geometry " + shape_str(geo.shape));
  const int n = scores.shape[0], m = scores.shape[1];
  std::vector<double> neg_smax(static_cast<std::size_t>(n));
  Tensor gmax = Tensor::zeros({n, 1});
  for (int i = 0; i < n; ++i) {
    double smax = scores.at(i, 0);
    double gm = geo.at(i, 0);
    for (int j = 1; j < m; ++j) {
      smax = std::max(smax, scores.at(i, j));
      gm = std::max(gm, geo.at(i, j));
    }
    neg_smax[static_cast<std::size_t>(i)] = -smax;
    gmax.data[static_cast<std::size_t>(i)] = gm > 0.0 ? gm : 1.0;
  }
  Tensor e = exp(t, shift_rows(t, scores, neg_smax));
  Tensor num = mul(t, div_colvec(t, geo, gmax), e);
  Tensor den = max_scalar(t, row_sum(t, num), kDenominatorFloor);
  return div_colvec(t, num, den);
}

// Scaled dot-product scores for one head's query/key slices.
inline Tensor content_scores(Tape& t, const Tensor& q_head, const Tensor& k_head) {
  detail::require(q_head.shape.size() == 2 && q_head.shape[1] == k_head.shape[1],
                  "content_scores: query " + shape_str(q_head.shape) + " vs key " +
                      shape_str(k_head.shape));
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q_head.shape[1]));
  return scale(t, matmul_nt(t, q_head, k_head), inv_sqrt_dk);
}

// Multi-head attention core shared by the plain and relation paths. Position
// features (when present) are added to the query/key inputs only. Heads with
// index < relation_heads use geometric weighting (columns of geo, N^2 x K);
// the rest use plain softmax. Returns the residual update added to content.
inline Tensor multi_head_attention(Tape& t, const Tensor& content_q,
                                   const Tensor& content_kv, const Tensor& pos_q,
                                   const Tensor& pos_k, const MhaNodes& w, int heads,
                                   int relation_heads = 0, const Tensor* geo = nullptr) {
  const int d_model = content_q.shape[1];
  detail::require(heads >= 1 && d_model % heads == 0,
                  "multi_head_attention: " + std::to_string(heads) +
                      " heads do not divide d_model " + std::to_string(d_model));
  detail::require(relation_heads >= 0 && relation_heads <= heads,
                  "multi_head_attention: relation head count " +
                      std::to_string(relation_heads) + " outside 0.." +
                      std::to_string(heads));
  detail::require(relation_heads == 0 || geo != nullptr,
                  "multi_head_attention: relation heads require geometric weights");
  const int d_head = d_model / heads;
  const int nq = content_q.shape[0];

  Tensor q_in = pos_q.numel() ? add(t, content_q, pos_q) : content_q;
  Tensor k_in = pos_k.numel() ? add(t, content_kv, pos_k) : content_kv;
  Tensor q_all = matmul(t, q_in, w.w_q);
  Tensor k_all = matmul(t, k_in, w.w_k);
  Tensor v_all = matmul(t, content_kv, w.w_v);

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(t, q_all, h * d_head, (h + 1) * d_head);
    Tensor kh = slice_cols(t, k_all, h * d_head, (h + 1) * d_head);
    Tensor vh = slice_cols(t, v_all, h * d_head, (h + 1) * d_head);
    Tensor scores = content_scores(t, qh, kh);
    Tensor weights;
    if (h < relation_heads) {
      Tensor geo_h = reshape(t, slice_cols(t, *geo, h, h + 1), {nq, content_kv.shape[0]});
      weights = relation_softmax(t, scores, geo_h);
    } else {
      weights = softmax_rows(t, scores);
    }
    head_outputs.push_back(matmul(t, weights, vh));
  }
  Tensor concat = concat_last_dim(t, head_outputs);
  return add_rowvec(t, matmul(t, concat, w.w_o), w.b_o);
}

// One full relation-aware self-attention block over a query set: computes
// geometric weights from the (detached) boxes, runs the mixed-head attention,
// and applies the residual update.
inline Tensor relation_attention_layer(Tape& t, const Tensor& content,
                                       const Tensor& pos, const std::vector<BBox>& boxes,
                                       int layer, MhaParams& mha, GateParams& gate,
                                       ScaleWeights& scales, int heads, int relation_heads,
                                       const EmbedConfig& cfg = {}) {
  detail::require(relation_heads >= 0 && relation_heads <= heads,
                  "relation_attention_layer: relation head count " +
                      std::to_string(relation_heads) + " outside 0.." +
                      std::to_string(heads));
  MhaNodes w = push(t, mha);
  Tensor update;
  if (relation_heads > 0) {
    RelationEmbeds embeds = relation_embeds(boxes, layer, scales.num_layers, cfg);
    GateNodes g = push(t, gate);
    Tensor eff = scales.effective(t);
    Tensor lam = slice_rows(t, eff, layer - 1, layer);
    Tensor geo = geometric_weights(t, embeds, lam, g);
    update = multi_head_attention(t, content, content, pos, pos, w, heads,
                                  relation_heads, &geo);
  } else {
    update = multi_head_attention(t, content, content, pos, pos, w, heads);
  }
  return add(t, content, update);
}

}  // namespace detlab
