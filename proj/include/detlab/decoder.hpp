#pragma once

// DETR-style decoder: L pre-norm blocks of relation-aware self-attention,
// cross attention over a memory grid, and an FFN, with iterative sigmoid-space
// box refinement and shared prediction heads behind a shared output norm.
// Boxes cross layer boundaries as detached values; layer l's relation geometry
// and positional embeddings come from layer l-1's refined boxes (the initial
// anchors for layer 1).

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "detlab/attention.hpp"
#include "detlab/geometry.hpp"
#include "detlab/matching.hpp"
#include "detlab/optim.hpp"
#include "detlab/rng.hpp"
#include "detlab/tensor.hpp"

namespace detlab {

struct DecoderConfig {
  int num_layers = 6;      // L
  int d_model = 64;
  int heads = 8;           // K
  int relation_heads = 8;  // K_r
  int d_ffn = 128;
  int num_queries = 10;    // N
  int num_classes = 3;     // C (background channel is implicit)
  int d_gate_hidden = 64;  // W_G hidden width
  bool progressive = true; // three-scale metric with learnable mixing vs local-only
  EmbedConfig relation_embed{};

  void validate() const {
    if (num_layers < 1)
      throw std::invalid_argument("decoder config: need at least one layer, got " +
                                  std::to_string(num_layers));
    if (heads < 1 || d_model % heads != 0)
      throw std::invalid_argument("decoder config: " + std::to_string(heads) +
                                  " heads do not divide d_model " +
                                  std::to_string(d_model));
    if (relation_heads < 0 || relation_heads > heads)
      throw std::invalid_argument("decoder config: relation head count " +
                                  std::to_string(relation_heads) + " outside 0.." +
                                  std::to_string(heads));
    // box positional embeddings split d_model over 4 coords, sin/cos paired
    if (d_model % 8 != 0)
      throw std::invalid_argument("decoder config: d_model " + std::to_string(d_model) +
                                  " must be divisible by 8 for positional embeddings");
    if (num_queries < 1 || num_classes < 1 || d_ffn < 1 || d_gate_hidden < 1)
      throw std::invalid_argument("decoder config: sizes must be positive");
  }
};

struct FfnParams {
  Param w1, b1, w2, b2;
  void init(const std::string& prefix, int d_model, int d_ffn, Rng& rng) {
    Rng r0 = rng.fork(0), r1 = rng.fork(1);
    w1 = Param(prefix + ".w1", xavier_init(r0, d_model, d_ffn));
    b1 = Param(prefix + ".b1", Tensor::zeros({d_ffn}));
    w2 = Param(prefix + ".w2", xavier_init(r1, d_ffn, d_model));
    b2 = Param(prefix + ".b2", Tensor::zeros({d_model}));
  }
  void collect(std::vector<Param*>& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
  }
};

struct FfnNodes {
  Tensor w1, b1, w2, b2;
};
inline FfnNodes push(Tape& t, FfnParams& p) {
  return {p.w1.push(t), p.b1.push(t), p.w2.push(t), p.b2.push(t)};
}

struct NormParams {
  Param gain, bias;
  void init(const std::string& prefix, int d_model) {
    gain = Param(prefix + ".gain", Tensor::full({d_model}, 1.0));
    bias = Param(prefix + ".bias", Tensor::zeros({d_model}));
  }
  void collect(std::vector<Param*>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

struct NormNodes {
  Tensor gain, bias;
};
inline NormNodes push(Tape& t, NormParams& p) {
  return {p.gain.push(t), p.bias.push(t)};
}

struct LayerParams {
  MhaParams self_attn;
  GateParams gate;
  MhaParams cross_attn;
  FfnParams ffn;
  NormParams norm_self, norm_cross, norm_ffn;
};

struct HeadParams {
  Param cls_w, cls_b;
  Param reg_w1, reg_b1, reg_w2, reg_b2, reg_w3, reg_b3;

  void init(int d_model, int num_classes, Rng& rng) {
    Rng r0 = rng.fork(0), r1 = rng.fork(1), r2 = rng.fork(2);
    cls_w = Param("head.cls_w", xavier_init(r0, d_model, num_classes + 1));
    cls_b = Param("head.cls_b", Tensor::zeros({num_classes + 1}));
    reg_w1 = Param("head.reg_w1", xavier_init(r1, d_model, d_model));
    reg_b1 = Param("head.reg_b1", Tensor::zeros({d_model}));
    reg_w2 = Param("head.reg_w2", xavier_init(r2, d_model, d_model));
    reg_b2 = Param("head.reg_b2", Tensor::zeros({d_model}));
    // zero start: layer boxes begin at their anchors
    reg_w3 = Param("head.reg_w3", Tensor::zeros({d_model, 4}));
    reg_b3 = Param("head.reg_b3", Tensor::zeros({4}));
  }
  void collect(std::vector<Param*>& out) {
    out.push_back(&cls_w);
    out.push_back(&cls_b);
    out.push_back(&reg_w1);
    out.push_back(&reg_b1);
    out.push_back(&reg_w2);
    out.push_back(&reg_b2);
    out.push_back(&reg_w3);
    out.push_back(&reg_b3);
  }
};

struct HeadNodes {
  Tensor cls_w, cls_b, reg_w1, reg_b1, reg_w2, reg_b2, reg_w3, reg_b3;
};
inline HeadNodes push(Tape& t, HeadParams& p) {
  return {p.cls_w.push(t),  p.cls_b.push(t),  p.reg_w1.push(t), p.reg_b1.push(t),
          p.reg_w2.push(t), p.reg_b2.push(t), p.reg_w3.push(t), p.reg_b3.push(t)};
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

struct DecoderParams {
  DecoderConfig cfg;
  Param query_content;  // N x d_model
  Param anchor_logits;  // N x 4, sigmoid space
  Param mem_proj_w, mem_proj_b;
  std::vector<LayerParams> layers;
  ScaleWeights scales;
  NormParams out_norm;
  HeadParams heads;

  void init(const DecoderConfig& config, std::uint64_t seed) {
    config.validate();
    cfg = config;
    Rng root(seed);

    Rng qr = root.fork(1);
    query_content = Param("query_content",
                          xavier_init(qr, cfg.num_queries, cfg.d_model));
    Rng ar = root.fork(2);
    Tensor anchors = Tensor::zeros({cfg.num_queries, 4});
    for (int i = 0; i < cfg.num_queries; ++i) {
      anchors.at(i, 0) = logit(ar.uniform(0.1, 0.9));
      anchors.at(i, 1) = logit(ar.uniform(0.1, 0.9));
      anchors.at(i, 2) = logit(ar.uniform(0.15, 0.45));
      anchors.at(i, 3) = logit(ar.uniform(0.15, 0.45));
    }
    anchor_logits = Param("anchor_logits", anchors);

    Rng mr = root.fork(3);
    mem_proj_w = Param("mem_proj.w", xavier_init(mr, cfg.num_classes + 1, cfg.d_model));
    mem_proj_b = Param("mem_proj.b", Tensor::zeros({cfg.d_model}));

    layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (int l = 0; l < cfg.num_layers; ++l) {
      auto& lp = layers[static_cast<std::size_t>(l)];
      const std::string prefix = "layer" + std::to_string(l);
      Rng lr = root.fork(100 + static_cast<std::uint64_t>(l));
      Rng r0 = lr.fork(0), r1 = lr.fork(1), r2 = lr.fork(2), r3 = lr.fork(3);
      lp.self_attn.init(prefix + ".self", cfg.d_model, r0);
      lp.gate.init(prefix + ".gate", 5 * cfg.relation_embed.d_pos * 3, cfg.d_gate_hidden,
                   cfg.heads, r1);
      lp.cross_attn.init(prefix + ".cross", cfg.d_model, r2);
      lp.ffn.init(prefix + ".ffn", cfg.d_model, cfg.d_ffn, r3);
      lp.norm_self.init(prefix + ".norm_self", cfg.d_model);
      lp.norm_cross.init(prefix + ".norm_cross", cfg.d_model);
      lp.norm_ffn.init(prefix + ".norm_ffn", cfg.d_model);
    }
    scales.init(cfg.num_layers, cfg.progressive);
    out_norm.init("out_norm", cfg.d_model);

    Rng hr = root.fork(4);
    heads.init(cfg.d_model, cfg.num_classes, hr);
  }

  // Fixed enumeration order; this is the checkpoint layout contract.
  std::vector<Param*> all() {
    std::vector<Param*> out;
    out.push_back(&query_content);
    out.push_back(&anchor_logits);
    out.push_back(&mem_proj_w);
    out.push_back(&mem_proj_b);
    for (auto& lp : layers) {
      lp.self_attn.collect(out);
      lp.gate.collect(out);
      lp.cross_attn.collect(out);
      lp.ffn.collect(out);
      lp.norm_self.collect(out);
      lp.norm_cross.collect(out);
      lp.norm_ffn.collect(out);
    }
    scales.collect(out);
    out_norm.collect(out);
    heads.collect(out);
    return out;
  }
};

struct LayerNodes {
  MhaNodes self_attn;
  GateNodes gate;
  MhaNodes cross_attn;
  FfnNodes ffn;
  NormNodes norm_self, norm_cross, norm_ffn;
};

struct DecoderNodes {
  Tensor query_content, anchor_logits, mem_proj_w, mem_proj_b;
  std::vector<LayerNodes> layers;
  Tensor eff_lambda;  // L x 3
  NormNodes out_norm;
  HeadNodes heads;
};

// Every parameter lands on the tape exactly once per forward pass.
inline DecoderNodes push_all(Tape& t, DecoderParams& p) {
  DecoderNodes n;
  n.query_content = p.query_content.push(t);
  n.anchor_logits = p.anchor_logits.push(t);
  n.mem_proj_w = p.mem_proj_w.push(t);
  n.mem_proj_b = p.mem_proj_b.push(t);
  for (auto& lp : p.layers)
    n.layers.push_back({push(t, lp.self_attn), push(t, lp.gate), push(t, lp.cross_attn),
                        push(t, lp.ffn), push(t, lp.norm_self), push(t, lp.norm_cross),
                        push(t, lp.norm_ffn)});
  n.eff_lambda = p.scales.effective(t);
  n.out_norm = push(t, p.out_norm);
  n.heads = push(t, p.heads);
  return n;
}

struct LayerOutput {
  Tensor class_logits;            // N x (num_classes + 1)
  Tensor boxes;                   // N x 4, (cx, cy, w, h) after sigmoid
  std::vector<BBox> box_values;
  std::array<double, 3> lambda{};
};

// Constant geometry captured per layer so a finite-difference probe can pin
// the detached paths (box-derived embeddings and the refinement anchors of
// layers after the first) while parameters move.
struct ForwardTrace {
  std::vector<std::vector<BBox>> layer_boxes;          // input boxes per layer
  std::vector<std::vector<double>> prev_logits;        // refinement base, layers >= 2
};

// Sinusoidal embedding of box coordinates: d_model/4 dims per coordinate.
inline Tensor box_pos_embedding(const std::vector<BBox>& boxes, int d_model) {
  const int per_coord = d_model / 4;
  EmbedConfig cfg;
  cfg.scale = 2.0 * std::acos(-1.0);
  cfg.d_pos = per_coord;
  Tensor out = Tensor::zeros({static_cast<int>(boxes.size()), d_model});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const std::array<double, 4> coords{boxes[i].cx, boxes[i].cy, boxes[i].w, boxes[i].h};
    sinusoidal_embed_into(coords.data(), 4, cfg,
                          out.data.data() + i * static_cast<std::size_t>(d_model));
  }
  return out;
}

namespace detail {

inline std::vector<BBox> boxes_from_rows(const Tensor& rows) {
  std::vector<BBox> out;
  out.reserve(static_cast<std::size_t>(rows.shape[0]));
  for (int i = 0; i < rows.shape[0]; ++i)
    out.push_back({rows.at(i, 0), rows.at(i, 1), rows.at(i, 2), rows.at(i, 3)});
  return out;
}

inline std::vector<BBox> sanitize_boxes(std::vector<BBox> boxes) {
  for (auto& b : boxes) b = sanitize_box(b);
  return boxes;
}

}  // namespace detail

// Full decoder pass over one scene's memory. raw_memory is the M x (C+1)
// occupancy grid (constant), memory_pos its positional encoding (constant).
// When `pinned` is given, the detached geometry is read from it instead of
// being recomputed; `out_trace` records the geometry actually used.
inline std::vector<LayerOutput> decoder_forward(Tape& t, DecoderParams& p,
                                                const Tensor& raw_memory,
                                                const Tensor& memory_pos,
                                                const ForwardTrace* pinned = nullptr,
                                                ForwardTrace* out_trace = nullptr) {
  const DecoderConfig& cfg = p.cfg;
  detlab::detail::require(raw_memory.shape.size() == 2 &&
                              raw_memory.shape[1] == cfg.num_classes + 1,
                          "decoder_forward: memory " + shape_str(raw_memory.shape) +
                              " does not have " + std::to_string(cfg.num_classes + 1) +
                              " channels");
  detlab::detail::require(memory_pos.shape == std::vector<int>{raw_memory.shape[0], cfg.d_model},
                          "decoder_forward: memory positions " + shape_str(memory_pos.shape) +
                              " do not match memory rows and d_model");
  DecoderNodes nodes = push_all(t, p);
  Tensor memory = add_rowvec(t, matmul(t, raw_memory, nodes.mem_proj_w), nodes.mem_proj_b);

  Tensor content = nodes.query_content;
  auto lambda_values = p.scales.effective_values();

  // layer-1 geometry comes from the (detached) initial anchors
  std::vector<BBox> current_boxes;
  {
    Tensor sig = sigmoid(t, nodes.anchor_logits);
    current_boxes = detail::boxes_from_rows(sig);
  }
  std::vector<double> prev_logit_values = p.anchor_logits.value.data;

  std::vector<LayerOutput> outputs;
  outputs.reserve(static_cast<std::size_t>(cfg.num_layers));

  for (int l = 1; l <= cfg.num_layers; ++l) {
    const LayerNodes& ln = nodes.layers[static_cast<std::size_t>(l - 1)];
    std::vector<BBox> geo_boxes =
        pinned ? pinned->layer_boxes[static_cast<std::size_t>(l - 1)]
               : detail::sanitize_boxes(current_boxes);
    if (out_trace) out_trace->layer_boxes.push_back(geo_boxes);

    Tensor pos = box_pos_embedding(geo_boxes, cfg.d_model);

    // relation-aware self-attention (pre-norm residual block)
    Tensor normed = layer_norm_rows(t, content, ln.norm_self.gain, ln.norm_self.bias);
    Tensor self_update;
    if (cfg.relation_heads > 0) {
      RelationEmbeds embeds =
          relation_embeds(geo_boxes, l, cfg.num_layers, cfg.relation_embed);
      Tensor lam = slice_rows(t, nodes.eff_lambda, l - 1, l);
      Tensor geo = geometric_weights(t, embeds, lam, ln.gate);
      self_update = multi_head_attention(t, normed, normed, pos, pos, ln.self_attn,
                                         cfg.heads, cfg.relation_heads, &geo);
    } else {
      self_update =
          multi_head_attention(t, normed, normed, pos, pos, ln.self_attn, cfg.heads);
    }
    content = add(t, content, self_update);

    // cross-attention over the projected memory
    normed = layer_norm_rows(t, content, ln.norm_cross.gain, ln.norm_cross.bias);
    Tensor cross_update = multi_head_attention(t, normed, memory, pos, memory_pos,
                                               ln.cross_attn, cfg.heads);
    content = add(t, content, cross_update);

    // feed-forward
    normed = layer_norm_rows(t, content, ln.norm_ffn.gain, ln.norm_ffn.bias);
    Tensor hidden = relu(t, add_rowvec(t, matmul(t, normed, ln.ffn.w1), ln.ffn.b1));
    Tensor ffn_out = add_rowvec(t, matmul(t, hidden, ln.ffn.w2), ln.ffn.b2);
    content = add(t, content, ffn_out);

    // prediction heads (shared across layers) read the normalized stream
    Tensor head_in = layer_norm_rows(t, content, nodes.out_norm.gain, nodes.out_norm.bias);
    Tensor class_logits = add_rowvec(t, matmul(t, head_in, nodes.heads.cls_w),
                                     nodes.heads.cls_b);
    Tensor reg_h1 = relu(t, add_rowvec(t, matmul(t, head_in, nodes.heads.reg_w1),
                                       nodes.heads.reg_b1));
    Tensor reg_h2 = relu(t, add_rowvec(t, matmul(t, reg_h1, nodes.heads.reg_w2),
                                       nodes.heads.reg_b2));
    Tensor delta = add_rowvec(t, matmul(t, reg_h2, nodes.heads.reg_w3),
                              nodes.heads.reg_b3);

    // refinement base: gradient reaches the anchors through layer 1 only;
    // later layers refine detached values
    Tensor base;
    if (l == 1) {
      base = nodes.anchor_logits;
    } else {
      std::vector<double> base_vals =
          pinned ? pinned->prev_logits[static_cast<std::size_t>(l - 2)]
                 : prev_logit_values;
      base = Tensor({cfg.num_queries, 4}, base_vals);
    }
    if (out_trace && l >= 2)
      out_trace->prev_logits.push_back(base.data);
    Tensor new_logits = add(t, delta, base);
    Tensor boxes = sigmoid(t, new_logits);

    LayerOutput out;
    out.class_logits = class_logits;
    out.boxes = boxes;
    out.box_values = detail::boxes_from_rows(boxes);
    out.lambda = lambda_values[static_cast<std::size_t>(l - 1)];
    outputs.push_back(out);

    prev_logit_values = new_logits.data;
    current_boxes = out.box_values;
  }
  return outputs;
}

// Layer outputs reshaped for the set loss.
inline std::vector<PredictionSet> as_predictions(const std::vector<LayerOutput>& outs) {
  std::vector<PredictionSet> ps;
  ps.reserve(outs.size());
  for (const auto& o : outs) ps.push_back({o.class_logits, o.boxes, o.box_values});
  return ps;
}

}  // namespace detlab
