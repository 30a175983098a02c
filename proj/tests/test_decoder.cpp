#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "detlab/decoder.hpp"
#include "detlab/matching.hpp"
#include "detlab/rng.hpp"
#include "fd_check.hpp"

using namespace detlab;

namespace {

struct SceneInputs {
  Tensor raw_memory;
  Tensor memory_pos;
};

SceneInputs fake_memory(std::uint64_t seed, int cells, int num_classes, int d_model) {
  Rng rng(seed);
  Tensor mem = Tensor::zeros({cells, num_classes + 1});
  for (auto& v : mem.data) v = rng.uniform(0.0, 1.0);
  Tensor pos = Tensor::zeros({cells, d_model});
  for (auto& v : pos.data) v = rng.uniform(-1.0, 1.0);
  return {mem, pos};
}

DecoderConfig tiny_config() {
  DecoderConfig cfg;
  cfg.num_layers = 2;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.relation_heads = 2;
  cfg.d_ffn = 16;
  cfg.num_queries = 3;
  cfg.num_classes = 2;
  cfg.d_gate_hidden = 8;
  cfg.progressive = true;
  return cfg;
}

GtList tiny_gt() {
  return {{0, {0.30, 0.35, 0.24, 0.20}}, {1, {0.68, 0.60, 0.30, 0.26}}};
}

}  // namespace

TEST_CASE("decoder config validation") {
  DecoderConfig cfg = tiny_config();
  REQUIRE_NOTHROW(cfg.validate());

  DecoderConfig bad = cfg;
  bad.d_model = 12;  // not divisible by 8
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.heads = 3;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.relation_heads = 5;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.relation_heads = -1;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.num_layers = 0;
  REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("decoder shapes and deterministic replay") {
  DecoderConfig cfg;
  cfg.num_layers = 6;
  cfg.d_model = 64;
  cfg.heads = 8;
  cfg.relation_heads = 8;
  cfg.d_ffn = 128;
  cfg.num_queries = 10;
  cfg.num_classes = 3;
  cfg.progressive = true;

  SceneInputs scene = fake_memory(7, 49, cfg.num_classes, cfg.d_model);

  auto run = [&](std::vector<LayerOutput>& outs) {
    DecoderParams params;
    params.init(cfg, 42);
    Tape t;
    outs = decoder_forward(t, params, scene.raw_memory, scene.memory_pos);
  };

  std::vector<LayerOutput> a, b;
  run(a);
  run(b);

  REQUIRE(a.size() == 6);
  for (const auto& out : a) {
    REQUIRE(out.class_logits.shape == std::vector<int>{10, 4});
    REQUIRE(out.boxes.shape == std::vector<int>{10, 4});
    REQUIRE(out.box_values.size() == 10);
    for (double v : out.boxes.data) {
      REQUIRE(v > 0.0);
      REQUIRE(v < 1.0);
    }
    // fresh mixing logits are zero, so every layer mixes the scales equally
    for (double lv : out.lambda) REQUIRE(lv == 1.0 / 3.0);
  }

  for (std::size_t l = 0; l < a.size(); ++l) {
    REQUIRE(a[l].class_logits.data == b[l].class_logits.data);
    REQUIRE(a[l].boxes.data == b[l].boxes.data);
  }
}

TEST_CASE("decoder rejects mismatched memory shapes") {
  DecoderConfig cfg = tiny_config();
  DecoderParams params;
  params.init(cfg, 3);
  Tape t;

  SceneInputs wrong_channels = fake_memory(1, 4, cfg.num_classes + 1, cfg.d_model);
  REQUIRE_THROWS_AS(
      decoder_forward(t, params, wrong_channels.raw_memory, wrong_channels.memory_pos),
      std::invalid_argument);

  SceneInputs scene = fake_memory(1, 4, cfg.num_classes, cfg.d_model);
  Tensor bad_pos = Tensor::zeros({4, cfg.d_model + 8});
  REQUIRE_THROWS_AS(decoder_forward(t, params, scene.raw_memory, bad_pos),
                    std::invalid_argument);
}

TEST_CASE("zero residual branches pass content and boxes through unchanged") {
  DecoderConfig cfg = tiny_config();
  DecoderParams params;
  params.init(cfg, 11);
  for (auto& lp : params.layers) {
    lp.self_attn.w_o.value = Tensor::zeros({cfg.d_model, cfg.d_model});
    lp.cross_attn.w_o.value = Tensor::zeros({cfg.d_model, cfg.d_model});
    lp.ffn.w2.value = Tensor::zeros({cfg.d_ffn, cfg.d_model});
  }
  // head.reg_w3 / reg_b3 start at zero already, so box deltas are zero too

  SceneInputs scene = fake_memory(5, 4, cfg.num_classes, cfg.d_model);
  Tape t;
  auto outs = decoder_forward(t, params, scene.raw_memory, scene.memory_pos);

  std::vector<double> anchors_sig(params.anchor_logits.value.data.size());
  for (std::size_t i = 0; i < anchors_sig.size(); ++i)
    anchors_sig[i] = sigmoid_value(params.anchor_logits.value.data[i]);

  for (const auto& out : outs) {
    REQUIRE(out.boxes.data == anchors_sig);
    REQUIRE(out.class_logits.data == outs[0].class_logits.data);
  }
}

TEST_CASE("anchor gradients flow through layer one only") {
  DecoderConfig cfg = tiny_config();
  SceneInputs scene = fake_memory(9, 4, cfg.num_classes, cfg.d_model);

  auto anchor_grad_for_layer = [&](std::size_t layer_index) {
    DecoderParams params;
    params.init(cfg, 17);
    Tape t;
    auto outs = decoder_forward(t, params, scene.raw_memory, scene.memory_pos);
    Tensor loss = sum(t, outs[layer_index].boxes);
    t.backward(loss);
    auto g = t.grad(params.anchor_logits.last_node);
    double mx = 0.0;
    for (double v : g) mx = std::max(mx, std::fabs(v));
    return mx;
  };

  REQUIRE(anchor_grad_for_layer(0) > 1e-6);
  // later layers refine detached values, so no path leads back to the anchors
  REQUIRE(anchor_grad_for_layer(1) == 0.0);
}

TEST_CASE("non-progressive mixing reports pure local weights") {
  DecoderConfig cfg = tiny_config();
  cfg.progressive = false;
  DecoderParams params;
  params.init(cfg, 23);
  SceneInputs scene = fake_memory(2, 4, cfg.num_classes, cfg.d_model);
  Tape t;
  auto outs = decoder_forward(t, params, scene.raw_memory, scene.memory_pos);
  for (const auto& out : outs) {
    REQUIRE(out.lambda[0] == 1.0);
    REQUIRE(out.lambda[1] == 0.0);
    REQUIRE(out.lambda[2] == 0.0);
  }
}

TEST_CASE("query permutation permutes outputs") {
  DecoderConfig cfg = tiny_config();
  SceneInputs scene = fake_memory(13, 4, cfg.num_classes, cfg.d_model);

  DecoderParams params;
  params.init(cfg, 29);
  Tape t;
  auto base = decoder_forward(t, params, scene.raw_memory, scene.memory_pos);

  const std::vector<int> perm{2, 0, 1};
  DecoderParams permuted;
  permuted.init(cfg, 29);
  Tensor qc = Tensor::zeros({cfg.num_queries, cfg.d_model});
  Tensor al = Tensor::zeros({cfg.num_queries, 4});
  for (int i = 0; i < cfg.num_queries; ++i) {
    for (int j = 0; j < cfg.d_model; ++j)
      qc.at(i, j) = params.query_content.value.at(perm[static_cast<std::size_t>(i)], j);
    for (int j = 0; j < 4; ++j)
      al.at(i, j) = params.anchor_logits.value.at(perm[static_cast<std::size_t>(i)], j);
  }
  permuted.query_content.value = qc;
  permuted.anchor_logits.value = al;

  Tape t2;
  auto shuffled = decoder_forward(t2, permuted, scene.raw_memory, scene.memory_pos);

  for (std::size_t l = 0; l < base.size(); ++l) {
    for (int i = 0; i < cfg.num_queries; ++i) {
      const int src = perm[static_cast<std::size_t>(i)];
      for (int j = 0; j < cfg.num_classes + 1; ++j)
        REQUIRE_THAT(shuffled[l].class_logits.at(i, j),
                     Catch::Matchers::WithinAbs(base[l].class_logits.at(src, j), 1e-12));
      for (int j = 0; j < 4; ++j)
        REQUIRE_THAT(shuffled[l].boxes.at(i, j),
                     Catch::Matchers::WithinAbs(base[l].boxes.at(src, j), 1e-12));
    }
  }
}

TEST_CASE("pinned geometry reproduces the unpinned forward") {
  DecoderConfig cfg = tiny_config();
  SceneInputs scene = fake_memory(31, 4, cfg.num_classes, cfg.d_model);
  DecoderParams params;
  params.init(cfg, 37);

  ForwardTrace trace;
  Tape t;
  auto outs = decoder_forward(t, params, scene.raw_memory, scene.memory_pos, nullptr,
                              &trace);
  REQUIRE(trace.layer_boxes.size() == 2);
  REQUIRE(trace.prev_logits.size() == 1);

  Tape t2;
  auto pinned = decoder_forward(t2, params, scene.raw_memory, scene.memory_pos, &trace);
  for (std::size_t l = 0; l < outs.size(); ++l) {
    REQUIRE(outs[l].class_logits.data == pinned[l].class_logits.data);
    REQUIRE(outs[l].boxes.data == pinned[l].boxes.data);
  }
}

TEST_CASE("set loss gradient through the full decoder matches finite differences") {
  DecoderConfig cfg = tiny_config();
  SceneInputs scene = fake_memory(41, 4, cfg.num_classes, cfg.d_model);
  GtList gt = tiny_gt();
  LossWeights w;

  for (std::uint64_t seed : {301u, 302u, 303u}) {
    DecoderParams params;
    params.init(cfg, seed);
    // move off the zero-initialized box head so its kinks see real activations
    {
      Rng rng(Rng::mix(seed, 77));
      for (auto& v : params.heads.reg_w3.value.data) v = rng.uniform(-0.3, 0.3);
      for (auto& v : params.heads.reg_b3.value.data) v = rng.uniform(-0.2, 0.2);
    }
    auto param_ptrs = params.all();

    // freeze the detached geometry and the matching, then probe the rest
    ForwardTrace trace;
    std::vector<Assignment> assigns;
    {
      Tape t;
      auto outs = decoder_forward(t, params, scene.raw_memory, scene.memory_pos,
                                  nullptr, &trace);
      set_loss(t, as_predictions(outs), gt, cfg.num_classes, w, &assigns);
    }

    std::vector<double> analytic;
    double loss0 = 0.0;
    {
      Tape t;
      auto outs = decoder_forward(t, params, scene.raw_memory, scene.memory_pos,
                                  &trace);
      Tensor loss = set_loss(t, as_predictions(outs), gt, cfg.num_classes, w, nullptr,
                             &assigns);
      loss0 = loss.data[0];
      t.backward(loss);
      analytic = fdcheck::flat_grads(param_ptrs, t);
    }
    REQUIRE(std::isfinite(loss0));

    const std::vector<double> x0 = fdcheck::flatten(param_ptrs);
    auto f = [&](const std::vector<double>& x) {
      fdcheck::unflatten(param_ptrs, x);
      Tape t;
      auto outs = decoder_forward(t, params, scene.raw_memory, scene.memory_pos,
                                  &trace);
      Tensor loss = set_loss(t, as_predictions(outs), gt, cfg.num_classes, w, nullptr,
                             &assigns);
      fdcheck::unflatten(param_ptrs, x0);
      return loss.data[0];
    };

    fdcheck::Report rep = fdcheck::compare_all(f, x0, analytic);
    INFO("seed " << seed << " worst index " << rep.worst_index << " ad "
                 << rep.worst_ad << " fd " << rep.worst_fd);
    REQUIRE(rep.max_err < 1e-4);
  }
}

TEST_CASE("empty scene loss is differentiable end to end") {
  DecoderConfig cfg = tiny_config();
  SceneInputs scene = fake_memory(43, 4, cfg.num_classes, cfg.d_model);
  GtList gt;  // nothing to detect

  DecoderParams params;
  params.init(cfg, 47);
  auto param_ptrs = params.all();

  Tape t;
  auto outs = decoder_forward(t, params, scene.raw_memory, scene.memory_pos);
  Tensor loss = set_loss(t, as_predictions(outs), gt, cfg.num_classes);
  REQUIRE(std::isfinite(loss.data[0]));
  REQUIRE(loss.data[0] > 0.0);
  t.backward(loss);

  // classification pressure must reach the class head
  auto g = t.grad(params.heads.cls_w.last_node);
  REQUIRE_FALSE(g.empty());
  double mx = 0.0;
  for (double v : g) mx = std::max(mx, std::fabs(v));
  REQUIRE(mx > 0.0);
}
