#pragma once

// Hungarian assignment (shortest augmenting paths with potentials) and the
// DETR-style set loss: matched cross-entropy + L1 + GIoU, with matching
// treated as a constant during backprop.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "detlab/geometry.hpp"
#include "detlab/tensor.hpp"

namespace detlab {

struct CostMatrix {
  int n_pred = 0, n_gt = 0;
  std::vector<double> c;  // row-major, pred x gt

  CostMatrix() = default;
  CostMatrix(int np, int ng)
      : n_pred(np), n_gt(ng), c(static_cast<std::size_t>(np) * ng, 0.0) {}
  double& at(int p, int g) { return c[static_cast<std::size_t>(p) * n_gt + g]; }
  double at(int p, int g) const { return c[static_cast<std::size_t>(p) * n_gt + g]; }
};

struct Assignment {
  // (pred, gt) pairs sorted by pred index; injective in both coordinates
  std::vector<std::pair<int, int>> pairs;
  double total_cost = 0.0;

  int pred_of_gt(int g) const {
    for (const auto& pr : pairs)
      if (pr.second == g) return pr.first;
    return -1;
  }
  int gt_of_pred(int p) const {
    for (const auto& pr : pairs)
      if (pr.first == p) return pr.second;
    return -1;
  }
};

namespace detail {

struct JvResult {
  std::vector<int> pred_for_gt;
  std::vector<double> u;  // per gt
  std::vector<double> v;  // per pred
  double total = 0.0;
};

// Potential-based shortest augmenting path assignment; each gt (row side)
// gets a distinct pred (column side), minimizing total cost.
inline JvResult jv_solve(int n_pred, int n_gt,
                         const std::function<double(int, int)>& cost) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n_gt) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n_pred) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(n_pred) + 1, 0);  // pred -> gt (1-based)
  std::vector<int> way(static_cast<std::size_t>(n_pred) + 1, 0);

  for (int g = 1; g <= n_gt; ++g) {
    match[0] = g;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n_pred) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n_pred) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int g0 = match[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = -1;
      for (int j = 1; j <= n_pred; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(j - 1, g0 - 1) - u[static_cast<std::size_t>(g0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n_pred; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }

  JvResult res;
  res.pred_for_gt.assign(static_cast<std::size_t>(n_gt), -1);
  for (int j = 1; j <= n_pred; ++j)
    if (match[static_cast<std::size_t>(j)] != 0)
      res.pred_for_gt[static_cast<std::size_t>(match[static_cast<std::size_t>(j)]) - 1] = j - 1;
  res.u.assign(u.begin() + 1, u.end());
  res.v.assign(v.begin() + 1, v.end());
  for (int g = 0; g < n_gt; ++g)
    res.total += cost(res.pred_for_gt[static_cast<std::size_t>(g)], g);
  return res;
}

}  // namespace detail

// Minimum-cost injective assignment of every gt to a pred. Among ties,
// returns the assignment whose pred-sorted pair list is lexicographically
// smallest. Total cost is summed in gt order, so two correct solvers agree
// on the exact double.
inline Assignment hungarian(const CostMatrix& cost) {
  if (cost.n_gt > cost.n_pred)
    throw std::invalid_argument("hungarian: " + std::to_string(cost.n_gt) +
                                " ground truths exceed " + std::to_string(cost.n_pred) +
                                " predictions");
  for (double v : cost.c)
    if (!std::isfinite(v))
      throw std::invalid_argument("hungarian: cost matrix has a non-finite entry");

  Assignment out;
  if (cost.n_gt == 0) return out;

  auto base_cost = [&cost](int p, int g) { return cost.at(p, g); };
  detail::JvResult base = detail::jv_solve(cost.n_pred, cost.n_gt, base_cost);

  double maxabs = 1.0;
  for (double v : cost.c) maxabs = std::max(maxabs, std::fabs(v));
  const double tol = 1e-9 * maxabs;

  // candidate edges: zero reduced cost under the optimal potentials
  // (complementary slackness; any edge used by any optimal assignment is one)
  std::vector<std::vector<int>> gts_of_pred(static_cast<std::size_t>(cost.n_pred));
  int n_candidates = 0;
  for (int p = 0; p < cost.n_pred; ++p)
    for (int g = 0; g < cost.n_gt; ++g) {
      const double rc = cost.at(p, g) - base.u[static_cast<std::size_t>(g)] -
                        base.v[static_cast<std::size_t>(p)];
      if (std::fabs(rc) <= tol) {
        gts_of_pred[static_cast<std::size_t>(p)].push_back(g);
        ++n_candidates;
      }
    }

  std::vector<std::pair<int, int>> pairs;
  if (n_candidates <= cost.n_gt) {
    // the optimum is unique; no tie-break needed
    for (int g = 0; g < cost.n_gt; ++g)
      pairs.emplace_back(base.pred_for_gt[static_cast<std::size_t>(g)], g);
  } else {
    // fix pairs greedily in (pred, gt) order; a pair is kept when forcing it
    // still completes to the optimal total
    std::vector<char> pred_used(static_cast<std::size_t>(cost.n_pred), 0);
    std::vector<char> gt_used(static_cast<std::size_t>(cost.n_gt), 0);
    double fixed_cost = 0.0;
    int remaining = cost.n_gt;
    for (int p = 0; p < cost.n_pred && remaining > 0; ++p) {
      for (int g : gts_of_pred[static_cast<std::size_t>(p)]) {
        if (gt_used[static_cast<std::size_t>(g)]) continue;
        // solve the subproblem without pred p / gt g and the already-fixed ones
        std::vector<int> preds, gts;
        for (int pp = 0; pp < cost.n_pred; ++pp)
          if (!pred_used[static_cast<std::size_t>(pp)] && pp != p) preds.push_back(pp);
        for (int gg = 0; gg < cost.n_gt; ++gg)
          if (!gt_used[static_cast<std::size_t>(gg)] && gg != g) gts.push_back(gg);
        double sub_total = 0.0;
        if (!gts.empty()) {
          auto sub_cost = [&](int pi, int gi) {
            return cost.at(preds[static_cast<std::size_t>(pi)],
                           gts[static_cast<std::size_t>(gi)]);
          };
          sub_total = detail::jv_solve(static_cast<int>(preds.size()),
                                       static_cast<int>(gts.size()), sub_cost)
                          .total;
        }
        if (fixed_cost + cost.at(p, g) + sub_total <= base.total + tol) {
          pred_used[static_cast<std::size_t>(p)] = 1;
          gt_used[static_cast<std::size_t>(g)] = 1;
          fixed_cost += cost.at(p, g);
          pairs.emplace_back(p, g);
          --remaining;
          break;
        }
      }
    }
  }

  std::sort(pairs.begin(), pairs.end());
  out.pairs = std::move(pairs);
  // exact-agreement convention: sum in gt order
  std::vector<int> pred_of(static_cast<std::size_t>(cost.n_gt), -1);
  for (const auto& pr : out.pairs) pred_of[static_cast<std::size_t>(pr.second)] = pr.first;
  for (int g = 0; g < cost.n_gt; ++g) out.total_cost += cost.at(pred_of[static_cast<std::size_t>(g)], g);
  return out;
}

// ---------------------------------------------------------------------------
// Matching cost and set loss

struct LossWeights {
  double c_cls = 2.0;
  double c_l1 = 5.0;
  double c_giou = 2.0;
  double no_object = 0.1;
};

// One decoder layer's predictions as tape tensors plus plain-value boxes.
struct PredictionSet {
  Tensor class_logits;        // N x (num_classes + 1), tracked
  Tensor boxes;               // N x 4 (cx, cy, w, h), tracked
  std::vector<BBox> box_values;
};

using GtList = std::vector<std::pair<int, BBox>>;  // (class, box)

inline std::vector<double> softmax_row_values(const double* row, int n) {
  double mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double den = 0.0;
  std::vector<double> e(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    e[static_cast<std::size_t>(j)] = std::exp(row[j] - mx);
    den += e[static_cast<std::size_t>(j)];
  }
  for (auto& x : e) x /= den;
  return e;
}

// entry(p, g) = c_cls * (-prob_p(class_g)) + c_l1 * L1(box_p, box_g)
//             + c_giou * (1 - giou(box_p, box_g))
inline CostMatrix match_cost(const PredictionSet& preds, const GtList& gt,
                             const LossWeights& w = {}) {
  const int n_pred = preds.class_logits.shape[0];
  const int n_cls = preds.class_logits.shape[1];
  const int n_gt = static_cast<int>(gt.size());
  CostMatrix cm(n_pred, n_gt);
  for (int p = 0; p < n_pred; ++p) {
    std::vector<double> prob = softmax_row_values(
        preds.class_logits.data.data() + static_cast<std::size_t>(p) * n_cls, n_cls);
    const BBox bp = sanitize_box(preds.box_values[static_cast<std::size_t>(p)]);
    for (int g = 0; g < n_gt; ++g) {
      const auto& [cls, bg] = gt[static_cast<std::size_t>(g)];
      const double l1 = std::fabs(bp.cx - bg.cx) + std::fabs(bp.cy - bg.cy) +
                        std::fabs(bp.w - bg.w) + std::fabs(bp.h - bg.h);
      cm.at(p, g) = w.c_cls * (-prob[static_cast<std::size_t>(cls)]) + w.c_l1 * l1 +
                    w.c_giou * (1.0 - giou(bp, bg));
    }
  }
  return cm;
}

// Differentiable GIoU for row-aligned box pairs (each row cx, cy, w, h).
inline Tensor giou_pairs(Tape& t, const Tensor& a, const Tensor& b) {
  detail::require(a.shape == b.shape && a.shape.size() == 2 && a.shape[1] == 4,
                  "giou_pairs: want matching Nx4 boxes, got " + shape_str(a.shape) +
                      " and " + shape_str(b.shape));
  auto corners = [&](const Tensor& x) {
    Tensor cx = slice_cols(t, x, 0, 1), cy = slice_cols(t, x, 1, 2);
    Tensor w = slice_cols(t, x, 2, 3), h = slice_cols(t, x, 3, 4);
    Tensor hw = scale(t, w, 0.5), hh = scale(t, h, 0.5);
    struct Corners {
      Tensor x1, x2, y1, y2, area;
    } c{sub(t, cx, hw), add(t, cx, hw), sub(t, cy, hh), add(t, cy, hh), mul(t, w, h)};
    return c;
  };
  auto ca = corners(a), cb = corners(b);
  Tensor iw = relu(t, sub(t, minimum(t, ca.x2, cb.x2), maximum(t, ca.x1, cb.x1)));
  Tensor ih = relu(t, sub(t, minimum(t, ca.y2, cb.y2), maximum(t, ca.y1, cb.y1)));
  Tensor inter = mul(t, iw, ih);
  Tensor uni = sub(t, add(t, ca.area, cb.area), inter);
  Tensor ew = sub(t, maximum(t, ca.x2, cb.x2), minimum(t, ca.x1, cb.x1));
  Tensor eh = sub(t, maximum(t, ca.y2, cb.y2), minimum(t, ca.y1, cb.y1));
  Tensor enc = mul(t, ew, eh);
  return sub(t, divide(t, inter, uni), divide(t, sub(t, enc, uni), enc));
}

// Weighted cross-entropy + L1 + GIoU for one layer under a given assignment.
inline Tensor layer_loss_with_assignment(Tape& t, const PredictionSet& preds,
                                         const GtList& gt, const Assignment& assign,
                                         int num_classes, const LossWeights& w) {
  const int n = preds.class_logits.shape[0];
  const int n_cls = preds.class_logits.shape[1];
  const int n_gt = static_cast<int>(gt.size());
  detail::require(n_cls == num_classes + 1,
                  "set_loss: logits " + shape_str(preds.class_logits.shape) +
                      " do not cover " + std::to_string(num_classes) +
                      " classes plus background");

  // one-hot target picker, scaled by per-query class weight
  Tensor picker = Tensor::zeros({n, n_cls});
  double weight_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const int g = assign.gt_of_pred(i);
    const int target = g >= 0 ? gt[static_cast<std::size_t>(g)].first : num_classes;
    const double wi = g >= 0 ? 1.0 : w.no_object;
    picker.at(i, target) = wi;
    weight_sum += wi;
  }
  Tensor logp = log_softmax_rows(t, preds.class_logits);
  Tensor ce = scale(t, neg(t, sum(t, mul(t, logp, picker))), 1.0 / weight_sum);

  Tensor loss = scale(t, ce, w.c_cls);
  if (n_gt > 0) {
    // gather matched predictions via a one-hot selection matrix
    Tensor sel = Tensor::zeros({n_gt, n});
    Tensor gt_boxes = Tensor::zeros({n_gt, 4});
    for (int g = 0; g < n_gt; ++g) {
      sel.at(g, assign.pred_of_gt(g)) = 1.0;
      const BBox& bb = gt[static_cast<std::size_t>(g)].second;
      gt_boxes.at(g, 0) = bb.cx;
      gt_boxes.at(g, 1) = bb.cy;
      gt_boxes.at(g, 2) = bb.w;
      gt_boxes.at(g, 3) = bb.h;
    }
    Tensor matched = matmul(t, sel, preds.boxes);
    Tensor l1 = scale(t, sum(t, abs(t, sub(t, matched, gt_boxes))), 1.0 / n_gt);
    Tensor giou_term =
        scale(t, sum(t, add_scalar(t, neg(t, giou_pairs(t, matched, gt_boxes)), 1.0)),
              1.0 / n_gt);
    loss = add(t, loss, add(t, scale(t, l1, w.c_l1), scale(t, giou_term, w.c_giou)));
  }
  return loss;
}

// Sum of per-layer losses; each layer is matched independently (auxiliary
// supervision). Assignments can be recorded, or pinned to bypass matching
// (gradient checks hold the discrete assignment fixed).
inline Tensor set_loss(Tape& t, const std::vector<PredictionSet>& layers,
                       const GtList& gt, int num_classes, const LossWeights& w = {},
                       std::vector<Assignment>* out_assignments = nullptr,
                       const std::vector<Assignment>* pinned = nullptr) {
  detail::require(!layers.empty(), "set_loss: no layer outputs");
  detail::require(!pinned || pinned->size() == layers.size(),
                  "set_loss: pinned assignments do not cover every layer");
  Tensor total;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Assignment assign;
    if (pinned) {
      assign = (*pinned)[l];
    } else if (!gt.empty()) {
      assign = hungarian(match_cost(layers[l], gt, w));
    }
    if (out_assignments) out_assignments->push_back(assign);
    Tensor ll = layer_loss_with_assignment(t, layers[l], gt, assign, num_classes, w);
    total = l == 0 ? ll : add(t, total, ll);
  }
  return total;
}

}  // namespace detlab
