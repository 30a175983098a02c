#pragma once

// Box geometry: IoU/GIoU, the 5-D pairwise relation metric, its three scale
// variants, and the sinusoidal embedding that turns metrics into attention
// features. All pure scalar math over value types.

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace detlab {

// Center/extent box in normalized scene units.
struct BBox {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x1() const { return cx - 0.5 * w; }
  double x2() const { return cx + 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
};

namespace detail {
inline void require_extents(const BBox& b, const char* who) {
  if (!(b.w > 0.0) || !(b.h > 0.0))
    throw std::domain_error(std::string(who) + ": box extents must be positive, got w=" +
                            std::to_string(b.w) + " h=" + std::to_string(b.h));
}
}  // namespace detail

// Nearest well-formed box to a degenerate regressor output (saturated
// sigmoids give exact-zero extents, diverged runs give non-finite values).
// Keeps detached geometry paths total; non-finite state still surfaces
// through the loss value.
inline BBox sanitize_box(const BBox& b) {
  if (!std::isfinite(b.cx) || !std::isfinite(b.cy) || !std::isfinite(b.w) ||
      !std::isfinite(b.h))
    return {0.5, 0.5, 0.5, 0.5};
  BBox s = b;
  s.w = std::max(s.w, 1e-6);
  s.h = std::max(s.h, 1e-6);
  return s;
}

inline double intersection_area(const BBox& a, const BBox& b) {
  const double ix = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double iy = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  return ix * iy;
}

namespace detail {
// Corner form with the area taken from the derived corners rather than w*h,
// so intersection, union, and enclosure of a box with itself cancel exactly
// and iou(b, b) and giou(b, b) are 1.0 to the bit.
struct CornerBox {
  double x1, x2, y1, y2, area;
};

inline CornerBox corner_form(const BBox& b) {
  CornerBox c{b.x1(), b.x2(), b.y1(), b.y2(), 0.0};
  c.area = (c.x2 - c.x1) * (c.y2 - c.y1);
  return c;
}

inline double corner_intersection(const CornerBox& a, const CornerBox& b) {
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  return ix * iy;
}
}  // namespace detail

inline double iou(const BBox& a, const BBox& b) {
  detail::require_extents(a, "iou");
  detail::require_extents(b, "iou");
  const detail::CornerBox ca = detail::corner_form(a), cb = detail::corner_form(b);
  const double inter = detail::corner_intersection(ca, cb);
  const double uni = ca.area + cb.area - inter;
  return inter / uni;
}

// IoU minus the fraction of the tight enclosure not covered by the union.
inline double giou(const BBox& a, const BBox& b) {
  detail::require_extents(a, "giou");
  detail::require_extents(b, "giou");
  const detail::CornerBox ca = detail::corner_form(a), cb = detail::corner_form(b);
  const double inter = detail::corner_intersection(ca, cb);
  const double uni = ca.area + cb.area - inter;
  const double ex = std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1);
  const double ey = std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1);
  const double enc = ex * ey;
  return inter / uni - (enc - uni) / enc;
}

using RelationMetric = std::array<double, 5>;

inline constexpr double kRelationOffsetGuard = 1e-3;

// (log |dx|/w_i, log |dy|/h_i, log w_i/w_j, log h_i/h_j, giou), with the
// offset ratios floored at the guard so zero offsets stay finite. Normalizes
// by box i's extents, so the metric is deliberately asymmetric in (i, j).
inline RelationMetric relation_metric(const BBox& qi, const BBox& qj) {
  detail::require_extents(qi, "relation_metric");
  detail::require_extents(qj, "relation_metric");
  const double rx = std::max(std::fabs(qi.cx - qj.cx) / qi.w, kRelationOffsetGuard);
  const double ry = std::max(std::fabs(qi.cy - qj.cy) / qi.h, kRelationOffsetGuard);
  return {std::log(rx), std::log(ry), std::log(qi.w / qj.w), std::log(qi.h / qj.h),
          giou(qi, qj)};
}

using MultiScaleMetric = std::array<double, 15>;

// [R_l ; R_m ; R_g]: the raw metric, the log components damped by
// (1 + 2l/L) with giou untouched, and an all-ones global block.
inline MultiScaleMetric multi_scale_metric(const BBox& qi, const BBox& qj, int layer,
                                           int num_layers) {
  if (layer < 1 || layer > num_layers)
    throw std::invalid_argument("multi_scale_metric: layer " + std::to_string(layer) +
                                " outside 1.." + std::to_string(num_layers));
  const RelationMetric r = relation_metric(qi, qj);
  const double damp = 1.0 + 2.0 * static_cast<double>(layer) / num_layers;
  MultiScaleMetric out;
  for (int k = 0; k < 5; ++k) out[static_cast<std::size_t>(k)] = r[static_cast<std::size_t>(k)];
  for (int k = 0; k < 4; ++k) out[static_cast<std::size_t>(5 + k)] = r[static_cast<std::size_t>(k)] / damp;
  out[9] = r[4];
  for (int k = 10; k < 15; ++k) out[static_cast<std::size_t>(k)] = 1.0;
  return out;
}

struct EmbedConfig {
  double temperature = 10000.0;
  double scale = 100.0;
  int d_pos = 16;
};

// Each scalar v expands to d_pos values, alternating sin/cos of v*s over a
// geometric frequency ladder; blocks are concatenated in metric order.
inline void sinusoidal_embed_into(const double* metric, int n, const EmbedConfig& cfg,
                                  double* out) {
  const int half = cfg.d_pos / 2;
  for (int c = 0; c < n; ++c) {
    const double v = metric[c] * cfg.scale;
    double* block = out + static_cast<std::size_t>(c) * cfg.d_pos;
    for (int j = 0; j < half; ++j) {
      const double freq = std::pow(cfg.temperature, 2.0 * j / cfg.d_pos);
      block[2 * j] = std::sin(v / freq);
      block[2 * j + 1] = std::cos(v / freq);
    }
  }
}

inline std::vector<double> sinusoidal_embed(const std::vector<double>& metric,
                                            const EmbedConfig& cfg = {}) {
  std::vector<double> out(metric.size() * static_cast<std::size_t>(cfg.d_pos));
  sinusoidal_embed_into(metric.data(), static_cast<int>(metric.size()), cfg, out.data());
  return out;
}

template <std::size_t N>
std::vector<double> sinusoidal_embed(const std::array<double, N>& metric,
                                     const EmbedConfig& cfg = {}) {
  std::vector<double> out(N * static_cast<std::size_t>(cfg.d_pos));
  sinusoidal_embed_into(metric.data(), static_cast<int>(N), cfg, out.data());
  return out;
}

}  // namespace detlab
