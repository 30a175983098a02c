#pragma once

// Monte-Carlo area oracles, independent of the analytic geometry code.
// Points are thrown uniformly over the tight enclosure of the pair; the
// intersection/union/uncovered fractions give a GIoU estimate directly.

#include <cstdint>

#include "detlab/geometry.hpp"
#include "detlab/rng.hpp"

namespace mcoracle {

inline bool contains(const detlab::BBox& b, double x, double y) {
  return x >= b.x1() && x <= b.x2() && y >= b.y1() && y <= b.y2();
}

inline double giou_mc(const detlab::BBox& a, const detlab::BBox& b, std::int64_t samples,
                      detlab::Rng& rng) {
  const double x1 = std::min(a.x1(), b.x1());
  const double x2 = std::max(a.x2(), b.x2());
  const double y1 = std::min(a.y1(), b.y1());
  const double y2 = std::max(a.y2(), b.y2());
  std::int64_t in_both = 0, in_either = 0;
  for (std::int64_t k = 0; k < samples; ++k) {
    const double x = rng.uniform(x1, x2);
    const double y = rng.uniform(y1, y2);
    const bool ia = contains(a, x, y);
    const bool ib = contains(b, x, y);
    in_both += (ia && ib);
    in_either += (ia || ib);
  }
  const double frac_neither =
      static_cast<double>(samples - in_either) / static_cast<double>(samples);
  return static_cast<double>(in_both) / static_cast<double>(in_either) - frac_neither;
}

// Fraction of a grid cell covered by the box, by throwing points in the cell.
inline double coverage_mc(const detlab::BBox& box, double cx1, double cy1, double cx2,
                          double cy2, std::int64_t samples, detlab::Rng& rng) {
  std::int64_t hit = 0;
  for (std::int64_t k = 0; k < samples; ++k) {
    const double x = rng.uniform(cx1, cx2);
    const double y = rng.uniform(cy1, cy2);
    hit += contains(box, x, y);
  }
  return static_cast<double>(hit) / static_cast<double>(samples);
}

inline detlab::BBox random_box(detlab::Rng& rng) {
  detlab::BBox b;
  b.cx = rng.uniform(0.1, 0.9);
  b.cy = rng.uniform(0.1, 0.9);
  b.w = rng.uniform(0.05, 0.6);
  b.h = rng.uniform(0.05, 0.6);
  return b;
}

}  // namespace mcoracle
