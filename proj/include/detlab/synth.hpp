#pragma once

// Synthetic detection scenes, the rasterized occupancy grid that stands in
// for an encoder memory, and a COCO-style interpolated-AP evaluator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "detlab/geometry.hpp"
#include "detlab/matching.hpp"
#include "detlab/rng.hpp"
#include "detlab/tensor.hpp"

namespace detlab {

struct SceneObject {
  int cls = 0;
  BBox box;
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<SceneObject> objects;
  bool relaxed = false;  // separation constraint was loosened to place all objects
};

struct SceneConfig {
  int num_classes = 3;
  int n_max = 8;
  double min_separation = 0.05;  // pairwise center distance floor
  double min_extent = 0.08;
  double max_extent = 0.45;
  double margin = 0.01;  // clearance to the unit-square border
  int attempts_per_object = 100;
};

// Deterministic scene draw: object count uniform in [1, n_max], classes
// uniform, boxes rejection-sampled inside the unit square. If the separation
// constraint cannot be met within the attempt budget the whole scene is
// redrawn with the constraint halved (and the scene flagged), so generation
// always terminates.
inline Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg = {}) {
  detail::require(cfg.num_classes >= 1, "generate_scene: need at least one class");
  detail::require(cfg.n_max >= 1, "generate_scene: n_max must be positive");
  detail::require(cfg.min_extent > 0.0 && cfg.max_extent >= cfg.min_extent &&
                      cfg.max_extent + 2.0 * cfg.margin < 1.0,
                  "generate_scene: box extent range does not fit the unit square");

  Rng rng(Rng::mix(seed, 0x5ce9e5u));
  Scene scene;
  scene.seed = seed;
  const int count = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.n_max)));

  double separation = cfg.min_separation;
  while (true) {
    scene.objects.clear();
    bool ok = true;
    for (int i = 0; i < count && ok; ++i) {
      bool placed = false;
      for (int attempt = 0; attempt < cfg.attempts_per_object; ++attempt) {
        SceneObject obj;
        obj.cls = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.num_classes)));
        obj.box.w = rng.uniform(cfg.min_extent, cfg.max_extent);
        obj.box.h = rng.uniform(cfg.min_extent, cfg.max_extent);
        obj.box.cx = rng.uniform(cfg.margin + obj.box.w / 2.0, 1.0 - cfg.margin - obj.box.w / 2.0);
        obj.box.cy = rng.uniform(cfg.margin + obj.box.h / 2.0, 1.0 - cfg.margin - obj.box.h / 2.0);
        bool separated = true;
        for (const auto& other : scene.objects) {
          const double dx = obj.box.cx - other.box.cx;
          const double dy = obj.box.cy - other.box.cy;
          if (std::sqrt(dx * dx + dy * dy) < separation) {
            separated = false;
            break;
          }
        }
        if (separated) {
          scene.objects.push_back(obj);
          placed = true;
          break;
        }
      }
      if (!placed) ok = false;
    }
    if (ok) return scene;
    separation *= 0.5;
    scene.relaxed = true;
  }
}

// ---------------------------------------------------------------------------
// Rasterized memory

struct MemoryGrid {
  int grid = 0;
  Tensor raw;  // G^2 x (num_classes + 1): per-class coverage + background
  Tensor pos;  // G^2 x d_model sinusoidal cell-center encoding
};

// Sinusoidal encoding of the G x G cell centers, d_model/2 dims per axis.
inline Tensor grid_pos_encoding(int grid, int d_model) {
  detail::require(d_model % 4 == 0,
                  "grid_pos_encoding: d_model must be divisible by 4, got " +
                      std::to_string(d_model));
  EmbedConfig cfg;
  cfg.scale = 2.0 * std::acos(-1.0);
  cfg.d_pos = d_model / 2;
  Tensor pos = Tensor::zeros({grid * grid, d_model});
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const int token = gy * grid + gx;
      const std::array<double, 2> center{(gx + 0.5) / grid, (gy + 0.5) / grid};
      sinusoidal_embed_into(center.data(), 2, cfg,
                            pos.data.data() + static_cast<std::size_t>(token) * d_model);
    }
  }
  return pos;
}

namespace detail {

// Area of a union of axis-aligned rectangles {x1, y1, x2, y2} by coordinate
// compression; counts of overlapping boxes never double-count.
inline double rect_union_area(const std::vector<std::array<double, 4>>& rects) {
  if (rects.empty()) return 0.0;
  std::vector<double> xs, ys;
  for (const auto& r : rects) {
    xs.push_back(r[0]);
    xs.push_back(r[2]);
    ys.push_back(r[1]);
    ys.push_back(r[3]);
  }
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  std::sort(ys.begin(), ys.end());
  ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
    for (std::size_t j = 0; j + 1 < ys.size(); ++j) {
      const double mx = 0.5 * (xs[i] + xs[i + 1]);
      const double my = 0.5 * (ys[j] + ys[j + 1]);
      for (const auto& r : rects) {
        if (mx > r[0] && mx < r[2] && my > r[1] && my < r[3]) {
          area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
          break;
        }
      }
    }
  }
  return area;
}

}  // namespace detail

// Exact union coverage per cell: channel c is the fraction of the cell
// covered by objects of class c, the background channel the uncovered
// fraction. Overlaps within and across classes never double-count.
inline MemoryGrid rasterize_memory(const Scene& scene, int grid, int num_classes,
                                   int d_model) {
  detail::require(grid >= 2, "rasterize_memory: grid side must be at least 2, got " +
                                 std::to_string(grid));
  MemoryGrid out;
  out.grid = grid;
  out.raw = Tensor::zeros({grid * grid, num_classes + 1});
  const double cell = 1.0 / grid;
  const double cell_area = cell * cell;
  std::vector<std::array<double, 4>> clipped, all_clipped;
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const int token = gy * grid + gx;
      const double rx1 = gx * cell, rx2 = (gx + 1) * cell;
      const double ry1 = gy * cell, ry2 = (gy + 1) * cell;
      all_clipped.clear();
      for (int c = 0; c < num_classes; ++c) {
        clipped.clear();
        for (const auto& obj : scene.objects) {
          if (obj.cls != c) continue;
          const double x1 = std::max(rx1, obj.box.x1()), x2 = std::min(rx2, obj.box.x2());
          const double y1 = std::max(ry1, obj.box.y1()), y2 = std::min(ry2, obj.box.y2());
          if (x1 < x2 && y1 < y2) {
            clipped.push_back({x1, y1, x2, y2});
            all_clipped.push_back({x1, y1, x2, y2});
          }
        }
        out.raw.at(token, c) =
            std::clamp(detail::rect_union_area(clipped) / cell_area, 0.0, 1.0);
      }
      out.raw.at(token, num_classes) = std::clamp(
          1.0 - detail::rect_union_area(all_clipped) / cell_area, 0.0, 1.0);
    }
  }
  out.pos = grid_pos_encoding(grid, d_model);
  return out;
}

// ---------------------------------------------------------------------------
// Detections and average precision

struct Detection {
  int cls = 0;
  double confidence = 0.0;
  BBox box;
};

// Per-query detections from one layer's predictions: class and confidence are
// the argmax/max over non-background softmax probabilities. Queries at or
// below the confidence floor are dropped.
inline std::vector<Detection> extract_detections(const Tensor& class_logits,
                                                 const std::vector<BBox>& boxes,
                                                 int num_classes,
                                                 double confidence_floor = 0.0) {
  detail::require(class_logits.shape.size() == 2 &&
                      class_logits.shape[1] == num_classes + 1 &&
                      class_logits.shape[0] == static_cast<int>(boxes.size()),
                  "extract_detections: logits " + shape_str(class_logits.shape) +
                      " do not match " + std::to_string(boxes.size()) + " boxes");
  std::vector<Detection> dets;
  for (int i = 0; i < class_logits.shape[0]; ++i) {
    auto probs = softmax_row_values(
        class_logits.data.data() + static_cast<std::size_t>(i) * (num_classes + 1),
        num_classes + 1);
    int best = 0;
    for (int c = 1; c < num_classes; ++c)
      if (probs[static_cast<std::size_t>(c)] > probs[static_cast<std::size_t>(best)]) best = c;
    const double conf = probs[static_cast<std::size_t>(best)];
    if (conf > confidence_floor)
      dets.push_back({best, conf, boxes[static_cast<std::size_t>(i)]});
  }
  return dets;
}

inline constexpr std::array<double, 10> kApThresholds{0.50, 0.55, 0.60, 0.65, 0.70,
                                                      0.75, 0.80, 0.85, 0.90, 0.95};

struct ApReport {
  bool has_gt = false;  // false when the split holds no objects; APs undefined
  std::array<double, 10> per_threshold{};
  double ap50 = 0.0;
  double ap75 = 0.0;
  double mean = 0.0;
};

namespace detail {

// AP for one class at one IoU threshold over the whole split: greedy
// confidence-ordered matching, then 101-point interpolated PR integration.
inline double class_ap(const std::vector<std::vector<Detection>>& dets,
                       const std::vector<Scene>& scenes, int cls, double thr) {
  struct Ref {
    double conf;
    std::size_t scene;
    std::size_t index;
  };
  std::vector<Ref> order;
  for (std::size_t s = 0; s < dets.size(); ++s)
    for (std::size_t i = 0; i < dets[s].size(); ++i)
      if (dets[s][i].cls == cls) order.push_back({dets[s][i].confidence, s, i});
  std::sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.index < b.index;
  });

  std::vector<std::vector<const BBox*>> gt(scenes.size());
  std::size_t total_gt = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (const auto& obj : scenes[s].objects)
      if (obj.cls == cls) {
        gt[s].push_back(&obj.box);
        ++total_gt;
      }
  if (total_gt == 0) return -1.0;  // caller skips classes with no ground truth

  std::vector<std::vector<bool>> used(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) used[s].assign(gt[s].size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const Ref& ref : order) {
    const BBox& pb = dets[ref.scene][ref.index].box;
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gt[ref.scene].size(); ++g) {
      if (used[ref.scene][g]) continue;
      const double v = iou(pb, *gt[ref.scene][g]);
      if (v >= thr && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[ref.scene][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  double ap = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    double best_p = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i)
      if (recall[i] >= r) best_p = std::max(best_p, precision[i]);
    ap += best_p;
  }
  return ap / 101.0;
}

}  // namespace detail

// Split-level AP at the ten COCO thresholds. Classes without ground truth are
// skipped; a split with no objects at all reports has_gt = false.
inline ApReport evaluate_ap(const std::vector<std::vector<Detection>>& dets,
                            const std::vector<Scene>& scenes, int num_classes) {
  detail::require(dets.size() == scenes.size(),
                  "evaluate_ap: " + std::to_string(dets.size()) + " detection lists vs " +
                      std::to_string(scenes.size()) + " scenes");
  ApReport rep;
  for (std::size_t ti = 0; ti < kApThresholds.size(); ++ti) {
    double sum = 0.0;
    int classes_with_gt = 0;
    for (int c = 0; c < num_classes; ++c) {
      const double ap = detail::class_ap(dets, scenes, c, kApThresholds[ti]);
      if (ap >= 0.0) {
        sum += ap;
        ++classes_with_gt;
      }
    }
    if (classes_with_gt > 0) {
      rep.has_gt = true;
      rep.per_threshold[ti] = sum / classes_with_gt;
    }
  }
  if (rep.has_gt) {
    rep.ap50 = rep.per_threshold[0];
    rep.ap75 = rep.per_threshold[5];
    double m = 0.0;
    for (double v : rep.per_threshold) m += v;
    rep.mean = m / static_cast<double>(rep.per_threshold.size());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Scene serialization: one JSON object per line

inline nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : scene.objects)
    objs.push_back({{"class", o.cls},
                    {"cx", o.box.cx},
                    {"cy", o.box.cy},
                    {"w", o.box.w},
                    {"h", o.box.h}});
  nlohmann::json j{{"seed", scene.seed}, {"objects", objs}};
  if (scene.relaxed) j["relaxed"] = true;
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& o : j.at("objects")) {
    SceneObject obj;
    obj.cls = o.at("class").get<int>();
    obj.box = {o.at("cx").get<double>(), o.at("cy").get<double>(),
               o.at("w").get<double>(), o.at("h").get<double>()};
    s.objects.push_back(obj);
  }
  s.relaxed = j.value("relaxed", false);
  return s;
}

inline void write_scenes(const std::string& path, const std::vector<Scene>& scenes) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_scenes: cannot open " + path);
  for (const auto& s : scenes) out << scene_to_json(s).dump() << "\n";
}

inline std::vector<Scene> read_scenes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_scenes: cannot open " + path);
  std::vector<Scene> scenes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    scenes.push_back(scene_from_json(nlohmann::json::parse(line)));
  }
  return scenes;
}

// Ground-truth view used by the set loss.
inline GtList scene_gt(const Scene& scene) {
  GtList gt;
  gt.reserve(scene.objects.size());
  for (const auto& o : scene.objects) gt.emplace_back(o.cls, o.box);
  return gt;
}

}  // namespace detlab
