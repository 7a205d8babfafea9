#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "disco/error.hpp"
#include "disco/image.hpp"
#include "disco/rng.hpp"
#include "disco/scenegraph.hpp"
#include "disco/tensor.hpp"

namespace disco {

inline const std::vector<std::string>& shape_categories() {
  static const std::vector<std::string> v{"circle", "square", "triangle"};
  return v;
}

inline const std::vector<std::string>& shape_colors() {
  static const std::vector<std::string> v{"red", "green", "blue"};
  return v;
}

inline const std::vector<std::string>& shape_predicates() {
  static const std::vector<std::string> v{"left of", "above", "inside", "same color as", "touching"};
  return v;
}

inline Vocabulary shapes_vocabulary() {
  return Vocabulary{shape_categories(), shape_predicates(), shape_colors()};
}

struct GenConfig {
  int min_objects = 1;
  int max_objects = 4;
  double relation_density = 0.4; // per unordered node pair
  double min_size = 0.25;        // box side, normalized
  double max_size = 0.5;
  int image_size = 16;
  int attempts_per_seed = 2000;
  int max_reseeds = 20;
};

inline nlohmann::json gen_config_to_json(const GenConfig& c) {
  return {{"min_objects", c.min_objects}, {"max_objects", c.max_objects},
          {"relation_density", c.relation_density}, {"min_size", c.min_size},
          {"max_size", c.max_size}, {"image_size", c.image_size},
          {"attempts_per_seed", c.attempts_per_seed}, {"max_reseeds", c.max_reseeds}};
}

inline GenConfig gen_config_from_json(const nlohmann::json& j) {
  GenConfig c;
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.relation_density = j.value("relation_density", c.relation_density);
  c.min_size = j.value("min_size", c.min_size);
  c.max_size = j.value("max_size", c.max_size);
  c.image_size = j.value("image_size", c.image_size);
  c.attempts_per_seed = j.value("attempts_per_seed", c.attempts_per_seed);
  c.max_reseeds = j.value("max_reseeds", c.max_reseeds);
  return c;
}

struct SceneObject {
  std::string category;
  std::string color;
  BoundingBox box;
};

struct SceneRelation {
  std::string predicate;
  int subject = 0;
  int object = 0;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::vector<SceneRelation> relations;
};

struct RenderedScene {
  SceneSpec spec;
  SceneGraph graph;
  Tensor image;
};

// ----------------------------------------------------------------------------
// relation predicates over geometry

inline double center_x(const BoundingBox& b) { return b.x + b.w / 2; }
inline double center_y(const BoundingBox& b) { return b.y + b.h / 2; }

inline bool strictly_inside(const BoundingBox& a, const BoundingBox& b) {
  return a.x > b.x && a.y > b.y && a.x + a.w < b.x + b.w && a.y + a.h < b.y + b.h;
}

// per-axis gaps; 0 when the projections overlap
inline double box_separation(const BoundingBox& a, const BoundingBox& b) {
  double dx = std::max({0.0, b.x - (a.x + a.w), a.x - (b.x + b.w)});
  double dy = std::max({0.0, b.y - (a.y + a.h), a.y - (b.y + b.h)});
  return std::sqrt(dx * dx + dy * dy);
}

// touching = boundaries within one pixel, neither contains the other
inline bool boxes_touching(const BoundingBox& a, const BoundingBox& b, int image_size) {
  if (strictly_inside(a, b) || strictly_inside(b, a)) return false;
  return box_separation(a, b) <= 1.0 / image_size + 1e-12;
}

inline bool relation_holds(const SceneRelation& r, const SceneSpec& spec, int image_size) {
  const auto& s = spec.objects[std::size_t(r.subject)];
  const auto& o = spec.objects[std::size_t(r.object)];
  if (r.predicate == "left of") return center_x(s.box) < center_x(o.box);
  if (r.predicate == "above") return center_y(s.box) < center_y(o.box);
  if (r.predicate == "inside") return strictly_inside(s.box, o.box);
  if (r.predicate == "touching") return boxes_touching(s.box, o.box, image_size);
  if (r.predicate == "same color as") return s.color == o.color;
  fail(errc::vocab, "unknown relation predicate \"" + r.predicate + "\"");
}

// ----------------------------------------------------------------------------
// rendering (no anti-aliasing; bit-exact by construction)

namespace synth_detail {

inline void shape_rgb(const std::string& color, double rgb[3]) {
  if (color == "red") {
    rgb[0] = 1;
    rgb[1] = 0;
    rgb[2] = 0;
  } else if (color == "green") {
    rgb[0] = 0;
    rgb[1] = 1;
    rgb[2] = 0;
  } else if (color == "blue") {
    rgb[0] = 0;
    rgb[1] = 0;
    rgb[2] = 1;
  } else {
    fail(errc::vocab, "unknown color \"" + color + "\"");
  }
}

inline bool point_in_shape(const std::string& category, const BoundingBox& b, double px, double py,
                           double pixel) {
  if (category == "square") return px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h;
  if (category == "circle") {
    double nx = (px - center_x(b)) / (b.w / 2);
    double ny = (py - center_y(b)) / (b.h / 2);
    return nx * nx + ny * ny <= 1.0;
  }
  if (category == "triangle") { // apex up; half-width floored at just over
    if (py < b.y || py >= b.y + b.h) return false; // half a pixel so every row
    double t = (py - b.y + pixel) / (b.h + pixel); // of the box rasterizes
    double half = std::max((b.w / 2) * t, 0.55 * pixel);
    return px >= center_x(b) - half && px <= center_x(b) + half;
  }
  fail(errc::vocab, "unknown category \"" + category + "\"");
}

// paint order shared with the sampler's mask rasterization: larger first,
// ties resolved by node index, so later (smaller / higher-index) wins
inline std::vector<int> paint_order(const std::vector<BoundingBox>& boxes) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    double aa = boxes[std::size_t(a)].w * boxes[std::size_t(a)].h;
    double ab = boxes[std::size_t(b)].w * boxes[std::size_t(b)].h;
    if (aa != ab) return aa > ab;
    return a < b;
  });
  return order;
}

} // namespace synth_detail

inline Tensor render(const SceneSpec& spec, int image_size = 16) {
  Tensor img = Tensor::full({image_size, image_size, 3}, 0.5);
  std::vector<BoundingBox> boxes;
  for (const auto& o : spec.objects) boxes.push_back(o.box);
  for (int idx : synth_detail::paint_order(boxes)) {
    const auto& o = spec.objects[std::size_t(idx)];
    double rgb[3];
    synth_detail::shape_rgb(o.color, rgb);
    for (int r = 0; r < image_size; ++r)
      for (int c = 0; c < image_size; ++c) {
        double px = (c + 0.5) / image_size, py = (r + 0.5) / image_size;
        if (synth_detail::point_in_shape(o.category, o.box, px, py, 1.0 / image_size)) {
          double* p = img.ptr() + (std::size_t(r) * image_size + c) * 3;
          p[0] = rgb[0];
          p[1] = rgb[1];
          p[2] = rgb[2];
        }
      }
  }
  return img;
}

// ----------------------------------------------------------------------------
// blob oracle

struct Blob {
  std::string color;
  BoundingBox box;
  int area = 0;
};

inline double box_iou(const BoundingBox& a, const BoundingBox& b) {
  double x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  double x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
  double inter = std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0);
  double uni = a.w * a.h + b.w * b.h - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

// Nearest-palette labeling followed by 4-connected components; components
// smaller than min_area are treated as speckle and dropped.
inline std::vector<Blob> detect_blobs(const Tensor& img, int min_area = 2) {
  if (img.rank() != 3 || img.dim(2) != 3) fail(errc::shape, "detect_blobs: want (H,W,3)");
  int h = img.dim(0), w = img.dim(1);
  const double palette[4][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0.5, 0.5, 0.5}};
  std::vector<int> label(std::size_t(h) * w, 3);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double* p = img.ptr() + (std::size_t(r) * w + c) * 3;
      double best = 1e18;
      int bi = 3;
      for (int k = 0; k < 4; ++k) {
        double d = 0;
        for (int ch = 0; ch < 3; ++ch) d += (p[ch] - palette[k][ch]) * (p[ch] - palette[k][ch]);
        if (d < best) {
          best = d;
          bi = k;
        }
      }
      label[std::size_t(r) * w + c] = bi;
    }

  std::vector<Blob> out;
  std::vector<char> seen(std::size_t(h) * w, 0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      std::size_t i0 = std::size_t(r) * w + c;
      if (seen[i0] || label[i0] == 3) continue;
      int lab = label[i0];
      int minr = r, maxr = r, minc = c, maxc = c, area = 0;
      std::deque<std::pair<int, int>> q{{r, c}};
      seen[i0] = 1;
      while (!q.empty()) {
        auto [cr, cc] = q.front();
        q.pop_front();
        ++area;
        minr = std::min(minr, cr);
        maxr = std::max(maxr, cr);
        minc = std::min(minc, cc);
        maxc = std::max(maxc, cc);
        const int dr[4] = {1, -1, 0, 0}, dc[4] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          int nr = cr + dr[k], nc = cc + dc[k];
          if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
          std::size_t ni = std::size_t(nr) * w + nc;
          if (!seen[ni] && label[ni] == lab) {
            seen[ni] = 1;
            q.push_back({nr, nc});
          }
        }
      }
      if (area < min_area) continue;
      Blob b;
      b.color = shape_colors()[std::size_t(lab)];
      b.box = BoundingBox{double(minc) / w, double(minr) / h, double(maxc - minc + 1) / w,
                          double(maxr - minr + 1) / h};
      b.area = area;
      out.push_back(std::move(b));
    }
  return out;
}

// ----------------------------------------------------------------------------
// oracle metrics over a sampled batch

struct EvalMetrics {
  double layout_iou = 0;
  double attr_acc = 0;
  double count_acc = 0;
};

inline std::string node_color(const SgNode& n) {
  for (const auto& a : n.attributes)
    for (const auto& c : shape_colors())
      if (a == c) return a;
  return "";
}

// greedy unique best-IoU matching between conditioned objects and blobs
inline std::vector<int> match_blobs(const std::vector<BoundingBox>& objs, const std::vector<Blob>& blobs) {
  struct Cand {
    double iou;
    int obj, blob;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < objs.size(); ++i)
    for (std::size_t b = 0; b < blobs.size(); ++b) {
      double v = box_iou(objs[i], blobs[b].box);
      if (v > 0) cands.push_back({v, int(i), int(b)});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.iou > b.iou; });
  std::vector<int> assign(objs.size(), -1);
  std::vector<char> used(blobs.size(), 0);
  for (const auto& c : cands)
    if (assign[std::size_t(c.obj)] < 0 && !used[std::size_t(c.blob)]) {
      assign[std::size_t(c.obj)] = c.blob;
      used[std::size_t(c.blob)] = 1;
    }
  return assign;
}

inline EvalMetrics eval_metrics(const std::vector<Tensor>& samples, const std::vector<SceneGraph>& graphs,
                                int min_area = 2) {
  if (samples.size() != graphs.size()) fail(errc::shape, "eval_metrics: sample/graph count mismatch");
  double iou_sum = 0;
  std::int64_t iou_n = 0;
  std::int64_t attr_ok = 0, attr_n = 0;
  std::int64_t count_ok = 0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    auto blobs = detect_blobs(samples[s], min_area);
    std::vector<BoundingBox> objs;
    for (const auto& n : graphs[s].nodes) {
      if (!n.bbox) fail(errc::constraint, "eval_metrics: conditioned graph lacks boxes");
      objs.push_back(*n.bbox);
    }
    auto assign = match_blobs(objs, blobs);
    for (std::size_t i = 0; i < objs.size(); ++i) {
      double v = assign[i] >= 0 ? box_iou(objs[i], blobs[std::size_t(assign[i])].box) : 0.0;
      iou_sum += v;
      ++iou_n;
      std::string want = node_color(graphs[s].nodes[i]);
      if (!want.empty() && assign[i] >= 0) {
        ++attr_n;
        if (blobs[std::size_t(assign[i])].color == want) ++attr_ok;
      }
    }
    if (blobs.size() == objs.size()) ++count_ok;
  }
  EvalMetrics m;
  m.layout_iou = iou_n ? iou_sum / double(iou_n) : 0.0;
  m.attr_acc = attr_n ? double(attr_ok) / double(attr_n) : 0.0;
  m.count_acc = samples.empty() ? 0.0 : double(count_ok) / double(samples.size());
  return m;
}

// ----------------------------------------------------------------------------
// scene generation

namespace synth_detail {

struct Dsu {
  std::vector<int> parent;
  explicit Dsu(int n) : parent(std::size_t(n)) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) { return parent[std::size_t(x)] == x ? x : parent[std::size_t(x)] = find(parent[std::size_t(x)]); }
  void unite(int a, int b) { parent[std::size_t(find(a))] = find(b); }
};

struct RelationPlan {
  std::vector<SceneRelation> relations;
  std::vector<std::pair<int, int>> distinct_color;   // pairs that must differ
  std::vector<int> color_group;                      // per node, dsu root
  std::vector<int> place_parent;                     // -1 or index of placement anchor
  std::vector<std::string> place_kind;               // "inside" / "touching" / ""
};

inline bool creates_cycle(const std::vector<int>& parent, int child, int anchor) {
  for (int cur = anchor; cur >= 0; cur = parent[std::size_t(cur)])
    if (cur == child) return true;
  return false;
}

inline RelationPlan plan_relations(int n, const GenConfig& cfg, Rng& rng) {
  RelationPlan plan;
  plan.place_parent.assign(std::size_t(n), -1);
  plan.place_kind.assign(std::size_t(n), "");
  Dsu dsu(n);
  std::vector<std::pair<int, int>> distinct;

  auto groups_equal = [&](int a, int b) { return dsu.find(a) == dsu.find(b); };
  auto distinct_conflict = [&](int a, int b) {
    for (auto [x, y] : distinct)
      if ((groups_equal(x, a) && groups_equal(y, b)) || (groups_equal(x, b) && groups_equal(y, a)))
        return true;
    return false;
  };

  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      if (rng.uniform() >= cfg.relation_density) continue;
      int type = int(rng.uniform_int(0, int(shape_predicates().size()) - 1));
      bool flip = rng.uniform() < 0.5;
      int s = flip ? j : i, o = flip ? i : j;
      const std::string& pred = shape_predicates()[std::size_t(type)];
      if (pred == "same color as") {
        if (distinct_conflict(s, o)) continue;
        dsu.unite(s, o);
      } else if (pred == "inside" || pred == "touching") {
        if (plan.place_parent[std::size_t(s)] >= 0) continue;     // one anchor per subject
        if (creates_cycle(plan.place_parent, s, o)) continue;
        if (groups_equal(s, o)) continue;                          // need distinct colors
        plan.place_parent[std::size_t(s)] = o;
        plan.place_kind[std::size_t(s)] = pred;
        distinct.push_back({s, o});
      }
      plan.relations.push_back(SceneRelation{pred, s, o});
    }

  plan.color_group.resize(std::size_t(n));
  for (int i = 0; i < n; ++i) plan.color_group[std::size_t(i)] = dsu.find(i);
  // drop same-color relations that later became contradictory (none by
  // construction, but keep the check cheap and explicit)
  plan.distinct_color = std::move(distinct);
  return plan;
}

// color each same-color group so that distinct-constrained groups differ
inline bool assign_colors(const RelationPlan& plan, int n, Rng& rng, std::vector<std::string>& colors) {
  colors.assign(std::size_t(n), "");
  std::vector<int> group_color(std::size_t(n), -1);
  for (int i = 0; i < n; ++i) {
    int g = plan.color_group[std::size_t(i)];
    if (group_color[std::size_t(g)] >= 0) continue;
    bool banned[3] = {false, false, false};
    for (auto [a, b] : plan.distinct_color) {
      int ga = plan.color_group[std::size_t(a)], gb = plan.color_group[std::size_t(b)];
      if (ga == g && group_color[std::size_t(gb)] >= 0) banned[group_color[std::size_t(gb)]] = true;
      if (gb == g && group_color[std::size_t(ga)] >= 0) banned[group_color[std::size_t(ga)]] = true;
    }
    int pick = int(rng.uniform_int(0, 2));
    for (int k = 0; k < 3 && banned[pick]; ++k) pick = (pick + 1) % 3;
    if (banned[pick]) return false;
    group_color[std::size_t(g)] = pick;
  }
  for (int i = 0; i < n; ++i)
    colors[std::size_t(i)] = shape_colors()[std::size_t(group_color[std::size_t(plan.color_group[std::size_t(i)])])];
  return true;
}

inline std::vector<int> placement_order(const RelationPlan& plan, int n) {
  std::vector<int> order;
  std::vector<char> placed(std::size_t(n), 0);
  while (int(order.size()) < n)
    for (int i = 0; i < n; ++i) {
      if (placed[std::size_t(i)]) continue;
      int p = plan.place_parent[std::size_t(i)];
      if (p < 0 || placed[std::size_t(p)]) {
        order.push_back(i);
        placed[std::size_t(i)] = 1;
      }
    }
  return order;
}

} // namespace synth_detail

// Deterministic scene sampler: relations are drawn first, then geometry is
// rejection-sampled (with constructive placement for inside/touching) until
// every sampled predicate holds. Exhausting the retry budget is an error.
inline RenderedScene generate_scene(std::uint64_t seed, const GenConfig& cfg = {}) {
  const double px = 1.0 / cfg.image_size;
  for (int reseed = 0; reseed < cfg.max_reseeds; ++reseed) {
    Rng rng = Rng(seed).split("scene").split(std::uint64_t(reseed));
    int n = int(rng.uniform_int(cfg.min_objects, cfg.max_objects));
    auto plan = synth_detail::plan_relations(n, cfg, rng);

    std::vector<std::string> cats(static_cast<std::size_t>(n));
    for (auto& c : cats) c = shape_categories()[std::size_t(rng.uniform_int(0, 2))];
    // anything can hide inside a square's annulus without splitting it; the
    // same is not true of circles or triangles, so containers are squares
    for (int i = 0; i < n; ++i)
      if (plan.place_kind[std::size_t(i)] == "inside") cats[std::size_t(plan.place_parent[std::size_t(i)])] = "square";

    std::vector<std::string> colors;
    if (!synth_detail::assign_colors(plan, n, rng, colors)) continue;

    auto order = synth_detail::placement_order(plan, n);

    for (int attempt = 0; attempt < cfg.attempts_per_seed; ++attempt) {
      SceneSpec spec;
      spec.objects.resize(std::size_t(n));
      for (int i = 0; i < n; ++i) {
        spec.objects[std::size_t(i)].category = cats[std::size_t(i)];
        spec.objects[std::size_t(i)].color = colors[std::size_t(i)];
      }
      spec.relations = plan.relations;

      std::vector<char> placed(std::size_t(n), 0);
      bool ok = true;
      // boxes snap to the pixel grid so a rendered object's tight pixel
      // bounding box reproduces its spec box exactly
      auto snap = [&](BoundingBox b) {
        auto q = [&](double v) { return std::round(v * cfg.image_size) / cfg.image_size; };
        return BoundingBox{q(b.x), q(b.y), std::max(px, q(b.w)), std::max(px, q(b.h))};
      };
      for (int i : order) {
        auto& box = spec.objects[std::size_t(i)].box;
        int parent = plan.place_parent[std::size_t(i)];
        bool found = false;
        for (int t = 0; t < 40 && !found; ++t) {
          if (parent >= 0 && plan.place_kind[std::size_t(i)] == "inside") {
            const auto& pb = spec.objects[std::size_t(parent)].box;
            double margin = 1.5 * px;
            double maxw = pb.w - 2 * margin, maxh = pb.h - 2 * margin;
            if (maxw < 3 * px || maxh < 3 * px) break;
            box.w = rng.uniform(3 * px, maxw);
            box.h = rng.uniform(3 * px, maxh);
            box.x = pb.x + margin + rng.uniform() * (pb.w - 2 * margin - box.w);
            box.y = pb.y + margin + rng.uniform() * (pb.h - 2 * margin - box.h);
          } else if (parent >= 0 && plan.place_kind[std::size_t(i)] == "touching") {
            const auto& pb = spec.objects[std::size_t(parent)].box;
            box.w = rng.uniform(cfg.min_size, cfg.max_size);
            box.h = rng.uniform(cfg.min_size, cfg.max_size);
            int side = int(rng.uniform_int(0, 3));
            double gap = px; // one-pixel gap keeps same-colored blobs apart
            if (side == 0) box.x = pb.x + pb.w + gap;
            if (side == 1) box.x = pb.x - gap - box.w;
            if (side == 2) box.y = pb.y + pb.h + gap;
            if (side == 3) box.y = pb.y - gap - box.h;
            if (side < 2)
              box.y = std::min(std::max(0.0, pb.y + rng.uniform(-box.h / 2, pb.h - box.h / 2)), 1.0 - box.h);
            else
              box.x = std::min(std::max(0.0, pb.x + rng.uniform(-box.w / 2, pb.w - box.w / 2)), 1.0 - box.w);
          } else {
            box.w = rng.uniform(cfg.min_size, cfg.max_size);
            box.h = rng.uniform(cfg.min_size, cfg.max_size);
            box.x = rng.uniform() * (1.0 - box.w);
            box.y = rng.uniform() * (1.0 - box.h);
          }
          box = snap(box);
          if (!box.valid()) continue;
          if (parent >= 0 && plan.place_kind[std::size_t(i)] == "inside" &&
              !strictly_inside(box, spec.objects[std::size_t(parent)].box))
            continue;
          // stay apart from everything we are not deliberately close to
          bool clash = false;
          for (int j : order) {
            if (j == i || !placed[std::size_t(j)]) continue;
            bool related = (parent == j) || (plan.place_parent[std::size_t(j)] == i);
            if (related) continue;
            if (box_separation(box, spec.objects[std::size_t(j)].box) < px - 1e-9) clash = true;
          }
          if (!clash) found = true;
        }
        if (!found) {
          ok = false;
          break;
        }
        placed[std::size_t(i)] = 1;
      }
      if (!ok) continue;

      bool all_hold = true;
      for (const auto& r : spec.relations)
        all_hold &= relation_holds(r, spec, cfg.image_size);
      if (!all_hold) continue;

      RenderedScene out;
      out.spec = spec;
      for (int i = 0; i < n; ++i) {
        SgNode node;
        node.id = "n" + std::to_string(i);
        node.category = spec.objects[std::size_t(i)].category;
        node.attributes = {spec.objects[std::size_t(i)].color};
        node.bbox = spec.objects[std::size_t(i)].box;
        out.graph.nodes.push_back(std::move(node));
      }
      for (const auto& r : spec.relations)
        out.graph.edges.push_back(
            SgEdge{out.graph.nodes[std::size_t(r.subject)].id, r.predicate,
                   out.graph.nodes[std::size_t(r.object)].id});
      out.image = render(spec, cfg.image_size);
      return out;
    }
  }
  fail(errc::internal, "generate_scene: retry budget exhausted for seed " + std::to_string(seed));
}

// ----------------------------------------------------------------------------
// dataset directory layout: manifest.json + scenes/NNNN.json + images/NNNN.ppm

namespace synth_detail {

inline std::string scene_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", i);
  return buf;
}

} // namespace synth_detail

inline void write_dataset(const std::filesystem::path& dir, int num, std::uint64_t seed,
                          const GenConfig& cfg = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "scenes");
  fs::create_directories(dir / "images");
  Vocabulary vocab = shapes_vocabulary();
  for (int i = 0; i < num; ++i) {
    RenderedScene scene = generate_scene(Rng(seed).split(std::uint64_t(i)).seed, cfg);
    validate_scene_graph(scene.graph, vocab);
    write_file_atomic(dir / "scenes" / (synth_detail::scene_name(i) + ".json"),
                      serialize_scene_graph(scene.graph));
    save_ppm(scene.image, dir / "images" / (synth_detail::scene_name(i) + ".ppm"));
  }
  nlohmann::ordered_json manifest;
  manifest["categories"] = vocab.categories;
  manifest["predicates"] = vocab.predicates;
  manifest["attributes"] = vocab.attributes;
  manifest["n_max"] = kNMax;
  manifest["image_size"] = cfg.image_size;
  manifest["num_scenes"] = num;
  manifest["seed"] = seed;
  manifest["generator"] = gen_config_to_json(cfg);
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct Dataset {
  Vocabulary vocab;
  GenConfig config;
  std::vector<SceneGraph> graphs;
  std::vector<Tensor> images;
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "manifest.json")) fail(errc::io, "dataset: no manifest at " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  Dataset ds;
  ds.vocab = vocabulary_from_json(manifest);
  ds.config = gen_config_from_json(manifest.value("generator", nlohmann::json::object()));
  int num = manifest.at("num_scenes").get<int>();
  for (int i = 0; i < num; ++i) {
    auto name = synth_detail::scene_name(i);
    ds.graphs.push_back(parse_scene_graph(read_file(dir / "scenes" / (name + ".json")), ds.vocab));
    ds.images.push_back(load_ppm(dir / "images" / (name + ".ppm")));
  }
  return ds;
}

} // namespace disco
