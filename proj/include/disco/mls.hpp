#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "disco/cmadiff.hpp"
#include "disco/scenegraph.hpp"
#include "disco/slvae.hpp"

namespace disco {

// binary pixel mask over the sampling canvas
using PixelMask = std::vector<double>;

// Paint boxes by decreasing area (ties by node index), later paint wins, so
// smaller objects occlude larger ones. Cells under no box form the background
// mask. The result is an exact partition of the canvas.
struct NonOverlapMasks {
  std::vector<PixelMask> object; // one per box
  PixelMask background;
  int size = 0;
};

inline NonOverlapMasks rasterize_nonoverlap(const std::vector<BoundingBox>& boxes, int size = kImageSize) {
  NonOverlapMasks out;
  out.size = size;
  out.object.assign(boxes.size(), PixelMask(std::size_t(size) * size, 0.0));
  out.background.assign(std::size_t(size) * size, 0.0);

  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    double aa = boxes[std::size_t(a)].w * boxes[std::size_t(a)].h;
    double ab = boxes[std::size_t(b)].w * boxes[std::size_t(b)].h;
    if (aa != ab) return aa > ab;
    return a < b;
  });

  std::vector<int> winner(std::size_t(size) * size, -1);
  for (int idx : order) {
    const auto& b = boxes[std::size_t(idx)];
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c) {
        double cx = (c + 0.5) / size, cy = (r + 0.5) / size;
        if (cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h)
          winner[std::size_t(r) * size + c] = idx;
      }
  }
  for (std::size_t p = 0; p < winner.size(); ++p) {
    if (winner[p] >= 0)
      out.object[std::size_t(winner[p])][p] = 1.0;
    else
      out.background[p] = 1.0;
  }
  return out;
}

// one SL-VAE draw: a layout, its semantics, and the derived masks
struct View {
  std::vector<BoundingBox> boxes;
  Tensor semantics; // (N, D_s)
  NonOverlapMasks masks;
};

struct ViewSet {
  std::vector<View> views;
};

// persisted seeds; together with the scene graph they reproduce a run exactly
struct MlsState {
  std::uint64_t scene_hash = 0;
  int n_views = 5;
  std::vector<std::uint64_t> per_layer_seeds;   // one per object plus background (last)
  std::vector<std::uint64_t> view_latent_seeds; // one per view
};

inline MlsState make_mls_state(const SceneGraph& g, int n_views, std::uint64_t master_seed) {
  MlsState s;
  s.scene_hash = scene_hash(g);
  s.n_views = n_views;
  Rng root(master_seed);
  for (std::size_t i = 0; i <= g.nodes.size(); ++i)
    s.per_layer_seeds.push_back(root.split("layer").split(std::uint64_t(i)).seed);
  for (int n = 0; n < n_views; ++n) s.view_latent_seeds.push_back(root.split("view").split(std::uint64_t(n)).seed);
  return s;
}

inline nlohmann::ordered_json mls_state_to_json(const MlsState& s) {
  return {{"scene_hash", s.scene_hash},
          {"n_views", s.n_views},
          {"per_layer_seeds", s.per_layer_seeds},
          {"view_latent_seeds", s.view_latent_seeds}};
}

inline MlsState mls_state_from_json(const nlohmann::json& j) {
  MlsState s;
  s.scene_hash = j.at("scene_hash").get<std::uint64_t>();
  s.n_views = j.at("n_views").get<int>();
  s.per_layer_seeds = j.at("per_layer_seeds").get<std::vector<std::uint64_t>>();
  s.view_latent_seeds = j.at("view_latent_seeds").get<std::vector<std::uint64_t>>();
  return s;
}

// Per-(view, node) latent streams: node index keys the stream, so edits that
// append nodes leave every existing node's draw untouched.
inline Tensor view_latent(std::uint64_t view_seed, int n_nodes) {
  std::vector<double> u;
  u.reserve(std::size_t(n_nodes) * kLatentDim);
  for (int i = 0; i < n_nodes; ++i) {
    Rng row = Rng(view_seed).split("u").split(std::uint64_t(i));
    for (int d = 0; d < kLatentDim; ++d) u.push_back(row.normal());
  }
  return Tensor({n_nodes, kLatentDim}, std::move(u));
}

inline View draw_view(const DiscoModel& model, const SceneGraph& g, std::uint64_t view_seed) {
  NoGrad ng;
  Tensor u = view_latent(view_seed, int(g.nodes.size()));
  View v;
  v.semantics = model.vae.decode_semantics(model.embedder, g, u);
  int boxed = 0;
  for (const auto& n : g.nodes) boxed += n.bbox.has_value();
  if (boxed == int(g.nodes.size())) {
    for (const auto& n : g.nodes) v.boxes.push_back(*n.bbox); // user-given layout
  } else {
    v.boxes = model.vae.decode_layout(model.embedder, g, u).boxes();
  }
  v.masks = rasterize_nonoverlap(v.boxes, kImageSize);
  return v;
}

inline ViewSet draw_views(const DiscoModel& model, const SceneGraph& g, const MlsState& state) {
  ViewSet out;
  for (std::uint64_t seed : state.view_latent_seeds) out.views.push_back(draw_view(model, g, seed));
  return out;
}

// ----------------------------------------------------------------------------
// layered sampling core (model-agnostic; a test double can stand in for the
// denoiser)

// z_n = sum_i m_i (.) layer_i + m_bg (.) layer_bg; channels share each mask cell
inline std::vector<double> compose_view(const std::vector<std::vector<double>>& layers,
                                        const NonOverlapMasks& masks, int channels = kImageChannels) {
  std::size_t pixels = masks.background.size();
  std::vector<double> z(pixels * std::size_t(channels), 0.0);
  auto apply = [&](const PixelMask& m, const std::vector<double>& layer) {
    for (std::size_t p = 0; p < pixels; ++p)
      for (int c = 0; c < channels; ++c) z[p * std::size_t(channels) + std::size_t(c)] += m[p] * layer[p * std::size_t(channels) + std::size_t(c)];
  };
  for (std::size_t i = 0; i < masks.object.size(); ++i) apply(masks.object[i], layers[i]);
  apply(masks.background, layers.back());
  return z;
}

// noise estimate for one object (obj >= 0) or the unconditional pass (obj < 0)
using CondEpsFn = std::function<std::vector<double>(const std::vector<double>& z, int obj, int t)>;

// Per-view composed noise estimate: each object's mask crops its own
// conditioned estimate, the background crops the unconditional one. The
// guidance scale folds in per object; s = 1 reduces to the bare conditioned
// calls.
inline std::vector<double> mls_eps(const CondEpsFn& eps_fn, const std::vector<double>& z_n,
                                   const NonOverlapMasks& masks, int t, double cfg_scale = 1.0,
                                   int channels = kImageChannels) {
  std::size_t pixels = masks.background.size();
  std::vector<double> out(z_n.size(), 0.0);
  bool bg_used = false;
  for (double m : masks.background) bg_used |= m != 0.0;
  std::vector<double> uncond;
  if (bg_used || cfg_scale != 1.0) uncond = eps_fn(z_n, -1, t);

  for (std::size_t i = 0; i < masks.object.size(); ++i) {
    std::vector<double> cond = eps_fn(z_n, int(i), t);
    for (std::size_t p = 0; p < pixels; ++p) {
      double m = masks.object[i][p];
      if (m == 0.0) continue;
      for (int c = 0; c < channels; ++c) {
        std::size_t k = p * std::size_t(channels) + std::size_t(c);
        double eff = cfg_scale == 1.0 ? cond[k] : uncond[k] + cfg_scale * (cond[k] - uncond[k]);
        out[k] += m * eff;
      }
    }
  }
  if (bg_used)
    for (std::size_t p = 0; p < pixels; ++p) {
      double m = masks.background[p];
      if (m == 0.0) continue;
      for (int c = 0; c < channels; ++c) {
        std::size_t k = p * std::size_t(channels) + std::size_t(c);
        out[k] += m * uncond[k];
      }
    }
  return out;
}

// masked weighted average of the denoised views back into each layer; cells a
// layer never owned keep their previous value
inline void aggregate_layers(std::vector<std::vector<double>>& layers,
                             const std::vector<const NonOverlapMasks*>& view_masks,
                             const std::vector<std::vector<double>>& denoised_views,
                             int channels = kImageChannels) {
  std::size_t pixels = view_masks.empty() ? 0 : view_masks[0]->background.size();
  std::size_t n_layers = layers.size();
  for (std::size_t i = 0; i < n_layers; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) {
      double den = 0;
      for (std::size_t n = 0; n < view_masks.size(); ++n) {
        const PixelMask& m = i + 1 == n_layers ? view_masks[n]->background : view_masks[n]->object[i];
        den += m[p];
      }
      if (den == 0.0) continue;
      for (int c = 0; c < channels; ++c) {
        std::size_t k = p * std::size_t(channels) + std::size_t(c);
        double num = 0;
        for (std::size_t n = 0; n < view_masks.size(); ++n) {
          const PixelMask& m = i + 1 == n_layers ? view_masks[n]->background : view_masks[n]->object[i];
          num += m[p] * denoised_views[n][k];
        }
        layers[i][k] = num / den;
      }
    }
  }
}

// builds the per-view noise estimator; swapping the factory swaps the
// denoiser (test doubles drive the composition identities)
using EpsFnFactory = std::function<CondEpsFn(const SceneGraph& g, const View& view)>;

inline EpsFnFactory model_eps_factory(const DiscoModel& model) {
  return [&model](const SceneGraph& g, const View& view) -> CondEpsFn {
    return [&model, &g, &view](const std::vector<double>& z, int obj, int t) {
      Tensor zt({kImageSize, kImageSize, kImageChannels}, z);
      if (obj < 0) return *denoise_eps(model, zt, t, Cond{}, /*dropout=*/true).data;
      Cond cond = model.make_single_object_cond(g.nodes[std::size_t(obj)],
                                                slice(view.semantics, 0, obj, 1),
                                                view.boxes[std::size_t(obj)]);
      return *denoise_eps(model, zt, t, cond).data;
    };
  };
}

inline Tensor mls_sample_core(const NoiseSchedule& schedule, const SceneGraph& g, const MlsState& state,
                              const ViewSet& views, const SampleOpts& opts, const EpsFnFactory& factory) {
  NoGrad ng;
  if (state.per_layer_seeds.size() != g.nodes.size() + 1)
    fail(errc::constraint, "mls: state holds " + std::to_string(state.per_layer_seeds.size()) +
                               " layer seeds for " + std::to_string(g.nodes.size()) + " objects");
  if (int(views.views.size()) != state.n_views || views.views.empty())
    fail(errc::constraint, "mls: view count mismatch");
  std::vector<std::vector<double>> layers;
  for (std::uint64_t seed : state.per_layer_seeds) layers.push_back(*sampler_init_noise(seed).data);

  auto taus = schedule_stride(schedule.t_steps, opts.steps);
  std::vector<const NonOverlapMasks*> view_masks;
  for (const auto& v : views.views) view_masks.push_back(&v.masks);

  for (std::size_t i = 0; i < taus.size(); ++i) {
    int t = taus[i];
    int t_prev = i + 1 < taus.size() ? taus[i + 1] : 0;
    std::vector<std::vector<double>> denoised(views.views.size());
    for (std::size_t n = 0; n < views.views.size(); ++n) {
      const View& view = views.views[n];
      std::vector<double> z_n = compose_view(layers, view.masks);
      std::vector<double> eps_n = mls_eps(factory(g, view), z_n, view.masks, t, opts.cfg_scale);
      Tensor noise = sampler_step_noise(state.view_latent_seeds[n], t);
      reverse_update(z_n, eps_n, schedule, t, t_prev, opts.rule, &noise);
      denoised[n] = std::move(z_n);
    }
    aggregate_layers(layers, view_masks, denoised);
  }
  return to_unit_image(compose_view(layers, views.views[0].masks));
}

inline Tensor mls_sample_with_views(const DiscoModel& model, const SceneGraph& g, const MlsState& state,
                                    const ViewSet& views, const SampleOpts& opts = {}) {
  return mls_sample_core(model.schedule, g, state, views, opts, model_eps_factory(model));
}

inline Tensor mls_sample(const DiscoModel& model, const SceneGraph& g, const MlsState& state,
                         const SampleOpts& opts = {}) {
  return mls_sample_with_views(model, g, state, draw_views(model, g, state), opts);
}

// ----------------------------------------------------------------------------
// consistency-preserving edits

struct EditResult {
  Tensor before;
  Tensor after;
  SceneGraph edited;
  MlsState state_after;
};

// appended layers derive their seed from the background seed so additions
// never disturb existing layers
inline std::uint64_t derived_layer_seed(const MlsState& state, int new_index) {
  return Rng(state.per_layer_seeds.back()).split("added-layer").split(std::uint64_t(new_index)).seed;
}

inline MlsState state_after_edit(const MlsState& before, const SceneGraph& g_before,
                                 const SceneGraph& g_after) {
  MlsState after = before;
  after.scene_hash = scene_hash(g_after);
  std::uint64_t bg_seed = before.per_layer_seeds.back();
  after.per_layer_seeds.pop_back();
  for (std::size_t i = g_before.nodes.size(); i < g_after.nodes.size(); ++i)
    after.per_layer_seeds.push_back(derived_layer_seed(before, int(i)));
  after.per_layer_seeds.push_back(bg_seed);
  return after;
}

// Re-sample after a graph edit, reusing every unedited layer seed and every
// unedited (layout, semantics) row so the untouched scene content is
// reproduced. A custom factory substitutes the denoiser (oracle tests).
inline EditResult edit_and_resample(const DiscoModel& model, const SceneGraph& g, const Edit& edit,
                                    const MlsState& state, const SampleOpts& opts = {},
                                    const EpsFnFactory* factory = nullptr) {
  if (state.scene_hash != scene_hash(g))
    fail(errc::constraint, "edit: stored sampler state does not match this scene graph");
  EpsFnFactory fac = factory ? *factory : model_eps_factory(model);
  EditResult out;
  ViewSet views_before = draw_views(model, g, state);
  out.before = mls_sample_core(model.schedule, g, state, views_before, opts, fac);

  out.edited = apply_edit(g, edit, model.embedder.vocab);
  if (out.edited.nodes.size() < g.nodes.size())
    fail(errc::constraint, "edit: stored layer alignment cannot survive node removal");
  out.state_after = state_after_edit(state, g, out.edited);

  ViewSet views_after = draw_views(model, out.edited, out.state_after);
  // pre-existing nodes keep their original per-view layout and semantics rows
  for (std::size_t n = 0; n < views_after.views.size(); ++n) {
    View& va = views_after.views[n];
    const View& vb = views_before.views[n];
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      va.boxes[i] = vb.boxes[i];
      int cols = kSemanticsDim;
      for (int c = 0; c < cols; ++c)
        (*va.semantics.data)[i * std::size_t(cols) + std::size_t(c)] =
            (*vb.semantics.data)[i * std::size_t(cols) + std::size_t(c)];
    }
    va.masks = rasterize_nonoverlap(va.boxes, kImageSize);
  }
  out.after = mls_sample_core(model.schedule, out.edited, out.state_after, views_after, opts, fac);
  return out;
}

} // namespace disco
