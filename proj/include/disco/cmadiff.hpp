#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "disco/embedder.hpp"
#include "disco/nn.hpp"
#include "disco/scenegraph.hpp"
#include "disco/slvae.hpp"
#include "disco/tensor.hpp"

namespace disco {

constexpr int kImageSize = 16;
constexpr int kImageChannels = 3;
constexpr int kPatch = 2;
constexpr int kGrid = kImageSize / kPatch;         // 8
constexpr int kNumVisualTokens = kGrid * kGrid;    // N_v = 64
constexpr int kVisualDim = 64;                     // D_v
constexpr int kHeads = 4;
constexpr int kFourierBands = 8;                   // frequencies 2^0 .. 2^7
constexpr int kFourierDim = 4 * 2 * kFourierBands; // 64
constexpr int kObjTokenDim = 64;                   // D_c after the two fusion MLPs
constexpr int kTimesteps = 200;                    // T
constexpr int kFfHidden = 128;

// ----------------------------------------------------------------------------
// forward-process schedule

struct NoiseSchedule {
  int t_steps = kTimesteps;
  std::vector<double> beta;      // beta[t], t in 1..T (index 0 unused)
  std::vector<double> alpha_bar; // alpha_bar[t]; alpha_bar[0] = 1

  explicit NoiseSchedule(int steps = kTimesteps) : t_steps(steps) {
    beta.assign(std::size_t(steps) + 1, 0.0);
    alpha_bar.assign(std::size_t(steps) + 1, 1.0);
    const double b0 = 1e-4, b1 = 0.02;
    for (int t = 1; t <= steps; ++t) {
      beta[std::size_t(t)] = steps == 1 ? b0 : b0 + (b1 - b0) * double(t - 1) / double(steps - 1);
      alpha_bar[std::size_t(t)] = alpha_bar[std::size_t(t) - 1] * (1.0 - beta[std::size_t(t)]);
    }
  }

  void check_step(int t) const {
    if (t < 1 || t > t_steps)
      fail(errc::constraint, "noise schedule: step " + std::to_string(t) + " outside [1," +
                                 std::to_string(t_steps) + "]");
  }
};

// closed-form marginal z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps
inline Tensor add_noise(const NoiseSchedule& sched, const Tensor& z0, int t, const Tensor& eps) {
  sched.check_step(t);
  if (z0.shape != eps.shape) fail(errc::shape, "add_noise: z0 " + shape_str(z0.shape) + " vs eps " + shape_str(eps.shape));
  double ab = sched.alpha_bar[std::size_t(t)];
  return add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

// ----------------------------------------------------------------------------
// object-level fusion tokenizer

inline std::vector<double> fourier_features(const BoundingBox& b) {
  std::vector<double> out;
  out.reserve(kFourierDim);
  const double coords[4] = {b.x, b.y, b.w, b.h};
  for (double v : coords)
    for (int k = 0; k < kFourierBands; ++k) {
      double arg = std::ldexp(1.0, k) * std::numbers::pi * v; // 2^k * pi * v
      out.push_back(std::sin(arg));
      out.push_back(std::cos(arg));
    }
  return out;
}

struct ObjectTokenSet {
  Tensor tokens; // (N_max, D_c)
  int valid_count = 0;
  std::vector<BoundingBox> boxes; // valid slots only
};

struct FusionTokenizer {
  Mlp obj_mlp;   // (D_s + fourier) 128 -> 96 -> 48
  Mlp attr_mlp;  // 48 -> 48 -> 16
  Tensor c_null; // (1, 128) learnable raw padding embedding

  FusionTokenizer() = default;

  explicit FusionTokenizer(Rng& rng)
      : obj_mlp(kSemanticsDim + kFourierDim, 96, 48, rng), attr_mlp(kAttrDim, 48, 16, rng) {
    c_null = Tensor::randn({1, kSemanticsDim + kFourierDim}, rng, 0.1, true);
  }

  void params(ParamList& p, const std::string& prefix) const {
    obj_mlp.params(p, prefix + ".obj_mlp");
    attr_mlp.params(p, prefix + ".attr_mlp");
    p.add(prefix + ".c_null", c_null);
  }

  // semantics and boxes cover the valid objects; attrs covers all N_max slots
  ObjectTokenSet fuse(const Tensor& semantics, const std::vector<BoundingBox>& boxes, const Tensor& attrs,
                      int n_max = kNMax) const {
    int n = int(boxes.size());
    if (semantics.dim(0) != n) fail(errc::shape, "fuse_tokens: semantics rows != boxes");
    if (attrs.dim(0) != n_max) fail(errc::shape, "fuse_tokens: attrs must cover all slots");
    std::vector<Tensor> raw_rows;
    for (int i = 0; i < n_max; ++i) {
      if (i < n) {
        Tensor fourier({1, kFourierDim}, fourier_features(boxes[std::size_t(i)]));
        raw_rows.push_back(concat({slice(semantics, 0, i, 1), fourier}, 1));
      } else {
        raw_rows.push_back(c_null);
      }
    }
    Tensor raw = concat(raw_rows, 0); // (N_max, 128)
    ObjectTokenSet out;
    out.tokens = concat({obj_mlp(raw), attr_mlp(attrs)}, 1);
    out.valid_count = n;
    out.boxes = boxes;
    return out;
  }
};

// ----------------------------------------------------------------------------
// compositional attention mask

using ObjectSet = std::vector<int>; // ascending object indices

// cell centers against half-open boxes; a token may sit in several objects,
// tokens in none form the implicit background group
inline std::vector<ObjectSet> token_membership(const std::vector<BoundingBox>& boxes, int grid_h = kGrid,
                                               int grid_w = kGrid) {
  std::vector<ObjectSet> out(std::size_t(grid_h) * grid_w);
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c) {
      double cx = (c + 0.5) / grid_w, cy = (r + 0.5) / grid_h;
      auto& set = out[std::size_t(r) * grid_w + c];
      for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& b = boxes[i];
        if (cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h) set.push_back(int(i));
      }
    }
  return out;
}

inline bool sets_intersect(const ObjectSet& a, const ObjectSet& b) {
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) return true;
    a[i] < b[j] ? ++i : ++j;
  }
  return false;
}

// Additive {0, -inf} mask over [visual tokens ++ object slots]. Entries are 0
// exactly when the two indices share an object, both sit in the background,
// or i == j; padded slots see only themselves.
inline Tensor build_cma_mask(const std::vector<ObjectSet>& membership, int n_objects, int n_max = kNMax) {
  const int n_v = int(membership.size());
  const int total = n_v + n_max;
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<double> m(std::size_t(total) * total, neg_inf);

  auto set_of = [&](int idx) -> const ObjectSet* {
    if (idx < n_v) return &membership[std::size_t(idx)];
    static const ObjectSet empty;
    return &empty; // object slots handled separately
  };

  for (int i = 0; i < total; ++i)
    for (int j = 0; j < total; ++j) {
      bool allowed = i == j;
      if (!allowed) {
        bool i_vis = i < n_v, j_vis = j < n_v;
        int i_obj = i - n_v, j_obj = j - n_v;
        bool i_pad = !i_vis && i_obj >= n_objects;
        bool j_pad = !j_vis && j_obj >= n_objects;
        if (!i_pad && !j_pad) {
          const ObjectSet* si = set_of(i);
          const ObjectSet* sj = set_of(j);
          ObjectSet oi, oj;
          if (!i_vis) si = &(oi = {i_obj});
          if (!j_vis) sj = &(oj = {j_obj});
          if (sets_intersect(*si, *sj)) allowed = true;
          if (i_vis && j_vis && si->empty() && sj->empty()) allowed = true; // background group
        }
      }
      if (allowed) m[std::size_t(i) * total + j] = 0.0;
    }
  return Tensor({total, total}, std::move(m));
}

// ----------------------------------------------------------------------------
// attention

// post-softmax probabilities per (tag, head), captured for mask assertions
using ProbeLog = std::vector<std::pair<std::string, Tensor>>;

struct MultiheadAttention {
  Linear wq, wk, wv, wo;
  int heads = kHeads;
  int dim = kVisualDim;

  MultiheadAttention() = default;

  MultiheadAttention(int d_q, int d_kv, int d, int n_heads, Rng& rng)
      : wq(d_q, d, rng), wk(d_kv, d, rng), wv(d_kv, d, rng), wo(d, d, rng), heads(n_heads), dim(d) {}

  Tensor forward(const Tensor& q_in, const Tensor& kv_in, const Tensor* mask, ProbeLog* probes,
                 const std::string& tag) const {
    Tensor q = wq(q_in), k = wk(kv_in), v = wv(kv_in);
    int dh = dim / heads;
    double inv_sqrt = 1.0 / std::sqrt(double(dh));
    Tensor zero_mask;
    if (!mask) zero_mask = Tensor::zeros({q.dim(0), k.dim(0)});
    std::vector<Tensor> head_out;
    for (int h = 0; h < heads; ++h) {
      Tensor qh = slice(q, 1, h * dh, dh);
      Tensor kh = slice(k, 1, h * dh, dh);
      Tensor vh = slice(v, 1, h * dh, dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
      Tensor probs = softmax_masked(scores, mask ? *mask : zero_mask);
      if (probes) probes->emplace_back(tag + ".h" + std::to_string(h), probs.detach());
      head_out.push_back(matmul(probs, vh));
    }
    return wo(concat(head_out, 1));
  }

  void params(ParamList& p, const std::string& prefix) const {
    wq.params(p, prefix + ".wq");
    wk.params(p, prefix + ".wk");
    wv.params(p, prefix + ".wv");
    wo.params(p, prefix + ".wo");
  }
};

// masked self-attention over [visual ++ object] tokens, first N_v rows kept
// and added residually by the caller
inline Tensor cma_layer(const MultiheadAttention& attn, const Tensor& visual, const Tensor& objtokens,
                        const Tensor& mask, ProbeLog* probes = nullptr, const std::string& tag = "cma") {
  int n_v = visual.dim(0);
  int total = n_v + objtokens.dim(0);
  if (mask.shape != Shape{total, total})
    fail(errc::shape, "cma_layer: mask " + shape_str(mask.shape) + " for sequence length " + std::to_string(total));
  if (visual.dim(1) != objtokens.dim(1))
    fail(errc::shape, "cma_layer: token dims differ " + shape_str(visual.shape) + " vs " + shape_str(objtokens.shape));
  Tensor seq = concat({visual, objtokens}, 0);
  Tensor out = attn.forward(seq, seq, &mask, probes, tag);
  return slice(out, 0, 0, n_v);
}

// ----------------------------------------------------------------------------
// denoiser

struct LayerNormAffine {
  Tensor gamma; // (D)
  Tensor beta;  // (D)

  LayerNormAffine() = default;
  explicit LayerNormAffine(int d) : gamma(Tensor::full({d}, 1.0, true)), beta(Tensor::zeros({d}, true)) {}

  Tensor operator()(const Tensor& x) const { return add(mul(layer_norm(x), gamma), beta); }

  void params(ParamList& p, const std::string& prefix) const {
    p.add(prefix + ".gamma", gamma);
    p.add(prefix + ".beta", beta);
  }
};

// per-object denoiser conditioning: fused tokens, their CMA mask, and the
// pseudo-text rows for cross-attention
struct Cond {
  Tensor obj_tokens; // (N_max, D_c)
  Tensor mask;       // (N_v + N_max)^2
  Tensor text_ctx;   // (N_max, kTextDim)
};

struct DenoiserBlock {
  LayerNormAffine ln_sa, ln_cma, ln_cross, ln_ff;
  MultiheadAttention self_attn, cma_attn, cross_attn;
  Mlp obj_align; // D_c -> D_v, "dimensions aligned with the visual token"
  Mlp ff;

  DenoiserBlock() = default;

  explicit DenoiserBlock(Rng& rng)
      : ln_sa(kVisualDim), ln_cma(kVisualDim), ln_cross(kVisualDim), ln_ff(kVisualDim),
        self_attn(kVisualDim, kVisualDim, kVisualDim, kHeads, rng),
        cma_attn(kVisualDim, kVisualDim, kVisualDim, kHeads, rng),
        cross_attn(kVisualDim, kTextDim, kVisualDim, kHeads, rng),
        obj_align(kObjTokenDim, kVisualDim, kVisualDim, rng),
        ff(kVisualDim, kFfHidden, kVisualDim, rng) {}

  Tensor forward(Tensor v, const Cond& cond, ProbeLog* probes, const std::string& tag) const {
    v = add(v, self_attn.forward(ln_sa(v), ln_sa(v), nullptr, probes, tag + ".self"));
    Tensor aligned = obj_align(cond.obj_tokens);
    v = add(v, cma_layer(cma_attn, ln_cma(v), aligned, cond.mask, probes, tag + ".cma"));
    v = add(v, cross_attn.forward(ln_cross(v), cond.text_ctx, nullptr, probes, tag + ".cross"));
    v = add(v, ff(ln_ff(v)));
    return v;
  }

  void params(ParamList& p, const std::string& prefix) const {
    ln_sa.params(p, prefix + ".ln_sa");
    ln_cma.params(p, prefix + ".ln_cma");
    ln_cross.params(p, prefix + ".ln_cross");
    ln_ff.params(p, prefix + ".ln_ff");
    self_attn.params(p, prefix + ".self_attn");
    cma_attn.params(p, prefix + ".cma_attn");
    cross_attn.params(p, prefix + ".cross_attn");
    obj_align.params(p, prefix + ".obj_align");
    ff.params(p, prefix + ".ff");
  }
};

inline Tensor time_embedding(int t, int dim = kVisualDim) {
  std::vector<double> v(std::size_t(dim), 0.0);
  int half = dim / 2;
  for (int k = 0; k < half; ++k) {
    double freq = std::exp(-std::log(10000.0) * double(k) / double(half - 1));
    v[std::size_t(k)] = std::sin(t * freq);
    v[std::size_t(half + k)] = std::cos(t * freq);
  }
  return Tensor({1, dim}, std::move(v));
}

struct Denoiser {
  Linear patch_embed; // 12 -> D_v
  Tensor pos_embed;   // (N_v, D_v)
  Mlp time_mlp;       // D_v -> D_v -> D_v over the sinusoidal embedding
  std::vector<DenoiserBlock> blocks;
  LayerNormAffine ln_out;
  Linear unpatch;   // D_v -> 12, zero-initialized so eps_hat starts at 0
  Tensor null_text; // (1, kTextDim) learned null for cross-attention padding

  Denoiser() = default;

  explicit Denoiser(Rng& rng, int n_blocks = 2)
      : patch_embed(kPatch * kPatch * kImageChannels, kVisualDim, rng),
        pos_embed(Tensor::randn({kNumVisualTokens, kVisualDim}, rng, 0.02, true)),
        time_mlp(kVisualDim, kVisualDim, kVisualDim, rng),
        ln_out(kVisualDim),
        unpatch(Linear::zeroed(kVisualDim, kPatch * kPatch * kImageChannels)),
        null_text(Tensor::randn({1, kTextDim}, rng, 0.1, true)) {
    for (int b = 0; b < n_blocks; ++b) blocks.emplace_back(rng);
  }

  void params(ParamList& p, const std::string& prefix) const {
    patch_embed.params(p, prefix + ".patch_embed");
    p.add(prefix + ".pos_embed", pos_embed);
    time_mlp.params(p, prefix + ".time_mlp");
    for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].params(p, prefix + ".block" + std::to_string(b));
    ln_out.params(p, prefix + ".ln_out");
    unpatch.params(p, prefix + ".unpatch");
    p.add(prefix + ".null_text", null_text);
  }

  // (H, W, C) noised input -> predicted noise of the same shape
  Tensor forward(const Tensor& z_t, int t, const Cond& cond, ProbeLog* probes = nullptr) const {
    Tensor v = patch_embed(patchify(z_t, kPatch));
    v = add(v, pos_embed);
    v = add(v, time_mlp(time_embedding(t))); // broadcast over tokens
    for (std::size_t b = 0; b < blocks.size(); ++b)
      v = blocks[b].forward(v, cond, probes, "block" + std::to_string(b));
    return unpatchify(unpatch(ln_out(v)), kImageSize, kImageSize, kImageChannels, kPatch);
  }
};

// ----------------------------------------------------------------------------
// the full conditional model

struct DiscoModel {
  Embedder embedder;
  SlVae vae;
  FusionTokenizer fuser;
  Denoiser denoiser;
  NoiseSchedule schedule;

  DiscoModel() = default;

  DiscoModel(Vocabulary vocab, std::uint64_t seed, int t_steps = kTimesteps) : schedule(t_steps) {
    Rng root(seed);
    Rng r_emb = root.split("embedder");
    Rng r_vae = root.split("slvae");
    Rng r_fuse = root.split("fuser");
    Rng r_den = root.split("denoiser");
    embedder = Embedder(std::move(vocab), r_emb);
    vae = SlVae(r_vae);
    fuser = FusionTokenizer(r_fuse);
    denoiser = Denoiser(r_den);
  }

  ParamList params() const {
    ParamList p;
    embedder.params(p, "embedder");
    vae.params(p, "slvae");
    fuser.params(p, "fuser");
    denoiser.params(p, "denoiser");
    return p;
  }

  // conditioning for a graph with known layout and decoded semantics
  Cond make_cond(const SceneGraph& g, const Tensor& semantics, const std::vector<BoundingBox>& boxes) const {
    int n = int(g.nodes.size());
    if (int(boxes.size()) != n) fail(errc::shape, "make_cond: box count != node count");
    ObjectTokenSet tokens = fuser.fuse(semantics, boxes, embedder.embed_attributes(g));
    Tensor mask = build_cma_mask(token_membership(boxes), n);
    std::vector<Tensor> ctx_rows;
    for (int i = 0; i < kNMax; ++i)
      ctx_rows.push_back(i < n ? embedder.text.encode(g.nodes[std::size_t(i)].category) : denoiser.null_text);
    return Cond{tokens.tokens, mask, concat(ctx_rows, 0)};
  }

  // single-object conditioning for the layered sampler
  Cond make_single_object_cond(const SgNode& node, const Tensor& semantics_row,
                               const BoundingBox& box) const {
    SceneGraph g;
    g.nodes.push_back(node);
    return make_cond(g, semantics_row, {box});
  }

  // classifier-free null: every slot and every context row is the learned null
  Cond null_cond() const {
    Tensor sem = Tensor::zeros({0, kSemanticsDim});
    ObjectTokenSet tokens = fuser.fuse(sem, {}, embedder.embed_null_attributes(kNMax));
    Tensor mask = build_cma_mask(token_membership({}), 0);
    return Cond{tokens.tokens, mask, broadcast_to(denoiser.null_text, {kNMax, kTextDim})};
  }
};

// denoiser entry with classifier-free condition dropout
inline Tensor denoise_eps(const DiscoModel& model, const Tensor& z_t, int t, const Cond& cond,
                          bool dropout = false, ProbeLog* probes = nullptr) {
  model.schedule.check_step(t);
  return model.denoiser.forward(z_t, t, dropout ? model.null_cond() : cond, probes);
}

// per-element mean of ||eps - eps_hat||^2
inline Tensor diffusion_mse(const Tensor& eps, const Tensor& eps_hat) {
  return mean(square(sub(eps_hat, eps)));
}

struct LossWeights {
  double ldm = 1.0;
  double kl = 0.1;
  double layout = 1.0;
};

inline Tensor total_loss_combine(const Tensor& l_ldm, const Tensor& l_kl, const Tensor& l_layout,
                                 const LossWeights& w = {}) {
  return add(add(scale(l_ldm, w.ldm), scale(l_kl, w.kl)), scale(l_layout, w.layout));
}

struct LossParts {
  Tensor total, ldm, kl, layout;
};

// one training item end to end: union encoding, both decoders, tokenizer,
// denoiser; diffusion conditions on the ground-truth layout and the decoded
// semantics
inline LossParts total_loss_item(const DiscoModel& model, const Tensor& image, const SceneGraph& g,
                                 Rng& rng, const LossWeights& w = {}, double cond_dropout = 0.1) {
  Tensor nodes = model.embedder.embed_nodes(g, true);
  Tensor edges = model.embedder.embed_edges(g);
  auto triples = to_triples(g);
  GaussianLatent lat = model.vae.encode_union(nodes, edges, triples);
  Tensor l_kl = kl_loss(lat);

  Tensor u = sample_latent(lat, rng);
  LayoutSample layout = model.vae.decode_layout(model.embedder, g, u);
  std::vector<BoundingBox> gt_boxes;
  for (const auto& node : g.nodes) {
    if (!node.bbox) fail(errc::constraint, "total_loss: training graph lacks a bbox");
    gt_boxes.push_back(*node.bbox);
  }
  Tensor l_layout = layout_loss(layout.coords, boxes_to_tensor(gt_boxes));

  Tensor semantics = model.vae.decode_semantics(model.embedder, g, u);
  Cond cond = model.make_cond(g, semantics, gt_boxes);

  int t = int(rng.uniform_int(1, model.schedule.t_steps));
  Tensor z0 = shift(scale(image, 2.0), -1.0); // [0,1] -> [-1,1]
  Tensor eps = Tensor::randn(z0.shape, rng);
  Tensor z_t = add_noise(model.schedule, z0, t, eps);
  bool dropped = rng.uniform() < cond_dropout;
  Tensor eps_hat = denoise_eps(model, z_t, t, cond, dropped);
  Tensor l_ldm = diffusion_mse(eps, eps_hat);

  return LossParts{total_loss_combine(l_ldm, l_kl, l_layout, w), l_ldm, l_kl, l_layout};
}

// ----------------------------------------------------------------------------
// plain sampling

// eps_uncond + s * (eps_cond - eps_uncond); the endpoints return the single
// matching estimate exactly
inline Tensor guided_eps(const DiscoModel& model, const Tensor& z, int t, const Cond& cond, double s) {
  if (s == 1.0) return denoise_eps(model, z, t, cond);
  if (s == 0.0) return denoise_eps(model, z, t, cond, /*dropout=*/true);
  Tensor e_cond = denoise_eps(model, z, t, cond);
  Tensor e_uncond = denoise_eps(model, z, t, cond, /*dropout=*/true);
  return add(e_uncond, scale(sub(e_cond, e_uncond), s));
}

// descending t sequence: an even stride over [1, T], length <= steps
inline std::vector<int> schedule_stride(int t_steps, int steps) {
  steps = std::max(1, std::min(steps, t_steps));
  std::vector<int> taus;
  for (int i = steps - 1; i >= 0; --i) {
    int t = steps == 1 ? t_steps
                       : int(std::lround(1.0 + double(t_steps - 1) * double(i) / double(steps - 1)));
    if (taus.empty() || t < taus.back()) taus.push_back(t);
  }
  return taus;
}

enum class SamplerRule { deterministic, ancestral };

struct SampleOpts {
  int steps = 50;
  double cfg_scale = 7.5;
  SamplerRule rule = SamplerRule::deterministic;
};

inline Tensor noise_image_from(Rng rng) {
  return Tensor::randn({kImageSize, kImageSize, kImageChannels}, rng);
}

inline Tensor sampler_init_noise(std::uint64_t seed) { return noise_image_from(Rng(seed).split("init")); }

inline Tensor sampler_step_noise(std::uint64_t seed, int t) {
  return noise_image_from(Rng(seed).split("step").split(std::uint64_t(t)));
}

// One reverse update t -> t_prev. x0 is clamped to the data range and the
// effective noise direction recomputed from it. Ancestral variance follows
// the strided posterior; deterministic sets it to zero.
inline void reverse_update(std::vector<double>& z, const std::vector<double>& eps_hat,
                           const NoiseSchedule& sched, int t, int t_prev, SamplerRule rule,
                           const Tensor* step_noise) {
  double ab_t = sched.alpha_bar[std::size_t(t)];
  double ab_p = sched.alpha_bar[std::size_t(t_prev)];
  double sq_t = std::sqrt(ab_t), sq_1mt = std::sqrt(1.0 - ab_t);
  double sigma = 0.0;
  if (rule == SamplerRule::ancestral && t_prev > 0)
    sigma = std::sqrt((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p));
  double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
  for (std::size_t i = 0; i < z.size(); ++i) {
    double x0 = (z[i] - sq_1mt * eps_hat[i]) / sq_t;
    x0 = std::min(1.0, std::max(-1.0, x0));
    double eps_eff = (z[i] - sq_t * x0) / sq_1mt;
    z[i] = std::sqrt(ab_p) * x0 + dir * eps_eff;
    if (sigma > 0.0 && step_noise) z[i] += sigma * (*step_noise->data)[i];
  }
}

inline Tensor to_unit_image(const std::vector<double>& z) {
  std::vector<double> v(z.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::min(1.0, std::max(0.0, (z[i] + 1.0) / 2.0));
  return Tensor({kImageSize, kImageSize, kImageChannels}, std::move(v));
}

// full reverse process from pure noise under a fixed conditioning
inline Tensor sample_image(const DiscoModel& model, const Cond& cond, std::uint64_t seed,
                           const SampleOpts& opts = {}) {
  NoGrad ng;
  std::vector<double> z = *sampler_init_noise(seed).data;
  auto taus = schedule_stride(model.schedule.t_steps, opts.steps);
  for (std::size_t i = 0; i < taus.size(); ++i) {
    int t = taus[i];
    int t_prev = i + 1 < taus.size() ? taus[i + 1] : 0;
    Tensor zt({kImageSize, kImageSize, kImageChannels}, z);
    Tensor eps = guided_eps(model, zt, t, cond, opts.cfg_scale);
    Tensor noise = sampler_step_noise(seed, t);
    reverse_update(z, *eps.data, model.schedule, t, t_prev, opts.rule, &noise);
  }
  return to_unit_image(z);
}

// Inference-time conditioning from a graph alone: latents come from the
// prior; boxes are taken from the graph when present (all nodes) or decoded
// by the SL-VAE otherwise.
struct PreparedCond {
  Cond cond;
  std::vector<BoundingBox> boxes;
  Tensor semantics;
};

inline PreparedCond prepare_cond(const DiscoModel& model, const SceneGraph& g, Rng& rng) {
  int n = int(g.nodes.size());
  int with_boxes = 0;
  for (const auto& node : g.nodes) with_boxes += node.bbox.has_value();
  if (with_boxes != 0 && with_boxes != n)
    fail(errc::constraint, "prepare_cond: boxes must be given for all nodes or none");
  Tensor u = Tensor::randn({n, kLatentDim}, rng);
  Tensor semantics = model.vae.decode_semantics(model.embedder, g, u);
  std::vector<BoundingBox> boxes;
  if (with_boxes == n) {
    for (const auto& node : g.nodes) boxes.push_back(*node.bbox);
  } else {
    boxes = model.vae.decode_layout(model.embedder, g, u).boxes();
  }
  return PreparedCond{model.make_cond(g, semantics, boxes), boxes, semantics};
}

} // namespace disco
