#pragma once

#include <utility>
#include <vector>

#include "disco/embedder.hpp"
#include "disco/nn.hpp"
#include "disco/scenegraph.hpp"
#include "disco/tensor.hpp"

namespace disco {

constexpr int kLatentDim = 16;    // per-node Gaussian latent width
constexpr int kSemanticsDim = 64; // decoded per-object semantics width
constexpr int kGcnLayers = 2;
constexpr int kGcnHidden = 64;

// Mean-pools triple messages back onto nodes. messages holds one row per
// triple: the candidate (subject, edge, object) segments side by side. A node
// addressed by no triple falls back to its previous state, which is what lets
// isolated nodes keep updating.
struct TriplePool {
  Tensor node_inputs; // (N, d_node)
  Tensor edge_states; // (E, d_edge)
};

inline TriplePool pool_triples(const Tensor& messages, const Tensor& prev_nodes, const Tensor& prev_edges,
                               const std::vector<Triple>& triples, int d_node, int d_edge) {
  int n = prev_nodes.dim(0);
  TriplePool out;
  std::vector<Tensor> node_rows;
  for (int i = 0; i < n; ++i) {
    std::vector<Tensor> segments;
    for (std::size_t t = 0; t < triples.size(); ++t) {
      Tensor row = slice(messages, 0, int(t), 1);
      if (triples[t].subject == i) segments.push_back(slice(row, 1, 0, d_node));
      if (triples[t].object == i) segments.push_back(slice(row, 1, d_node + d_edge, d_node));
    }
    if (segments.empty()) {
      node_rows.push_back(slice(prev_nodes, 0, i, 1));
    } else {
      Tensor acc = segments[0];
      for (std::size_t k = 1; k < segments.size(); ++k) acc = add(acc, segments[k]);
      node_rows.push_back(scale(acc, 1.0 / double(segments.size())));
    }
  }
  out.node_inputs = concat(node_rows, 0);
  out.edge_states = triples.empty() ? prev_edges : slice(messages, 1, d_node, d_edge);
  return out;
}

struct TripletGcnLayer {
  Mlp g1;    // message: (d_n + d_e + d_n) -> 64 -> (d_n + d_e + d_n)
  Linear g2; // update: d_n -> d_n
  int d_node = 0;
  int d_edge = 0;

  TripletGcnLayer() = default;

  TripletGcnLayer(int dn, int de, Rng& rng)
      : g1(2 * dn + de, kGcnHidden, 2 * dn + de, rng), g2(dn, dn, rng), d_node(dn), d_edge(de) {}

  std::pair<Tensor, Tensor> forward(const Tensor& nodes, const Tensor& edges,
                                    const std::vector<Triple>& triples) const {
    TriplePool pooled;
    if (triples.empty()) {
      pooled.node_inputs = nodes;
      pooled.edge_states = edges;
    } else {
      std::vector<int> subj, obj;
      for (const auto& t : triples) {
        subj.push_back(t.subject);
        obj.push_back(t.object);
      }
      Tensor msg = g1(concat({rows(nodes, subj), edges, rows(nodes, obj)}, 1));
      pooled = pool_triples(msg, nodes, edges, triples, d_node, d_edge);
    }
    Tensor new_nodes = add(g2(pooled.node_inputs), nodes);
    Tensor new_edges = triples.empty() ? edges : add(pooled.edge_states, edges);
    return {new_nodes, new_edges};
  }

  void params(ParamList& p, const std::string& prefix) const {
    g1.params(p, prefix + ".g1");
    g2.params(p, prefix + ".g2");
  }
};

struct TripletGcn {
  std::vector<TripletGcnLayer> layers;

  TripletGcn() = default;

  TripletGcn(int dn, int de, int depth, Rng& rng) {
    for (int l = 0; l < depth; ++l) layers.emplace_back(dn, de, rng);
  }

  std::pair<Tensor, Tensor> forward(Tensor nodes, Tensor edges, const std::vector<Triple>& triples) const {
    for (const auto& layer : layers) std::tie(nodes, edges) = layer.forward(nodes, edges, triples);
    return {std::move(nodes), std::move(edges)};
  }

  void params(ParamList& p, const std::string& prefix) const {
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].params(p, prefix + ".l" + std::to_string(l));
  }
};

struct GaussianLatent {
  Tensor mu;        // (N, D_z)
  Tensor log_sigma; // (N, D_z)
};

// closed-form KL to the standard Gaussian prior, averaged over nodes
inline Tensor kl_loss(const GaussianLatent& lat) {
  int n = lat.mu.dim(0);
  Tensor sigma2 = exp(scale(lat.log_sigma, 2.0));
  Tensor per_dim = scale(shift(sub(add(square(lat.mu), sigma2), scale(lat.log_sigma, 2.0)), -1.0), 0.5);
  return scale(sum(per_dim), 1.0 / double(n));
}

// reparameterized draw: u = mu + sigma * eps, gradient flows into both heads
inline Tensor sample_latent_with(const GaussianLatent& lat, const Tensor& eps) {
  if (eps.shape != lat.mu.shape) fail(errc::shape, "sample_latent: eps shape " + shape_str(eps.shape));
  return add(lat.mu, mul(exp(lat.log_sigma), eps));
}

inline Tensor sample_latent(const GaussianLatent& lat, Rng& rng) {
  return sample_latent_with(lat, Tensor::randn(lat.mu.shape, rng));
}

struct LayoutSample {
  Tensor coords; // (N, 4) rows of (x, y, w, h), already clamped to valid boxes

  std::vector<BoundingBox> boxes() const {
    std::vector<BoundingBox> out;
    for (int i = 0; i < coords.dim(0); ++i)
      out.push_back(BoundingBox{coords.at(i, 0), coords.at(i, 1), coords.at(i, 2), coords.at(i, 3)});
    return out;
  }
};

inline Tensor boxes_to_tensor(const std::vector<BoundingBox>& boxes) {
  std::vector<double> v;
  for (const auto& b : boxes) v.insert(v.end(), {b.x, b.y, b.w, b.h});
  return Tensor({int(boxes.size()), 4}, std::move(v));
}

// (1/N) sum_i |b_i - b^_i|_1 over the four normalized coordinates
inline Tensor layout_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape != gt.shape) fail(errc::shape, "layout_loss: " + shape_str(pred.shape) + " vs " + shape_str(gt.shape));
  return scale(l1(sub(pred, gt)), 1.0 / double(pred.dim(0)));
}

// Semantics-Layout VAE: one graph-union encoder to a per-node Gaussian and
// two separate triplet-GCN decoders conditioned on (category ++ text ++ u).
struct SlVae {
  TripletGcn encoder_gcn;
  Linear mu_head;        // 80 -> 16
  Linear log_sigma_head; // 80 -> 16
  TripletGcn layout_gcn;
  Linear layout_head; // 80 -> 4
  TripletGcn semantics_gcn;
  Linear semantics_head; // 80 -> 64

  static constexpr double kMinBoxSide = 1.0 / 64.0;

  SlVae() = default;

  explicit SlVae(Rng& rng)
      : encoder_gcn(kNodeDim, kEdgeDim, kGcnLayers, rng),
        mu_head(kNodeDim, kLatentDim, rng),
        log_sigma_head(kNodeDim, kLatentDim, rng),
        layout_gcn(kNodeDim, kEdgeDim, kGcnLayers, rng),
        layout_head(kNodeDim, 4, rng),
        semantics_gcn(kNodeDim, kEdgeDim, kGcnLayers, rng),
        semantics_head(kNodeDim, kSemanticsDim, rng) {}

  void params(ParamList& p, const std::string& prefix) const {
    encoder_gcn.params(p, prefix + ".encoder_gcn");
    mu_head.params(p, prefix + ".mu_head");
    log_sigma_head.params(p, prefix + ".log_sigma_head");
    layout_gcn.params(p, prefix + ".layout_gcn");
    layout_head.params(p, prefix + ".layout_head");
    semantics_gcn.params(p, prefix + ".semantics_gcn");
    semantics_head.params(p, prefix + ".semantics_head");
  }

  // training-mode encoding; node vectors must carry the box slice
  GaussianLatent encode_union(const Tensor& node_vecs, const Tensor& edge_vecs,
                              const std::vector<Triple>& triples) const {
    auto [nodes, edges] = encoder_gcn.forward(node_vecs, edge_vecs, triples);
    return GaussianLatent{mu_head(nodes), log_sigma_head(nodes)};
  }

  // decoder conditioning: category row ++ pseudo-text ++ u_i
  static Tensor decoder_nodes(const Embedder& emb, const SceneGraph& g, const Tensor& u) {
    Tensor base = emb.embed_nodes(g, false); // box slice zero, unused below
    return concat({slice(base, 1, 0, kCatDim + kTextDim), u}, 1);
  }

  LayoutSample decode_layout(const Embedder& emb, const SceneGraph& g, const Tensor& u) const {
    auto [nodes, edges] = layout_gcn.forward(decoder_nodes(emb, g, u), emb.embed_edges(g), to_triples(g));
    Tensor raw = sigmoid(layout_head(nodes)); // (N, 4) in (0,1)
    Tensor x = slice(raw, 1, 0, 1), y = slice(raw, 1, 1, 1);
    Tensor w = maximum(slice(raw, 1, 2, 1), kMinBoxSide);
    Tensor h = maximum(slice(raw, 1, 3, 1), kMinBoxSide);
    x = minimum(x, shift(scale(w, -1.0), 1.0)); // x <= 1 - w
    y = minimum(y, shift(scale(h, -1.0), 1.0));
    return LayoutSample{concat({x, y, w, h}, 1)};
  }

  Tensor decode_semantics(const Embedder& emb, const SceneGraph& g, const Tensor& u) const {
    auto [nodes, edges] = semantics_gcn.forward(decoder_nodes(emb, g, u), emb.embed_edges(g), to_triples(g));
    return semantics_head(nodes);
  }
};

} // namespace disco
