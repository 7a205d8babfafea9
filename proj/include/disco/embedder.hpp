#pragma once

#include <string>
#include <vector>

#include "disco/nn.hpp"
#include "disco/scenegraph.hpp"
#include "disco/tensor.hpp"

namespace disco {

// embedding widths; node = category ++ text ++ box, edge = predicate ++ text,
// attribute = table ++ text
constexpr int kTextDim = 32;
constexpr int kCatDim = 32;
constexpr int kPredDim = 32;
constexpr int kAttrTableDim = 16;
constexpr int kBoxEncDim = 16;
constexpr int kNodeDim = kCatDim + kTextDim + kBoxEncDim; // 80
constexpr int kEdgeDim = kPredDim + kTextDim;             // 64
constexpr int kAttrDim = kAttrTableDim + kTextDim;        // 48

// Deterministic stand-in for a frozen text encoder: every distinct string maps
// to a fixed unit vector (stable hash seeds an RNG stream, draws normals,
// normalizes). Any encoder with the same signature can be substituted.
struct PseudoTextEncoder {
  int dim = kTextDim;

  std::vector<double> encode_raw(const std::string& s) const {
    Rng rng = Rng(Rng::hash(s)).split("pseudo-text");
    std::vector<double> v(std::size_t(dim), 0.0);
    double norm2 = 0;
    for (auto& x : v) {
      x = rng.normal();
      norm2 += x * x;
    }
    double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : v) x *= inv;
    return v;
  }

  Tensor encode(const std::string& s) const { return Tensor({1, dim}, encode_raw(s)); }

  // one row per string
  Tensor encode_all(const std::vector<std::string>& strings) const {
    std::vector<double> data;
    data.reserve(strings.size() * std::size_t(dim));
    for (const auto& s : strings) {
      auto v = encode_raw(s);
      data.insert(data.end(), v.begin(), v.end());
    }
    return Tensor({int(strings.size()), dim}, std::move(data));
  }
};

struct EmbeddingTables {
  Tensor category;  // (|C^o|, 32)
  Tensor predicate; // (|C^e|, 32)
  Tensor attribute; // (|attrs|, 16)
  Tensor attr_null; // (1, 16), used when a node has no attributes

  EmbeddingTables() = default;

  EmbeddingTables(const Vocabulary& vocab, Rng& rng) {
    category = Tensor::randn({int(vocab.categories.size()), kCatDim}, rng, 0.1, true);
    predicate = Tensor::randn({int(vocab.predicates.size()), kPredDim}, rng, 0.1, true);
    attribute = Tensor::randn({int(vocab.attributes.size()), kAttrTableDim}, rng, 0.1, true);
    attr_null = Tensor::randn({1, kAttrTableDim}, rng, 0.1, true);
  }

  void params(ParamList& p, const std::string& prefix) const {
    p.add(prefix + ".category", category);
    p.add(prefix + ".predicate", predicate);
    p.add(prefix + ".attribute", attribute);
    p.add(prefix + ".attr_null", attr_null);
  }
};

// textual scene graph construction: learned tables concatenated with
// pseudo-text vectors and (during training) encoded boxes
struct Embedder {
  Vocabulary vocab;
  PseudoTextEncoder text;
  EmbeddingTables tables;
  Mlp box_encoder; // 4 -> 32 -> 16

  Embedder() = default;

  Embedder(Vocabulary v, Rng& rng) : vocab(std::move(v)), tables(vocab, rng), box_encoder(4, 32, kBoxEncDim, rng) {}

  void params(ParamList& p, const std::string& prefix) const {
    tables.params(p, prefix + ".tables");
    box_encoder.params(p, prefix + ".box_encoder");
  }

  // (N_o, 80); the box slice is all-zero when use_boxes is off (inference)
  Tensor embed_nodes(const SceneGraph& g, bool use_boxes) const {
    int n = int(g.nodes.size());
    std::vector<int> cat_idx;
    std::vector<std::string> cat_strings;
    for (const auto& node : g.nodes) {
      int ci = vocab.category_index(node.category);
      if (ci < 0) fail(errc::vocab, "embed_nodes: unknown category \"" + node.category + "\"");
      cat_idx.push_back(ci);
      cat_strings.push_back(node.category);
    }
    Tensor cat_part = rows(tables.category, cat_idx);
    Tensor text_part = text.encode_all(cat_strings);
    Tensor box_part;
    if (use_boxes) {
      std::vector<double> coords;
      for (const auto& node : g.nodes) {
        if (!node.bbox) fail(errc::constraint, "embed_nodes: node \"" + node.id + "\" has no bbox");
        coords.insert(coords.end(), {node.bbox->x, node.bbox->y, node.bbox->w, node.bbox->h});
      }
      box_part = box_encoder(Tensor({n, 4}, std::move(coords)));
    } else {
      box_part = Tensor::zeros({n, kBoxEncDim});
    }
    return concat({cat_part, text_part, box_part}, 1);
  }

  // (|E|, 64); rows follow edge order
  Tensor embed_edges(const SceneGraph& g) const {
    std::vector<int> pred_idx;
    std::vector<std::string> triple_strings;
    for (const auto& e : g.edges) {
      int pi = vocab.predicate_index(e.predicate);
      if (pi < 0) fail(errc::vocab, "embed_edges: unknown predicate \"" + e.predicate + "\"");
      pred_idx.push_back(pi);
      const SgNode& s = g.nodes[std::size_t(g.node_index(e.subject))];
      const SgNode& o = g.nodes[std::size_t(g.node_index(e.object))];
      triple_strings.push_back(s.category + " " + e.predicate + " " + o.category);
    }
    if (g.edges.empty()) return Tensor::zeros({0, kEdgeDim});
    return concat({rows(tables.predicate, pred_idx), text.encode_all(triple_strings)}, 1);
  }

  // (N_max, 48); slots past N_o and attribute-free nodes take the null row
  Tensor embed_attributes(const SceneGraph& g, int n_max = kNMax) const {
    std::vector<Tensor> rows_out;
    for (int i = 0; i < n_max; ++i) {
      Tensor table_part;
      std::string joined;
      if (i < int(g.nodes.size()) && !g.nodes[std::size_t(i)].attributes.empty()) {
        const auto& attrs = g.nodes[std::size_t(i)].attributes;
        std::vector<int> idx;
        for (const auto& a : attrs) {
          int ai = vocab.attribute_index(a);
          if (ai < 0) fail(errc::vocab, "embed_attributes: unknown attribute \"" + a + "\"");
          idx.push_back(ai);
          if (!joined.empty()) joined += " ";
          joined += a;
        }
        Tensor gathered = rows(tables.attribute, idx); // (k, 16)
        Tensor averager = Tensor::full({1, int(idx.size())}, 1.0 / double(idx.size()));
        table_part = matmul(averager, gathered); // mean over attribute rows
      } else {
        table_part = tables.attr_null;
      }
      rows_out.push_back(concat({table_part, text.encode(joined)}, 1));
    }
    return concat(rows_out, 0);
  }

  // the padded-slot construction for all slots (classifier-free null path)
  Tensor embed_null_attributes(int n_max = kNMax) const {
    Tensor row = concat({tables.attr_null, text.encode("")}, 1);
    return broadcast_to(row, {n_max, kAttrDim});
  }
};

} // namespace disco
