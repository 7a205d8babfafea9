#include <catch2/catch_amalgamated.hpp>

#include "disco/embedder.hpp"
#include "testutil.hpp"

using namespace disco;

namespace {

Embedder make_embedder(std::uint64_t seed = 1) {
  Rng rng(seed);
  return Embedder(testutil::shapes_vocab(), rng);
}

SceneGraph graph_with_boxes() {
  const Vocabulary vocab = testutil::shapes_vocab();
  return parse_scene_graph(R"({"nodes":[
      {"id":"a","category":"circle","bbox":[0,0,0.5,0.5]},
      {"id":"b","category":"square","attributes":["red"],"bbox":[0.5,0.5,0.25,0.25]}],
    "edges":[{"subject":"a","predicate":"left of","object":"b"}]})", vocab);
}

} // namespace

TEST_CASE("pseudo-text encoder: deterministic unit vectors") {
  PseudoTextEncoder enc;
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    std::string s = "str" + std::to_string(rng.uniform_int(0, 1 << 20));
    auto a = enc.encode_raw(s);
    auto b = enc.encode_raw(s);
    REQUIRE(a == b);
    double norm2 = 0;
    for (double v : a) norm2 += v * v;
    REQUIRE_THAT(norm2, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  REQUIRE(enc.encode_raw("circle") != enc.encode_raw("square"));
}

TEST_CASE("embed_nodes layout and dimensions") {
  Embedder emb = make_embedder();
  SceneGraph g = graph_with_boxes();

  Tensor nodes = emb.embed_nodes(g, true);
  REQUIRE(nodes.shape == Shape{2, kNodeDim});

  // first 32 entries are the category table row
  int ci = emb.vocab.category_index("circle");
  for (int j = 0; j < kCatDim; ++j) REQUIRE(nodes.at(0, j) == emb.tables.category.at(ci, j));
  // next 32 are the pseudo-text vector of the category string
  auto txt = emb.text.encode_raw("circle");
  for (int j = 0; j < kTextDim; ++j) REQUIRE(nodes.at(0, kCatDim + j) == txt[std::size_t(j)]);

  SECTION("inference mode zeroes the box slice") {
    Tensor inf = emb.embed_nodes(g, false);
    REQUIRE(inf.shape == Shape{2, kNodeDim});
    for (int i = 0; i < 2; ++i)
      for (int j = kCatDim + kTextDim; j < kNodeDim; ++j) REQUIRE(inf.at(i, j) == 0.0);
    // everything before the box slice is identical to the training encoding
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < kCatDim + kTextDim; ++j) REQUIRE(inf.at(i, j) == nodes.at(i, j));
  }

  SECTION("same category, different boxes: only the box slice differs") {
    const Vocabulary vocab = testutil::shapes_vocab();
    SceneGraph g2 = parse_scene_graph(R"({"nodes":[
        {"id":"a","category":"circle","bbox":[0,0,0.5,0.5]},
        {"id":"b","category":"circle","bbox":[0.25,0.25,0.5,0.25]}]})", vocab);
    Tensor n2 = emb.embed_nodes(g2, true);
    for (int j = 0; j < kCatDim + kTextDim; ++j) REQUIRE(n2.at(0, j) == n2.at(1, j));
    // box slice equals the box encoder evaluated on each box (the oracle)
    Tensor b0 = emb.box_encoder(Tensor({1, 4}, {0, 0, 0.5, 0.5}));
    Tensor b1 = emb.box_encoder(Tensor({1, 4}, {0.25, 0.25, 0.5, 0.25}));
    bool any_diff = false;
    for (int j = 0; j < kBoxEncDim; ++j) {
      REQUIRE(n2.at(0, kCatDim + kTextDim + j) == b0.at(0, j));
      REQUIRE(n2.at(1, kCatDim + kTextDim + j) == b1.at(0, j));
      any_diff |= b0.at(0, j) != b1.at(0, j);
    }
    REQUIRE(any_diff);
  }

  SECTION("missing bbox in training mode is an error") {
    const Vocabulary vocab = testutil::shapes_vocab();
    SceneGraph bare = parse_scene_graph(R"({"nodes":[{"id":"a","category":"circle"}]})", vocab);
    REQUIRE_THROWS_AS(emb.embed_nodes(bare, true), error);
  }
}

TEST_CASE("embed_edges") {
  Embedder emb = make_embedder();
  SceneGraph g = graph_with_boxes();

  Tensor edges = emb.embed_edges(g);
  REQUIRE(edges.shape == Shape{1, kEdgeDim});

  // construction: predicate row ++ pseudo-text("circle left of square")
  int pi = emb.vocab.predicate_index("left of");
  for (int j = 0; j < kPredDim; ++j) REQUIRE(edges.at(0, j) == emb.tables.predicate.at(pi, j));
  auto txt = emb.text.encode_raw("circle left of square");
  for (int j = 0; j < kTextDim; ++j) REQUIRE(edges.at(0, kPredDim + j) == txt[std::size_t(j)]);

  SECTION("identical category/predicate pairs embed identically") {
    const Vocabulary vocab = testutil::shapes_vocab();
    SceneGraph g2 = parse_scene_graph(R"({"nodes":[
        {"id":"a","category":"circle"},{"id":"b","category":"square"},
        {"id":"c","category":"circle"},{"id":"d","category":"square"}],
      "edges":[{"subject":"a","predicate":"above","object":"b"},
               {"subject":"c","predicate":"above","object":"d"}]})", vocab);
    Tensor e2 = emb.embed_edges(g2);
    for (int j = 0; j < kEdgeDim; ++j) REQUIRE(e2.at(0, j) == e2.at(1, j));
  }

  SECTION("zero edges") {
    const Vocabulary vocab = testutil::shapes_vocab();
    SceneGraph lone = parse_scene_graph(R"({"nodes":[{"id":"a","category":"circle"}]})", vocab);
    REQUIRE(emb.embed_edges(lone).shape == Shape{0, kEdgeDim});
  }
}

TEST_CASE("embed_attributes") {
  Embedder emb = make_embedder();
  const Vocabulary vocab = testutil::shapes_vocab();

  SceneGraph g = parse_scene_graph(R"({"nodes":[
      {"id":"a","category":"circle","attributes":["red"]},
      {"id":"b","category":"square"},
      {"id":"c","category":"circle","attributes":["red","green"]}]})", vocab);
  Tensor attrs = emb.embed_attributes(g);
  REQUIRE(attrs.shape == Shape{kNMax, kAttrDim});

  // single attribute: the red table row
  int ri = vocab.attribute_index("red");
  for (int j = 0; j < kAttrTableDim; ++j) REQUIRE(attrs.at(0, j) == emb.tables.attribute.at(ri, j));

  // no attribute: the learnable null row
  for (int j = 0; j < kAttrTableDim; ++j) REQUIRE(attrs.at(1, j) == emb.tables.attr_null.at(0, j));

  // two attributes: hand-averaged table rows
  int gi = vocab.attribute_index("green");
  for (int j = 0; j < kAttrTableDim; ++j) {
    double expect = 0.5 * (emb.tables.attribute.at(ri, j) + emb.tables.attribute.at(gi, j));
    REQUIRE_THAT(attrs.at(2, j), Catch::Matchers::WithinRel(expect, 1e-12));
  }
  // text part uses the joined string
  auto joined = emb.text.encode_raw("red green");
  for (int j = 0; j < kTextDim; ++j) REQUIRE(attrs.at(2, kAttrTableDim + j) == joined[std::size_t(j)]);

  // padded slots equal the attribute-free construction
  for (int j = 0; j < kAttrDim; ++j) REQUIRE(attrs.at(3, j) == attrs.at(1, j));
  for (int j = 0; j < kAttrDim; ++j) REQUIRE(attrs.at(kNMax - 1, j) == attrs.at(3, j));

  SECTION("unknown attribute is a vocabulary error") {
    SceneGraph bad = g;
    bad.nodes[0].attributes = {"huge"};
    REQUIRE_THROWS_AS(emb.embed_attributes(bad), error);
  }
}

TEST_CASE("gradients flow into tables through all three embeddings") {
  Embedder emb = make_embedder();
  SceneGraph g = graph_with_boxes();
  Tensor loss = add(add(sum(square(emb.embed_nodes(g, true))), sum(square(emb.embed_edges(g)))),
                    sum(square(emb.embed_attributes(g))));
  GradMap gm = backward(loss);
  for (const Tensor* t : {&emb.tables.category, &emb.tables.predicate, &emb.tables.attribute,
                          &emb.tables.attr_null, &emb.box_encoder.in.w}) {
    REQUIRE(gm.contains(*t));
    double norm = 0;
    for (double v : *gm.at(*t).data) norm += v * v;
    REQUIRE(norm > 0);
  }
}
