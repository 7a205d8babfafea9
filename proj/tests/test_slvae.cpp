#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "disco/slvae.hpp"
#include "testutil.hpp"

using namespace disco;

namespace {

const Vocabulary vocab = testutil::shapes_vocab();

Embedder make_embedder(std::uint64_t seed = 3) {
  Rng rng(seed);
  return Embedder(vocab, rng);
}

SlVae make_vae(std::uint64_t seed = 4) {
  Rng rng(seed);
  return SlVae(rng);
}

SceneGraph chain_graph() {
  return parse_scene_graph(R"({"nodes":[
      {"id":"a","category":"circle","bbox":[0.0625,0.0625,0.25,0.25]},
      {"id":"b","category":"square","bbox":[0.5,0.5,0.25,0.375]},
      {"id":"c","category":"triangle","bbox":[0.0625,0.5,0.3125,0.25]}],
    "edges":[{"subject":"a","predicate":"left of","object":"b"},
             {"subject":"c","predicate":"above","object":"a"}]})", vocab);
}

// permute node order, keeping edges (by id) and therefore triples consistent
SceneGraph permuted(const SceneGraph& g, const std::vector<int>& perm) {
  SceneGraph out = g;
  out.nodes.clear();
  for (int i : perm) out.nodes.push_back(g.nodes[std::size_t(i)]);
  return out;
}

// KL(q||p) by Monte Carlo for a single node row
double kl_monte_carlo(const std::vector<double>& mu, const std::vector<double>& log_sigma,
                      std::int64_t draws, Rng& rng) {
  double acc = 0;
  for (std::int64_t k = 0; k < draws; ++k) {
    double term = 0;
    for (std::size_t d = 0; d < mu.size(); ++d) {
      double z = rng.normal();
      double u = mu[d] + std::exp(log_sigma[d]) * z;
      term += -log_sigma[d] - 0.5 * z * z + 0.5 * u * u;
    }
    acc += term;
  }
  return acc / double(draws);
}

} // namespace

TEST_CASE("pool_triples rule semantics") {
  // 3 nodes (d=2), 2 edges (d=1); identity messages probe the pooling rule
  Tensor nodes({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor edges({2, 1}, {10, 20});
  std::vector<Triple> triples{{0, 0, 1}, {2, 1, 0}};

  // messages equal to the inputs themselves = identity g1
  Tensor msg({2, 5}, {1, 2, 10, 3, 4, /* triple 0: a, e0, b */
                      5, 6, 20, 1, 2 /* triple 1: c, e1, a */});
  TriplePool pool = pool_triples(msg, nodes, edges, triples, 2, 1);

  // node 0 sits in both triples: mean of its two identical segments
  REQUIRE(pool.node_inputs.at(0, 0) == 1.0);
  REQUIRE(pool.node_inputs.at(0, 1) == 2.0);
  // nodes 1 and 2 each appear once
  REQUIRE(pool.node_inputs.at(1, 0) == 3.0);
  REQUIRE(pool.node_inputs.at(2, 1) == 6.0);
  // edge states are the middle segments
  REQUIRE(pool.edge_states.at(0, 0) == 10.0);
  REQUIRE(pool.edge_states.at(1, 0) == 20.0);

  SECTION("isolated node keeps its previous state") {
    std::vector<Triple> one{{0, 0, 1}};
    Tensor msg1 = slice(msg, 0, 0, 1);
    TriplePool p = pool_triples(msg1, nodes, edges, one, 2, 1);
    REQUIRE(p.node_inputs.at(2, 0) == 5.0);
    REQUIRE(p.node_inputs.at(2, 1) == 6.0);
  }

  SECTION("true mean when segments differ") {
    Tensor msg2({2, 5}, {7, 8, 10, 3, 4, 5, 6, 20, 9, 12});
    TriplePool p = pool_triples(msg2, nodes, edges, triples, 2, 1);
    REQUIRE(p.node_inputs.at(0, 0) == 8.0);  // mean(7, 9)
    REQUIRE(p.node_inputs.at(0, 1) == 10.0); // mean(8, 12)
  }
}

TEST_CASE("gcn layer: zero edges means g2(previous)+previous for every node") {
  Rng rng(5);
  TripletGcnLayer layer(4, 3, rng);
  Tensor nodes = Tensor::randn({3, 4}, rng);
  Tensor edges = Tensor::zeros({0, 3});
  auto [out_nodes, out_edges] = layer.forward(nodes, edges, {});
  Tensor expect = add(layer.g2(nodes), nodes);
  REQUIRE(*out_nodes.data == *expect.data);
  REQUIRE(out_edges.shape == Shape{0, 3});
}

TEST_CASE("gcn layer matches hand computation for a node in two triples") {
  Rng rng(6);
  TripletGcnLayer layer(4, 3, rng);
  Tensor nodes = Tensor::randn({3, 4}, rng);
  Tensor edges = Tensor::randn({2, 3}, rng);
  std::vector<Triple> triples{{0, 0, 1}, {2, 1, 0}};
  auto [out_nodes, out_edges] = layer.forward(nodes, edges, triples);

  // node 0: subject segment of triple 0 and object segment of triple 1
  Tensor m0 = layer.g1(concat({slice(nodes, 0, 0, 1), slice(edges, 0, 0, 1), slice(nodes, 0, 1, 1)}, 1));
  Tensor m1 = layer.g1(concat({slice(nodes, 0, 2, 1), slice(edges, 0, 1, 1), slice(nodes, 0, 0, 1)}, 1));
  Tensor seg0 = slice(m0, 1, 0, 4);
  Tensor seg1 = slice(m1, 1, 4 + 3, 4);
  Tensor pooled = scale(add(seg0, seg1), 0.5);
  Tensor expect = add(layer.g2(pooled), slice(nodes, 0, 0, 1));
  for (int j = 0; j < 4; ++j)
    REQUIRE_THAT(out_nodes.at(0, j), Catch::Matchers::WithinRel(expect.at(0, j), 1e-12));

  // edge rows take their candidate segment plus residual
  Tensor eexpect = add(slice(m0, 1, 4, 3), slice(edges, 0, 0, 1));
  for (int j = 0; j < 3; ++j)
    REQUIRE_THAT(out_edges.at(0, j), Catch::Matchers::WithinRel(eexpect.at(0, j), 1e-12));
}

TEST_CASE("encode_union shapes and zeroed heads") {
  Embedder emb = make_embedder();
  SlVae vae = make_vae();
  SceneGraph g = chain_graph();
  Tensor nodes = emb.embed_nodes(g, true);
  GaussianLatent lat = vae.encode_union(nodes, emb.embed_edges(g), to_triples(g));
  REQUIRE(lat.mu.shape == Shape{3, kLatentDim});
  REQUIRE(lat.log_sigma.shape == Shape{3, kLatentDim});

  SECTION("zero-weight heads give mu=0, sigma=1") {
    for (auto& v : *vae.mu_head.w.data) v = 0;
    for (auto& v : *vae.log_sigma_head.w.data) v = 0;
    GaussianLatent z = vae.encode_union(nodes, emb.embed_edges(g), to_triples(g));
    for (double v : *z.mu.data) REQUIRE(v == 0.0);
    Tensor sigma = exp(z.log_sigma);
    for (double v : *sigma.data) REQUIRE(v == 1.0);
  }
}

TEST_CASE("permutation equivariance is exact") {
  Embedder emb = make_embedder();
  SlVae vae = make_vae();
  SceneGraph g = chain_graph();
  std::vector<int> perm{2, 0, 1};
  SceneGraph gp = permuted(g, perm);

  GaussianLatent lat = vae.encode_union(emb.embed_nodes(g, true), emb.embed_edges(g), to_triples(g));
  GaussianLatent latp = vae.encode_union(emb.embed_nodes(gp, true), emb.embed_edges(gp), to_triples(gp));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < kLatentDim; ++c) {
      REQUIRE(latp.mu.at(r, c) == lat.mu.at(perm[std::size_t(r)], c));
      REQUIRE(latp.log_sigma.at(r, c) == lat.log_sigma.at(perm[std::size_t(r)], c));
    }

  Rng rng(8);
  Tensor u = Tensor::randn({3, kLatentDim}, rng);
  std::vector<double> up_data;
  for (int i : perm)
    up_data.insert(up_data.end(), u.data->begin() + i * kLatentDim, u.data->begin() + (i + 1) * kLatentDim);
  Tensor up({3, kLatentDim}, up_data);

  LayoutSample lay = vae.decode_layout(emb, g, u);
  LayoutSample layp = vae.decode_layout(emb, gp, up);
  Tensor sem = vae.decode_semantics(emb, g, u);
  Tensor semp = vae.decode_semantics(emb, gp, up);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) REQUIRE(layp.coords.at(r, c) == lay.coords.at(perm[std::size_t(r)], c));
    for (int c = 0; c < kSemanticsDim; ++c) REQUIRE(semp.at(r, c) == sem.at(perm[std::size_t(r)], c));
  }
}

TEST_CASE("sample_latent") {
  Rng rng(9);
  GaussianLatent lat{Tensor::randn({2, kLatentDim}, rng), Tensor::full({2, kLatentDim}, -30.0)};

  SECTION("sigma -> 0 limit returns mu") {
    Rng r2(1);
    Tensor u = sample_latent(lat, r2);
    for (std::int64_t i = 0; i < u.numel(); ++i)
      REQUIRE_THAT((*u.data)[std::size_t(i)],
                   Catch::Matchers::WithinAbs((*lat.mu.data)[std::size_t(i)], 1e-10));
  }

  SECTION("standard normal statistics") {
    GaussianLatent std_lat{Tensor::zeros({1, 1}), Tensor::zeros({1, 1})};
    Rng r3(11);
    double mean = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) mean += sample_latent(std_lat, r3).item();
    REQUIRE(std::abs(mean / draws) < 0.02);
  }

  SECTION("fixed seed reproduces u exactly") {
    Rng a(42), b(42);
    REQUIRE(*sample_latent(lat, a).data == *sample_latent(lat, b).data);
  }
}

TEST_CASE("kl_loss closed form") {
  SECTION("standard normal posterior gives zero") {
    GaussianLatent lat{Tensor::zeros({2, kLatentDim}), Tensor::zeros({2, kLatentDim})};
    REQUIRE(kl_loss(lat).item() == 0.0);
  }

  SECTION("unit mean, unit sigma, 4 dims, one node gives 2.0") {
    GaussianLatent lat{Tensor::full({1, 4}, 1.0), Tensor::zeros({1, 4})};
    REQUIRE_THAT(kl_loss(lat).item(), Catch::Matchers::WithinRel(2.0, 1e-12));
  }

  SECTION("matches Monte Carlo on random latents") {
    Rng rng(13);
    for (int trial = 0; trial < 3; ++trial) {
      std::vector<double> mu(4), ls(4);
      for (auto& v : mu) v = rng.uniform(-1.5, 1.5);
      for (auto& v : ls) v = rng.uniform(-1.0, 0.7);
      GaussianLatent lat{Tensor({1, 4}, std::vector<double>(mu)), Tensor({1, 4}, std::vector<double>(ls))};
      double exact = kl_loss(lat).item();
      double mc = kl_monte_carlo(mu, ls, 400000, rng);
      REQUIRE_THAT(mc, Catch::Matchers::WithinRel(exact, 0.015));
    }
  }

  SECTION("non-negative on random latents") {
    Rng rng(14);
    for (int i = 0; i < 200; ++i) {
      GaussianLatent lat{Tensor::randn({2, 8}, rng), Tensor::randn({2, 8}, rng, 0.5)};
      REQUIRE(kl_loss(lat).item() >= 0.0);
    }
  }
}

TEST_CASE("decode_layout output always forms valid boxes") {
  Embedder emb = make_embedder();
  SlVae vae = make_vae();
  SceneGraph g = chain_graph();
  Rng rng(15);
  NoGrad ng;
  for (int i = 0; i < 10000; ++i) {
    Tensor u = Tensor::randn({3, kLatentDim}, rng, 3.0);
    for (const auto& b : vae.decode_layout(emb, g, u).boxes()) {
      REQUIRE(b.valid());
      REQUIRE(b.w >= SlVae::kMinBoxSide);
      REQUIRE(b.h >= SlVae::kMinBoxSide);
    }
  }
}

TEST_CASE("decode determinism and semantics shape") {
  Embedder emb = make_embedder();
  SlVae vae = make_vae();
  SceneGraph g = chain_graph();
  Rng rng(16);
  Tensor u = Tensor::randn({3, kLatentDim}, rng);
  REQUIRE(*vae.decode_layout(emb, g, u).coords.data == *vae.decode_layout(emb, g, u).coords.data);
  Tensor sem = vae.decode_semantics(emb, g, u);
  REQUIRE(sem.shape == Shape{3, kSemanticsDim});
}

TEST_CASE("layout_loss arithmetic") {
  Tensor gt({1, 4}, {0.1, 0.2, 0.3, 0.4});
  REQUIRE(layout_loss(gt, gt).item() == 0.0);

  Tensor off({1, 4}, {0.2, 0.3, 0.4, 0.5});
  REQUIRE_THAT(layout_loss(off, gt).item(), Catch::Matchers::WithinRel(0.4, 1e-12));

  Tensor gt2({2, 4}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.5, 0.2, 0.2});
  Tensor pred2({2, 4}, {0.2, 0.3, 0.4, 0.5, 0.5, 0.5, 0.2, 0.2});
  REQUIRE_THAT(layout_loss(pred2, gt2).item(), Catch::Matchers::WithinRel(0.2, 1e-12));

  REQUIRE_THROWS_AS(layout_loss(gt, gt2), error);
}

TEST_CASE("reparameterization path passes grad_check") {
  Rng rng(17);
  Tensor eps = Tensor::randn({2, 4}, rng);
  auto f = [&](const Tensor& x) {
    GaussianLatent lat{slice(x, 1, 0, 4), slice(x, 1, 4, 4)};
    Tensor u = sample_latent_with(lat, eps);
    return add(kl_loss(lat), sum(square(u)));
  };
  REQUIRE(grad_check(f, Tensor::randn({2, 8}, rng, 0.5)) < 1e-4);
}

TEST_CASE("semantics decoder parameters receive gradient from a downstream loss") {
  Embedder emb = make_embedder();
  SlVae vae = make_vae();
  SceneGraph g = chain_graph();
  Rng rng(18);
  Tensor nodes = emb.embed_nodes(g, true);
  GaussianLatent lat = vae.encode_union(nodes, emb.embed_edges(g), to_triples(g));
  Tensor u = sample_latent(lat, rng);
  Tensor sem = vae.decode_semantics(emb, g, u);
  GradMap gm = backward(sum(square(sem)));
  for (const Tensor* t : {&vae.semantics_head.w, &vae.semantics_gcn.layers[0].g1.in.w, &vae.mu_head.w,
                          &vae.encoder_gcn.layers[0].g2.w}) {
    REQUIRE(gm.contains(*t));
    double norm = 0;
    for (double v : *gm.at(*t).data) norm += v * v;
    REQUIRE(norm > 0.0);
  }
}
