#pragma once

// Self-contained verification suites behind the check-grad and eval-masks
// commands: finite-difference checks for every differentiable op plus one
// full denoiser block, and a pairwise brute-force replay of the attention
// mask rule.

#include <functional>
#include <string>
#include <vector>

#include "disco/cmadiff.hpp"
#include "disco/synthdata.hpp"
#include "disco/tensor.hpp"

namespace disco {

struct AuditRow {
  std::string name;
  double max_rel_err = 0;
  bool passed = false;
};

namespace audit_detail {

inline Tensor readout(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

inline double audit_op(const std::function<Tensor(const Tensor&, Rng&)>& op, Rng& rng, int instances,
                       bool positive_domain = false) {
  double worst = 0;
  for (int i = 0; i < instances; ++i) {
    int r = int(rng.uniform_int(1, 5)), c = int(rng.uniform_int(2, 6));
    Tensor x = Tensor::randn({r, c}, rng);
    if (positive_domain)
      for (auto& v : *x.data) v = 0.2 + std::abs(v);
    const Rng frozen = rng.split(std::uint64_t(i));
    Tensor probe = [&] {
      NoGrad ng;
      Rng fr = frozen;
      return op(x, fr);
    }();
    Tensor w = Tensor::randn(probe.shape, rng);
    auto f = [&](const Tensor& t) {
      Rng fr = frozen;
      return readout(op(t, fr), w);
    };
    worst = std::max(worst, grad_check(f, x));
  }
  return worst;
}

} // namespace audit_detail

inline std::vector<AuditRow> gradient_audit(std::uint64_t seed = 2026, int instances = 100,
                                            double threshold = 1e-4) {
  using OpFn = std::function<Tensor(const Tensor&, Rng&)>;
  auto mate = [](const Shape& s, Rng& r) { return Tensor::randn(s, r); };

  std::vector<std::pair<std::string, OpFn>> ops = {
      {"add", [&](const Tensor& x, Rng& r) { return add(x, mate(x.shape, r)); }},
      {"add_broadcast", [&](const Tensor& x, Rng& r) { return add(x, mate({x.shape.back()}, r)); }},
      {"sub", [&](const Tensor& x, Rng& r) { return sub(mate(x.shape, r), x); }},
      {"mul", [&](const Tensor& x, Rng& r) { return mul(x, mate(x.shape, r)); }},
      {"mul_broadcast", [&](const Tensor& x, Rng& r) { return mul(x, mate({x.shape.back()}, r)); }},
      {"minimum", [&](const Tensor& x, Rng& r) { return minimum(x, mate(x.shape, r)); }},
      {"maximum", [&](const Tensor& x, Rng& r) { return maximum(x, mate(x.shape, r)); }},
      {"scale", [](const Tensor& x, Rng&) { return scale(x, -2.3); }},
      {"shift", [](const Tensor& x, Rng&) { return shift(x, 0.7); }},
      {"broadcast", [](const Tensor& x, Rng&) {
         Shape t = x.shape;
         t.insert(t.begin(), 2);
         return broadcast_to(x, t);
       }},
      {"sigmoid", [](const Tensor& x, Rng&) { return sigmoid(x); }},
      {"tanh", [](const Tensor& x, Rng&) { return tanh(x); }},
      {"silu", [](const Tensor& x, Rng&) { return silu(x); }},
      {"exp", [](const Tensor& x, Rng&) { return exp(x); }},
      {"square", [](const Tensor& x, Rng&) { return square(x); }},
      {"reshape", [](const Tensor& x, Rng&) { return reshape(x, {int(x.numel())}); }},
      {"transpose", [](const Tensor& x, Rng&) { return transpose(x); }},
      {"sum", [](const Tensor& x, Rng&) { return sum(x); }},
      {"mean", [](const Tensor& x, Rng&) { return mean(x); }},
      {"l1", [](const Tensor& x, Rng&) { return l1(x); }},
      {"concat", [&](const Tensor& x, Rng& r) { return concat({x, mate(x.shape, r)}, 1); }},
      {"slice", [](const Tensor& x, Rng&) { return slice(x, 1, 0, std::max(1, x.dim(1) / 2)); }},
      {"rows", [](const Tensor& x, Rng& r) {
         std::vector<int> idx;
         for (int k = 0; k < 4; ++k) idx.push_back(int(r.uniform_int(0, x.dim(0) - 1)));
         return rows(x, idx);
       }},
      {"matmul_lhs", [&](const Tensor& x, Rng& r) { return matmul(x, mate({x.dim(1), 3}, r)); }},
      {"matmul_rhs", [&](const Tensor& x, Rng& r) { return matmul(mate({3, x.dim(0)}, r), x); }},
      {"softmax_masked", [](const Tensor& x, Rng& r) {
         std::vector<double> mv(std::size_t(x.numel()), 0.0);
         for (auto& v : mv)
           if (r.uniform() < 0.3) v = -std::numeric_limits<double>::infinity();
         return softmax_masked(x, Tensor(x.shape, std::move(mv)));
       }},
      {"layer_norm", [](const Tensor& x, Rng&) { return layer_norm(x); }},
  };

  std::vector<AuditRow> out;
  Rng rng(seed);
  for (auto& [name, fn] : ops) {
    AuditRow row;
    row.name = name;
    row.max_rel_err = audit_detail::audit_op(fn, rng, instances, false);
    row.passed = row.max_rel_err < threshold;
    out.push_back(std::move(row));
  }

  {
    AuditRow row;
    row.name = "log";
    Rng lr = rng.split("log");
    row.max_rel_err = audit_detail::audit_op(
        [](const Tensor& x, Rng&) { return log(x); }, lr, instances, /*positive_domain=*/true);
    row.passed = row.max_rel_err < threshold;
    out.push_back(std::move(row));
  }

  {
    AuditRow row;
    row.name = "patchify";
    Rng pr = rng.split("patchify");
    double worst = 0;
    for (int i = 0; i < instances; ++i) {
      Tensor img = Tensor::randn({4, 4, 3}, pr);
      Tensor w = Tensor::randn({4, 12}, pr);
      worst = std::max(worst, grad_check([&](const Tensor& t) {
        return audit_detail::readout(patchify(t, 2), w);
      }, img));
      Tensor tok = Tensor::randn({4, 12}, pr);
      Tensor wi = Tensor::randn({4, 4, 3}, pr);
      worst = std::max(worst, grad_check([&](const Tensor& t) {
        return audit_detail::readout(unpatchify(t, 4, 4, 3, 2), wi);
      }, tok));
    }
    row.max_rel_err = worst;
    row.passed = worst < threshold;
    out.push_back(std::move(row));
  }

  // one full denoiser block, finite differences over the whole visual input
  {
    AuditRow row;
    row.name = "denoiser_block";
    DiscoModel model(shapes_vocabulary(), seed);
    Rng br = rng.split("block");
    SceneGraph g;
    SgNode a;
    a.id = "a";
    a.category = model.embedder.vocab.categories[0];
    a.attributes = {model.embedder.vocab.attributes[0]};
    a.bbox = BoundingBox{0.125, 0.125, 0.5, 0.5};
    g.nodes.push_back(a);
    Tensor sem = Tensor::randn({1, kSemanticsDim}, br);
    Cond cond = model.make_cond(g, sem, {*a.bbox});
    Tensor w = Tensor::randn({kNumVisualTokens, kVisualDim}, br);
    const DenoiserBlock& block = model.denoiser.blocks[0];
    row.max_rel_err = grad_check(
        [&](const Tensor& v) { return audit_detail::readout(block.forward(v, cond, nullptr, "a"), w); },
        Tensor::randn({kNumVisualTokens, kVisualDim}, br, 0.5));
    row.passed = row.max_rel_err < threshold;
    out.push_back(std::move(row));
  }

  return out;
}

// ----------------------------------------------------------------------------
// mask brute force

namespace audit_detail {

// independent pairwise restatement of the membership rule
inline bool pair_allowed(const std::vector<ObjectSet>& membership, int n_objects, int i, int j) {
  int n_v = int(membership.size());
  if (i == j) return true;
  bool ipad = i >= n_v && (i - n_v) >= n_objects;
  bool jpad = j >= n_v && (j - n_v) >= n_objects;
  if (ipad || jpad) return false;
  ObjectSet si = i < n_v ? membership[std::size_t(i)] : ObjectSet{i - n_v};
  ObjectSet sj = j < n_v ? membership[std::size_t(j)] : ObjectSet{j - n_v};
  for (int a : si)
    for (int b : sj)
      if (a == b) return true;
  return i < n_v && j < n_v && si.empty() && sj.empty();
}

} // namespace audit_detail

struct MaskAuditResult {
  int instances = 0;
  int mismatches = 0;
  bool fixture_passed = false;
  bool passed() const { return mismatches == 0 && fixture_passed; }
};

inline MaskAuditResult mask_audit(std::uint64_t seed = 99, int instances = 1000) {
  MaskAuditResult res;
  Rng rng(seed);
  for (int trial = 0; trial < instances; ++trial) {
    int n_v = int(rng.uniform_int(1, 16));
    int n_max = int(rng.uniform_int(1, kNMax));
    int n_obj = int(rng.uniform_int(0, n_max));
    std::vector<ObjectSet> membership(static_cast<std::size_t>(n_v));
    for (auto& set : membership)
      for (int o = 0; o < n_obj; ++o)
        if (rng.uniform() < 0.35) set.push_back(o);
    Tensor m = build_cma_mask(membership, n_obj, n_max);
    int total = n_v + n_max;
    for (int i = 0; i < total; ++i)
      for (int j = 0; j < total; ++j)
        if ((m.at(i, j) == 0.0) != audit_detail::pair_allowed(membership, n_obj, i, j)) ++res.mismatches;
    ++res.instances;
  }

  // the toy example: A holds one visual token, B holds two
  std::vector<ObjectSet> fig{{0}, {1}, {1}};
  Tensor m = build_cma_mask(fig, 2, 2);
  auto ok = [&](int i, int j, bool want) { return (m.at(i, j) == 0.0) == want; };
  res.fixture_passed = true;
  for (int i = 0; i < 5 && res.fixture_passed; ++i)
    for (int j = 0; j < 5; ++j) {
      auto in = [](int x, std::initializer_list<int> xs) {
        for (int v : xs)
          if (x == v) return true;
        return false;
      };
      bool want = i == j || (in(i, {0, 3}) && in(j, {0, 3})) || (in(i, {1, 2, 4}) && in(j, {1, 2, 4}));
      if (!ok(i, j, want)) {
        res.fixture_passed = false;
        break;
      }
    }
  return res;
}

} // namespace disco
