#pragma once

#include <string>
#include <utility>
#include <vector>

#include "disco/tensor.hpp"

namespace disco {

// Named parameter registry. Registration order is fixed by construction and
// shared by the optimizer and the checkpoint format.
struct ParamList {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(const std::string& name, const Tensor& t) { items.emplace_back(name, t); }

  const Tensor& at(const std::string& name) const {
    for (const auto& [n, t] : items)
      if (n == name) return t;
    fail(errc::internal, "no parameter named " + name);
  }
};

struct Linear {
  Tensor w; // (in, out)
  Tensor b; // (out)

  Linear() = default;

  Linear(int in, int out, Rng& rng, double gain = 1.0) {
    w = Tensor::randn({in, out}, rng, gain / std::sqrt(double(in)), true);
    b = Tensor::zeros({out}, true);
  }

  static Linear zeroed(int in, int out) {
    Linear l;
    l.w = Tensor::zeros({in, out}, true);
    l.b = Tensor::zeros({out}, true);
    return l;
  }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, w), b); }

  void params(ParamList& out, const std::string& prefix) const {
    out.add(prefix + ".w", w);
    out.add(prefix + ".b", b);
  }
};

// two-layer perceptron with silu in between
struct Mlp {
  Linear in;
  Linear out;

  Mlp() = default;
  Mlp(int d_in, int d_hidden, int d_out, Rng& rng) : in(d_in, d_hidden, rng, std::sqrt(2.0)), out(d_hidden, d_out, rng) {}

  Tensor operator()(const Tensor& x) const { return out(silu(in(x))); }

  void params(ParamList& p, const std::string& prefix) const {
    in.params(p, prefix + ".in");
    out.params(p, prefix + ".out");
  }
};

} // namespace disco
