#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "disco/error.hpp"
#include "disco/rng.hpp"

namespace disco {

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

struct Node;

// Dense row-major f64 tensor. Copies share storage; ops never mutate their
// inputs, so shared values are safe to read from any thread. The optimizer is
// the single writer and only touches leaf parameters between graph runs.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  Tensor() : data(std::make_shared<std::vector<double>>()) {}

  Tensor(Shape s, std::vector<double> values, bool rg = false)
      : shape(std::move(s)), data(std::make_shared<std::vector<double>>(std::move(values))), requires_grad(rg) {
    if (numel_of(shape) != std::int64_t(data->size()))
      fail(errc::shape, "tensor: " + std::to_string(data->size()) + " values for shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s, bool rg = false) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(std::size_t(n), 0.0), rg);
  }

  static Tensor full(Shape s, double v, bool rg = false) {
    auto n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(std::size_t(n), v), rg);
  }

  static Tensor scalar(double v, bool rg = false) { return Tensor({1}, {v}, rg); }

  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0, bool rg = false) {
    auto n = numel_of(s);
    std::vector<double> v(static_cast<std::size_t>(n), 0.0);
    for (auto& x : v) x = stddev * rng.normal();
    return Tensor(std::move(s), std::move(v), rg);
  }

  std::int64_t numel() const { return std::int64_t(data->size()); }
  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape[std::size_t(i)]; }

  const double* ptr() const { return data->data(); }
  double* ptr() { return data->data(); }
  double item() const {
    if (numel() != 1) fail(errc::shape, "item: tensor has shape " + shape_str(shape));
    return (*data)[0];
  }

  // identity for gradient keying; stable across value copies
  const void* id() const { return data.get(); }

  double at(int i) const { return (*data)[std::size_t(i)]; }
  double at(int i, int j) const { return (*data)[std::size_t(i) * shape[1] + j]; }
  double at(int i, int j, int k) const {
    return (*data)[(std::size_t(i) * shape[1] + j) * shape[2] + k];
  }

  Tensor detach() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  Tensor clone() const { return Tensor(shape, *data, requires_grad); }
};

class Backprop;
using BackwardFn = std::function<void(const Node&, const std::vector<double>&, Backprop&)>;

struct Node {
  const char* op = "";
  std::vector<Tensor> inputs;
  BackwardFn backward;
  const void* out_id = nullptr;
  std::int64_t out_numel = 0;
};

namespace detail {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

} // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

struct NoGrad {
  bool prev;
  NoGrad() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGrad() { detail::grad_enabled_flag() = prev; }
  NoGrad(const NoGrad&) = delete;
};

// Per-run gradient accumulator keyed by tensor storage identity.
class Backprop {
public:
  std::vector<double>& buf(const Tensor& t) {
    auto [it, fresh] = bufs_.try_emplace(t.id());
    if (fresh) it->second.assign(std::size_t(t.numel()), 0.0);
    return it->second;
  }

  const std::vector<double>* find(const void* id) const {
    auto it = bufs_.find(id);
    return it == bufs_.end() ? nullptr : &it->second;
  }

  std::vector<double> take(const void* id, std::int64_t n) {
    auto it = bufs_.find(id);
    if (it == bufs_.end()) return std::vector<double>(std::size_t(n), 0.0);
    auto v = std::move(it->second);
    bufs_.erase(it);
    return v;
  }

private:
  std::unordered_map<const void*, std::vector<double>> bufs_;
};

// Gradients of one backward() run, keyed by leaf tensor identity.
class GradMap {
public:
  void put(const Tensor& leaf, Tensor grad) { grads_.emplace(leaf.id(), std::move(grad)); }

  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }

  const Tensor& at(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) fail(errc::internal, "gradmap: no gradient recorded for tensor");
    return it->second;
  }

  std::size_t size() const { return grads_.size(); }

private:
  std::unordered_map<const void*, Tensor> grads_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  for (double v : *t.data)
    if (!std::isfinite(v)) fail(errc::nonfinite, std::string(op) + ": non-finite input value");
}

// additive masks may carry -inf; NaN and +inf are still rejected
inline void check_mask(const Tensor& t, const char* op) {
  for (double v : *t.data)
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
      fail(errc::nonfinite, std::string(op) + ": mask must be finite or -inf");
}

inline Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                          std::vector<Tensor> inputs, BackwardFn fn) {
  bool track = grad_enabled();
  bool any = false;
  if (track)
    for (const auto& t : inputs) any |= t.requires_grad;
  Tensor out(std::move(shape), std::move(values));
  if (track && any) {
    out.requires_grad = true;
    out.node = std::make_shared<Node>();
    out.node->op = op;
    out.node->inputs = std::move(inputs);
    out.node->backward = std::move(fn);
    out.node->out_id = out.id();
    out.node->out_numel = out.numel();
  }
  return out;
}

// numpy-style broadcast of two shapes; error names the op and both operands
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  Shape out(std::max(a.size(), b.size()));
  for (std::size_t i = 0; i < out.size(); ++i) {
    int da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    int db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      fail(errc::shape, std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// strides into a tensor viewed at `out` rank, 0 on broadcast axes
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> st(out.size(), 0);
  std::int64_t acc = 1;
  for (int i = int(in.size()) - 1; i >= 0; --i) {
    std::size_t oi = i + out.size() - in.size();
    st[oi] = (in[std::size_t(i)] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= in[std::size_t(i)];
  }
  return st;
}

template <class F>
inline void binary_broadcast(const Tensor& a, const Tensor& b, const Shape& oshape,
                             std::vector<double>& out, F&& f) {
  const auto n = numel_of(oshape);
  if (a.shape == b.shape) { // contiguous fast path
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    for (std::int64_t i = 0; i < n; ++i) out[std::size_t(i)] = f(pa[i], pb[i]);
    return;
  }
  auto sa = broadcast_strides(a.shape, oshape);
  auto sb = broadcast_strides(b.shape, oshape);
  std::vector<int> idx(oshape.size(), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    out[std::size_t(i)] = f((*a.data)[std::size_t(oa)], (*b.data)[std::size_t(ob)]);
    for (int d = int(oshape.size()) - 1; d >= 0; --d) {
      oa += sa[std::size_t(d)];
      ob += sb[std::size_t(d)];
      if (++idx[std::size_t(d)] < oshape[std::size_t(d)]) break;
      oa -= sa[std::size_t(d)] * oshape[std::size_t(d)];
      ob -= sb[std::size_t(d)] * oshape[std::size_t(d)];
      idx[std::size_t(d)] = 0;
    }
  }
}

// accumulate gout (shaped `oshape`) into the possibly-broadcast input `t`:
// broadcast axes sum-reduce, which is exactly the broadcasting gradient
template <class F>
inline void accumulate_broadcast(const Tensor& t, const Shape& oshape,
                                 const std::vector<double>& gout, std::vector<double>& gin, F&& f) {
  if (t.shape == oshape) {
    for (std::size_t i = 0; i < gout.size(); ++i) gin[i] += f(gout[i], i);
    return;
  }
  auto st = broadcast_strides(t.shape, oshape);
  std::vector<int> idx(oshape.size(), 0);
  std::int64_t off = 0;
  for (std::size_t i = 0; i < gout.size(); ++i) {
    gin[std::size_t(off)] += f(gout[i], i);
    for (int d = int(oshape.size()) - 1; d >= 0; --d) {
      off += st[std::size_t(d)];
      if (++idx[std::size_t(d)] < oshape[std::size_t(d)]) break;
      off -= st[std::size_t(d)] * oshape[std::size_t(d)];
      idx[std::size_t(d)] = 0;
    }
  }
}

// maps an output linear index to an input linear index under broadcasting
struct BroadcastMap {
  std::vector<std::int64_t> strides;
  Shape oshape;
  std::int64_t operator()(std::int64_t i) const {
    std::int64_t off = 0;
    for (int d = int(oshape.size()) - 1; d >= 0; --d) {
      off += (i % oshape[std::size_t(d)]) * strides[std::size_t(d)];
      i /= oshape[std::size_t(d)];
    }
    return off;
  }
};

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, "add");
  detail::check_finite(b, "add");
  Shape os = detail::broadcast_shape(a.shape, b.shape, "add");
  std::vector<double> out(std::size_t(numel_of(os)));
  detail::binary_broadcast(a, b, os, out, [](double x, double y) { return x + y; });
  return detail::make_result(os, std::move(out), "add", {a, b},
      [os](const Node& n, const std::vector<double>& g, Backprop& bp) {
        for (int k = 0; k < 2; ++k)
          if (n.inputs[std::size_t(k)].requires_grad)
            detail::accumulate_broadcast(n.inputs[std::size_t(k)], os, g, bp.buf(n.inputs[std::size_t(k)]),
                                         [](double gi, std::size_t) { return gi; });
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, "sub");
  detail::check_finite(b, "sub");
  Shape os = detail::broadcast_shape(a.shape, b.shape, "sub");
  std::vector<double> out(std::size_t(numel_of(os)));
  detail::binary_broadcast(a, b, os, out, [](double x, double y) { return x - y; });
  return detail::make_result(os, std::move(out), "sub", {a, b},
      [os](const Node& n, const std::vector<double>& g, Backprop& bp) {
        if (n.inputs[0].requires_grad)
          detail::accumulate_broadcast(n.inputs[0], os, g, bp.buf(n.inputs[0]),
                                       [](double gi, std::size_t) { return gi; });
        if (n.inputs[1].requires_grad)
          detail::accumulate_broadcast(n.inputs[1], os, g, bp.buf(n.inputs[1]),
                                       [](double gi, std::size_t) { return -gi; });
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, "mul");
  detail::check_finite(b, "mul");
  Shape os = detail::broadcast_shape(a.shape, b.shape, "mul");
  std::vector<double> out(std::size_t(numel_of(os)));
  detail::binary_broadcast(a, b, os, out, [](double x, double y) { return x * y; });
  return detail::make_result(os, std::move(out), "mul", {a, b},
      [os](const Node& n, const std::vector<double>& g, Backprop& bp) {
        const Tensor& a = n.inputs[0];
        const Tensor& b = n.inputs[1];
        detail::BroadcastMap ma{detail::broadcast_strides(a.shape, os), os};
        detail::BroadcastMap mb{detail::broadcast_strides(b.shape, os), os};
        if (a.requires_grad)
          detail::accumulate_broadcast(a, os, g, bp.buf(a), [&](double gi, std::size_t i) {
            return gi * (*b.data)[std::size_t(mb(std::int64_t(i)))];
          });
        if (b.requires_grad)
          detail::accumulate_broadcast(b, os, g, bp.buf(b), [&](double gi, std::size_t i) {
            return gi * (*a.data)[std::size_t(ma(std::int64_t(i)))];
          });
      });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, "minimum");
  detail::check_finite(b, "minimum");
  if (a.shape != b.shape)
    fail(errc::shape, "minimum: shapes differ " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  std::vector<double> out(a.data->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min((*a.data)[i], (*b.data)[i]);
  return detail::make_result(a.shape, std::move(out), "minimum", {a, b},
      [](const Node& n, const std::vector<double>& g, Backprop& bp) {
        const Tensor& a = n.inputs[0];
        const Tensor& b = n.inputs[1];
        for (std::size_t i = 0; i < g.size(); ++i) {
          bool pick_a = (*a.data)[i] <= (*b.data)[i]; // tie goes to a
          if (pick_a && a.requires_grad) bp.buf(a)[i] += g[i];
          if (!pick_a && b.requires_grad) bp.buf(b)[i] += g[i];
        }
      });
}

inline Tensor maximum(const Tensor& a, const Tensor& b) {
  detail::check_finite(a, "maximum");
  detail::check_finite(b, "maximum");
  if (a.shape != b.shape)
    fail(errc::shape, "maximum: shapes differ " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  std::vector<double> out(a.data->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max((*a.data)[i], (*b.data)[i]);
  return detail::make_result(a.shape, std::move(out), "maximum", {a, b},
      [](const Node& n, const std::vector<double>& g, Backprop& bp) {
        const Tensor& a = n.inputs[0];
        const Tensor& b = n.inputs[1];
        for (std::size_t i = 0; i < g.size(); ++i) {
          bool pick_a = (*a.data)[i] >= (*b.data)[i];
          if (pick_a && a.requires_grad) bp.buf(a)[i] += g[i];
          if (!pick_a && b.requires_grad) bp.buf(b)[i] += g[i];
        }
      });
}

inline Tensor minimum(const Tensor& a, double c) { return minimum(a, Tensor::full(a.shape, c)); }
inline Tensor maximum(const Tensor& a, double c) { return maximum(a, Tensor::full(a.shape, c)); }

// y = c * x
inline Tensor scale(const Tensor& a, double c) {
  detail::check_finite(a, "scale");
  if (!std::isfinite(c)) fail(errc::nonfinite, "scale: non-finite factor");
  std::vector<double> out(a.data->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * (*a.data)[i];
  return detail::make_result(a.shape, std::move(out), "scale", {a},
      [c](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gin[i] += c * g[i];
      });
}

// y = x + c
inline Tensor shift(const Tensor& a, double c) {
  detail::check_finite(a, "shift");
  if (!std::isfinite(c)) fail(errc::nonfinite, "shift: non-finite offset");
  std::vector<double> out(a.data->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*a.data)[i] + c;
  return detail::make_result(a.shape, std::move(out), "shift", {a},
      [](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gin[i] += g[i];
      });
}

inline Tensor broadcast_to(const Tensor& a, const Shape& target) {
  detail::check_finite(a, "broadcast");
  Shape os = detail::broadcast_shape(a.shape, target, "broadcast");
  if (os != target)
    fail(errc::shape, "broadcast: " + shape_str(a.shape) + " does not broadcast to " + shape_str(target));
  std::vector<double> out(std::size_t(numel_of(os)));
  detail::BroadcastMap m{detail::broadcast_strides(a.shape, os), os};
  for (std::int64_t i = 0; i < numel_of(os); ++i) out[std::size_t(i)] = (*a.data)[std::size_t(m(i))];
  return detail::make_result(os, std::move(out), "broadcast", {a},
      [os](const Node& n, const std::vector<double>& g, Backprop& bp) {
        detail::accumulate_broadcast(n.inputs[0], os, g, bp.buf(n.inputs[0]),
                                     [](double gi, std::size_t) { return gi; });
      });
}

// ---------------------------------------------------------------------------
// unary maps

namespace detail {

template <class Fwd, class Bwd>
inline Tensor unary_op(const Tensor& a, const char* op, Fwd fwd, Bwd bwd, bool check_output = false) {
  check_finite(a, op);
  std::vector<double> out(a.data->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd((*a.data)[i]);
  if (check_output)
    for (double v : out)
      if (!std::isfinite(v)) fail(errc::nonfinite, std::string(op) + ": non-finite result");
  return make_result(a.shape, std::move(out), op, {a},
      [bwd](const Node& n, const std::vector<double>& g, Backprop& bp) {
        const Tensor& x = n.inputs[0];
        auto& gin = bp.buf(x);
        for (std::size_t i = 0; i < g.size(); ++i) gin[i] += g[i] * bwd((*x.data)[i]);
      });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

} // namespace detail

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(a, "sigmoid", detail::sigmoid_scalar, [](double x) {
    double s = detail::sigmoid_scalar(x);
    return s * (1.0 - s);
  });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(a, "tanh", [](double x) { return std::tanh(x); },
                          [](double x) {
                            double t = std::tanh(x);
                            return 1.0 - t * t;
                          });
}

inline Tensor silu(const Tensor& a) {
  return detail::unary_op(a, "silu", [](double x) { return x * detail::sigmoid_scalar(x); },
                          [](double x) {
                            double s = detail::sigmoid_scalar(x);
                            return s + x * s * (1.0 - s);
                          });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, "exp", [](double x) { return std::exp(x); },
                          [](double x) { return std::exp(x); }, /*check_output=*/true);
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(a, "log", [](double x) { return std::log(x); },
                          [](double x) { return 1.0 / x; }, /*check_output=*/true);
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(a, "square", [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape s) {
  if (numel_of(s) != a.numel())
    fail(errc::shape, "reshape: " + shape_str(a.shape) + " to " + shape_str(s));
  return detail::make_result(std::move(s), *a.data, "reshape", {a},
      [](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gin[i] += g[i];
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) fail(errc::shape, "transpose: rank-2 required, got " + shape_str(a.shape));
  int r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.data->size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[std::size_t(j) * r + i] = a.at(i, j);
  return detail::make_result({c, r}, std::move(out), "transpose", {a},
      [r, c](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gin[std::size_t(i) * c + j] += g[std::size_t(j) * r + i];
      });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail(errc::shape, "concat: no inputs");
  const Shape& s0 = parts[0].shape;
  if (axis < 0 || axis >= int(s0.size())) fail(errc::shape, "concat: bad axis");
  Shape os = s0;
  os[std::size_t(axis)] = 0;
  for (const auto& p : parts) {
    detail::check_finite(p, "concat");
    if (p.rank() != int(s0.size())) fail(errc::shape, "concat: rank mismatch " + shape_str(p.shape));
    for (int d = 0; d < p.rank(); ++d)
      if (d != axis && p.shape[std::size_t(d)] != s0[std::size_t(d)])
        fail(errc::shape, "concat: " + shape_str(p.shape) + " vs " + shape_str(s0));
    os[std::size_t(axis)] += p.shape[std::size_t(axis)];
  }
  // outer = product of dims before axis, inner = product after
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[std::size_t(d)];
  for (int d = axis + 1; d < int(s0.size()); ++d) inner *= s0[std::size_t(d)];
  std::vector<double> out(std::size_t(numel_of(os)));
  std::int64_t ostride = os[std::size_t(axis)] * inner;
  std::int64_t at = 0;
  for (const auto& p : parts) {
    std::int64_t pa = p.shape[std::size_t(axis)] * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * ostride + at, p.ptr() + o * pa, std::size_t(pa) * sizeof(double));
    at += pa;
  }
  return detail::make_result(os, std::move(out), "concat", parts,
      [outer, inner, ostride](const Node& n, const std::vector<double>& g, Backprop& bp) {
        std::int64_t at = 0;
        for (const auto& p : n.inputs) {
          std::int64_t pa = p.shape.empty() ? 0 : std::int64_t(p.numel()) / outer;
          if (p.requires_grad) {
            auto& gin = bp.buf(p);
            for (std::int64_t o = 0; o < outer; ++o)
              for (std::int64_t k = 0; k < pa; ++k) gin[std::size_t(o * pa + k)] += g[std::size_t(o * ostride + at + k)];
          }
          at += pa;
        }
        (void)inner;
      });
}

inline Tensor slice(const Tensor& a, int axis, int start, int len) {
  if (axis < 0 || axis >= a.rank()) fail(errc::shape, "slice: bad axis");
  int dim = a.shape[std::size_t(axis)];
  if (start < 0 || len <= 0 || start + len > dim)
    fail(errc::shape, "slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                          ") out of " + shape_str(a.shape));
  Shape os = a.shape;
  os[std::size_t(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape[std::size_t(d)];
  for (int d = axis + 1; d < a.rank(); ++d) inner *= a.shape[std::size_t(d)];
  std::vector<double> out(std::size_t(numel_of(os)));
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, a.ptr() + (o * dim + start) * inner,
                std::size_t(len * inner) * sizeof(double));
  return detail::make_result(os, std::move(out), "slice", {a},
      [outer, inner, dim, start, len](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t k = 0; k < len * inner; ++k)
            gin[std::size_t((o * dim + start) * inner + k)] += g[std::size_t(o * len * inner + k)];
      });
}

// gather rows of a 2-D table; backward scatter-adds into the table
inline Tensor rows(const Tensor& table, const std::vector<int>& idx) {
  if (table.rank() != 2) fail(errc::shape, "rows: table must be rank-2, got " + shape_str(table.shape));
  detail::check_finite(table, "rows");
  int cols = table.dim(1);
  for (int i : idx)
    if (i < 0 || i >= table.dim(0)) fail(errc::shape, "rows: index " + std::to_string(i) + " out of range");
  std::vector<double> out(idx.size() * std::size_t(cols));
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::memcpy(out.data() + r * std::size_t(cols), table.ptr() + std::size_t(idx[r]) * cols,
                std::size_t(cols) * sizeof(double));
  return detail::make_result({int(idx.size()), cols}, std::move(out), "rows", {table},
      [idx, cols](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (int c = 0; c < cols; ++c)
            gin[std::size_t(idx[r]) * cols + std::size_t(c)] += g[r * std::size_t(cols) + std::size_t(c)];
      });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
  detail::check_finite(a, "sum");
  double s = 0;
  for (double v : *a.data) s += v;
  return detail::make_result({1}, {s}, "sum", {a},
      [](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        for (auto& v : gin) v += g[0];
      });
}

inline Tensor mean(const Tensor& a) {
  detail::check_finite(a, "mean");
  if (a.numel() == 0) fail(errc::shape, "mean: empty tensor");
  double s = 0;
  for (double v : *a.data) s += v;
  double inv = 1.0 / double(a.numel());
  return detail::make_result({1}, {s * inv}, "mean", {a},
      [inv](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        for (auto& v : gin) v += g[0] * inv;
      });
}

inline Tensor l1(const Tensor& a) {
  detail::check_finite(a, "l1");
  double s = 0;
  for (double v : *a.data) s += std::abs(v);
  return detail::make_result({1}, {s}, "l1", {a},
      [](const Node& n, const std::vector<double>& g, Backprop& bp) {
        const Tensor& x = n.inputs[0];
        auto& gin = bp.buf(x);
        for (std::size_t i = 0; i < gin.size(); ++i) {
          double v = (*x.data)[i];
          gin[i] += g[0] * (v > 0 ? 1.0 : v < 0 ? -1.0 : 0.0);
        }
      });
}

// ---------------------------------------------------------------------------
// matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    fail(errc::shape, "matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  detail::check_finite(a, "matmul");
  detail::check_finite(b, "matmul");
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(std::size_t(m) * n, 0.0);
  {
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* pc = out.data();
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        double av = pa[std::size_t(i) * k + p];
        const double* brow = pb + std::size_t(p) * n;
        double* crow = pc + std::size_t(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
  return detail::make_result({m, n}, std::move(out), "matmul", {a, b},
      [m, k, n](const Node& nd, const std::vector<double>& g, Backprop& bp) {
        const Tensor& a = nd.inputs[0];
        const Tensor& b = nd.inputs[1];
        if (a.requires_grad) { // dA = G * B^T
          auto& ga = bp.buf(a);
          const double* pb = b.ptr();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              double gv = g[std::size_t(i) * n + j];
              const double* brow = pb + 0;
              for (int p = 0; p < k; ++p) ga[std::size_t(i) * k + p] += gv * brow[std::size_t(p) * n + j];
            }
        }
        if (b.requires_grad) { // dB = A^T * G
          auto& gb = bp.buf(b);
          const double* pa = a.ptr();
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double av = pa[std::size_t(i) * k + p];
              const double* grow = g.data() + std::size_t(i) * n;
              double* gbrow = gb.data() + std::size_t(p) * n;
              for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
      }
      });
}

// ---------------------------------------------------------------------------
// fused row ops

// softmax over the last axis of a rank-2 tensor with an additive {0, -inf}
// mask; -inf entries come out exactly 0, fully-masked rows come out all-zero
inline Tensor softmax_masked(const Tensor& logits, const Tensor& mask) {
  if (logits.rank() != 2 || logits.shape != mask.shape)
    fail(errc::shape, "softmax_masked: " + shape_str(logits.shape) + " with mask " + shape_str(mask.shape));
  detail::check_finite(logits, "softmax_masked");
  detail::check_mask(mask, "softmax_masked");
  int r = logits.dim(0), c = logits.dim(1);
  std::vector<double> out(std::size_t(r) * c, 0.0);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < r; ++i) {
    double mx = neg_inf;
    for (int j = 0; j < c; ++j)
      if (mask.at(i, j) != neg_inf) mx = std::max(mx, logits.at(i, j) + mask.at(i, j));
    if (mx == neg_inf) continue; // fully masked row stays zero
    double z = 0;
    for (int j = 0; j < c; ++j)
      if (mask.at(i, j) != neg_inf) {
        double e = std::exp(logits.at(i, j) + mask.at(i, j) - mx);
        out[std::size_t(i) * c + j] = e;
        z += e;
      }
    double inv = 1.0 / z;
    for (int j = 0; j < c; ++j) out[std::size_t(i) * c + j] *= inv;
  }
  Tensor probs(Shape{r, c}, out); // captured for backward
  return detail::make_result({r, c}, std::move(out), "softmax_masked", {logits, mask},
      [r, c, probs](const Node& n, const std::vector<double>& g, Backprop& bp) {
        if (!n.inputs[0].requires_grad) return;
        auto& gin = bp.buf(n.inputs[0]);
        for (int i = 0; i < r; ++i) {
          double dot = 0;
          for (int j = 0; j < c; ++j) dot += g[std::size_t(i) * c + j] * probs.at(i, j);
          for (int j = 0; j < c; ++j) {
            double p = probs.at(i, j);
            gin[std::size_t(i) * c + j] += p * (g[std::size_t(i) * c + j] - dot);
          }
        }
      });
}

// normalize the last axis to zero mean / unit variance (no affine)
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
  if (a.rank() < 1) fail(errc::shape, "layer_norm: scalar input");
  detail::check_finite(a, "layer_norm");
  int c = a.shape.back();
  std::int64_t rows_n = a.numel() / c;
  std::vector<double> out(a.data->size());
  std::vector<double> inv_sd(static_cast<std::size_t>(rows_n), 0.0);
  for (std::int64_t i = 0; i < rows_n; ++i) {
    const double* x = a.ptr() + i * c;
    double mu = 0;
    for (int j = 0; j < c; ++j) mu += x[j];
    mu /= c;
    double var = 0;
    for (int j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_sd[std::size_t(i)] = inv;
    for (int j = 0; j < c; ++j) out[std::size_t(i * c + j)] = (x[j] - mu) * inv;
  }
  Tensor y(a.shape, out);
  return detail::make_result(a.shape, std::move(out), "layer_norm", {a},
      [c, rows_n, inv_sd, y](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        for (std::int64_t i = 0; i < rows_n; ++i) {
          const double* yi = y.ptr() + i * c;
          const double* gi = g.data() + i * c;
          double gmean = 0, gymean = 0;
          for (int j = 0; j < c; ++j) {
            gmean += gi[j];
            gymean += gi[j] * yi[j];
          }
          gmean /= c;
          gymean /= c;
          double inv = inv_sd[std::size_t(i)];
          for (int j = 0; j < c; ++j) gin[std::size_t(i * c + j)] += inv * (gi[j] - gmean - yi[j] * gymean);
        }
      });
}

// ---------------------------------------------------------------------------
// patch <-> token layout for the denoiser

// (H, W, C) image -> (H/p * W/p, p*p*C) tokens, patches in row-major order
inline Tensor patchify(const Tensor& img, int p) {
  if (img.rank() != 3) fail(errc::shape, "patchify: want (H,W,C), got " + shape_str(img.shape));
  int h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (h % p || w % p) fail(errc::shape, "patchify: patch " + std::to_string(p) + " does not divide " + shape_str(img.shape));
  detail::check_finite(img, "patchify");
  int gh = h / p, gw = w / p;
  std::vector<double> out(img.data->size());
  std::size_t o = 0;
  for (int br = 0; br < gh; ++br)
    for (int bc = 0; bc < gw; ++bc)
      for (int pr = 0; pr < p; ++pr)
        for (int pc = 0; pc < p; ++pc)
          for (int ch = 0; ch < c; ++ch) out[o++] = img.at(br * p + pr, bc * p + pc, ch);
  return detail::make_result({gh * gw, p * p * c}, std::move(out), "patchify", {img},
      [h, w, c, p, gh, gw](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        std::size_t o = 0;
        for (int br = 0; br < gh; ++br)
          for (int bc = 0; bc < gw; ++bc)
            for (int pr = 0; pr < p; ++pr)
              for (int pc = 0; pc < p; ++pc)
                for (int ch = 0; ch < c; ++ch)
                  gin[std::size_t(((br * p + pr) * w + bc * p + pc) * c + ch)] += g[o++];
        (void)h;
      });
}

inline Tensor unpatchify(const Tensor& tok, int h, int w, int c, int p) {
  int gh = h / p, gw = w / p;
  if (tok.rank() != 2 || tok.dim(0) != gh * gw || tok.dim(1) != p * p * c)
    fail(errc::shape, "unpatchify: got " + shape_str(tok.shape));
  detail::check_finite(tok, "unpatchify");
  std::vector<double> out(std::size_t(h) * w * c);
  std::size_t o = 0;
  for (int br = 0; br < gh; ++br)
    for (int bc = 0; bc < gw; ++bc)
      for (int pr = 0; pr < p; ++pr)
        for (int pc = 0; pc < p; ++pc)
          for (int ch = 0; ch < c; ++ch) out[std::size_t(((br * p + pr) * w + bc * p + pc) * c + ch)] = (*tok.data)[o++];
  return detail::make_result({h, w, c}, std::move(out), "unpatchify", {tok},
      [h, w, c, p, gh, gw](const Node& n, const std::vector<double>& g, Backprop& bp) {
        auto& gin = bp.buf(n.inputs[0]);
        std::size_t o = 0;
        for (int br = 0; br < gh; ++br)
          for (int bc = 0; bc < gw; ++bc)
            for (int pr = 0; pr < p; ++pr)
              for (int pc = 0; pc < p; ++pc)
                for (int ch = 0; ch < c; ++ch)
                  gin[o++] += g[std::size_t(((br * p + pr) * w + bc * p + pc) * c + ch)];
      });
}

// ---------------------------------------------------------------------------
// reverse pass

// Reverse-mode sweep from a scalar loss. Returns gradients for every
// requires_grad leaf reachable from the loss (absent paths yield zeros).
inline GradMap backward(const Tensor& loss) {
  if (loss.numel() != 1) fail(errc::shape, "backward: loss must be scalar, got " + shape_str(loss.shape));
  GradMap out;
  if (!loss.requires_grad) return out;
  if (!loss.node) { // loss is itself a leaf
    out.put(loss, Tensor::scalar(1.0));
    return out;
  }

  // iterative post-order topological sort over nodes
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node.get(), 0}};
  seen.insert(loss.node.get());
  std::vector<Tensor> leaves;
  std::unordered_set<const void*> leaf_seen;
  while (!stack.empty()) {
    auto& [nd, next] = stack.back();
    if (next < nd->inputs.size()) {
      const Tensor& in = nd->inputs[next++];
      if (in.node) {
        if (seen.insert(in.node.get()).second) stack.push_back({in.node.get(), 0});
      } else if (in.requires_grad && leaf_seen.insert(in.id()).second) {
        leaves.push_back(in);
      }
    } else {
      order.push_back(nd);
      stack.pop_back();
    }
  }

  Backprop bp;
  bp.buf(loss)[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* nd = *it;
    auto g = bp.take(nd->out_id, nd->out_numel);
    nd->backward(*nd, g, bp);
  }
  for (const auto& leaf : leaves)
    out.put(leaf, Tensor(leaf.shape, bp.take(leaf.id(), leaf.numel())));
  return out;
}

// Max relative error between analytic and central-difference gradients of a
// scalar-valued f at x.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor xg = x.clone();
  xg.requires_grad = true;
  Tensor y = f(xg);
  if (y.numel() != 1) fail(errc::shape, "grad_check: f must be scalar-valued");
  if (!std::isfinite(y.item())) fail(errc::nonfinite, "grad_check: non-finite value at x");
  GradMap gm = backward(y);
  Tensor analytic = gm.contains(xg) ? gm.at(xg) : Tensor::zeros(xg.shape);

  double worst = 0;
  Tensor probe = x.clone();
  NoGrad ng;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    double orig = (*probe.data)[std::size_t(i)];
    (*probe.data)[std::size_t(i)] = orig + h;
    double fp = f(probe).item();
    (*probe.data)[std::size_t(i)] = orig - h;
    double fm = f(probe).item();
    (*probe.data)[std::size_t(i)] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) fail(errc::nonfinite, "grad_check: non-finite probe");
    double numeric = (fp - fm) / (2.0 * h);
    double a = (*analytic.data)[std::size_t(i)];
    double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

} // namespace disco
