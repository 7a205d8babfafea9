#pragma once

// Test-side oracles, independent of the library's reverse pass: central
// finite differences over plain forward evaluations, and small Monte Carlo
// estimators. Kept free of any call into disco::backward / disco::grad_check
// so they can judge those.

#include <cmath>
#include <functional>
#include <vector>

#include "disco/tensor.hpp"

namespace oracles {

// d(f)/d(x_i) by central differences; f evaluates the forward path only
inline std::vector<double> fd_gradient(const std::function<double(const disco::Tensor&)>& f,
                                       const disco::Tensor& x, double h = 1e-5) {
  disco::NoGrad ng;
  disco::Tensor probe = x.clone();
  std::vector<double> grad(std::size_t(x.numel()));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    double orig = (*probe.data)[i];
    (*probe.data)[i] = orig + h;
    double fp = f(probe);
    (*probe.data)[i] = orig - h;
    double fm = f(probe);
    (*probe.data)[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n));
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& n) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], n[i]));
  return worst;
}

} // namespace oracles
