#pragma once

#include <cmath>
#include <functional>

#include "uae/ops.hpp"

namespace uae {

// Central-difference gradient verification. Always run in 64-bit.
// Returns max over checked coordinates of
//   |analytic - central_difference| / max(1, |central_difference|).
using ScalarFn = std::function<Tensor<double>(const Tensor<double>&)>;

namespace detail {
inline double eval_scalar(const ScalarFn& f, const Shape& shape, const std::vector<double>& x) {
  NoGradGuard ng;
  Tensor<double> t = Tensor<double>::from_data(shape, x);
  double v = f(t).scalar();
  if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite intermediate value");
  return v;
}
}  // namespace detail

inline double finite_difference_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-5,
                                      const std::vector<int64_t>* coords = nullptr) {
  if (eps <= 0) throw ValueError("finite_difference_check: eps must be positive");
  // Analytic gradient through the recorded graph.
  Tensor<double> xp = Tensor<double>::param("__fd_x", x.shape(), x.data());
  Tensor<double> y = f(xp);
  if (!std::isfinite(y.scalar()))
    throw NumericError("finite_difference_check: non-finite loss value");
  std::vector<double> analytic(x.data().size(), 0.0);
  if (y.requires_grad()) {
    GradientMap<double> g = backward(y);
    auto it = g.find("__fd_x");
    if (it != g.end()) analytic = it->second.data();
  }

  std::vector<int64_t> all;
  if (!coords) {
    all.resize(x.data().size());
    std::iota(all.begin(), all.end(), 0);
    coords = &all;
  }
  double max_rel = 0.0;
  std::vector<double> pt = x.data();
  for (int64_t c : *coords) {
    double orig = pt[static_cast<size_t>(c)];
    pt[static_cast<size_t>(c)] = orig + eps;
    double fp = detail::eval_scalar(f, x.shape(), pt);
    pt[static_cast<size_t>(c)] = orig - eps;
    double fm = detail::eval_scalar(f, x.shape(), pt);
    pt[static_cast<size_t>(c)] = orig;
    double fd = (fp - fm) / (2.0 * eps);
    double rel = std::abs(analytic[static_cast<size_t>(c)] - fd) / std::max(1.0, std::abs(fd));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace uae
