// SPDX-License-Identifier: Apache-2.0
#include "anop/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace anop::ad {
namespace {

double evaluate(const ScalarFn& fn, const Tensor& point) {
  Graph g;
  Var x = g.leaf(point, false);
  const Var y = fn(g, x);
  if (y.value().size() != 1) throw ShapeError("check_gradients: function is not scalar-valued");
  return y.value()[0];
}

}  // namespace

Tensor numeric_gradient(const ScalarFn& fn, const Tensor& point, double step) {
  Tensor grad(point.shape(), 0.0);
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = evaluate(fn, probe);
    probe[i] = orig - step;
    const double down = evaluate(fn, probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double check_gradients(const ScalarFn& fn, const Tensor& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("check_gradients: step must be positive");
  const double first = evaluate(fn, point);
  const double second = evaluate(fn, point);
  if (first != second) {
    throw std::invalid_argument("check_gradients: function is not deterministic (unfixed noise?)");
  }

  Graph g;
  Var x = g.leaf(point, true);
  const Var y = fn(g, x);
  g.backward(y);
  const Tensor analytic = x.grad();
  const Tensor numeric = numeric_gradient(fn, point, step);

  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace anop::ad
