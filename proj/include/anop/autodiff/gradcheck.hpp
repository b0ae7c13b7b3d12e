// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "anop/autodiff/graph.hpp"

namespace anop::ad {

// Builds a scalar from `x` inside the given graph.
using ScalarFn = std::function<Var(Graph&, Var x)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// The function is evaluated twice at `point` first; differing results mean
// unfixed randomness and are rejected with std::invalid_argument.
double check_gradients(const ScalarFn& fn, const Tensor& point, double step = 1e-5);

// Central-difference gradient on its own, for tests that need the raw oracle.
Tensor numeric_gradient(const ScalarFn& fn, const Tensor& point, double step = 1e-5);

}  // namespace anop::ad
