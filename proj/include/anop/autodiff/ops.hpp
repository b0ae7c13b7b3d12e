// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <initializer_list>
#include <span>
#include <vector>

#include "anop/autodiff/graph.hpp"

// Typed wrappers over Graph::apply. All of them record one node.
namespace anop::ad {

Var matmul(Var a, Var b);
// b may match a's shape, be a single row broadcast over a's rows, or a scalar.
Var add(Var a, Var b);
// b may match a's shape or be a scalar.
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
Var slice(Var a, int axis, std::size_t begin, std::size_t end);
Var gather_rows(Var table, std::vector<std::size_t> rows);
Var layer_norm(Var x, Var gain, Var bias, double epsilon = kLayerNormEpsilon);
Var softmax(Var x, double temperature = 1.0);
Var log_softmax(Var x);
Var gelu(Var x);
Var l2_normalize(Var x);
Var mean(Var x);
Var mean(Var x, int axis);
Var mse(Var a, Var b);
// Mean over rows of -log softmax(logits)[label]; equals CE of the softmax
// probabilities, computed in log space.
Var cross_entropy(Var logits, std::vector<std::size_t> labels);
// Row-averaged sum q * (log q - log p), probabilities floored at 1e-12.
Var kl_divergence(Var q, Var p);
Var gumbel_softmax(Var logits, Var noise, double temperature, GumbelMode mode);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var stop_gradient(Var a);

}  // namespace anop::ad
