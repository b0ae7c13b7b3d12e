// SPDX-License-Identifier: Apache-2.0
#include "anop/autodiff/ops.hpp"

#include <array>
#include <stdexcept>

namespace anop::ad {
namespace {

Var unary(OpKind kind, Var a, const Attrs& attrs = {}) {
  const std::array<Var, 1> in{a};
  return a.graph().apply(kind, in, attrs);
}

Var binary(OpKind kind, Var a, Var b, const Attrs& attrs = {}) {
  const std::array<Var, 2> in{a, b};
  return a.graph().apply(kind, in, attrs);
}

}  // namespace

Var matmul(Var a, Var b) { return binary(OpKind::matmul, a, b); }
Var add(Var a, Var b) { return binary(OpKind::add, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::mul, a, b); }

Var scale(Var a, double factor) {
  Attrs at;
  at.factor = factor;
  return unary(OpKind::scale, a, at);
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (parts.size() == 1) return parts[0];
  Attrs at;
  at.axis = axis;
  return parts[0].graph().apply(OpKind::concat, parts, at);
}

Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
  Attrs at;
  at.axis = axis;
  at.begin = begin;
  at.end = end;
  return unary(OpKind::slice, a, at);
}

Var gather_rows(Var table, std::vector<std::size_t> rows) {
  Attrs at;
  at.indices = std::move(rows);
  return unary(OpKind::gather_rows, table, at);
}

Var layer_norm(Var x, Var gain, Var bias, double epsilon) {
  Attrs at;
  at.epsilon = epsilon;
  const std::array<Var, 3> in{x, gain, bias};
  return x.graph().apply(OpKind::layer_norm, in, at);
}

Var softmax(Var x, double temperature) {
  Attrs at;
  at.temperature = temperature;
  return unary(OpKind::softmax, x, at);
}

Var log_softmax(Var x) { return unary(OpKind::log_softmax, x); }
Var gelu(Var x) { return unary(OpKind::gelu, x); }
Var l2_normalize(Var x) { return unary(OpKind::l2_normalize, x); }
Var mean(Var x) { return unary(OpKind::mean, x); }

Var mean(Var x, int axis) {
  Attrs at;
  at.axis = axis;
  return unary(OpKind::mean, x, at);
}

Var mse(Var a, Var b) { return binary(OpKind::mse, a, b); }

Var cross_entropy(Var logits, std::vector<std::size_t> labels) {
  Attrs at;
  at.indices = std::move(labels);
  return unary(OpKind::cross_entropy, logits, at);
}

Var kl_divergence(Var q, Var p) { return binary(OpKind::kl_divergence, q, p); }

Var gumbel_softmax(Var logits, Var noise, double temperature, GumbelMode mode) {
  Attrs at;
  at.temperature = temperature;
  at.gumbel_mode = mode;
  return binary(OpKind::gumbel_softmax, logits, noise, at);
}

Var transpose(Var a) { return unary(OpKind::transpose, a); }

Var reshape(Var a, Shape shape) {
  Attrs at;
  at.shape = std::move(shape);
  return unary(OpKind::reshape, a, at);
}

Var stop_gradient(Var a) { return unary(OpKind::stop_gradient, a); }

}  // namespace anop::ad
