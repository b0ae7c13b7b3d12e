// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "anop/autodiff/tensor.hpp"

namespace anop::ad {

// Closed set of differentiable operations. `leaf` marks inputs and constants
// and is never a valid argument to Graph::apply.
enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  mul,
  scale,
  concat,
  slice,
  gather_rows,
  layer_norm,
  softmax,
  log_softmax,
  gelu,
  l2_normalize,
  mean,
  mse,
  cross_entropy,
  kl_divergence,
  gumbel_softmax,
  transpose,
  reshape,
  stop_gradient,
};

std::string_view op_name(OpKind kind);
// Parses the hyphenated operation name ("gather-rows", "kl-divergence", ...).
// Throws std::invalid_argument for names outside the closed set.
OpKind parse_op_kind(std::string_view name);

// How a gumbel-softmax node realizes its forward value.
//   soft     : y = softmax((logits + noise) / tau)
//   hard_st  : forward is one_hot(argmax(logits + noise)); backward uses the soft path
enum class GumbelMode : std::uint8_t { soft, hard_st };

inline constexpr double kLayerNormEpsilon = 1e-5;
inline constexpr double kProbabilityFloor = 1e-12;

struct Attrs {
  std::optional<int> axis;
  std::optional<double> temperature;
  std::optional<double> epsilon;
  std::optional<double> factor;
  std::optional<std::size_t> begin;
  std::optional<std::size_t> end;
  std::vector<std::size_t> indices;  // gather-rows row ids, cross-entropy labels
  std::optional<Shape> shape;        // reshape target
  std::optional<GumbelMode> gumbel_mode;
};

using NodeId = std::size_t;

class Graph;

// Lightweight handle to a graph node.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tensor grad() const;

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

// Append-only tape. Node ids are assigned in creation order, so every input id
// precedes its consumer and reverse id order is a valid backward schedule.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Owned leaf.
  Var leaf(Tensor value, bool requires_grad = false);
  // Leaf referring to a tensor owned elsewhere; it must outlive the graph.
  Var leaf_ref(const Tensor& value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var apply(OpKind kind, std::span<const Var> inputs, const Attrs& attrs = {});
  Var apply(std::string_view kind, std::span<const Var> inputs, const Attrs& attrs = {});

  // Populates gradients of every requires_grad ancestor of `loss`.
  void backward(Var loss);

  const Tensor& value(NodeId id) const;
  // Zero tensor of the node's shape when no gradient reached it.
  Tensor grad(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  std::span<const NodeId> inputs(NodeId id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor owned;
    const Tensor* external = nullptr;
    bool requires_grad = false;
    Attrs attrs;
    std::vector<double> saved;  // activations kept for backward
    Tensor grad;

    const Tensor& value() const { return external ? *external : owned; }
  };

  Tensor forward(OpKind kind, std::span<const NodeId> inputs, const Attrs& attrs, std::vector<double>& saved) const;
  void backprop(const Node& node);
  Tensor& grad_buffer(NodeId id);

  std::vector<Node> nodes_;
};

}  // namespace anop::ad
