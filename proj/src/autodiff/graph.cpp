// SPDX-License-Identifier: Apache-2.0
#include "anop/autodiff/graph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace anop::ad {
namespace {

struct KindName {
  OpKind kind;
  std::string_view name;
};

constexpr std::array<KindName, 21> kKindNames{{
    {OpKind::leaf, "leaf"},
    {OpKind::matmul, "matmul"},
    {OpKind::add, "add"},
    {OpKind::mul, "mul"},
    {OpKind::scale, "scale"},
    {OpKind::concat, "concat"},
    {OpKind::slice, "slice"},
    {OpKind::gather_rows, "gather-rows"},
    {OpKind::layer_norm, "layer-norm"},
    {OpKind::softmax, "softmax"},
    {OpKind::log_softmax, "log-softmax"},
    {OpKind::gelu, "gelu"},
    {OpKind::l2_normalize, "l2-normalize"},
    {OpKind::mean, "mean"},
    {OpKind::mse, "mse"},
    {OpKind::cross_entropy, "cross-entropy"},
    {OpKind::kl_divergence, "kl-divergence"},
    {OpKind::gumbel_softmax, "gumbel-softmax"},
    {OpKind::transpose, "transpose"},
    {OpKind::reshape, "reshape"},
    {OpKind::stop_gradient, "stop-gradient"},
}};

[[noreturn]] void shape_error(OpKind kind, const std::string& what, std::span<const Tensor* const> inputs) {
  std::string msg = std::string(op_name(kind)) + ": " + what + " (input shapes:";
  for (const Tensor* t : inputs) msg += " " + to_string(t->shape());
  msg += ")";
  throw ShapeError(msg);
}

void require_arity(OpKind kind, std::span<const Tensor* const> in, std::size_t n) {
  if (in.size() != n) {
    shape_error(kind, "expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()), in);
  }
}

template <class T>
T require_attr(OpKind kind, const std::optional<T>& attr, const char* name) {
  if (!attr) throw std::invalid_argument(std::string(op_name(kind)) + ": missing attribute '" + name + "'");
  return *attr;
}

bool is_row_like(const Tensor& t) { return t.rank() <= 1 || (t.rank() == 2 && t.shape()[0] == 1); }

// Row-wise max-shifted softmax of `x / temperature` into `out`.
void softmax_rows(std::span<const double> x, std::size_t rows, std::size_t cols, double temperature,
                  std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = out.data() + r * cols;
    double mx = xr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp((xr[c] - mx) / temperature);
      sum += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= sum;
  }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

std::size_t argmax_row(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

}  // namespace

std::string_view op_name(OpKind kind) {
  for (const auto& kn : kKindNames) {
    if (kn.kind == kind) return kn.name;
  }
  return "unknown";
}

OpKind parse_op_kind(std::string_view name) {
  for (const auto& kn : kKindNames) {
    if (kn.name == name && kn.kind != OpKind::leaf) return kn.kind;
  }
  throw std::invalid_argument("unknown operation kind '" + std::string(name) + "'");
}

const Tensor& Var::value() const { return graph_->value(id_); }
Tensor Var::grad() const { return graph_->grad(id_); }

Var Graph::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw std::invalid_argument("leaf tensor contains non-finite values");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::leaf_ref(const Tensor& value, bool requires_grad) {
  if (!value.all_finite()) throw std::invalid_argument("leaf tensor contains non-finite values");
  Node n;
  n.external = &value;
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::value(NodeId id) const { return nodes_.at(id).value(); }

Tensor Graph::grad(NodeId id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.empty()) return Tensor(n.value().shape(), 0.0);
  return n.grad;
}

Tensor& Graph::grad_buffer(NodeId id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value().shape(), 0.0);
  return n.grad;
}

Var Graph::apply(std::string_view kind, std::span<const Var> inputs, const Attrs& attrs) {
  return apply(parse_op_kind(kind), inputs, attrs);
}

Var Graph::apply(OpKind kind, std::span<const Var> inputs, const Attrs& attrs) {
  if (kind == OpKind::leaf || op_name(kind) == "unknown") {
    throw std::invalid_argument("unknown operation kind passed to apply");
  }
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  bool needs_grad = false;
  for (const Var& v : inputs) {
    if (&v.graph() != this) throw std::invalid_argument(std::string(op_name(kind)) + ": input from another graph");
    ids.push_back(v.id());
    needs_grad = needs_grad || nodes_[v.id()].requires_grad;
  }
  if (kind == OpKind::stop_gradient) needs_grad = false;
  // Gumbel noise is a sampled constant; only the logits carry gradient.
  if (kind == OpKind::gumbel_softmax && !ids.empty()) needs_grad = nodes_[ids[0]].requires_grad;

  Node n;
  n.kind = kind;
  n.attrs = attrs;
  n.owned = forward(kind, ids, attrs, n.saved);
  if (!n.owned.all_finite()) {
    throw std::runtime_error(std::string(op_name(kind)) + ": produced a non-finite value");
  }
  n.inputs = std::move(ids);
  n.requires_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor Graph::forward(OpKind kind, std::span<const NodeId> ids, const Attrs& attrs,
                      std::vector<double>& saved) const {
  std::vector<const Tensor*> in;
  in.reserve(ids.size());
  for (NodeId id : ids) in.push_back(&nodes_[id].value());
  const std::span<const Tensor* const> ins(in);

  switch (kind) {
    case OpKind::matmul: {
      require_arity(kind, ins, 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        shape_error(kind, "inner dimensions differ", ins);
      }
      const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
      Tensor out({m, n}, 0.0);
      const double* av = a.values().data();
      const double* bv = b.values().data();
      double* ov = out.values().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          const double* brow = bv + p * n;
          double* orow = ov + i * n;
          for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
      }
      return out;
    }
    case OpKind::add:
    case OpKind::mul: {
      require_arity(kind, ins, 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      Tensor out = a;
      auto ov = out.values();
      auto bv = b.values();
      const bool add = kind == OpKind::add;
      if (b.shape() == a.shape()) {
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = add ? ov[i] + bv[i] : ov[i] * bv[i];
      } else if (b.size() == 1) {
        for (double& x : ov) x = add ? x + bv[0] : x * bv[0];
      } else if (add && is_row_like(b) && b.size() == a.cols()) {
        const std::size_t cols = a.cols();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i % cols];
      } else {
        shape_error(kind, "operand shapes are not broadcast-compatible", ins);
      }
      return out;
    }
    case OpKind::scale: {
      require_arity(kind, ins, 1);
      const double f = require_attr(kind, attrs.factor, "factor");
      Tensor out = *in[0];
      for (double& x : out.values()) x *= f;
      return out;
    }
    case OpKind::concat: {
      if (in.empty()) shape_error(kind, "needs at least one input", ins);
      const int axis = require_attr(kind, attrs.axis, "axis");
      if (axis == 0) {
        const bool flat = in[0]->rank() == 1;
        const std::size_t cols = in[0]->cols();
        std::size_t rows = 0;
        std::vector<double> values;
        for (const Tensor* t : in) {
          if ((t->rank() == 1) != flat || (!flat && (t->rank() != 2 || t->cols() != cols))) {
            shape_error(kind, "axis-0 inputs must share rank and column count", ins);
          }
          rows += flat ? t->size() : t->rows();
          values.insert(values.end(), t->values().begin(), t->values().end());
        }
        return flat ? Tensor({rows}, std::move(values)) : Tensor({rows, cols}, std::move(values));
      }
      if (axis == 1) {
        const std::size_t rows = in[0]->rows();
        std::size_t cols = 0;
        for (const Tensor* t : in) {
          if (t->rank() != 2 || t->rows() != rows) shape_error(kind, "axis-1 inputs must share row count", ins);
          cols += t->cols();
        }
        Tensor out({rows, cols});
        std::size_t offset = 0;
        for (const Tensor* t : in) {
          for (std::size_t r = 0; r < rows; ++r) {
            std::copy(t->row(r).begin(), t->row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
          }
          offset += t->cols();
        }
        return out;
      }
      shape_error(kind, "axis must be 0 or 1", ins);
    }
    case OpKind::slice: {
      require_arity(kind, ins, 1);
      const Tensor& a = *in[0];
      const int axis = require_attr(kind, attrs.axis, "axis");
      const std::size_t b = require_attr(kind, attrs.begin, "begin");
      const std::size_t e = require_attr(kind, attrs.end, "end");
      if (a.rank() == 1 && axis == 0) {
        if (b >= e || e > a.size()) shape_error(kind, "range out of bounds", ins);
        return Tensor({e - b}, std::vector<double>(a.values().begin() + b, a.values().begin() + e));
      }
      if (a.rank() != 2 || (axis != 0 && axis != 1)) shape_error(kind, "unsupported axis for input rank", ins);
      const std::size_t extent = a.shape()[static_cast<std::size_t>(axis)];
      if (b >= e || e > extent) shape_error(kind, "range out of bounds", ins);
      if (axis == 0) {
        const std::size_t cols = a.cols();
        return Tensor({e - b, cols}, std::vector<double>(a.values().begin() + static_cast<std::ptrdiff_t>(b * cols),
                                                         a.values().begin() + static_cast<std::ptrdiff_t>(e * cols)));
      }
      Tensor out({a.rows(), e - b});
      for (std::size_t r = 0; r < a.rows(); ++r) {
        std::copy(a.row(r).begin() + static_cast<std::ptrdiff_t>(b), a.row(r).begin() + static_cast<std::ptrdiff_t>(e),
                  out.row(r).begin());
      }
      return out;
    }
    case OpKind::gather_rows: {
      require_arity(kind, ins, 1);
      const Tensor& table = *in[0];
      if (table.rank() != 2 || attrs.indices.empty()) shape_error(kind, "needs a 2-D table and row ids", ins);
      Tensor out({attrs.indices.size(), table.cols()});
      for (std::size_t i = 0; i < attrs.indices.size(); ++i) {
        const std::size_t r = attrs.indices[i];
        if (r >= table.rows()) shape_error(kind, "row id " + std::to_string(r) + " out of range", ins);
        std::copy(table.row(r).begin(), table.row(r).end(), out.row(i).begin());
      }
      return out;
    }
    case OpKind::layer_norm: {
      require_arity(kind, ins, 3);
      const Tensor& x = *in[0];
      const std::size_t rows = x.rows(), cols = x.cols();
      if (x.rank() == 0 || in[1]->size() != cols || in[2]->size() != cols) {
        shape_error(kind, "gain and bias must match the feature width", ins);
      }
      const double eps = attrs.epsilon.value_or(kLayerNormEpsilon);
      auto g = in[1]->values();
      auto bias = in[2]->values();
      Tensor out(x.shape());
      saved.assign(rows * cols + rows, 0.0);  // xhat then inverse std per row
      for (std::size_t r = 0; r < rows; ++r) {
        auto xr = x.row(r);
        double mu = 0.0;
        for (double v : xr) mu += v;
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (double v : xr) var += (v - mu) * (v - mu);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        saved[rows * cols + r] = inv;
        auto yr = out.row(r);
        for (std::size_t c = 0; c < cols; ++c) {
          const double xh = (xr[c] - mu) * inv;
          saved[r * cols + c] = xh;
          yr[c] = xh * g[c] + bias[c];
        }
      }
      return out;
    }
    case OpKind::softmax: {
      require_arity(kind, ins, 1);
      const double t = attrs.temperature.value_or(1.0);
      if (!(t > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
      const Tensor& x = *in[0];
      if (x.rank() == 0) shape_error(kind, "needs rank 1 or 2", ins);
      Tensor out(x.shape());
      softmax_rows(x.values(), x.rows(), x.cols(), t, out.values());
      return out;
    }
    case OpKind::log_softmax: {
      require_arity(kind, ins, 1);
      const Tensor& x = *in[0];
      if (x.rank() == 0) shape_error(kind, "needs rank 1 or 2", ins);
      Tensor out(x.shape());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        const double mx = *std::max_element(xr.begin(), xr.end());
        double sum = 0.0;
        for (double v : xr) sum += std::exp(v - mx);
        const double lse = mx + std::log(sum);
        auto yr = out.row(r);
        for (std::size_t c = 0; c < xr.size(); ++c) yr[c] = xr[c] - lse;
      }
      return out;
    }
    case OpKind::gelu: {
      require_arity(kind, ins, 1);
      Tensor out = *in[0];
      for (double& v : out.values()) v = gelu_value(v);
      return out;
    }
    case OpKind::l2_normalize: {
      require_arity(kind, ins, 1);
      const Tensor& x = *in[0];
      if (x.rank() == 0) shape_error(kind, "needs rank 1 or 2", ins);
      Tensor out(x.shape());
      saved.assign(x.rows(), 0.0);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        double ss = 0.0;
        for (double v : xr) ss += v * v;
        const double norm = std::sqrt(ss);
        if (norm == 0.0) throw std::invalid_argument("l2-normalize: zero-norm row " + std::to_string(r));
        saved[r] = norm;
        auto yr = out.row(r);
        for (std::size_t c = 0; c < xr.size(); ++c) yr[c] = xr[c] / norm;
      }
      return out;
    }
    case OpKind::mean: {
      require_arity(kind, ins, 1);
      const Tensor& x = *in[0];
      if (!attrs.axis) {
        double s = 0.0;
        for (double v : x.values()) s += v;
        return Tensor::scalar(s / static_cast<double>(x.size()));
      }
      if (x.rank() != 2) shape_error(kind, "axis reduction needs a 2-D input", ins);
      const std::size_t rows = x.rows(), cols = x.cols();
      if (*attrs.axis == 0) {
        Tensor out({1, cols}, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) out[c] += x.at(r, c);
        for (double& v : out.values()) v /= static_cast<double>(rows);
        return out;
      }
      if (*attrs.axis == 1) {
        Tensor out({rows, 1}, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (double v : x.row(r)) s += v;
          out[r] = s / static_cast<double>(cols);
        }
        return out;
      }
      shape_error(kind, "axis must be 0 or 1", ins);
    }
    case OpKind::mse: {
      require_arity(kind, ins, 2);
      if (in[0]->shape() != in[1]->shape()) shape_error(kind, "operands differ in shape", ins);
      double s = 0.0;
      auto a = in[0]->values();
      auto b = in[1]->values();
      for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
      return Tensor::scalar(s / static_cast<double>(a.size()));
    }
    case OpKind::cross_entropy: {
      require_arity(kind, ins, 1);
      const Tensor& logits = *in[0];
      if (logits.rank() == 0 || attrs.indices.size() != logits.rows()) {
        shape_error(kind, "needs one label per logit row", ins);
      }
      const std::size_t rows = logits.rows(), cols = logits.cols();
      saved.assign(rows * cols, 0.0);
      softmax_rows(logits.values(), rows, cols, 1.0, saved);
      double loss = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t y = attrs.indices[r];
        if (y >= cols) shape_error(kind, "label " + std::to_string(y) + " out of range", ins);
        auto lr = logits.row(r);
        const double mx = *std::max_element(lr.begin(), lr.end());
        double sum = 0.0;
        for (double v : lr) sum += std::exp(v - mx);
        loss += (mx + std::log(sum)) - lr[y];
      }
      return Tensor::scalar(loss / static_cast<double>(rows));
    }
    case OpKind::kl_divergence: {
      require_arity(kind, ins, 2);
      const Tensor& q = *in[0];
      const Tensor& p = *in[1];
      if (q.shape() != p.shape() || q.rank() == 0) shape_error(kind, "operands differ in shape", ins);
      double s = 0.0;
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] == 0.0) continue;
        s += q[i] * (std::log(std::max(q[i], kProbabilityFloor)) - std::log(std::max(p[i], kProbabilityFloor)));
      }
      return Tensor::scalar(s / static_cast<double>(q.rows()));
    }
    case OpKind::gumbel_softmax: {
      require_arity(kind, ins, 2);
      const Tensor& logits = *in[0];
      const Tensor& noise = *in[1];
      if (logits.shape() != noise.shape() || logits.rank() == 0) shape_error(kind, "noise must match logits", ins);
      const double t = require_attr(kind, attrs.temperature, "temperature");
      if (!(t > 0.0)) throw std::invalid_argument("gumbel-softmax: temperature must be positive");
      const std::size_t rows = logits.rows(), cols = logits.cols();
      std::vector<double> perturbed(logits.size());
      for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] = logits[i] + noise[i];
      saved.assign(logits.size(), 0.0);
      softmax_rows(perturbed, rows, cols, t, saved);
      const GumbelMode mode = attrs.gumbel_mode.value_or(GumbelMode::soft);
      if (mode == GumbelMode::soft) return Tensor(logits.shape(), saved);
      Tensor out(logits.shape(), 0.0);
      for (std::size_t r = 0; r < rows; ++r) out.at(r, argmax_row(perturbed.data() + r * cols, cols)) = 1.0;
      return out;
    }
    case OpKind::transpose: {
      require_arity(kind, ins, 1);
      const Tensor& a = *in[0];
      if (a.rank() != 2) shape_error(kind, "needs a 2-D input", ins);
      Tensor out({a.cols(), a.rows()});
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out.at(c, r) = a.at(r, c);
      return out;
    }
    case OpKind::reshape: {
      require_arity(kind, ins, 1);
      const Shape target = require_attr(kind, attrs.shape, "shape");
      if (shape_volume(target) != in[0]->size()) shape_error(kind, "target " + to_string(target) + " changes volume", ins);
      return Tensor(target, std::vector<double>(in[0]->values().begin(), in[0]->values().end()));
    }
    case OpKind::stop_gradient: {
      require_arity(kind, ins, 1);
      return *in[0];
    }
    case OpKind::leaf:
      break;
  }
  throw std::invalid_argument("unknown operation kind");
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw std::invalid_argument("backward: loss belongs to another graph");
  const Tensor& lv = value(loss.id());
  if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + to_string(lv.shape()));
  for (Node& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] = 1.0;
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (n.kind == OpKind::leaf || !n.requires_grad || n.grad.empty()) continue;
    backprop(n);
  }
}

void Graph::backprop(const Node& node) {
  const Tensor& g = node.grad;
  const Tensor& out = node.value();
  auto wants = [&](std::size_t i) { return nodes_[node.inputs[i]].requires_grad; };
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[node.inputs[i]].value(); };

  switch (node.kind) {
    case OpKind::matmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
      if (wants(0)) {
        Tensor& ga = grad_buffer(node.inputs[0]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * b[p * n + j];
            ga[i * k + p] += s;
          }
      }
      if (wants(1)) {
        Tensor& gb = grad_buffer(node.inputs[1]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
          }
      }
      return;
    }
    case OpKind::add:
    case OpKind::mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const bool add = node.kind == OpKind::add;
      if (wants(0)) {
        Tensor& ga = grad_buffer(node.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (add) {
            ga[i] += g[i];
          } else {
            ga[i] += g[i] * (b.size() == 1 ? b[0] : b[i]);
          }
        }
      }
      if (wants(1)) {
        Tensor& gb = grad_buffer(node.inputs[1]);
        if (b.shape() == a.shape()) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += add ? g[i] : g[i] * a[i];
        } else if (b.size() == 1) {
          double s = 0.0;
          for (std::size_t i = 0; i < g.size(); ++i) s += add ? g[i] : g[i] * a[i];
          gb[0] += s;
        } else {
          const std::size_t cols = a.cols();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
        }
      }
      return;
    }
    case OpKind::scale: {
      const double f = *node.attrs.factor;
      Tensor& ga = grad_buffer(node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += f * g[i];
      return;
    }
    case OpKind::concat: {
      const int axis = *node.attrs.axis;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const Tensor& t = in(k);
        if (axis == 0) {
          if (wants(k)) {
            Tensor& gt = grad_buffer(node.inputs[k]);
            for (std::size_t i = 0; i < t.size(); ++i) gt[i] += g[offset + i];
          }
          offset += t.size();
        } else {
          if (wants(k)) {
            Tensor& gt = grad_buffer(node.inputs[k]);
            for (std::size_t r = 0; r < t.rows(); ++r)
              for (std::size_t c = 0; c < t.cols(); ++c) gt.at(r, c) += g.at(r, offset + c);
          }
          offset += t.cols();
        }
      }
      return;
    }
    case OpKind::slice: {
      const Tensor& a = in(0);
      Tensor& ga = grad_buffer(node.inputs[0]);
      const std::size_t b = *node.attrs.begin;
      if (a.rank() == 1 || *node.attrs.axis == 0) {
        const std::size_t offset = a.rank() == 1 ? b : b * a.cols();
        for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
      } else {
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c) ga.at(r, b + c) += g.at(r, c);
      }
      return;
    }
    case OpKind::gather_rows: {
      Tensor& gt = grad_buffer(node.inputs[0]);
      const std::size_t cols = g.cols();
      for (std::size_t i = 0; i < node.attrs.indices.size(); ++i) {
        const std::size_t r = node.attrs.indices[i];
        for (std::size_t c = 0; c < cols; ++c) gt.at(r, c) += g.at(i, c);
      }
      return;
    }
    case OpKind::layer_norm: {
      const Tensor& x = in(0);
      const std::size_t rows = x.rows(), cols = x.cols();
      const double* xhat = node.saved.data();
      const double* inv = node.saved.data() + rows * cols;
      auto gamma = in(1).values();
      if (wants(1)) {
        Tensor& gg = grad_buffer(node.inputs[1]);
        for (std::size_t i = 0; i < rows * cols; ++i) gg[i % cols] += g[i] * xhat[i];
      }
      if (wants(2)) {
        Tensor& gb = grad_buffer(node.inputs[2]);
        for (std::size_t i = 0; i < rows * cols; ++i) gb[i % cols] += g[i];
      }
      if (wants(0)) {
        Tensor& gx = grad_buffer(node.inputs[0]);
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = g[r * cols + c] * gamma[c];
            sum_d += d;
            sum_dx += d * xhat[r * cols + c];
          }
          for (std::size_t c = 0; c < cols; ++c) {
            const double d = g[r * cols + c] * gamma[c];
            gx[r * cols + c] += inv[r] / n * (n * d - sum_d - xhat[r * cols + c] * sum_dx);
          }
        }
      }
      return;
    }
    case OpKind::softmax: {
      const double t = node.attrs.temperature.value_or(1.0);
      Tensor& gx = grad_buffer(node.inputs[0]);
      for (std::size_t r = 0; r < out.rows(); ++r) {
        auto y = out.row(r);
        auto gr = g.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < y.size(); ++c) dot += gr[c] * y[c];
        auto gxr = gx.row(r);
        for (std::size_t c = 0; c < y.size(); ++c) gxr[c] += y[c] * (gr[c] - dot) / t;
      }
      return;
    }
    case OpKind::log_softmax: {
      Tensor& gx = grad_buffer(node.inputs[0]);
      for (std::size_t r = 0; r < out.rows(); ++r) {
        auto y = out.row(r);
        auto gr = g.row(r);
        double sum = 0.0;
        for (double v : gr) sum += v;
        auto gxr = gx.row(r);
        for (std::size_t c = 0; c < y.size(); ++c) gxr[c] += gr[c] - std::exp(y[c]) * sum;
      }
      return;
    }
    case OpKind::gelu: {
      const Tensor& x = in(0);
      Tensor& gx = grad_buffer(node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_derivative(x[i]);
      return;
    }
    case OpKind::l2_normalize: {
      Tensor& gx = grad_buffer(node.inputs[0]);
      for (std::size_t r = 0; r < out.rows(); ++r) {
        auto y = out.row(r);
        auto gr = g.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < y.size(); ++c) dot += y[c] * gr[c];
        auto gxr = gx.row(r);
        for (std::size_t c = 0; c < y.size(); ++c) gxr[c] += (gr[c] - y[c] * dot) / node.saved[r];
      }
      return;
    }
    case OpKind::mean: {
      const Tensor& x = in(0);
      Tensor& gx = grad_buffer(node.inputs[0]);
      if (!node.attrs.axis) {
        const double d = g[0] / static_cast<double>(x.size());
        for (double& v : gx.values()) v += d;
      } else if (*node.attrs.axis == 0) {
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) gx.at(r, c) += g[c] / static_cast<double>(x.rows());
      } else {
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) gx.at(r, c) += g[r] / static_cast<double>(x.cols());
      }
      return;
    }
    case OpKind::mse: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const double k = 2.0 * g[0] / static_cast<double>(a.size());
      if (wants(0)) {
        Tensor& ga = grad_buffer(node.inputs[0]);
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += k * (a[i] - b[i]);
      }
      if (wants(1)) {
        Tensor& gb = grad_buffer(node.inputs[1]);
        for (std::size_t i = 0; i < a.size(); ++i) gb[i] -= k * (a[i] - b[i]);
      }
      return;
    }
    case OpKind::cross_entropy: {
      const Tensor& logits = in(0);
      Tensor& gx = grad_buffer(node.inputs[0]);
      const std::size_t rows = logits.rows(), cols = logits.cols();
      const double k = g[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double target = c == node.attrs.indices[r] ? 1.0 : 0.0;
          gx[r * cols + c] += k * (node.saved[r * cols + c] - target);
        }
      }
      return;
    }
    case OpKind::kl_divergence: {
      const Tensor& q = in(0);
      const Tensor& p = in(1);
      const double k = g[0] / static_cast<double>(q.rows());
      if (wants(0)) {
        Tensor& gq = grad_buffer(node.inputs[0]);
        for (std::size_t i = 0; i < q.size(); ++i) {
          const double lq = std::log(std::max(q[i], kProbabilityFloor));
          const double lp = std::log(std::max(p[i], kProbabilityFloor));
          gq[i] += k * (lq - lp + (q[i] > kProbabilityFloor ? 1.0 : 0.0));
        }
      }
      if (wants(1)) {
        Tensor& gp = grad_buffer(node.inputs[1]);
        for (std::size_t i = 0; i < q.size(); ++i) {
          if (p[i] > kProbabilityFloor) gp[i] -= k * q[i] / p[i];
        }
      }
      return;
    }
    case OpKind::gumbel_softmax: {
      // Both modes differentiate through the soft sample kept in `saved`.
      const double t = *node.attrs.temperature;
      Tensor& gx = grad_buffer(node.inputs[0]);
      const std::size_t cols = out.cols();
      for (std::size_t r = 0; r < out.rows(); ++r) {
        const double* y = node.saved.data() + r * cols;
        auto gr = g.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * y[c];
        auto gxr = gx.row(r);
        for (std::size_t c = 0; c < cols; ++c) gxr[c] += y[c] * (gr[c] - dot) / t;
      }
      return;
    }
    case OpKind::transpose: {
      Tensor& ga = grad_buffer(node.inputs[0]);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) ga.at(c, r) += g.at(r, c);
      return;
    }
    case OpKind::reshape: {
      Tensor& ga = grad_buffer(node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      return;
    }
    case OpKind::stop_gradient:
    case OpKind::leaf:
      return;
  }
}

}  // namespace anop::ad
