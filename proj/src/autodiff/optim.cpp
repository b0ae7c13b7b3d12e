// SPDX-License-Identifier: Apache-2.0
#include "anop/autodiff/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace anop::ad {
namespace {

const Tensor& grad_for(const NamedParam& p, const GradientMap& grads) {
  auto it = grads.find(p.name);
  if (it == grads.end()) throw std::invalid_argument("optimizer: no gradient for parameter '" + p.name + "'");
  if (it->second.shape() != p.value->shape()) {
    throw ShapeError("optimizer: gradient shape " + to_string(it->second.shape()) + " does not match parameter '" +
                     p.name + "' " + to_string(p.value->shape()));
  }
  return it->second;
}

}  // namespace

Sgd::Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
}

void Sgd::step(std::span<const NamedParam> params, const GradientMap& grads) {
  sgd_step(params, grads, lr_, momentum_, buffers_);
}

void sgd_step(std::span<const NamedParam> params, const GradientMap& grads, double lr, double momentum,
              std::map<std::string, std::vector<double>>& buffers) {
  // Validate everything before touching any parameter.
  for (const NamedParam& p : params) grad_for(p, grads);
  for (const NamedParam& p : params) {
    const Tensor& g = grad_for(p, grads);
    auto& m = buffers[p.name];
    if (m.empty()) m.assign(g.size(), 0.0);
    auto v = p.value->values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      m[i] = momentum * m[i] + g[i];
      v[i] -= lr * m[i];
    }
  }
}

Adam::Adam(double lr, double beta1, double beta2, double epsilon)
    : lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
}

void Adam::step(std::span<const NamedParam> params, const GradientMap& grads) {
  for (const NamedParam& p : params) grad_for(p, grads);
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (const NamedParam& p : params) {
    const Tensor& g = grad_for(p, grads);
    auto& m = m_[p.name];
    auto& s = v_[p.name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      s.assign(g.size(), 0.0);
    }
    auto v = p.value->values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      s[i] = beta2_ * s[i] + (1.0 - beta2_) * g[i] * g[i];
      v[i] -= lr_ * (m[i] / c1) / (std::sqrt(s[i] / c2) + epsilon_);
    }
  }
}

}  // namespace anop::ad
