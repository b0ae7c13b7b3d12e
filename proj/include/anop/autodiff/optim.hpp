// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "anop/autodiff/tensor.hpp"

namespace anop::ad {

using GradientMap = std::map<std::string, Tensor>;

// A trainable tensor owned by the caller, addressed by a stable name so that
// optimizer state survives across graph rebuilds.
struct NamedParam {
  std::string name;
  Tensor* value = nullptr;
};

// SGD with heavy-ball momentum:  m <- momentum * m + g;  p <- p - lr * m.
class Sgd {
 public:
  Sgd(double lr, double momentum);

  // Throws std::invalid_argument if any parameter lacks a gradient entry.
  void step(std::span<const NamedParam> params, const GradientMap& grads);

  double lr() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  double lr_;
  double momentum_;
  std::map<std::string, std::vector<double>> buffers_;
};

void sgd_step(std::span<const NamedParam> params, const GradientMap& grads, double lr, double momentum,
              std::map<std::string, std::vector<double>>& buffers);

// Adam, used only to pretrain the encoder pair.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);
  void step(std::span<const NamedParam> params, const GradientMap& grads);

 private:
  double lr_, beta1_, beta2_, epsilon_;
  long step_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace anop::ad
