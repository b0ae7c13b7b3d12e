// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "anop/train/trainers.hpp"

namespace anop::eval {

using ad::Tensor;
using world::ClassId;

struct MetricsRecord {
  double base_acc = 0.0;  // percent
  double novel_acc = 0.0;
  double hm = 0.0;
  std::map<ClassId, double> per_class_acc;
  std::uint64_t seed = 0;
  std::string config_digest;
  double runtime_seconds = 0.0;
};

// 2bn / (b + n) on percentages in [0, 100]; 0 when b + n = 0.
double harmonic_mean(double base, double novel);

struct EvalOptions {
  std::size_t n_eval = 50;  // fresh samples per class
  bool ensemble = true;     // novel route through (q_norm + q_anc) / 2
  std::uint64_t seed = 0;
  // Test hook: rewrites anchor-prompt probabilities before routing.
  std::function<void(Tensor&)> corrupt_anchor;
};

// Per-sample distributions and the routed decisions.
struct EvalDetail {
  std::vector<ClassId> base_labels, novel_labels;
  Tensor base_q_norm, base_q_anc;    // samples x |base|
  Tensor novel_q_norm, novel_q_anc;  // samples x |novel|, q_anc empty without anchors
  std::vector<ClassId> base_predictions, novel_predictions;
};

// Base samples: argmax of q_norm over base prompts. Novel samples: argmax of
// the ensemble over novel prompts when anchors exist and the ensemble is on,
// argmax of q_norm otherwise. Lowest class index wins ties.
MetricsRecord evaluate_base_to_novel(const train::TrainState& state, const world::SplitSpec& split,
                                     const world::SynthWorld& world, const encoder::EncoderStack& stack,
                                     const train::TrainConfig& config, const EvalOptions& options,
                                     EvalDetail* detail = nullptr);

// The same protocol on each target world; class identities are shared.
std::vector<MetricsRecord> evaluate_cross_world(const train::TrainState& state, const world::SplitSpec& split,
                                                const world::SynthWorld& source,
                                                const std::vector<world::SynthWorld>& targets,
                                                const encoder::EncoderStack& stack, const train::TrainConfig& config,
                                                const EvalOptions& options);

// Zero-shot accuracy (percent) of the hand-written "a photo of a {class}"
// prompt over the given classes.
double zero_shot_accuracy(const world::SynthWorld& world, const encoder::EncoderStack& stack,
                          const std::vector<ClassId>& classes, std::size_t n_per_class, std::uint64_t seed);

// Multinomial logistic regression on frozen image features; test accuracy in
// percent on fresh samples.
double linear_probe_accuracy(const world::SynthWorld& world, const encoder::EncoderStack& stack,
                             const std::vector<ClassId>& classes, std::size_t train_per_class,
                             std::size_t test_per_class, std::uint64_t seed);

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for one value
  std::size_t n = 0;
};
Summary summarize(const std::vector<double>& values);

}  // namespace anop::eval
