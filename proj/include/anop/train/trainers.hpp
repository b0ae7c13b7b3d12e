// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "anop/autodiff/optim.hpp"
#include "anop/encoder/dual_encoder.hpp"
#include "anop/prompt/prompt.hpp"
#include "anop/world/synth_world.hpp"

namespace anop::train {

using ad::Graph;
using ad::Tensor;
using ad::Var;
using encoder::EncoderStack;
using world::ClassId;

// Prompt family being trained.
enum class Method { coop, atprompt, anchoropt };
std::string_view method_name(Method m);
Method parse_method(std::string_view name);

// teacher_student: KL(q_ens || q_norm) with q_ens detached (default).
// student_teacher: KL(q_norm || q_ens), still detached.
enum class KdDirection { teacher_student, student_teacher };
std::string_view kd_direction_name(KdDirection d);
KdDirection parse_kd_direction(std::string_view name);

enum class StageTag { init, stage1, stage2, one_stage };
std::string_view stage_name(StageTag s);
StageTag parse_stage(std::string_view name);

struct TrainConfig {
  Method method = Method::anchoropt;
  std::size_t soft_length = 6;    // M
  std::size_t anchor_length = 1;  // N
  std::optional<std::size_t> preposition = world::vocab::kOf;
  prompt::Arrangement arrangement = prompt::Arrangement::matrix;
  prompt::PositionForward position_forward = prompt::PositionForward::hard_st;
  double gumbel_temperature = 1.0;
  std::size_t deep_depth = 1;  // J_p
  std::size_t attribute_count = 2;  // explicit attribute words of the attribute baseline
  std::size_t attribute_soft = 1;   // soft tokens ahead of them

  std::size_t stage1_steps = 200;
  double stage1_lr = 0.002;
  double stage1_momentum = 0.9;
  std::size_t descriptions_per_class = 5;
  double description_perturbation = 0.5;

  std::size_t stage2_steps = 300;
  double stage2_lr = 0.002;
  double stage2_momentum = 0.9;
  double lambda_ce = 1.0;
  double lambda_kd = 10.0;
  KdDirection kd_direction = KdDirection::teacher_student;
  std::size_t batch_size = 32;

  std::size_t one_stage_steps = 0;  // 0: stage1_steps + stage2_steps
  std::size_t one_stage_period = 1;

  // Throws std::invalid_argument naming the offending field.
  void validate(const encoder::EncoderDims& dims, std::size_t longest_class_name) const;
};

struct LossBreakdown {
  double ce = 0.0;
  double kd = 0.0;
  double total = 0.0;
  double lambda_ce = 1.0;
  double lambda_kd = 10.0;
};

struct TrainState {
  Tensor anchors;   // theta_a, N x d_tok
  Tensor soft;      // theta_s, M x d_tok
  Tensor soft_a;    // attribute baseline only
  prompt::PositionMatrix position;  // theta_pos
  std::vector<Tensor> deep_soft;    // one M x d_tok set per layer 2..J_p
  world::TokenSeq attribute_tokens;
  std::map<std::string, std::vector<double>> momentum;
  std::size_t step = 0;
  std::uint64_t seed = 0;
  StageTag stage = StageTag::init;
  bool anchors_trained = false;
  bool adapted = false;

  static TrainState initialize(const TrainConfig& config, const encoder::EncoderDims& dims, std::uint64_t seed);

  std::string anchor_hash() const;
  // Soft tokens, attribute soft tokens, deep tokens and position logits.
  std::string adaptation_hash() const;
  std::string full_hash() const;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Stage1Result {
  std::vector<double> loss_trace;
};

struct Stage2Result {
  std::vector<LossBreakdown> trace;
};

struct OneStageResult {
  std::vector<double> anchor_trace;      // step A losses
  std::vector<LossBreakdown> adapt_trace;  // step B losses, kd always 0
};

// Class prompts of one graph, bound to a train state.
class PromptModel {
 public:
  struct Trainable {
    bool anchors = false;
    bool adaptation = false;  // soft, soft_a, deep, position
  };

  PromptModel(Graph& graph, const EncoderStack& stack, const world::SynthWorld& world, const TrainState& state,
              const TrainConfig& config, Trainable trainable);

  // Draws the position matrix for this graph: Gumbel noise from `seed` when
  // training, noise-free argmax otherwise. Call before normal_features.
  void realize(bool training, std::uint64_t seed);
  // Overrides the realization (tests and diagnostics).
  void set_realization(Var matrix) { realized_ = matrix; }
  Var realization() const { return realized_; }

  // [classes, d] unit rows.
  Var normal_features(std::span<const ClassId> classes);
  Var anchor_features(std::span<const ClassId> classes);
  std::vector<prompt::GraphPrompt> normal_prompts(std::span<const ClassId> classes);
  std::vector<prompt::GraphPrompt> anchor_prompts(std::span<const ClassId> classes);

  encoder::BoundEncoder& encoder() { return encoder_; }
  prompt::PromptContext& context() { return ctx_; }
  std::vector<ad::NamedParam> anchor_params(TrainState& state) const;
  std::vector<ad::NamedParam> adaptation_params(TrainState& state) const;
  ad::GradientMap gradients(std::span<const ad::NamedParam> params) const;

 private:
  Graph* graph_;
  const world::SynthWorld* world_;
  const TrainState* state_;
  const TrainConfig* config_;
  encoder::BoundEncoder encoder_;
  prompt::PromptContext ctx_;
  Var soft_, soft_a_, anchors_, position_, attributes_;
  std::vector<Var> deep_;
  Var realized_;
  std::optional<Var> preposition_;
  std::map<std::string, Var> leaves_;
};

// Deep variant: before blocks 2..depth the hidden rows at soft positions are
// replaced by that layer's tokens; every other row keeps its hidden state.
Var forward_deep(encoder::BoundEncoder& encoder, const prompt::PromptBatch& batch, std::span<const Var> deep_soft,
                 std::size_t depth);
encoder::Feature forward_deep(const prompt::PromptSequence& prompt, const std::vector<Tensor>& deep_soft,
                              const EncoderStack& stack, std::size_t depth);

// Description feature targets of the given classes, encoded once.
struct DescriptionBank {
  std::vector<ClassId> classes;
  std::vector<Tensor> features;  // per class: n x d
  std::vector<std::vector<world::TokenSeq>> tokens;

  static DescriptionBank build(const world::SynthWorld& world, const EncoderStack& stack,
                               std::span<const ClassId> classes, std::size_t per_class, double perturbation,
                               std::uint64_t seed);
};

// Training images with cached frozen features.
struct ImageBank {
  std::vector<ClassId> labels;
  Tensor features;  // samples x d

  static ImageBank build(const std::vector<world::LabeledSample>& samples, const EncoderStack& stack);
};

Stage1Result train_stage1_anchor(TrainState& state, const DescriptionBank& descriptions, const world::SynthWorld& world,
                                 const EncoderStack& stack, const TrainConfig& config);
Stage2Result train_stage2_adapt(TrainState& state, const ImageBank& images, std::span<const ClassId> base_classes,
                                const world::SynthWorld& world, const EncoderStack& stack, const TrainConfig& config);
OneStageResult train_one_stage(TrainState& state, const ImageBank& images, const DescriptionBank& descriptions,
                               std::span<const ClassId> base_classes, const world::SynthWorld& world,
                               const EncoderStack& stack, const TrainConfig& config);

// Attribute words with the largest total mixture mass over the given classes.
world::TokenSeq select_attribute_tokens(const world::SynthWorld& world, std::span<const ClassId> classes,
                                        std::size_t count);

// q_ens = (q_norm + q_anc) / 2.
encoder::PredictionDistribution ensemble_predict(const encoder::PredictionDistribution& q_norm,
                                                 const encoder::PredictionDistribution& q_anc);

// Class probabilities for each row of `images` against unit class rows.
Tensor class_probabilities(const Tensor& images, const Tensor& class_features, double logit_scale);

}  // namespace anop::train
