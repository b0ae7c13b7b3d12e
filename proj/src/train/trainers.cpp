// SPDX-License-Identifier: Apache-2.0
#include "anop/train/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "anop/autodiff/ops.hpp"
#include "anop/util/hash.hpp"
#include "anop/util/rng.hpp"

namespace anop::train {
namespace {

using namespace anop::ad;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("train config: " + what);
}

Tensor gather_feature_rows(const Tensor& features, std::span<const std::size_t> rows) {
  const std::size_t d = features.cols();
  Tensor out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(features.row(rows[i]).begin(), features.row(rows[i]).end(), out.row(i).begin());
  }
  return out;
}

// One step on the anchor objective; returns the loss.
double anchor_step(TrainState& state, const DescriptionBank& bank, const world::SynthWorld& world,
                   const EncoderStack& stack, const TrainConfig& config, Rng& rng) {
  const std::size_t C = bank.classes.size();
  const std::size_t d = stack.dims().embed_dim;
  Tensor target({C, d});
  for (std::size_t i = 0; i < C; ++i) {
    const Tensor& f = bank.features[i];
    const std::size_t pick = rng.index(f.rows());
    std::copy(f.row(pick).begin(), f.row(pick).end(), target.row(i).begin());
  }
  Graph g;
  PromptModel model(g, stack, world, state, config, {.anchors = true, .adaptation = false});
  Var loss = mse(model.anchor_features(bank.classes), g.constant(std::move(target)));
  g.backward(loss);
  const auto params = model.anchor_params(state);
  sgd_step(params, model.gradients(params), config.stage1_lr, config.stage1_momentum, state.momentum);
  return loss.value().item();
}

struct AdaptInputs {
  std::vector<std::size_t> label_index;  // position of each image label within base_classes
  Tensor anchor_features;                // frozen anchor prompt features (anchoropt only)
};

AdaptInputs prepare_adaptation(const TrainState& state, const ImageBank& images, std::span<const ClassId> base,
                               const world::SynthWorld& world, const EncoderStack& stack, const TrainConfig& config,
                               bool need_anchor) {
  if (base.empty()) throw std::invalid_argument("adaptation: no base classes");
  if (images.labels.empty()) throw std::invalid_argument("adaptation: empty training set");
  AdaptInputs in;
  for (ClassId y : images.labels) {
    auto it = std::find(base.begin(), base.end(), y);
    if (it == base.end()) throw std::invalid_argument("adaptation: training image of class " + std::to_string(y) +
                                                      " outside the base split");
    in.label_index.push_back(static_cast<std::size_t>(it - base.begin()));
  }
  if (need_anchor) {
    Graph g;
    PromptModel model(g, stack, world, state, config, {});
    in.anchor_features = model.anchor_features(base).value();
  }
  return in;
}

// One adaptation step; lambda_kd = 0 and no anchor teacher for the one-stage B step.
LossBreakdown adapt_step(TrainState& state, const ImageBank& images, const AdaptInputs& in,
                         std::span<const ClassId> base, const world::SynthWorld& world, const EncoderStack& stack,
                         const TrainConfig& config, Rng& rng, bool distill) {
  const std::size_t B = std::min(config.batch_size, images.labels.size());
  std::vector<std::size_t> rows(B), labels(B);
  for (std::size_t i = 0; i < B; ++i) {
    rows[i] = rng.index(images.labels.size());
    labels[i] = in.label_index[rows[i]];
  }
  const std::uint64_t noise_seed = rng.engine()();
  const Tensor img = gather_feature_rows(images.features, rows);
  const double scale_factor = stack.logit_scale();

  Graph g;
  PromptModel model(g, stack, world, state, config, {.anchors = false, .adaptation = true});
  model.realize(true, noise_seed);
  Var text = model.normal_features(base);
  Var logits = scale(matmul(g.constant(img), transpose(text)), scale_factor);
  Var ce = cross_entropy(logits, labels);

  LossBreakdown b;
  b.lambda_ce = config.lambda_ce;
  b.lambda_kd = distill ? config.lambda_kd : 0.0;
  Var total = scale(ce, b.lambda_ce);
  if (distill) {
    Var q_norm = softmax(logits);
    Var q_anc = g.constant(class_probabilities(img, in.anchor_features, scale_factor));
    Var q_ens = stop_gradient(scale(add(q_norm, q_anc), 0.5));
    Var kd = config.kd_direction == KdDirection::teacher_student ? kl_divergence(q_ens, q_norm)
                                                                 : kl_divergence(q_norm, q_ens);
    total = add(total, scale(kd, b.lambda_kd));
    b.kd = kd.value().item();
  }
  b.ce = ce.value().item();
  b.total = total.value().item();
  g.backward(total);
  const auto params = model.adaptation_params(state);
  sgd_step(params, model.gradients(params), config.stage2_lr, config.stage2_momentum, state.momentum);
  return b;
}

[[noreturn]] void diverged(const char* stage, std::size_t step, const std::exception& e, const LossBreakdown* last) {
  std::ostringstream os;
  os << stage << ": non-finite values at step " << step << " (" << e.what() << ")";
  if (last) os << "; last losses ce=" << last->ce << " kd=" << last->kd << " total=" << last->total;
  throw TrainingError(os.str());
}

void hash_tensor(Fnv1a& h, std::string_view name, const Tensor& t) {
  h.update(name);
  h.update(t.values());
}

}  // namespace

std::string_view method_name(Method m) {
  switch (m) {
    case Method::coop:
      return "coop";
    case Method::atprompt:
      return "atprompt";
    case Method::anchoropt:
      return "anchoropt";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::coop, Method::atprompt, Method::anchoropt}) {
    if (method_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

std::string_view kd_direction_name(KdDirection d) {
  return d == KdDirection::teacher_student ? "teacher_student" : "student_teacher";
}

KdDirection parse_kd_direction(std::string_view name) {
  if (name == "teacher_student") return KdDirection::teacher_student;
  if (name == "student_teacher") return KdDirection::student_teacher;
  throw std::invalid_argument("unknown kd_direction '" + std::string(name) + "'");
}

std::string_view stage_name(StageTag s) {
  switch (s) {
    case StageTag::init:
      return "init";
    case StageTag::stage1:
      return "stage1";
    case StageTag::stage2:
      return "stage2";
    case StageTag::one_stage:
      return "one_stage";
  }
  return "unknown";
}

StageTag parse_stage(std::string_view name) {
  for (StageTag s : {StageTag::init, StageTag::stage1, StageTag::stage2, StageTag::one_stage}) {
    if (stage_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown stage '" + std::string(name) + "'");
}

void TrainConfig::validate(const encoder::EncoderDims& dims, std::size_t longest_class_name) const {
  require(soft_length >= 1, "prompt.soft_length must be at least 1");
  require(anchor_length >= 1, "prompt.anchor_length must be at least 1");
  const std::size_t L = dims.max_len;
  require(soft_length + anchor_length + longest_class_name + 2 <= L,
          "prompt.soft_length + prompt.anchor_length + class block + 2 exceeds L_max " + std::to_string(L));
  if (method == Method::atprompt) {
    require(attribute_soft + attribute_count + soft_length + longest_class_name + 2 <= L,
            "attribute prompt exceeds L_max " + std::to_string(L));
  }
  require(deep_depth >= 1 && deep_depth <= dims.text_blocks,
          "prompt.deep_depth must lie in [1, " + std::to_string(dims.text_blocks) + "]");
  require(gumbel_temperature > 0.0, "prompt.gumbel_temperature must be positive");
  require(stage1_lr > 0.0 && stage2_lr > 0.0, "learning rates must be positive");
  require(stage1_momentum >= 0.0 && stage1_momentum < 1.0, "stage1.momentum must lie in [0, 1)");
  require(stage2_momentum >= 0.0 && stage2_momentum < 1.0, "stage2.momentum must lie in [0, 1)");
  require(lambda_ce >= 0.0 && lambda_kd >= 0.0, "loss weights must be nonnegative");
  require(batch_size >= 1, "stage2.batch_size must be positive");
  require(one_stage_period >= 1, "one_stage.period must be positive");
  require(descriptions_per_class >= 1, "stage1.descriptions must be positive");
}

TrainState TrainState::initialize(const TrainConfig& config, const encoder::EncoderDims& dims, std::uint64_t seed) {
  const std::uint64_t init = derive_seed(seed, "init");
  const std::size_t d = dims.token_width, M = config.soft_length, N = config.anchor_length;
  TrainState s;
  s.seed = seed;
  s.soft = prompt::init_soft_tokens(M, d, derive_seed(init, "soft"));
  s.anchors = prompt::init_soft_tokens(N, d, derive_seed(init, "anchors"));
  if (config.method == Method::atprompt && config.attribute_soft > 0) {
    s.soft_a = prompt::init_soft_tokens(config.attribute_soft, d, derive_seed(init, "soft_a"));
  }
  s.position = prompt::PositionMatrix::initialize(M + N, derive_seed(init, "position"));
  s.position.temperature = config.gumbel_temperature;
  s.position.mode = config.position_forward;
  for (std::size_t l = 1; l < config.deep_depth; ++l) {
    s.deep_soft.push_back(prompt::init_soft_tokens(M, d, derive_seed(derive_seed(init, "deep"), l)));
  }
  return s;
}

std::string TrainState::anchor_hash() const {
  Fnv1a h;
  hash_tensor(h, "anchors", anchors);
  return h.hex();
}

std::string TrainState::adaptation_hash() const {
  Fnv1a h;
  hash_tensor(h, "soft", soft);
  hash_tensor(h, "soft_a", soft_a);
  hash_tensor(h, "position", position.logits);
  for (const Tensor& t : deep_soft) hash_tensor(h, "deep", t);
  return h.hex();
}

std::string TrainState::full_hash() const {
  Fnv1a h;
  h.update(anchor_hash());
  h.update(adaptation_hash());
  for (const auto& [name, buf] : momentum) {
    h.update(name);
    h.update(std::span<const double>(buf));
  }
  h.update(std::to_string(step) + ":" + std::string(stage_name(stage)));
  return h.hex();
}

PromptModel::PromptModel(Graph& graph, const EncoderStack& stack, const world::SynthWorld& world,
                         const TrainState& state, const TrainConfig& config, Trainable trainable)
    : graph_(&graph),
      world_(&world),
      state_(&state),
      config_(&config),
      encoder_(graph, stack),
      ctx_(graph, stack) {
  auto bind = [&](const std::string& name, const Tensor& t, bool rg) {
    Var v = graph.leaf_ref(t, rg);
    leaves_[name] = v;
    return v;
  };
  soft_ = bind("soft", state.soft, trainable.adaptation);
  anchors_ = bind("anchors", state.anchors, trainable.anchors);
  const bool uses_matrix = config.method == Method::anchoropt && config.arrangement == prompt::Arrangement::matrix;
  position_ = bind("position", state.position.logits, trainable.adaptation && uses_matrix);
  if (config.method == Method::atprompt) {
    if (!state.soft_a.empty()) soft_a_ = bind("soft_a", state.soft_a, trainable.adaptation);
    if (!state.attribute_tokens.empty()) attributes_ = ctx_.words(state.attribute_tokens);
  }
  for (std::size_t l = 0; l < state.deep_soft.size(); ++l) {
    deep_.push_back(bind("deep." + std::to_string(l + 1), state.deep_soft[l], trainable.adaptation));
  }
  if (config.preposition) preposition_ = ctx_.words({*config.preposition});
}

void PromptModel::realize(bool training, std::uint64_t seed) {
  if (config_->method != Method::anchoropt || config_->arrangement != prompt::Arrangement::matrix) return;
  realized_ = prompt::sample_position_matrix(*graph_, position_, config_->gumbel_temperature, config_->position_forward,
                                             seed, training)
                  .matrix;
}

std::vector<prompt::GraphPrompt> PromptModel::normal_prompts(std::span<const ClassId> classes) {
  std::vector<prompt::GraphPrompt> out;
  const bool matrix = config_->method == Method::anchoropt && config_->arrangement == prompt::Arrangement::matrix;
  if (matrix && !realized_.valid()) throw std::logic_error("PromptModel: position matrix not realized");
  for (ClassId c : classes) {
    if (c >= world_->num_classes()) throw std::invalid_argument("prompt: unknown class " + std::to_string(c));
    Var cls = ctx_.words(world_->class_name_tokens[c]);
    switch (config_->method) {
      case Method::coop:
        out.push_back(prompt::coop_prompt(ctx_, soft_, cls));
        break;
      case Method::atprompt: {
        std::optional<Var> sa, at;
        if (soft_a_.valid()) sa = soft_a_;
        if (attributes_.valid()) at = attributes_;
        out.push_back(prompt::attribute_prompt(ctx_, sa, at, soft_, cls));
        break;
      }
      case Method::anchoropt:
        out.push_back(matrix ? prompt::normal_prompt(ctx_, realized_, soft_, anchors_, cls)
                             : prompt::arranged_prompt(ctx_, config_->arrangement, soft_, anchors_, cls));
        break;
    }
  }
  return out;
}

std::vector<prompt::GraphPrompt> PromptModel::anchor_prompts(std::span<const ClassId> classes) {
  std::vector<prompt::GraphPrompt> out;
  for (ClassId c : classes) {
    if (c >= world_->num_classes()) throw std::invalid_argument("prompt: unknown class " + std::to_string(c));
    out.push_back(prompt::anchor_prompt(ctx_, anchors_, preposition_, ctx_.words(world_->class_name_tokens[c])));
  }
  return out;
}

Var PromptModel::normal_features(std::span<const ClassId> classes) {
  const auto prompts = normal_prompts(classes);
  const prompt::PromptBatch batch = prompt::pack(prompts);
  if (config_->deep_depth > 1) return forward_deep(encoder_, batch, deep_, config_->deep_depth);
  return encoder_.encode_text(batch.rows, batch.layout, batch.pool_rows);
}

Var PromptModel::anchor_features(std::span<const ClassId> classes) {
  const auto prompts = anchor_prompts(classes);
  const prompt::PromptBatch batch = prompt::pack(prompts);
  return encoder_.encode_text(batch.rows, batch.layout, batch.pool_rows);
}

std::vector<ad::NamedParam> PromptModel::anchor_params(TrainState& state) const {
  return {{"anchors", &state.anchors}};
}

std::vector<ad::NamedParam> PromptModel::adaptation_params(TrainState& state) const {
  std::vector<ad::NamedParam> out{{"soft", &state.soft}};
  if (graph_->requires_grad(position_.id())) out.push_back({"position", &state.position.logits});
  if (soft_a_.valid()) out.push_back({"soft_a", &state.soft_a});
  for (std::size_t l = 0; l < state.deep_soft.size(); ++l) {
    out.push_back({"deep." + std::to_string(l + 1), &state.deep_soft[l]});
  }
  return out;
}

ad::GradientMap PromptModel::gradients(std::span<const ad::NamedParam> params) const {
  ad::GradientMap grads;
  for (const ad::NamedParam& p : params) grads.emplace(p.name, leaves_.at(p.name).grad());
  return grads;
}

Var forward_deep(encoder::BoundEncoder& encoder, const prompt::PromptBatch& batch, std::span<const Var> deep_soft,
                 std::size_t depth) {
  const std::size_t J = encoder.stack().dims().text_blocks;
  if (depth == 0 || depth > J) {
    throw std::invalid_argument("forward_deep: depth " + std::to_string(depth) + " outside [1, " + std::to_string(J) +
                                "]");
  }
  if (deep_soft.size() + 1 < depth) throw std::invalid_argument("forward_deep: missing deep soft tokens");
  std::ptrdiff_t max_source = -1;
  for (std::ptrdiff_t s : batch.soft_source) max_source = std::max(max_source, s);
  const std::size_t total = batch.layout.total;

  Var x = encoder.text_input(batch.rows, batch.layout);
  for (std::size_t l = 0; l < J; ++l) {
    if (l >= 1 && l < depth) {
      Var fresh = deep_soft[l - 1];
      if (static_cast<std::ptrdiff_t>(fresh.shape()[0]) <= max_source) {
        throw ShapeError("forward_deep: layer " + std::to_string(l + 1) + " has too few soft tokens");
      }
      std::vector<std::size_t> index(total);
      for (std::size_t r = 0; r < total; ++r) {
        const std::ptrdiff_t s = batch.soft_source[r];
        index[r] = s >= 0 ? total + static_cast<std::size_t>(s) : r;
      }
      x = gather_rows(concat({x, fresh}, 0), std::move(index));
    }
    x = encoder.text_block(l, x, batch.layout);
  }
  return encoder.text_head(x, batch.layout, batch.pool_rows);
}

encoder::Feature forward_deep(const prompt::PromptSequence& prompt, const std::vector<Tensor>& deep_soft,
                              const EncoderStack& stack, std::size_t depth) {
  prompt.validate(stack.dims().max_len);
  Graph g;
  encoder::BoundEncoder enc(g, stack);
  prompt::PromptBatch batch;
  batch.rows = g.constant(prompt.embeddings());
  batch.layout = encoder::PackedLayout::from_lengths({prompt.size()});
  batch.pool_rows = {prompt.size() - 1};
  std::ptrdiff_t next = 0;
  for (const prompt::PromptToken& t : prompt.tokens) batch.soft_source.push_back(t.role == prompt::Role::soft ? next++ : -1);
  std::vector<Var> deep;
  for (const Tensor& t : deep_soft) deep.push_back(g.constant(t));
  return encoder::Feature::from_row(forward_deep(enc, batch, deep, depth).value(), 0);
}

DescriptionBank DescriptionBank::build(const world::SynthWorld& world, const EncoderStack& stack,
                                       std::span<const ClassId> classes, std::size_t per_class, double perturbation,
                                       std::uint64_t seed) {
  if (classes.empty()) throw std::invalid_argument("descriptions: no classes");
  DescriptionBank bank;
  bank.classes.assign(classes.begin(), classes.end());
  for (ClassId c : classes) {
    auto tokens = world::generate_descriptions(world, c, per_class, perturbation, seed);
    Graph g;
    encoder::BoundEncoder enc(g, stack);
    bank.features.push_back(enc.encode_tokens(tokens).value());
    bank.tokens.push_back(std::move(tokens));
  }
  return bank;
}

ImageBank ImageBank::build(const std::vector<world::LabeledSample>& samples, const EncoderStack& stack) {
  if (samples.empty()) throw std::invalid_argument("image bank: no samples");
  std::vector<Tensor> grids;
  ImageBank bank;
  for (const auto& s : samples) {
    grids.push_back(s.image_grid);
    bank.labels.push_back(s.label);
  }
  bank.features = encoder::encode_image_batch(grids, stack);
  return bank;
}

Stage1Result train_stage1_anchor(TrainState& state, const DescriptionBank& descriptions, const world::SynthWorld& world,
                                 const EncoderStack& stack, const TrainConfig& config) {
  if (!stack.frozen()) throw std::invalid_argument("stage1: encoder stack must be frozen");
  if (descriptions.classes.empty() || descriptions.features.size() != descriptions.classes.size()) {
    throw std::invalid_argument("stage1: no descriptions");
  }
  for (const Tensor& f : descriptions.features) {
    if (f.empty()) throw std::invalid_argument("stage1: a class has no descriptions");
  }
  Rng rng(derive_seed(state.seed, "stage1"));
  Stage1Result r;
  for (std::size_t step = 1; step <= config.stage1_steps; ++step) {
    try {
      r.loss_trace.push_back(anchor_step(state, descriptions, world, stack, config, rng));
    } catch (const TrainingError&) {
      throw;
    } catch (const std::runtime_error& e) {
      diverged("stage1", step, e, nullptr);
    }
    ++state.step;
  }
  state.stage = StageTag::stage1;
  state.anchors_trained = true;
  return r;
}

Stage2Result train_stage2_adapt(TrainState& state, const ImageBank& images, std::span<const ClassId> base_classes,
                                const world::SynthWorld& world, const EncoderStack& stack, const TrainConfig& config) {
  if (!stack.frozen()) throw std::invalid_argument("stage2: encoder stack must be frozen");
  const bool anchored = config.method == Method::anchoropt;
  if (anchored && !state.anchors_trained) throw std::invalid_argument("stage2: anchors have not been trained");
  const AdaptInputs in = prepare_adaptation(state, images, base_classes, world, stack, config, anchored);
  Rng rng(derive_seed(state.seed, "stage2"));
  Stage2Result r;
  for (std::size_t step = 1; step <= config.stage2_steps; ++step) {
    try {
      r.trace.push_back(adapt_step(state, images, in, base_classes, world, stack, config, rng, anchored));
    } catch (const TrainingError&) {
      throw;
    } catch (const std::runtime_error& e) {
      diverged("stage2", step, e, r.trace.empty() ? nullptr : &r.trace.back());
    }
    if (!std::isfinite(r.trace.back().total)) diverged("stage2", step, std::runtime_error("loss"), &r.trace.back());
    ++state.step;
  }
  state.stage = StageTag::stage2;
  state.adapted = true;
  return r;
}

OneStageResult train_one_stage(TrainState& state, const ImageBank& images, const DescriptionBank& descriptions,
                               std::span<const ClassId> base_classes, const world::SynthWorld& world,
                               const EncoderStack& stack, const TrainConfig& config) {
  if (!stack.frozen()) throw std::invalid_argument("one-stage: encoder stack must be frozen");
  if (state.stage != StageTag::init) throw std::invalid_argument("one-stage: needs a fresh state");
  if (descriptions.classes.empty()) throw std::invalid_argument("one-stage: no descriptions");
  const std::size_t total = config.one_stage_steps ? config.one_stage_steps : config.stage1_steps + config.stage2_steps;
  const AdaptInputs in = prepare_adaptation(state, images, base_classes, world, stack, config, false);
  Rng rng_a(derive_seed(state.seed, "stage1"));
  Rng rng_b(derive_seed(state.seed, "stage2"));
  OneStageResult r;
  for (std::size_t t = 0; t < total; ++t) {
    const bool step_a = (t / config.one_stage_period) % 2 == 0;
    try {
      if (step_a) {
        r.anchor_trace.push_back(anchor_step(state, descriptions, world, stack, config, rng_a));
      } else {
        r.adapt_trace.push_back(adapt_step(state, images, in, base_classes, world, stack, config, rng_b, false));
        if (r.adapt_trace.back().kd != 0.0) throw std::logic_error("one-stage: distillation term must stay zero");
      }
    } catch (const std::runtime_error& e) {
      diverged("one-stage", t + 1, e, r.adapt_trace.empty() ? nullptr : &r.adapt_trace.back());
    }
    ++state.step;
  }
  state.stage = StageTag::one_stage;
  state.anchors_trained = true;
  state.adapted = !r.adapt_trace.empty();
  return r;
}

world::TokenSeq select_attribute_tokens(const world::SynthWorld& world, std::span<const ClassId> classes,
                                        std::size_t count) {
  const std::size_t A = world.num_attributes();
  std::vector<double> mass(A, 0.0);
  for (ClassId c : classes)
    for (std::size_t a = 0; a < A; ++a) mass[a] += world.class_attribute_mix.at(c, a);
  std::vector<std::size_t> order(A);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return mass[x] > mass[y]; });
  world::TokenSeq out;
  for (std::size_t i = 0; i < std::min(count, A); ++i) out.push_back(world::vocab::kAttributeBase + order[i]);
  return out;
}

encoder::PredictionDistribution ensemble_predict(const encoder::PredictionDistribution& q_norm,
                                                 const encoder::PredictionDistribution& q_anc) {
  if (q_norm.class_ids != q_anc.class_ids || q_norm.probs.size() != q_anc.probs.size()) {
    throw std::invalid_argument("ensemble_predict: class sets differ");
  }
  encoder::PredictionDistribution out;
  out.class_ids = q_norm.class_ids;
  out.probs.resize(q_norm.probs.size());
  for (std::size_t i = 0; i < out.probs.size(); ++i) out.probs[i] = (q_norm.probs[i] + q_anc.probs[i]) / 2.0;
  return out;
}

Tensor class_probabilities(const Tensor& images, const Tensor& class_features, double logit_scale) {
  if (images.cols() != class_features.cols()) throw ShapeError("class_probabilities: feature widths differ");
  const std::size_t B = images.rows(), C = class_features.rows(), d = images.cols();
  Tensor out({B, C});
  for (std::size_t i = 0; i < B; ++i) {
    double mx = -1e300;
    for (std::size_t c = 0; c < C; ++c) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += images.at(i, k) * class_features.at(c, k);
      out.at(i, c) = logit_scale * dot;
      mx = std::max(mx, out.at(i, c));
    }
    double sum = 0.0;
    for (double& v : out.row(i)) sum += (v = std::exp(v - mx));
    for (double& v : out.row(i)) v /= sum;
  }
  return out;
}

}  // namespace anop::train
