#include <doctest.h>

#include <cmath>

#include "anop/autodiff/gradcheck.hpp"
#include "anop/autodiff/ops.hpp"
#include "anop/train/trainers.hpp"
#include "anop/util/rng.hpp"

using namespace anop;
using namespace anop::ad;
using namespace anop::train;

namespace {

// Small untrained encoder and world; enough for structural properties.
struct Fixture {
  world::SynthWorld world;
  EncoderStack stack;
  world::SplitSpec split;
  ImageBank images;
  DescriptionBank descriptions;
  TrainConfig config;

  Fixture() {
    world::WorldParams wp;
    wp.seed = 5;
    wp.classes = 6;
    world = world::generate_world(wp);
    encoder::EncoderDims d;
    d.text_blocks = 2;
    d.image_blocks = 1;
    stack = EncoderStack::initialize(d, 3);
    stack.freeze();
    split = world::base_novel_split(world, 0.5, 1);
    images = ImageBank::build(world::sample_dataset(world, split.base_classes, 4, 2), stack);
    descriptions = DescriptionBank::build(world, stack, split.base_classes, 3, 0.5, 4);
    config.soft_length = 3;
    config.stage1_steps = 6;
    config.stage2_steps = 5;
    config.batch_size = 8;
    config.stage1_lr = 0.05;
    config.stage2_lr = 0.05;
  }
};

}  // namespace

TEST_CASE("stage one moves only the anchors") {
  Fixture f;
  TrainState s = TrainState::initialize(f.config, f.stack.dims(), 1);
  const std::string adapt = s.adaptation_hash(), anchors = s.anchor_hash(), enc = f.stack.parameter_hash();
  const Stage1Result r = train_stage1_anchor(s, f.descriptions, f.world, f.stack, f.config);
  CHECK(r.loss_trace.size() == 6);
  CHECK(s.adaptation_hash() == adapt);
  CHECK(s.anchor_hash() != anchors);
  CHECK(f.stack.parameter_hash() == enc);
  CHECK(s.anchors_trained);

  const std::string trained = s.anchor_hash();
  const Stage2Result r2 = train_stage2_adapt(s, f.images, f.split.base_classes, f.world, f.stack, f.config);
  CHECK(r2.trace.size() == 5);
  CHECK(s.anchor_hash() == trained);
  CHECK(s.adaptation_hash() != adapt);
  CHECK(f.stack.parameter_hash() == enc);
}

TEST_CASE("anchor prompts as their own targets give zero loss") {
  Fixture f;
  TrainState s = TrainState::initialize(f.config, f.stack.dims(), 2);
  DescriptionBank self = f.descriptions;
  {
    Graph g;
    PromptModel m(g, f.stack, f.world, s, f.config, {});
    const Tensor a = m.anchor_features(self.classes).value();
    for (std::size_t i = 0; i < self.classes.size(); ++i) self.features[i] = a.row_block(i, i + 1);
  }
  const Stage1Result r = train_stage1_anchor(s, self, f.world, f.stack, f.config);
  CHECK(r.loss_trace.front() == 0.0);
}

TEST_CASE("stage one rejects missing descriptions and a trainable stack") {
  Fixture f;
  TrainState s = TrainState::initialize(f.config, f.stack.dims(), 2);
  CHECK_THROWS_AS(train_stage1_anchor(s, DescriptionBank{}, f.world, f.stack, f.config), std::invalid_argument);
  EncoderStack open = EncoderStack::initialize(f.stack.dims(), 1);
  CHECK_THROWS_AS(train_stage1_anchor(s, f.descriptions, f.world, open, f.config), std::invalid_argument);
  CHECK_THROWS_AS(train_stage2_adapt(s, f.images, f.split.base_classes, f.world, f.stack, f.config),
                  std::invalid_argument);
}

TEST_CASE("loss breakdown consistency and the no-distillation reduction") {
  Fixture f;
  TrainState s = TrainState::initialize(f.config, f.stack.dims(), 3);
  train_stage1_anchor(s, f.descriptions, f.world, f.stack, f.config);
  const TrainState after1 = s;
  const Stage2Result r = train_stage2_adapt(s, f.images, f.split.base_classes, f.world, f.stack, f.config);
  for (const LossBreakdown& b : r.trace) {
    CHECK(std::abs(b.total - (b.lambda_ce * b.ce + b.lambda_kd * b.kd)) < 1e-9);
    CHECK(b.lambda_kd == 10.0);
    CHECK(b.kd >= 0.0);
  }

  TrainConfig off = f.config;
  off.lambda_kd = 0.0;
  TrainState a = after1;
  const Stage2Result r0 = train_stage2_adapt(a, f.images, f.split.base_classes, f.world, f.stack, off);
  for (const LossBreakdown& b : r0.trace) CHECK(b.total == b.ce);

  // With lambda_kd = 0 the anchored run matches plain cross-entropy on the same prompts.
  TrainConfig ce_only = off;
  TrainState c = after1;
  const Stage2Result rc = train_stage2_adapt(c, f.images, f.split.base_classes, f.world, f.stack, ce_only);
  CHECK(c.adaptation_hash() == a.adaptation_hash());
  CHECK(rc.trace.back().ce == r0.trace.back().ce);
}

TEST_CASE("distillation target carries no gradient") {
  const Tensor logits = Tensor::matrix(2, 3, {0.3, -0.2, 1.0, 0.5, 0.1, -0.4});
  const Tensor anc = Tensor::matrix(2, 3, {0.2, 0.3, 0.5, 0.6, 0.2, 0.2});
  auto kd_of = [&](const Tensor& q_anc_value, Tensor* anc_grad) {
    Graph g;
    Var l = g.leaf(logits, true);
    Var qa = g.leaf(q_anc_value, true);
    Var qn = softmax(l);
    Var ens = stop_gradient(scale(add(qn, qa), 0.5));
    Var kd = kl_divergence(ens, qn);
    g.backward(kd);
    if (anc_grad) *anc_grad = qa.grad();
    return kd.value().item();
  };
  Tensor grad;
  const double k0 = kd_of(anc, &grad);
  for (double v : grad.values()) CHECK(v == 0.0);
  Tensor moved = Tensor::matrix(2, 3, {0.1, 0.1, 0.8, 0.3, 0.3, 0.4});
  CHECK(kd_of(moved, nullptr) != k0);

  // Equal distributions give zero divergence.
  Graph g;
  Var q = softmax(g.constant(logits));
  CHECK(kl_divergence(stop_gradient(scale(add(q, q), 0.5)), q).value().item() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("composed stage two loss matches finite differences") {
  Fixture f;
  TrainConfig cfg = f.config;
  cfg.position_forward = prompt::PositionForward::soft;
  TrainState s = TrainState::initialize(cfg, f.stack.dims(), 4);
  s.anchors_trained = true;
  const Tensor img = f.images.features.row_block(0, 6);
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
  Tensor noise({4, 4});
  Rng rng(9);
  for (double& v : noise.values()) v = rng.gumbel();
  Tensor anchor_feats;
  {
    Graph g;
    PromptModel m(g, f.stack, f.world, s, cfg, {});
    anchor_feats = m.anchor_features(f.split.base_classes).value();
  }
  const Tensor q_anc = class_probabilities(img, anchor_feats, f.stack.logit_scale());

  // The detached target is frozen at the base point; finite differences would
  // otherwise differentiate through it.
  Tensor target;
  auto loss_wrt = [&](bool wrt_soft, bool record) {
    return [&, wrt_soft, record](Graph& g, Var x) {
      TrainState local = s;
      if (wrt_soft) local.soft = x.value();
      PromptModel m(g, f.stack, f.world, local, cfg, {});
      Var logits_param = wrt_soft ? g.constant(s.position.logits) : x;
      m.set_realization(gumbel_softmax(logits_param, g.constant(noise), 1.0, GumbelMode::soft));
      // Rebuild prompts with `x` standing in for the soft tokens when requested.
      std::vector<prompt::GraphPrompt> ps;
      for (ClassId c : f.split.base_classes) {
        Var cls = m.context().words(f.world.class_name_tokens[c]);
        ps.push_back(prompt::normal_prompt(m.context(), m.realization(), wrt_soft ? x : g.constant(s.soft),
                                           g.constant(s.anchors), cls));
      }
      const prompt::PromptBatch b = prompt::pack(ps);
      Var text = m.encoder().encode_text(b.rows, b.layout, b.pool_rows);
      Var logits = scale(matmul(g.constant(img), transpose(text)), f.stack.logit_scale());
      Var qn = softmax(logits);
      if (record) target = scale(add(qn, g.constant(q_anc)), 0.5).value();
      return add(cross_entropy(logits, labels), scale(kl_divergence(g.constant(target), qn), 10.0));
    };
  };
  for (bool wrt_soft : {true, false}) {
    const Tensor& point = wrt_soft ? s.soft : s.position.logits;
    Graph g0;
    loss_wrt(wrt_soft, true)(g0, g0.constant(point));
    CHECK(check_gradients(loss_wrt(wrt_soft, false), point) < 1e-4);
  }
}

TEST_CASE("one-stage training") {
  Fixture f;
  SUBCASE("a period covering the whole budget equals stage one") {
    TrainConfig cfg = f.config;
    cfg.one_stage_steps = 6;
    cfg.one_stage_period = 6;
    TrainState a = TrainState::initialize(cfg, f.stack.dims(), 7);
    TrainState b = a;
    const OneStageResult r = train_one_stage(a, f.images, f.descriptions, f.split.base_classes, f.world, f.stack, cfg);
    CHECK(r.adapt_trace.empty());
    const Stage1Result r1 = train_stage1_anchor(b, f.descriptions, f.world, f.stack, cfg);
    CHECK(a.anchors.bitwise_equal(b.anchors));
    CHECK(r.anchor_trace == r1.loss_trace);
  }
  SUBCASE("alternation never uses distillation") {
    TrainConfig cfg = f.config;
    cfg.one_stage_steps = 8;
    TrainState s = TrainState::initialize(cfg, f.stack.dims(), 8);
    const OneStageResult r = train_one_stage(s, f.images, f.descriptions, f.split.base_classes, f.world, f.stack, cfg);
    CHECK(r.anchor_trace.size() == 4);
    CHECK(r.adapt_trace.size() == 4);
    for (const LossBreakdown& b : r.adapt_trace) {
      CHECK(b.kd == 0.0);
      CHECK(b.total == b.ce);
    }
    CHECK_THROWS_AS(train_one_stage(s, f.images, f.descriptions, f.split.base_classes, f.world, f.stack, cfg),
                    std::invalid_argument);
  }
}

TEST_CASE("stage runs are reproducible") {
  Fixture f;
  std::string hashes[2];
  for (auto& h : hashes) {
    TrainState s = TrainState::initialize(f.config, f.stack.dims(), 11);
    train_stage1_anchor(s, f.descriptions, f.world, f.stack, f.config);
    train_stage2_adapt(s, f.images, f.split.base_classes, f.world, f.stack, f.config);
    h = s.full_hash();
  }
  CHECK(hashes[0] == hashes[1]);
}

TEST_CASE("deep variant") {
  Fixture f;
  const Tensor soft = prompt::init_soft_tokens(3, 32, 1);
  const Tensor anc = prompt::init_soft_tokens(1, 32, 2);
  Tensor eye({4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  const prompt::PromptSequence p = prompt::compose_normal_prompt(f.stack, soft, anc, eye, {70});

  SUBCASE("depth one is the shallow encoder") {
    const encoder::Feature shallow = encoder::encode_text(p.embeddings(), f.stack);
    CHECK(forward_deep(p, {}, f.stack, 1).vector == shallow.vector);
    CHECK(forward_deep(p, {soft}, f.stack, 1).vector == shallow.vector);
  }
  SUBCASE("depth beyond the block count is rejected") {
    CHECK_THROWS_AS(forward_deep(p, {soft, soft}, f.stack, 3), std::invalid_argument);
  }
  SUBCASE("deeper tokens change the feature and receive gradients") {
    CHECK(forward_deep(p, {prompt::init_soft_tokens(3, 32, 5)}, f.stack, 2).vector !=
          encoder::encode_text(p.embeddings(), f.stack).vector);
    Graph g;
    encoder::BoundEncoder enc(g, f.stack);
    prompt::PromptContext ctx(g, f.stack);
    Var s0 = g.leaf(soft, true);
    Var d1 = g.leaf(prompt::init_soft_tokens(3, 32, 6), true);
    const std::vector<prompt::GraphPrompt> ps{
        prompt::normal_prompt(ctx, g.constant(eye), s0, g.constant(anc), ctx.words({70}))};
    const prompt::PromptBatch b = prompt::pack(ps);
    Var out = forward_deep(enc, b, std::vector<Var>{d1}, 2);
    g.backward(mean(mul(out, g.constant(Tensor({1, 16}, 0.3)))));
    double n0 = 0, n1 = 0;
    for (double v : s0.grad().values()) n0 += std::abs(v);
    for (double v : d1.grad().values()) n1 += std::abs(v);
    CHECK(n0 > 0.0);
    CHECK(n1 > 0.0);
  }
  SUBCASE("anchor rows are processed, not re-injected") {
    Graph g;
    encoder::BoundEncoder enc(g, f.stack);
    Var x = enc.text_input(g.constant(p.embeddings()), encoder::PackedLayout::from_lengths({p.size()}));
    const Tensor input = x.value();
    Var h = enc.text_block(0, x, encoder::PackedLayout::from_lengths({p.size()}));
    bool differs = false;
    for (std::size_t j = 0; j < 32; ++j) differs |= h.value().at(4, j) != input.at(4, j);
    CHECK(p.tokens[4].role == prompt::Role::anchor);
    CHECK(differs);
  }
}

TEST_CASE("ensemble prediction") {
  encoder::PredictionDistribution a, b;
  a.class_ids = b.class_ids = {3, 7};
  a.probs = {1.0, 0.0};
  b.probs = {0.0, 1.0};
  const auto m = ensemble_predict(a, b);
  CHECK(m.probs == std::vector<double>{0.5, 0.5});
  CHECK(ensemble_predict(a, a).probs == a.probs);
  a.probs = {0.3, 0.7};
  b.probs = {0.9, 0.1};
  const auto e = ensemble_predict(a, b);
  CHECK(std::abs(e.probs[0] + e.probs[1] - 1.0) < 1e-12);
  b.class_ids = {3, 8};
  CHECK_THROWS_AS(ensemble_predict(a, b), std::invalid_argument);
}

TEST_CASE("config validation") {
  encoder::EncoderDims d;
  TrainConfig c;
  CHECK_NOTHROW(c.validate(d, 2));
  c.soft_length = 13;
  CHECK_THROWS_AS(c.validate(d, 2), std::invalid_argument);
  c = TrainConfig{};
  c.deep_depth = 5;
  CHECK_THROWS_AS(c.validate(d, 2), std::invalid_argument);
  c = TrainConfig{};
  c.anchor_length = 0;
  CHECK_THROWS_AS(c.validate(d, 2), std::invalid_argument);
}
