#include <doctest.h>

#include <cmath>

#include "anop/autodiff/gradcheck.hpp"
#include "anop/autodiff/ops.hpp"
#include "anop/prompt/prompt.hpp"
#include "anop/util/rng.hpp"
#include "anop/world/synth_world.hpp"

using namespace anop;
using namespace anop::ad;
using namespace anop::prompt;
namespace vocab = anop::world::vocab;

namespace {

const EncoderStack& stack() {
  static const EncoderStack s = [] {
    encoder::EncoderDims d;
    d.text_blocks = 2;
    return EncoderStack::initialize(d, 2);
  }();
  return s;
}

Tensor random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, sd);
  return t;
}

bool row_equals(const PromptToken& t, const Tensor& m, std::size_t r) {
  for (std::size_t j = 0; j < m.cols(); ++j) {
    if (t.embedding[j] != m.at(r, j)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("coop prompt layout") {
  const Tensor soft = init_soft_tokens(4, 32, 1);
  const PromptSequence p = build_coop_prompt(stack(), soft, {70});
  CHECK(p.size() == 7);
  p.validate(16);
  CHECK(p.class_begin == 5);
  CHECK(p.class_end == 6);
  for (std::size_t i = 1; i <= 4; ++i) {
    CHECK(p.tokens[i].role == Role::soft);
    CHECK(p.tokens[i].trainable);
    CHECK(row_equals(p.tokens[i], soft, i - 1));
  }
  CHECK_FALSE(p.tokens[5].trainable);
  CHECK_THROWS_AS(build_coop_prompt(stack(), init_soft_tokens(14, 32, 1), {70}), std::invalid_argument);
}

TEST_CASE("soft token initialization") {
  const Tensor t = init_soft_tokens(200, 32, 9);
  double mean = 0, sq = 0;
  for (double v : t.values()) mean += v;
  mean /= static_cast<double>(t.size());
  for (double v : t.values()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(t.size() - 1));
  CHECK(std::abs(mean) < 0.002);
  CHECK(sd == doctest::Approx(0.02).epsilon(0.03));
}

TEST_CASE("attribute prompt") {
  const Tensor soft = init_soft_tokens(4, 32, 1);
  const PromptSequence coop = build_coop_prompt(stack(), soft, {70, 71});
  const PromptSequence bare = build_atprompt(stack(), nullptr, nullptr, soft, {70, 71});
  CHECK(bare.embeddings().bitwise_equal(coop.embeddings()));
  CHECK(bare.roles() == coop.roles());

  const Tensor attrs = stack().embed_tokens({vocab::kAttributeBase, vocab::kAttributeBase + 1});
  const Tensor soft_a = init_soft_tokens(1, 32, 2);
  const PromptSequence at = build_atprompt(stack(), &attrs, &soft_a, soft, {70});
  at.validate(16);
  const std::vector<Role> expect{Role::prefix, Role::soft, Role::attribute, Role::attribute, Role::soft, Role::soft,
                                 Role::soft,   Role::soft, Role::cls,       Role::suffix};
  CHECK(at.roles() == expect);
  CHECK_FALSE(at.tokens[2].trainable);
  CHECK_FALSE(at.tokens[3].trainable);
  CHECK(row_equals(at.tokens[1], soft_a, 0));
  CHECK(row_equals(at.tokens[4], soft, 0));
}

TEST_CASE("anchor prompt") {
  const Tensor anc = init_soft_tokens(1, 32, 3);
  const PromptSequence p = build_anchor_prompt(stack(), anc, vocab::kOf, {70});
  p.validate(16);
  CHECK(p.size() == 5);
  CHECK(p.tokens[1].role == Role::anchor);
  CHECK(p.tokens[2].role == Role::preposition);
  CHECK_FALSE(p.tokens[2].trainable);
  CHECK(row_equals(p.tokens[2], stack().embed_tokens({vocab::kOf}), 0));

  const PromptSequence with = build_anchor_prompt(stack(), anc, vocab::kWith, {70});
  CHECK(row_equals(with.tokens[2], stack().embed_tokens({vocab::kWith}), 0));
  const PromptSequence none = build_anchor_prompt(stack(), anc, std::nullopt, {70});
  CHECK(none.size() == 4);
}

TEST_CASE("position matrix sampling") {
  SUBCASE("inference on a dominant diagonal is the identity") {
    PositionMatrix pm = PositionMatrix::initialize(5, 1);
    for (std::size_t i = 0; i < 5; ++i) pm.logits.at(i, i) = 50.0;
    const Tensor w = sample_position_matrix(pm, 3, false);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) CHECK(w.at(i, j) == (i == j ? 1.0 : 0.0));
  }
  SUBCASE("training rows are one-hot and match pure hard sampling") {
    const PositionMatrix pm = PositionMatrix::initialize(7, 4);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Tensor noise;
      const Tensor w = sample_position_matrix(pm, seed, true, &noise);
      Tensor perturbed = pm.logits;
      for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] += noise[i];
      CHECK(w.bitwise_equal(hard_assignment(perturbed)));
    }
  }
  SUBCASE("gradient through the soft rows matches finite differences") {
    const Tensor noise = [] {
      Rng rng(11);
      Tensor t({5, 5});
      for (double& v : t.values()) v = rng.gumbel();
      return t;
    }();
    const Tensor v = random_tensor({5, 3}, 12);
    for (double tau : {0.5, 1.0, 2.0}) {
      auto fn = [&](Graph& g, Var logits) {
        Var w = gumbel_softmax(logits, g.constant(noise), tau, GumbelMode::soft);
        return scale(mean(matmul(w, g.constant(v))), 15.0);
      };
      CHECK(check_gradients(fn, random_tensor({5, 5}, 13)) < 1e-6);
    }
  }
  SUBCASE("straight-through backward equals the soft backward") {
    const Tensor logits = random_tensor({4, 4}, 21);
    const Tensor v = random_tensor({4, 3}, 22);
    Tensor grads[2];
    int k = 0;
    for (PositionForward mode : {PositionForward::hard_st, PositionForward::soft}) {
      Graph g;
      Var l = g.leaf(logits, true);
      Realization r = sample_position_matrix(g, l, 0.7, mode, 5, true);
      g.backward(mean(matmul(r.matrix, g.constant(v))));
      grads[k++] = l.grad();
    }
    CHECK(grads[0].bitwise_equal(grads[1]));
  }
  SUBCASE("rejections") {
    Graph g;
    CHECK_THROWS_AS(sample_position_matrix(g, g.constant(Tensor({2, 2})), 0.0, PositionForward::soft, 1, true),
                    std::invalid_argument);
    CHECK_THROWS_AS(sample_position_matrix(g, g.constant(Tensor({2, 3})), 1.0, PositionForward::soft, 1, true),
                    ShapeError);
  }
}

TEST_CASE("position matrix properties") {
  const PositionMatrix base = PositionMatrix::initialize(7, 31);
  Rng noise_rng(32);
  for (double tau : {0.1, 0.5, 1.0, 2.0, 4.0}) {
    Graph g;
    Tensor noise({7, 7});
    for (double& v : noise.values()) v = noise_rng.gumbel();
    const Tensor soft = gumbel_softmax(g.constant(base.logits), g.constant(noise), tau, GumbelMode::soft).value();
    for (std::size_t i = 0; i < 7; ++i) {
      double s = 0;
      for (double x : soft.row(i)) {
        CHECK(x >= 0.0);
        s += x;
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }

  // Adding a constant to a row leaves the hard assignment unchanged.
  Tensor shifted = base.logits;
  for (double& v : shifted.row(2)) v += 123.0;
  CHECK(hard_assignment(shifted).bitwise_equal(hard_assignment(base.logits)));

  // Vanishing temperature drives soft rows onto the hard rows.
  Graph g;
  Tensor noise({7, 7});
  for (double& v : noise.values()) v = noise_rng.gumbel();
  const Tensor soft = gumbel_softmax(g.constant(base.logits), g.constant(noise), 1e-4, GumbelMode::soft).value();
  const Tensor hard = gumbel_softmax(g.constant(base.logits), g.constant(noise), 1e-4, GumbelMode::hard_st).value();
  for (std::size_t i = 0; i < soft.size(); ++i) CHECK(std::abs(soft[i] - hard[i]) < 1e-6);
}

TEST_CASE("compose normal prompt") {
  const Tensor soft = init_soft_tokens(3, 32, 41);
  const Tensor anc = init_soft_tokens(1, 32, 42);
  const TokenSeq cls{70, 71};
  const Tensor cls_rows = stack().embed_tokens(cls);

  SUBCASE("identity keeps the original order") {
    Tensor eye({4, 4}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
    const PromptSequence p = compose_normal_prompt(stack(), soft, anc, eye, cls);
    p.validate(16);
    for (std::size_t i = 0; i < 3; ++i) CHECK(row_equals(p.tokens[1 + i], soft, i));
    CHECK(row_equals(p.tokens[4], anc, 0));
    CHECK(p.tokens[4].role == Role::anchor);
    CHECK(p.class_begin == 5);
  }
  SUBCASE("row 1 selecting column 4 moves token 4 to position 1") {
    Tensor w({4, 4}, 0.0);
    w.at(0, 3) = 1.0;
    w.at(1, 0) = 1.0;
    w.at(2, 1) = 1.0;
    w.at(3, 2) = 1.0;
    const PromptSequence p = compose_normal_prompt(stack(), soft, anc, w, cls);
    CHECK(row_equals(p.tokens[1], anc, 0));
    CHECK(p.tokens[1].role == Role::anchor);
    CHECK(row_equals(p.tokens[2], soft, 0));
  }
  SUBCASE("duplication is legal") {
    Tensor w({4, 4}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) w.at(i, 0) = 1.0;
    const PromptSequence p = compose_normal_prompt(stack(), soft, anc, w, cls);
    for (std::size_t i = 0; i < 4; ++i) CHECK(row_equals(p.tokens[1 + i], soft, 0));
  }
  SUBCASE("class block is untouched by any matrix") {
    const PositionMatrix pm = PositionMatrix::initialize(4, 43);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Tensor w = sample_position_matrix(pm, seed, true);
      const PromptSequence p = compose_normal_prompt(stack(), soft, anc, w, cls);
      for (std::size_t i = p.class_begin; i < p.class_end; ++i) CHECK(row_equals(p.tokens[i], cls_rows, i - p.class_begin));
    }
  }
  SUBCASE("mismatched matrix is rejected") {
    CHECK_THROWS_AS(compose_normal_prompt(stack(), soft, anc, Tensor({3, 3}, 0.1), cls), ShapeError);
  }
}

TEST_CASE("fixed arrangements") {
  Graph g;
  PromptContext ctx(g, stack());
  Var soft = g.constant(init_soft_tokens(5, 32, 51));
  Var anc = g.constant(init_soft_tokens(1, 32, 52));
  Var cls = ctx.words({70});
  using R = Role;
  CHECK(arranged_prompt(ctx, Arrangement::before_soft, soft, anc, cls).roles ==
        std::vector<R>{R::prefix, R::anchor, R::soft, R::soft, R::soft, R::soft, R::soft, R::cls, R::suffix});
  const GraphPrompt mid = arranged_prompt(ctx, Arrangement::middle, soft, anc, cls);
  CHECK(mid.roles == std::vector<R>{R::prefix, R::soft, R::soft, R::soft, R::anchor, R::soft, R::soft, R::cls, R::suffix});
  CHECK(mid.soft_source[5] == 3);
  CHECK(arranged_prompt(ctx, Arrangement::after_class, soft, anc, cls).roles ==
        std::vector<R>{R::prefix, R::soft, R::soft, R::soft, R::soft, R::soft, R::cls, R::anchor, R::suffix});
  CHECK_THROWS_AS(arranged_prompt(ctx, Arrangement::matrix, soft, anc, cls), std::invalid_argument);
  CHECK(parse_arrangement("middle") == Arrangement::middle);
  CHECK_THROWS_AS(parse_arrangement("random"), std::invalid_argument);
}

TEST_CASE("packing several prompts") {
  Graph g;
  PromptContext ctx(g, stack());
  Var soft = g.constant(init_soft_tokens(2, 32, 61));
  const std::vector<GraphPrompt> ps{coop_prompt(ctx, soft, ctx.words({70})), coop_prompt(ctx, soft, ctx.words({72, 73}))};
  const PromptBatch b = pack(ps);
  CHECK(b.layout.total == 11);
  CHECK(b.pool_rows == std::vector<std::size_t>{4, 5});
  CHECK(b.soft_source.size() == 11);
  CHECK(b.soft_source[6] == 0);
}
