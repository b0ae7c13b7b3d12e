// SPDX-License-Identifier: Apache-2.0
#include "anop/prompt/prompt.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "anop/autodiff/ops.hpp"
#include "anop/util/rng.hpp"
#include "anop/world/synth_world.hpp"

namespace anop::prompt {
namespace {

using namespace anop::ad;

struct Segment {
  Role role;
  Var rows;
  bool soft_sources = false;  // soft rows numbered from soft_offset
  std::size_t soft_offset = 0;
};

void check_width(const PromptContext& ctx, Var v, const char* what) {
  if (v.shape().size() != 2 || v.shape()[1] != ctx.width()) {
    throw ShapeError(std::string("prompt: ") + what + " must have width " + std::to_string(ctx.width()) + ", got " +
                     to_string(v.shape()));
  }
}

GraphPrompt assemble(PromptContext& ctx, const std::vector<Segment>& segments) {
  GraphPrompt p;
  std::vector<Var> parts;
  for (const Segment& s : segments) {
    check_width(ctx, s.rows, role_name(s.role).data());
    const std::size_t n = s.rows.shape()[0];
    if (s.role == Role::cls) {
      p.class_begin = p.roles.size();
      p.class_end = p.class_begin + n;
    }
    for (std::size_t i = 0; i < n; ++i) {
      p.roles.push_back(s.role);
      p.soft_source.push_back(s.role == Role::soft ? static_cast<std::ptrdiff_t>(s.soft_offset + i) : -1);
    }
    parts.push_back(s.rows);
  }
  if (p.roles.size() > ctx.max_len()) {
    throw std::invalid_argument("prompt length " + std::to_string(p.roles.size()) + " exceeds L_max " +
                                std::to_string(ctx.max_len()));
  }
  p.rows = concat(parts, 0);
  return p;
}

Segment seg(Role role, Var rows, std::size_t soft_offset = 0) { return Segment{role, rows, role == Role::soft, soft_offset}; }

TokenSeq class_ids_or_throw(const TokenSeq& class_tokens) {
  if (class_tokens.empty()) throw std::invalid_argument("prompt: empty class block");
  return class_tokens;
}

}  // namespace

std::string_view role_name(Role role) {
  switch (role) {
    case Role::prefix:
      return "prefix";
    case Role::soft:
      return "soft";
    case Role::anchor:
      return "anchor";
    case Role::preposition:
      return "preposition";
    case Role::cls:
      return "class";
    case Role::suffix:
      return "suffix";
    case Role::attribute:
      return "attribute";
  }
  return "unknown";
}

Tensor PromptSequence::embeddings() const {
  if (tokens.empty()) throw std::invalid_argument("prompt: empty sequence");
  const std::size_t w = tokens.front().embedding.size();
  std::vector<double> values;
  values.reserve(tokens.size() * w);
  for (const PromptToken& t : tokens) {
    if (t.embedding.size() != w) throw ShapeError("prompt: token widths differ");
    values.insert(values.end(), t.embedding.begin(), t.embedding.end());
  }
  return Tensor({tokens.size(), w}, std::move(values));
}

std::vector<Role> PromptSequence::roles() const {
  std::vector<Role> out;
  for (const PromptToken& t : tokens) out.push_back(t.role);
  return out;
}

void PromptSequence::validate(std::size_t max_len) const {
  if (tokens.size() < 3) throw std::invalid_argument("prompt: too short");
  if (tokens.size() > max_len) throw std::invalid_argument("prompt: length exceeds L_max");
  if (tokens.front().role != Role::prefix || tokens.back().role != Role::suffix) {
    throw std::invalid_argument("prompt: must start with the prefix and end with the suffix");
  }
  if (class_begin >= class_end || class_end > tokens.size()) throw std::invalid_argument("prompt: bad class span");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const bool inside = i >= class_begin && i < class_end;
    if ((tokens[i].role == Role::cls) != inside) throw std::invalid_argument("prompt: class block is not contiguous");
    const Role r = tokens[i].role;
    if (tokens[i].trainable && r != Role::soft && r != Role::anchor) {
      throw std::invalid_argument("prompt: only soft and anchor tokens may be trainable");
    }
  }
}

PromptContext::PromptContext(Graph& graph, const EncoderStack& stack) : graph_(&graph), stack_(&stack) {
  prefix_ = graph.constant(stack.embed_tokens({world::vocab::kStart}));
  suffix_ = graph.constant(stack.embed_tokens({world::vocab::kEnd}));
}

Var PromptContext::words(const TokenSeq& tokens) { return graph_->constant(stack_->embed_tokens(tokens)); }

std::string_view arrangement_name(Arrangement a) {
  switch (a) {
    case Arrangement::matrix:
      return "matrix";
    case Arrangement::before_soft:
      return "before_soft";
    case Arrangement::middle:
      return "middle";
    case Arrangement::after_class:
      return "after_class";
  }
  return "unknown";
}

Arrangement parse_arrangement(std::string_view name) {
  for (Arrangement a : {Arrangement::matrix, Arrangement::before_soft, Arrangement::middle, Arrangement::after_class}) {
    if (arrangement_name(a) == name) return a;
  }
  throw std::invalid_argument("unknown arrangement '" + std::string(name) + "'");
}

GraphPrompt coop_prompt(PromptContext& ctx, Var soft, Var class_rows) {
  return assemble(ctx, {seg(Role::prefix, ctx.prefix()), seg(Role::soft, soft), seg(Role::cls, class_rows),
                        seg(Role::suffix, ctx.suffix())});
}

GraphPrompt anchor_prompt(PromptContext& ctx, Var anchors, std::optional<Var> preposition, Var class_rows) {
  std::vector<Segment> s{seg(Role::prefix, ctx.prefix()), seg(Role::anchor, anchors)};
  if (preposition) s.push_back(seg(Role::preposition, *preposition));
  s.push_back(seg(Role::cls, class_rows));
  s.push_back(seg(Role::suffix, ctx.suffix()));
  return assemble(ctx, s);
}

GraphPrompt attribute_prompt(PromptContext& ctx, std::optional<Var> soft_a, std::optional<Var> attributes, Var soft,
                             Var class_rows) {
  std::vector<Segment> s{seg(Role::prefix, ctx.prefix())};
  std::size_t m = 0;
  if (soft_a) {
    s.push_back(seg(Role::soft, *soft_a));
    m = soft_a->shape()[0];
  }
  if (attributes) s.push_back(seg(Role::attribute, *attributes));
  s.push_back(seg(Role::soft, soft, m));
  s.push_back(seg(Role::cls, class_rows));
  s.push_back(seg(Role::suffix, ctx.suffix()));
  return assemble(ctx, s);
}

GraphPrompt normal_prompt(PromptContext& ctx, Var realized, Var soft, Var anchors, Var class_rows) {
  check_width(ctx, soft, "soft tokens");
  check_width(ctx, anchors, "anchors");
  const std::size_t M = soft.shape()[0], N = anchors.shape()[0];
  if (realized.shape() != Shape{M + N, M + N}) {
    throw ShapeError("compose_normal_prompt: position matrix " + to_string(realized.shape()) + " does not match " +
                     std::to_string(M + N) + " tokens");
  }
  Var block = matmul(realized, concat({soft, anchors}, 0));
  GraphPrompt p = assemble(ctx, {seg(Role::prefix, ctx.prefix()), seg(Role::soft, block), seg(Role::cls, class_rows),
                                 seg(Role::suffix, ctx.suffix())});
  const Tensor& w = realized.value();
  for (std::size_t i = 0; i < M + N; ++i) {
    std::size_t j = 0;
    for (std::size_t c = 1; c < M + N; ++c) {
      if (w.at(i, c) > w.at(i, j)) j = c;
    }
    p.roles[1 + i] = j < M ? Role::soft : Role::anchor;
    p.soft_source[1 + i] = j < M ? static_cast<std::ptrdiff_t>(j) : -1;
  }
  return p;
}

GraphPrompt arranged_prompt(PromptContext& ctx, Arrangement arrangement, Var soft, Var anchors, Var class_rows) {
  check_width(ctx, soft, "soft tokens");
  const std::size_t M = soft.shape()[0];
  switch (arrangement) {
    case Arrangement::before_soft:
      return assemble(ctx, {seg(Role::prefix, ctx.prefix()), seg(Role::anchor, anchors), seg(Role::soft, soft),
                            seg(Role::cls, class_rows), seg(Role::suffix, ctx.suffix())});
    case Arrangement::middle: {
      const std::size_t half = (M + 1) / 2;
      std::vector<Segment> s{seg(Role::prefix, ctx.prefix()), seg(Role::soft, slice(soft, 0, 0, half))};
      s.push_back(seg(Role::anchor, anchors));
      if (half < M) s.push_back(seg(Role::soft, slice(soft, 0, half, M), half));
      s.push_back(seg(Role::cls, class_rows));
      s.push_back(seg(Role::suffix, ctx.suffix()));
      return assemble(ctx, s);
    }
    case Arrangement::after_class:
      return assemble(ctx, {seg(Role::prefix, ctx.prefix()), seg(Role::soft, soft), seg(Role::cls, class_rows),
                            seg(Role::anchor, anchors), seg(Role::suffix, ctx.suffix())});
    case Arrangement::matrix:
      break;
  }
  throw std::invalid_argument("arranged_prompt: the matrix arrangement needs a position matrix");
}

PromptSequence to_sequence(const GraphPrompt& prompt, bool soft_trainable, bool anchor_trainable) {
  PromptSequence out;
  const Tensor& rows = prompt.rows.value();
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    PromptToken t;
    t.embedding.assign(rows.row(i).begin(), rows.row(i).end());
    t.role = prompt.roles[i];
    t.trainable = (t.role == Role::soft && soft_trainable) || (t.role == Role::anchor && anchor_trainable);
    out.tokens.push_back(std::move(t));
  }
  out.class_begin = prompt.class_begin;
  out.class_end = prompt.class_end;
  return out;
}

PromptSequence build_coop_prompt(const EncoderStack& stack, const Tensor& soft, const TokenSeq& class_tokens) {
  Graph g;
  PromptContext ctx(g, stack);
  return to_sequence(coop_prompt(ctx, g.constant(soft), ctx.words(class_ids_or_throw(class_tokens))), true, false);
}

PromptSequence build_atprompt(const EncoderStack& stack, const Tensor* attributes, const Tensor* soft_a,
                              const Tensor& soft, const TokenSeq& class_tokens) {
  Graph g;
  PromptContext ctx(g, stack);
  std::optional<Var> a, sa;
  if (attributes) a = g.constant(*attributes);
  if (soft_a) sa = g.constant(*soft_a);
  return to_sequence(attribute_prompt(ctx, sa, a, g.constant(soft), ctx.words(class_ids_or_throw(class_tokens))), true,
                     false);
}

PromptSequence build_anchor_prompt(const EncoderStack& stack, const Tensor& anchors, std::optional<std::size_t> preposition,
                                   const TokenSeq& class_tokens) {
  Graph g;
  PromptContext ctx(g, stack);
  std::optional<Var> prep;
  if (preposition) prep = ctx.words({*preposition});
  return to_sequence(anchor_prompt(ctx, g.constant(anchors), prep, ctx.words(class_ids_or_throw(class_tokens))), false,
                     true);
}

PromptSequence compose_normal_prompt(const EncoderStack& stack, const Tensor& soft, const Tensor& anchors,
                                     const Tensor& realized, const TokenSeq& class_tokens) {
  Graph g;
  PromptContext ctx(g, stack);
  const GraphPrompt p = normal_prompt(ctx, g.constant(realized), g.constant(soft), g.constant(anchors),
                                      ctx.words(class_ids_or_throw(class_tokens)));
  return to_sequence(p, true, false);
}

Tensor init_soft_tokens(std::size_t count, std::size_t width, std::uint64_t seed) {
  if (count == 0 || width == 0) throw std::invalid_argument("init_soft_tokens: empty block");
  Rng rng(seed);
  Tensor t({count, width});
  for (double& v : t.values()) v = rng.normal(0.0, 0.02);
  return t;
}

std::string_view position_forward_name(PositionForward f) { return f == PositionForward::hard_st ? "hard_st" : "soft"; }

PositionForward parse_position_forward(std::string_view name) {
  if (name == "hard_st") return PositionForward::hard_st;
  if (name == "soft") return PositionForward::soft;
  throw std::invalid_argument("unknown position_forward '" + std::string(name) + "'");
}

PositionMatrix PositionMatrix::initialize(std::size_t size, std::uint64_t seed) {
  if (size == 0) throw std::invalid_argument("position matrix: empty");
  Rng rng(seed);
  PositionMatrix pm;
  pm.logits = Tensor({size, size});
  for (double& v : pm.logits.values()) v = rng.normal();
  return pm;
}

Tensor hard_assignment(const Tensor& logits) {
  Tensor out({logits.rows(), logits.cols()}, 0.0);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out.at(i, best) = 1.0;
  }
  return out;
}

Realization sample_position_matrix(Graph& graph, Var logits, double temperature, PositionForward mode,
                                   std::uint64_t seed, bool training) {
  if (!(temperature > 0.0)) throw std::invalid_argument("position matrix: temperature must be positive");
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != s[1]) throw ShapeError("position matrix: logits must be square, got " + to_string(s));
  Realization r;
  if (!training) {
    r.matrix = graph.constant(hard_assignment(logits.value()));
    return r;
  }
  Rng rng(seed);
  r.noise = Tensor(s);
  for (double& v : r.noise.values()) v = rng.gumbel();
  r.matrix = gumbel_softmax(logits, graph.constant(r.noise), temperature,
                            mode == PositionForward::hard_st ? GumbelMode::hard_st : GumbelMode::soft);
  return r;
}

Tensor sample_position_matrix(const PositionMatrix& pm, std::uint64_t seed, bool training, Tensor* noise) {
  Graph g;
  Realization r = sample_position_matrix(g, g.constant(pm.logits), pm.temperature, pm.mode, seed, training);
  if (noise) *noise = r.noise;
  return r.matrix.value();
}

PromptBatch pack(std::span<const GraphPrompt> prompts) {
  if (prompts.empty()) throw std::invalid_argument("pack: no prompts");
  PromptBatch b;
  std::vector<Var> rows;
  std::vector<std::size_t> lengths;
  for (const GraphPrompt& p : prompts) {
    rows.push_back(p.rows);
    lengths.push_back(p.size());
    b.pool_rows.push_back(p.pool_row());
    b.soft_source.insert(b.soft_source.end(), p.soft_source.begin(), p.soft_source.end());
  }
  b.rows = concat(rows, 0);
  b.layout = encoder::PackedLayout::from_lengths(std::move(lengths));
  return b;
}

}  // namespace anop::prompt
