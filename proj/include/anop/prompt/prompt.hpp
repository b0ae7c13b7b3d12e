// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "anop/autodiff/graph.hpp"
#include "anop/encoder/dual_encoder.hpp"

namespace anop::prompt {

using ad::Graph;
using ad::Tensor;
using ad::Var;
using encoder::EncoderStack;
using encoder::TokenSeq;

enum class Role { prefix, soft, anchor, preposition, cls, suffix, attribute };
std::string_view role_name(Role role);

struct PromptToken {
  std::vector<double> embedding;
  Role role = Role::soft;
  bool trainable = false;
};

struct PromptSequence {
  std::vector<PromptToken> tokens;
  std::size_t class_begin = 0;  // [class_begin, class_end)
  std::size_t class_end = 0;

  std::size_t size() const { return tokens.size(); }
  Tensor embeddings() const;
  std::vector<Role> roles() const;
  // Throws when the structural invariants do not hold.
  void validate(std::size_t max_len) const;
};

// A prompt inside a graph: one row per position.
struct GraphPrompt {
  Var rows;
  std::vector<Role> roles;
  // Source index into the soft tokens for soft positions, -1 elsewhere.
  std::vector<std::ptrdiff_t> soft_source;
  std::size_t class_begin = 0;
  std::size_t class_end = 0;

  std::size_t size() const { return roles.size(); }
  std::size_t pool_row() const { return roles.size() - 1; }
};

// Frozen pieces shared by every prompt of one graph.
class PromptContext {
 public:
  PromptContext(Graph& graph, const EncoderStack& stack);

  Graph& graph() const { return *graph_; }
  const EncoderStack& stack() const { return *stack_; }
  std::size_t max_len() const { return stack_->dims().max_len; }
  std::size_t width() const { return stack_->dims().token_width; }

  // Frozen embedding rows for vocabulary tokens.
  Var words(const TokenSeq& tokens);
  Var prefix() const { return prefix_; }
  Var suffix() const { return suffix_; }

 private:
  Graph* graph_;
  const EncoderStack* stack_;
  Var prefix_, suffix_;
};

// Fixed placements of the anchors used when the position matrix is bypassed.
enum class Arrangement { matrix, before_soft, middle, after_class };
std::string_view arrangement_name(Arrangement a);
Arrangement parse_arrangement(std::string_view name);

// [prefix][V_1..V_M][CLS..][suffix]
GraphPrompt coop_prompt(PromptContext& ctx, Var soft, Var class_rows);
// [prefix][Anc_1..Anc_N][prep][CLS..][suffix]; no preposition row when absent.
GraphPrompt anchor_prompt(PromptContext& ctx, Var anchors, std::optional<Var> preposition, Var class_rows);
// [prefix][V_a..][attributes..][V_1..V_M][CLS..][suffix]
GraphPrompt attribute_prompt(PromptContext& ctx, std::optional<Var> soft_a, std::optional<Var> attributes, Var soft,
                             Var class_rows);
// [prefix](W x [V_1..V_M, Anc_1..Anc_N])[CLS..][suffix]. Roles follow the
// source each row selects most strongly.
GraphPrompt normal_prompt(PromptContext& ctx, Var realized, Var soft, Var anchors, Var class_rows);
// Fixed anchor splices: before_soft, middle or after_class.
GraphPrompt arranged_prompt(PromptContext& ctx, Arrangement arrangement, Var soft, Var anchors, Var class_rows);

// Copies the values of a graph prompt; soft and anchor rows take the given
// trainable flags, every other role is frozen.
PromptSequence to_sequence(const GraphPrompt& prompt, bool soft_trainable, bool anchor_trainable);

// Value-level builders.
PromptSequence build_coop_prompt(const EncoderStack& stack, const Tensor& soft, const TokenSeq& class_tokens);
PromptSequence build_atprompt(const EncoderStack& stack, const Tensor* attributes, const Tensor* soft_a,
                              const Tensor& soft, const TokenSeq& class_tokens);
PromptSequence build_anchor_prompt(const EncoderStack& stack, const Tensor& anchors, std::optional<std::size_t> preposition,
                                   const TokenSeq& class_tokens);
PromptSequence compose_normal_prompt(const EncoderStack& stack, const Tensor& soft, const Tensor& anchors,
                                     const Tensor& realized, const TokenSeq& class_tokens);

// Soft tokens drawn from N(0, 0.02^2).
Tensor init_soft_tokens(std::size_t count, std::size_t width, std::uint64_t seed);

enum class PositionForward { hard_st, soft };
std::string_view position_forward_name(PositionForward f);
PositionForward parse_position_forward(std::string_view name);

struct PositionMatrix {
  Tensor logits;  // rows: target positions, columns: source tokens
  double temperature = 1.0;
  PositionForward mode = PositionForward::hard_st;

  // Standard-normal logits.
  static PositionMatrix initialize(std::size_t size, std::uint64_t seed);
  std::size_t size() const { return logits.rows(); }
};

struct Realization {
  Var matrix;
  Tensor noise;  // empty when not training
};

// Training: fresh Gumbel noise from `seed`; the forward value is the hard
// one-hot matrix under hard_st (soft rows otherwise) and gradients follow the
// soft rows. Inference: noise-free argmax of the logits, no gradient.
Realization sample_position_matrix(Graph& graph, Var logits, double temperature, PositionForward mode,
                                   std::uint64_t seed, bool training);
Tensor sample_position_matrix(const PositionMatrix& pm, std::uint64_t seed, bool training, Tensor* noise = nullptr);
// Row-wise argmax as a one-hot matrix; lowest column wins ties.
Tensor hard_assignment(const Tensor& logits);

// Several prompts packed for one encoder pass.
struct PromptBatch {
  Var rows;
  encoder::PackedLayout layout;
  std::vector<std::size_t> pool_rows;
  std::vector<std::ptrdiff_t> soft_source;  // per packed row
};
PromptBatch pack(std::span<const GraphPrompt> prompts);

}  // namespace anop::prompt
