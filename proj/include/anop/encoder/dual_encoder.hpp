// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "anop/autodiff/graph.hpp"
#include "anop/autodiff/optim.hpp"

namespace anop::encoder {

using ad::Tensor;
using ad::Var;
using TokenSeq = std::vector<std::size_t>;

struct EncoderDims {
  std::size_t vocab = 128;
  std::size_t token_width = 32;  // d_tok
  std::size_t embed_dim = 16;    // d, the shared feature space
  std::size_t text_blocks = 4;   // J
  std::size_t image_blocks = 2;
  std::size_t heads = 2;
  std::size_t max_len = 16;  // L_max
  std::size_t patches = 9;   // P
  std::size_t patch_dim = 24;  // d_img, also the image transformer width
  std::size_t mlp_ratio = 4;

  void validate() const;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor qkv_weight, qkv_bias;
  Tensor out_weight, out_bias;
  Tensor ln2_gain, ln2_bias;
  Tensor fc1_weight, fc1_bias;
  Tensor fc2_weight, fc2_bias;
};

// Parameters of the text and image encoders plus the logit scale (1/tau).
// Once frozen, every accessor is read-only and mutation attempts throw.
class EncoderStack {
 public:
  static EncoderStack initialize(const EncoderDims& dims, std::uint64_t seed);
  static EncoderStack from_tensors(const EncoderDims& dims, const std::map<std::string, Tensor>& tensors, bool frozen);

  const EncoderDims& dims() const { return dims_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  double logit_scale() const { return logit_scale_[0]; }
  const Tensor& logit_scale_tensor() const { return logit_scale_; }
  const Tensor& token_embedding() const { return token_embedding_; }
  const Tensor& text_positional() const { return text_positional_; }
  const Tensor& text_final_gain() const { return text_ln_gain_; }
  const Tensor& text_final_bias() const { return text_ln_bias_; }
  const Tensor& text_projection() const { return text_projection_; }
  const std::vector<BlockParams>& text_blocks() const { return text_blocks_; }
  const Tensor& image_positional() const { return image_positional_; }
  const Tensor& image_final_gain() const { return image_ln_gain_; }
  const Tensor& image_final_bias() const { return image_ln_bias_; }
  const Tensor& image_projection() const { return image_projection_; }
  const std::vector<BlockParams>& image_blocks() const { return image_blocks_; }

  // Stable name -> tensor listing used for serialization and hashing.
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  // Throws std::logic_error when frozen.
  std::vector<ad::NamedParam> trainable_parameters();
  void clamp_logit_scale(double lo, double hi);
  std::string parameter_hash() const;

  // Embedding rows for a token sequence (no graph involved).
  Tensor embed_tokens(const TokenSeq& tokens) const;

 private:
  template <class Fn>
  void for_each_tensor(Fn&& fn);

  EncoderDims dims_;
  bool frozen_ = false;
  Tensor logit_scale_;
  Tensor token_embedding_, text_positional_, text_ln_gain_, text_ln_bias_, text_projection_;
  std::vector<BlockParams> text_blocks_;
  Tensor image_positional_, image_ln_gain_, image_ln_bias_, image_projection_;
  std::vector<BlockParams> image_blocks_;
};

struct Feature {
  std::vector<double> vector;
  bool normalized = false;

  static Feature from_row(const Tensor& t, std::size_t row);
};

struct PredictionDistribution {
  std::vector<double> probs;
  std::vector<std::size_t> class_ids;

  // Lowest index wins ties.
  std::size_t argmax() const;
};

// Sequences packed back to back in one [sum(lengths), width] matrix.
struct PackedLayout {
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;

  static PackedLayout from_lengths(std::vector<std::size_t> lengths);
  std::size_t size() const { return lengths.size(); }
};

// Binds an EncoderStack to a graph. Parameters enter as leaves that
// reference the stack's tensors; they carry gradients only when `trainable`
// (pretraining). Bound encoders built over a frozen stack never write to it.
class BoundEncoder {
 public:
  BoundEncoder(ad::Graph& graph, const EncoderStack& stack, bool trainable = false);

  ad::Graph& graph() const { return *graph_; }
  const EncoderStack& stack() const { return *stack_; }

  // Token-id lookup through the embedding table (differentiable in pretraining).
  Var embed(const std::vector<TokenSeq>& sequences, PackedLayout& layout);

  // Adds positional embeddings.
  Var text_input(Var embeddings, const PackedLayout& layout);
  // One causal transformer block.
  Var text_block(std::size_t index, Var hidden, const PackedLayout& layout);
  // Final layer norm, pooling at each sequence's end-token row, projection,
  // L2 normalization. `pool_rows` are offsets within each sequence.
  Var text_head(Var hidden, const PackedLayout& layout, std::span<const std::size_t> pool_rows);

  // Full text path; returns [B, d] unit rows.
  Var encode_text(Var embeddings, const PackedLayout& layout, std::span<const std::size_t> pool_rows);
  Var encode_tokens(const std::vector<TokenSeq>& sequences);

  // grids: [B * P, d_img] stacked patch rows.  Returns [B, d] unit rows.
  Var encode_images(Var grids, std::size_t batch);

  Var logit_scale() const { return logit_scale_; }
  // Leaf bound for one of the stack's tensors.
  Var leaf_for(const Tensor& t) const;

 private:
  Var block(const BlockParams& p, std::size_t slot, Var hidden, const PackedLayout& layout, bool causal);
  Var mask(std::size_t length);

  struct BoundBlock {
    Var ln1_gain, ln1_bias, qkv_weight, qkv_bias, out_weight, out_bias;
    Var ln2_gain, ln2_bias, fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  };

  Var bind(const Tensor& t);
  BoundBlock bind_block(const BlockParams& p);

  ad::Graph* graph_;
  const EncoderStack* stack_;
  bool trainable_;
  Var logit_scale_, token_embedding_, text_positional_, text_ln_gain_, text_ln_bias_, text_projection_;
  Var image_positional_, image_ln_gain_, image_ln_bias_, image_projection_;
  std::vector<BoundBlock> text_blocks_, image_blocks_;
  std::map<std::size_t, Var> masks_;
  std::map<const Tensor*, Var> leaves_;
};

// Graph-free conveniences.
Feature encode_text(const Tensor& embeddings, const EncoderStack& stack);
Feature encode_tokens(const TokenSeq& tokens, const EncoderStack& stack);
Feature encode_image(const Tensor& grid, const EncoderStack& stack);
// Batched image features [B, d] for cached use in training loops.
Tensor encode_image_batch(std::span<const Tensor> grids, const EncoderStack& stack);

// q(c|x) = softmax_c(logit_scale * u . v_c).
PredictionDistribution classify(const Feature& image, std::span<const Feature> class_features, double logit_scale,
                                std::vector<std::size_t> class_ids = {});

// Gradient names for trainable parameters of a bound stack.
ad::GradientMap collect_gradients(const BoundEncoder& bound, std::span<const ad::NamedParam> params);

}  // namespace anop::encoder
