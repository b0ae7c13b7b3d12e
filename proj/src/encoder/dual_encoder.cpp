// SPDX-License-Identifier: Apache-2.0
#include "anop/encoder/dual_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "anop/autodiff/ops.hpp"
#include "anop/util/hash.hpp"
#include "anop/util/rng.hpp"

namespace anop::encoder {
namespace {

using namespace anop::ad;

constexpr double kMaskValue = -1e9;

Tensor gaussian(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

BlockParams init_block(std::size_t width, std::size_t hidden, std::size_t depth, Rng& rng) {
  const double w_std = 1.0 / std::sqrt(static_cast<double>(width));
  // Residual branches scaled down with depth.
  const double out_std = w_std / std::sqrt(2.0 * static_cast<double>(depth));
  BlockParams b;
  b.ln1_gain = Tensor({width}, 1.0);
  b.ln1_bias = Tensor({width}, 0.0);
  b.qkv_weight = gaussian({width, 3 * width}, rng, w_std);
  b.qkv_bias = Tensor({3 * width}, 0.0);
  b.out_weight = gaussian({width, width}, rng, out_std);
  b.out_bias = Tensor({width}, 0.0);
  b.ln2_gain = Tensor({width}, 1.0);
  b.ln2_bias = Tensor({width}, 0.0);
  b.fc1_weight = gaussian({width, hidden}, rng, w_std);
  b.fc1_bias = Tensor({hidden}, 0.0);
  b.fc2_weight = gaussian({hidden, width}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)) /
                                                    std::sqrt(2.0 * static_cast<double>(depth)));
  b.fc2_bias = Tensor({width}, 0.0);
  return b;
}

template <class Fn>
void for_each_block_tensor(BlockParams& b, Fn&& fn) {
  fn("ln1_gain", b.ln1_gain);
  fn("ln1_bias", b.ln1_bias);
  fn("qkv_weight", b.qkv_weight);
  fn("qkv_bias", b.qkv_bias);
  fn("out_weight", b.out_weight);
  fn("out_bias", b.out_bias);
  fn("ln2_gain", b.ln2_gain);
  fn("ln2_bias", b.ln2_bias);
  fn("fc1_weight", b.fc1_weight);
  fn("fc1_bias", b.fc1_bias);
  fn("fc2_weight", b.fc2_weight);
  fn("fc2_bias", b.fc2_bias);
}

}  // namespace

// Visits every parameter tensor under its stable name.
template <class Fn>
void EncoderStack::for_each_tensor(Fn&& fn) {
  fn(std::string("logit_scale"), logit_scale_);
  fn(std::string("text.token_embedding"), token_embedding_);
  fn(std::string("text.positional"), text_positional_);
  for (std::size_t i = 0; i < text_blocks_.size(); ++i) {
    for_each_block_tensor(text_blocks_[i], [&](const char* name, Tensor& t) {
      fn("text.block" + std::to_string(i) + "." + name, t);
    });
  }
  fn(std::string("text.final_gain"), text_ln_gain_);
  fn(std::string("text.final_bias"), text_ln_bias_);
  fn(std::string("text.projection"), text_projection_);
  fn(std::string("image.positional"), image_positional_);
  for (std::size_t i = 0; i < image_blocks_.size(); ++i) {
    for_each_block_tensor(image_blocks_[i], [&](const char* name, Tensor& t) {
      fn("image.block" + std::to_string(i) + "." + name, t);
    });
  }
  fn(std::string("image.final_gain"), image_ln_gain_);
  fn(std::string("image.final_bias"), image_ln_bias_);
  fn(std::string("image.projection"), image_projection_);
}

void EncoderDims::validate() const {
  if (text_blocks < 2) throw std::invalid_argument("encoder: at least 2 text blocks are required");
  if (image_blocks < 1) throw std::invalid_argument("encoder: at least 1 image block is required");
  if (heads == 0 || token_width % heads != 0 || patch_dim % heads != 0) {
    throw std::invalid_argument("encoder: widths must be divisible by the head count");
  }
  if (vocab == 0 || embed_dim == 0 || max_len < 3 || patches == 0 || mlp_ratio == 0) {
    throw std::invalid_argument("encoder: degenerate dimensions");
  }
}

EncoderStack EncoderStack::initialize(const EncoderDims& dims, std::uint64_t seed) {
  dims.validate();
  Rng rng(seed);
  EncoderStack s;
  s.dims_ = dims;
  s.logit_scale_ = Tensor({1}, 10.0);
  s.token_embedding_ = gaussian({dims.vocab, dims.token_width}, rng, 0.02);
  s.text_positional_ = gaussian({dims.max_len, dims.token_width}, rng, 0.01);
  for (std::size_t i = 0; i < dims.text_blocks; ++i) {
    s.text_blocks_.push_back(init_block(dims.token_width, dims.mlp_ratio * dims.token_width, dims.text_blocks, rng));
  }
  s.text_ln_gain_ = Tensor({dims.token_width}, 1.0);
  s.text_ln_bias_ = Tensor({dims.token_width}, 0.0);
  s.text_projection_ = gaussian({dims.token_width, dims.embed_dim}, rng, 1.0 / std::sqrt(double(dims.token_width)));
  s.image_positional_ = gaussian({dims.patches, dims.patch_dim}, rng, 0.1);
  for (std::size_t i = 0; i < dims.image_blocks; ++i) {
    s.image_blocks_.push_back(init_block(dims.patch_dim, dims.mlp_ratio * dims.patch_dim, dims.image_blocks, rng));
  }
  s.image_ln_gain_ = Tensor({dims.patch_dim}, 1.0);
  s.image_ln_bias_ = Tensor({dims.patch_dim}, 0.0);
  s.image_projection_ = gaussian({dims.patch_dim, dims.embed_dim}, rng, 1.0 / std::sqrt(double(dims.patch_dim)));
  return s;
}

EncoderStack EncoderStack::from_tensors(const EncoderDims& dims, const std::map<std::string, Tensor>& tensors,
                                        bool frozen) {
  EncoderStack s = initialize(dims, 0);
  s.for_each_tensor([&](const std::string& name, Tensor& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::invalid_argument("encoder: missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw ShapeError("encoder: tensor '" + name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                       to_string(t.shape()));
    }
    t = it->second;
  });
  if (!(s.logit_scale() > 0.0)) throw std::invalid_argument("encoder: logit scale must be positive");
  s.frozen_ = frozen;
  return s;
}

std::vector<std::pair<std::string, const Tensor*>> EncoderStack::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  const_cast<EncoderStack&>(*this).for_each_tensor([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

std::vector<NamedParam> EncoderStack::trainable_parameters() {
  if (frozen_) throw std::logic_error("encoder: parameters are frozen");
  std::vector<NamedParam> out;
  for_each_tensor([&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

void EncoderStack::clamp_logit_scale(double lo, double hi) {
  if (frozen_) throw std::logic_error("encoder: parameters are frozen");
  logit_scale_[0] = std::clamp(logit_scale_[0], lo, hi);
}

std::string EncoderStack::parameter_hash() const {
  Fnv1a h;
  for (const auto& [name, t] : named_tensors()) {
    h.update(name);
    h.update(t->values());
  }
  return h.hex();
}

Tensor EncoderStack::embed_tokens(const TokenSeq& tokens) const {
  if (tokens.empty()) throw std::invalid_argument("encoder: empty token sequence");
  Tensor out({tokens.size(), dims_.token_width});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= dims_.vocab) throw std::invalid_argument("encoder: token id " + std::to_string(tokens[i]) + " out of vocabulary");
    std::copy(token_embedding_.row(tokens[i]).begin(), token_embedding_.row(tokens[i]).end(), out.row(i).begin());
  }
  return out;
}

Feature Feature::from_row(const Tensor& t, std::size_t row) {
  Feature f;
  f.vector.assign(t.row(row).begin(), t.row(row).end());
  double ss = 0.0;
  for (double v : f.vector) ss += v * v;
  f.normalized = std::abs(std::sqrt(ss) - 1.0) <= 1e-9;
  return f;
}

std::size_t PredictionDistribution::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return best;
}

PackedLayout PackedLayout::from_lengths(std::vector<std::size_t> lengths) {
  PackedLayout l;
  l.lengths = std::move(lengths);
  for (std::size_t len : l.lengths) {
    if (len == 0) throw std::invalid_argument("packed layout: empty sequence");
    l.offsets.push_back(l.total);
    l.total += len;
  }
  return l;
}

BoundEncoder::BoundEncoder(Graph& graph, const EncoderStack& stack, bool trainable)
    : graph_(&graph), stack_(&stack), trainable_(trainable && !stack.frozen()) {
  logit_scale_ = bind(stack.logit_scale_tensor());
  token_embedding_ = bind(stack.token_embedding());
  text_positional_ = bind(stack.text_positional());
  text_ln_gain_ = bind(stack.text_final_gain());
  text_ln_bias_ = bind(stack.text_final_bias());
  text_projection_ = bind(stack.text_projection());
  image_positional_ = bind(stack.image_positional());
  image_ln_gain_ = bind(stack.image_final_gain());
  image_ln_bias_ = bind(stack.image_final_bias());
  image_projection_ = bind(stack.image_projection());
  for (const BlockParams& b : stack.text_blocks()) text_blocks_.push_back(bind_block(b));
  for (const BlockParams& b : stack.image_blocks()) image_blocks_.push_back(bind_block(b));
}

Var BoundEncoder::bind(const Tensor& t) {
  Var v = graph_->leaf_ref(t, trainable_);
  leaves_[&t] = v;
  return v;
}

Var BoundEncoder::leaf_for(const Tensor& t) const {
  auto it = leaves_.find(&t);
  if (it == leaves_.end()) throw std::invalid_argument("encoder: tensor is not bound to this graph");
  return it->second;
}

BoundEncoder::BoundBlock BoundEncoder::bind_block(const BlockParams& p) {
  return BoundBlock{bind(p.ln1_gain),   bind(p.ln1_bias),   bind(p.qkv_weight), bind(p.qkv_bias),
                    bind(p.out_weight), bind(p.out_bias),   bind(p.ln2_gain),   bind(p.ln2_bias),
                    bind(p.fc1_weight), bind(p.fc1_bias),   bind(p.fc2_weight), bind(p.fc2_bias)};
}

Var BoundEncoder::mask(std::size_t length) {
  auto it = masks_.find(length);
  if (it != masks_.end()) return it->second;
  Tensor m({length, length}, 0.0);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = i + 1; j < length; ++j) m.at(i, j) = kMaskValue;
  Var v = graph_->constant(std::move(m));
  masks_.emplace(length, v);
  return v;
}

Var BoundEncoder::block(const BlockParams& /*p*/, std::size_t slot, Var x, const PackedLayout& layout, bool causal) {
  const BoundBlock& b = causal ? text_blocks_.at(slot) : image_blocks_.at(slot);
  const std::size_t width = x.shape()[1];
  const std::size_t heads = stack_->dims().heads;
  const std::size_t head_width = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_width));

  Var h = layer_norm(x, b.ln1_gain, b.ln1_bias);
  Var qkv = add(matmul(h, b.qkv_weight), b.qkv_bias);
  std::vector<Var> per_sequence;
  per_sequence.reserve(layout.size());
  for (std::size_t s = 0; s < layout.size(); ++s) {
    const std::size_t len = layout.lengths[s];
    Var rows = layout.size() == 1 ? qkv : slice(qkv, 0, layout.offsets[s], layout.offsets[s] + len);
    std::vector<Var> head_out;
    head_out.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Var q = slice(rows, 1, hd * head_width, (hd + 1) * head_width);
      Var k = slice(rows, 1, width + hd * head_width, width + (hd + 1) * head_width);
      Var v = slice(rows, 1, 2 * width + hd * head_width, 2 * width + (hd + 1) * head_width);
      Var scores = scale(matmul(q, transpose(k)), inv_sqrt);
      if (causal && len > 1) scores = add(scores, mask(len));
      head_out.push_back(matmul(softmax(scores), v));
    }
    per_sequence.push_back(concat(head_out, 1));
  }
  Var attn = concat(per_sequence, 0);
  x = add(x, add(matmul(attn, b.out_weight), b.out_bias));
  Var h2 = layer_norm(x, b.ln2_gain, b.ln2_bias);
  Var mlp = add(matmul(gelu(add(matmul(h2, b.fc1_weight), b.fc1_bias)), b.fc2_weight), b.fc2_bias);
  return add(x, mlp);
}

Var BoundEncoder::embed(const std::vector<TokenSeq>& sequences, PackedLayout& layout) {
  std::vector<std::size_t> ids, lengths;
  for (const TokenSeq& s : sequences) {
    for (std::size_t t : s) {
      if (t >= stack_->dims().vocab) throw std::invalid_argument("encoder: token id out of vocabulary");
    }
    ids.insert(ids.end(), s.begin(), s.end());
    lengths.push_back(s.size());
  }
  layout = PackedLayout::from_lengths(std::move(lengths));
  return gather_rows(token_embedding_, std::move(ids));
}

Var BoundEncoder::text_input(Var embeddings, const PackedLayout& layout) {
  const EncoderDims& d = stack_->dims();
  if (embeddings.shape().size() != 2 || embeddings.shape()[1] != d.token_width) {
    throw ShapeError("encode_text: embeddings must have width " + std::to_string(d.token_width) + ", got " +
                     to_string(embeddings.shape()));
  }
  if (embeddings.shape()[0] != layout.total) throw ShapeError("encode_text: layout does not match embedding rows");
  std::vector<std::size_t> positions;
  positions.reserve(layout.total);
  for (std::size_t len : layout.lengths) {
    if (len > d.max_len) {
      throw std::invalid_argument("encode_text: prompt length " + std::to_string(len) + " exceeds L_max " +
                                  std::to_string(d.max_len));
    }
    for (std::size_t i = 0; i < len; ++i) positions.push_back(i);
  }
  return add(embeddings, gather_rows(text_positional_, std::move(positions)));
}

Var BoundEncoder::text_block(std::size_t index, Var hidden, const PackedLayout& layout) {
  if (index >= text_blocks_.size()) throw std::out_of_range("encoder: text block index out of range");
  return block(stack_->text_blocks()[index], index, hidden, layout, true);
}

Var BoundEncoder::text_head(Var hidden, const PackedLayout& layout, std::span<const std::size_t> pool_rows) {
  if (pool_rows.size() != layout.size()) throw std::invalid_argument("encode_text: one pooling row per sequence");
  std::vector<std::size_t> rows;
  for (std::size_t s = 0; s < layout.size(); ++s) {
    if (pool_rows[s] >= layout.lengths[s]) throw std::invalid_argument("encode_text: pooling row outside sequence");
    rows.push_back(layout.offsets[s] + pool_rows[s]);
  }
  Var pooled = gather_rows(hidden, std::move(rows));
  pooled = layer_norm(pooled, text_ln_gain_, text_ln_bias_);
  return l2_normalize(matmul(pooled, text_projection_));
}

Var BoundEncoder::encode_text(Var embeddings, const PackedLayout& layout, std::span<const std::size_t> pool_rows) {
  Var x = text_input(embeddings, layout);
  for (std::size_t i = 0; i < text_blocks_.size(); ++i) x = text_block(i, x, layout);
  return text_head(x, layout, pool_rows);
}

Var BoundEncoder::encode_tokens(const std::vector<TokenSeq>& sequences) {
  PackedLayout layout;
  Var emb = embed(sequences, layout);
  std::vector<std::size_t> pool;
  for (std::size_t len : layout.lengths) pool.push_back(len - 1);
  return encode_text(emb, layout, pool);
}

Var BoundEncoder::encode_images(Var grids, std::size_t batch) {
  const EncoderDims& d = stack_->dims();
  if (batch == 0 || grids.shape().size() != 2 || grids.shape()[0] != batch * d.patches ||
      grids.shape()[1] != d.patch_dim) {
    throw ShapeError("encode_image: expected " + std::to_string(batch) + " grids of " + std::to_string(d.patches) +
                     "x" + std::to_string(d.patch_dim) + ", got " + to_string(grids.shape()));
  }
  std::vector<std::size_t> positions;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < d.patches; ++p) positions.push_back(p);
  Var x = add(grids, gather_rows(image_positional_, std::move(positions)));
  const PackedLayout layout = PackedLayout::from_lengths(std::vector<std::size_t>(batch, d.patches));
  for (std::size_t i = 0; i < image_blocks_.size(); ++i) x = block(stack_->image_blocks()[i], i, x, layout, false);
  x = layer_norm(x, image_ln_gain_, image_ln_bias_);
  // Mean over each grid's patch rows as one matmul with a pooling matrix.
  Tensor pool({batch, batch * d.patches}, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < d.patches; ++p) pool.at(b, b * d.patches + p) = 1.0 / static_cast<double>(d.patches);
  Var pooled = matmul(graph_->constant(std::move(pool)), x);
  return l2_normalize(matmul(pooled, image_projection_));
}

Feature encode_text(const Tensor& embeddings, const EncoderStack& stack) {
  Graph g;
  BoundEncoder enc(g, stack);
  const PackedLayout layout = PackedLayout::from_lengths({embeddings.rows()});
  const std::size_t pool = embeddings.rows() - 1;
  return Feature::from_row(enc.encode_text(g.constant(embeddings), layout, {&pool, 1}).value(), 0);
}

Feature encode_tokens(const TokenSeq& tokens, const EncoderStack& stack) {
  return encode_text(stack.embed_tokens(tokens), stack);
}

Feature encode_image(const Tensor& grid, const EncoderStack& stack) {
  return Feature::from_row(encode_image_batch({&grid, 1}, stack), 0);
}

Tensor encode_image_batch(std::span<const Tensor> grids, const EncoderStack& stack) {
  const EncoderDims& d = stack.dims();
  if (grids.empty()) throw std::invalid_argument("encode_image: empty batch");
  std::vector<double> values;
  values.reserve(grids.size() * d.patches * d.patch_dim);
  for (const Tensor& g : grids) {
    if (g.shape() != Shape{d.patches, d.patch_dim}) {
      throw ShapeError("encode_image: grid shape " + to_string(g.shape()) + " does not match " +
                       std::to_string(d.patches) + "x" + std::to_string(d.patch_dim));
    }
    values.insert(values.end(), g.values().begin(), g.values().end());
  }
  Graph graph;
  BoundEncoder enc(graph, stack);
  Var grid = graph.constant(Tensor({grids.size() * d.patches, d.patch_dim}, std::move(values)));
  return enc.encode_images(grid, grids.size()).value();
}

PredictionDistribution classify(const Feature& image, std::span<const Feature> class_features, double logit_scale,
                                std::vector<std::size_t> class_ids) {
  if (class_features.empty()) throw std::invalid_argument("classify: need at least one class");
  if (!(logit_scale > 0.0)) throw std::invalid_argument("classify: logit scale must be positive");
  auto check = [](const Feature& f, const char* what) {
    double ss = 0.0;
    for (double v : f.vector) ss += v * v;
    if (!f.normalized || std::abs(std::sqrt(ss) - 1.0) > 1e-9) {
      throw std::invalid_argument(std::string("classify: ") + what + " feature is not normalized");
    }
  };
  check(image, "image");
  std::vector<double> logits;
  for (const Feature& f : class_features) {
    check(f, "class");
    if (f.vector.size() != image.vector.size()) throw ShapeError("classify: feature widths differ");
    double dot = 0.0;
    for (std::size_t i = 0; i < f.vector.size(); ++i) dot += image.vector[i] * f.vector[i];
    logits.push_back(logit_scale * dot);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  PredictionDistribution out;
  double sum = 0.0;
  for (double l : logits) sum += (out.probs.emplace_back(std::exp(l - mx)));
  for (double& p : out.probs) p /= sum;
  if (class_ids.empty()) {
    for (std::size_t i = 0; i < class_features.size(); ++i) class_ids.push_back(i);
  }
  if (class_ids.size() != class_features.size()) throw std::invalid_argument("classify: class id count mismatch");
  out.class_ids = std::move(class_ids);
  return out;
}

GradientMap collect_gradients(const BoundEncoder& bound, std::span<const NamedParam> params) {
  GradientMap grads;
  for (const NamedParam& p : params) grads.emplace(p.name, bound.leaf_for(*p.value).grad());
  return grads;
}

}  // namespace anop::encoder
