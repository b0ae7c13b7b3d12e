// SPDX-License-Identifier: Apache-2.0
#include "anop/encoder/pretrain.hpp"

#include <cmath>
#include <sstream>

#include "anop/autodiff/ops.hpp"
#include "anop/util/rng.hpp"

namespace anop::encoder {
namespace {

using namespace anop::ad;

struct PairBatch {
  Tensor grids;  // [B * P, d_img]
  std::vector<TokenSeq> captions;
};

PairBatch sample_pairs(const world::SynthWorld& w, std::uint64_t seed) {
  const std::size_t C = w.num_classes(), P = w.params.patches, D = w.params.patch_dim;
  PairBatch b;
  b.grids = Tensor({C * P, D});
  for (std::size_t c = 0; c < C; ++c) {
    const std::uint64_t s = derive_seed(seed, c);
    const Tensor z = world::sample_latent(w, c, derive_seed(s, "latent"));
    const Tensor grid = world::render_image(w, z, derive_seed(s, "noise"));
    std::copy(grid.values().begin(), grid.values().end(), b.grids.values().begin() + static_cast<std::ptrdiff_t>(c * P * D));
    b.captions.push_back(world::generate_caption(w, c, z, derive_seed(s, "caption")));
  }
  return b;
}

}  // namespace

PretrainReport measure_retrieval(const world::SynthWorld& world, const EncoderStack& stack, std::size_t groups,
                                 std::uint64_t seed) {
  const std::size_t C = world.num_classes();
  PretrainReport r;
  std::size_t hits = 0, matched = 0, mismatched = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    const PairBatch b = sample_pairs(world, derive_seed(seed, g));
    Graph graph;
    BoundEncoder enc(graph, stack);
    const Tensor img = enc.encode_images(graph.constant(b.grids), C).value();
    const Tensor txt = enc.encode_tokens(b.captions).value();
    for (std::size_t i = 0; i < C; ++i) {
      std::size_t best = 0;
      double best_v = -2.0;
      for (std::size_t j = 0; j < C; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < img.cols(); ++k) dot += img.at(i, k) * txt.at(j, k);
        if (dot > best_v) {
          best_v = dot;
          best = j;
        }
        if (i == j) {
          r.matched_cosine += dot;
          ++matched;
        } else {
          r.mismatched_cosine += dot;
          ++mismatched;
        }
      }
      hits += best == i;
    }
  }
  r.retrieval = static_cast<double>(hits) / static_cast<double>(groups * C);
  r.matched_cosine /= static_cast<double>(matched);
  r.mismatched_cosine /= static_cast<double>(mismatched);
  return r;
}

EncoderStack pretrain_contrastive(const world::SynthWorld& world, const PretrainConfig& config, std::uint64_t seed,
                                  PretrainReport* report) {
  EncoderDims dims = config.dims;
  if (dims.patches != world.params.patches || dims.patch_dim != world.params.patch_dim ||
      dims.vocab < world.params.vocab_size) {
    throw std::invalid_argument("pretrain: encoder dimensions do not match the world");
  }
  if (config.eval_every == 0 || config.max_steps == 0) throw std::invalid_argument("pretrain: empty step budget");

  EncoderStack stack = EncoderStack::initialize(dims, derive_seed(seed, "init"));
  std::vector<NamedParam> params = stack.trainable_parameters();
  for (NamedParam& p : params) {
    if (p.name == "logit_scale") (*p.value)[0] = config.initial_logit_scale;
  }
  Adam adam(config.lr);
  const std::uint64_t batch_stream = derive_seed(seed, "batches");
  const std::uint64_t heldout_stream = derive_seed(seed, "heldout");
  const std::size_t C = world.num_classes();
  std::vector<std::size_t> labels(C);
  for (std::size_t i = 0; i < C; ++i) labels[i] = i;

  PretrainReport r;
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    const PairBatch b = sample_pairs(world, derive_seed(batch_stream, step));
    Graph g;
    BoundEncoder enc(g, stack, true);
    Var img = enc.encode_images(g.constant(b.grids), C);
    Var txt = enc.encode_tokens(b.captions);
    Var logits = mul(matmul(img, transpose(txt)), enc.logit_scale());
    Var loss = scale(add(cross_entropy(logits, labels), cross_entropy(transpose(logits), labels)), 0.5);
    g.backward(loss);
    adam.step(params, collect_gradients(enc, params));
    stack.clamp_logit_scale(1.0, config.max_logit_scale);
    r.final_loss = loss.value().item();
    r.loss_trace.push_back(r.final_loss);
    r.steps = step;

    if (step % config.eval_every == 0 || step == config.max_steps) {
      const PretrainReport m = measure_retrieval(world, stack, config.heldout_groups, heldout_stream);
      r.retrieval = m.retrieval;
      r.matched_cosine = m.matched_cosine;
      r.mismatched_cosine = m.mismatched_cosine;
      if (step >= config.min_steps && r.retrieval >= config.target) break;
    }
  }
  if (report) *report = r;
  if (r.retrieval < config.target) {
    std::ostringstream os;
    os << "pretraining stopped at step " << r.steps << " with held-out retrieval " << r.retrieval
       << " below target " << config.target << " (loss " << r.final_loss << ")";
    throw PretrainFailure(os.str(), r);
  }
  stack.freeze();
  return stack;
}

}  // namespace anop::encoder
