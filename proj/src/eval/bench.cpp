// SPDX-License-Identifier: Apache-2.0
#include "anop/eval/bench.hpp"

#include <cmath>
#include <stdexcept>

#include "anop/autodiff/ops.hpp"
#include "anop/util/rng.hpp"

namespace anop::eval {
namespace {

using namespace anop::ad;

std::size_t argmax_row(const Tensor& t, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < t.cols(); ++j) {
    if (t.at(r, j) > t.at(r, best)) best = j;
  }
  return best;
}

struct EvalSet {
  std::vector<ClassId> labels;
  Tensor features;
};

EvalSet sample_eval(const world::SynthWorld& w, const encoder::EncoderStack& stack, const std::vector<ClassId>& classes,
                    std::size_t n, std::uint64_t seed) {
  const auto samples = world::sample_dataset(w, classes, n, seed);
  const train::ImageBank bank = train::ImageBank::build(samples, stack);
  return {bank.labels, bank.features};
}

}  // namespace

double harmonic_mean(double base, double novel) {
  if (!(base >= 0.0 && base <= 100.0) || !(novel >= 0.0 && novel <= 100.0)) {
    throw std::invalid_argument("harmonic_mean: accuracies must lie in [0, 100]");
  }
  if (base + novel == 0.0) return 0.0;
  return 2.0 * base * novel / (base + novel);
}

MetricsRecord evaluate_base_to_novel(const train::TrainState& state, const world::SplitSpec& split,
                                     const world::SynthWorld& world, const encoder::EncoderStack& stack,
                                     const train::TrainConfig& config, const EvalOptions& options,
                                     EvalDetail* detail) {
  if (!state.adapted) throw std::invalid_argument("evaluate: state has not been trained");
  if (split.base_classes.empty() || split.novel_classes.empty()) throw std::invalid_argument("evaluate: empty split");
  if (options.n_eval == 0) throw std::invalid_argument("evaluate: n_eval must be positive");
  const bool anchored = config.method == train::Method::anchoropt;
  const double ls = stack.logit_scale();

  // Class features: noise-free position matrix, same trained parameters for both sides.
  Tensor base_norm, novel_norm, base_anc, novel_anc;
  {
    Graph g;
    train::PromptModel model(g, stack, world, state, config, {});
    model.realize(false, 0);
    base_norm = model.normal_features(split.base_classes).value();
    novel_norm = model.normal_features(split.novel_classes).value();
    if (anchored) {
      base_anc = model.anchor_features(split.base_classes).value();
      novel_anc = model.anchor_features(split.novel_classes).value();
    }
  }

  const std::uint64_t stream = derive_seed(options.seed, "eval");
  const EvalSet base_set = sample_eval(world, stack, split.base_classes, options.n_eval, derive_seed(stream, "base"));
  const EvalSet novel_set = sample_eval(world, stack, split.novel_classes, options.n_eval, derive_seed(stream, "novel"));

  EvalDetail d;
  d.base_labels = base_set.labels;
  d.novel_labels = novel_set.labels;
  d.base_q_norm = train::class_probabilities(base_set.features, base_norm, ls);
  d.novel_q_norm = train::class_probabilities(novel_set.features, novel_norm, ls);
  if (anchored) {
    d.base_q_anc = train::class_probabilities(base_set.features, base_anc, ls);
    d.novel_q_anc = train::class_probabilities(novel_set.features, novel_anc, ls);
    if (options.corrupt_anchor) {
      options.corrupt_anchor(d.base_q_anc);
      options.corrupt_anchor(d.novel_q_anc);
    }
  }

  MetricsRecord rec;
  rec.seed = options.seed;
  std::map<ClassId, std::size_t> hits, counts;
  std::size_t base_hits = 0, novel_hits = 0;
  for (std::size_t i = 0; i < base_set.labels.size(); ++i) {
    const ClassId pred = split.base_classes[argmax_row(d.base_q_norm, i)];
    d.base_predictions.push_back(pred);
    const bool ok = pred == base_set.labels[i];
    base_hits += ok;
    hits[base_set.labels[i]] += ok;
    ++counts[base_set.labels[i]];
  }
  const bool use_ensemble = anchored && options.ensemble;
  for (std::size_t i = 0; i < novel_set.labels.size(); ++i) {
    std::size_t k = 0;
    if (use_ensemble) {
      encoder::PredictionDistribution qn, qa;
      qn.probs.assign(d.novel_q_norm.row(i).begin(), d.novel_q_norm.row(i).end());
      qa.probs.assign(d.novel_q_anc.row(i).begin(), d.novel_q_anc.row(i).end());
      qn.class_ids = qa.class_ids = split.novel_classes;
      k = train::ensemble_predict(qn, qa).argmax();
    } else {
      k = argmax_row(d.novel_q_norm, i);
    }
    const ClassId pred = split.novel_classes[k];
    d.novel_predictions.push_back(pred);
    const bool ok = pred == novel_set.labels[i];
    novel_hits += ok;
    hits[novel_set.labels[i]] += ok;
    ++counts[novel_set.labels[i]];
  }
  rec.base_acc = 100.0 * static_cast<double>(base_hits) / static_cast<double>(base_set.labels.size());
  rec.novel_acc = 100.0 * static_cast<double>(novel_hits) / static_cast<double>(novel_set.labels.size());
  rec.hm = harmonic_mean(rec.base_acc, rec.novel_acc);
  for (const auto& [c, n] : counts) rec.per_class_acc[c] = 100.0 * static_cast<double>(hits[c]) / static_cast<double>(n);
  if (detail) *detail = std::move(d);
  return rec;
}

std::vector<MetricsRecord> evaluate_cross_world(const train::TrainState& state, const world::SplitSpec& split,
                                                const world::SynthWorld& source,
                                                const std::vector<world::SynthWorld>& targets,
                                                const encoder::EncoderStack& stack, const train::TrainConfig& config,
                                                const EvalOptions& options) {
  std::vector<MetricsRecord> out;
  for (const world::SynthWorld& t : targets) {
    const auto& a = source.params;
    const auto& b = t.params;
    if (a.classes != b.classes || a.patches != b.patches || a.patch_dim != b.patch_dim ||
        a.vocab_size != b.vocab_size || t.class_name_tokens != source.class_name_tokens) {
      throw std::invalid_argument("evaluate_cross_world: target world does not match the source dimensions");
    }
    out.push_back(evaluate_base_to_novel(state, split, t, stack, config, options));
  }
  return out;
}

double zero_shot_accuracy(const world::SynthWorld& world, const encoder::EncoderStack& stack,
                          const std::vector<ClassId>& classes, std::size_t n_per_class, std::uint64_t seed) {
  std::vector<encoder::TokenSeq> prompts;
  for (ClassId c : classes) {
    encoder::TokenSeq t{world::vocab::kStart, world::vocab::kA, world::vocab::kPhoto, world::vocab::kOf};
    t.insert(t.end(), world.class_name_tokens.at(c).begin(), world.class_name_tokens.at(c).end());
    t.push_back(world::vocab::kEnd);
    prompts.push_back(std::move(t));
  }
  Graph g;
  encoder::BoundEncoder enc(g, stack);
  const Tensor text = enc.encode_tokens(prompts).value();
  const EvalSet set = sample_eval(world, stack, classes, n_per_class, seed);
  const Tensor q = train::class_probabilities(set.features, text, stack.logit_scale());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < set.labels.size(); ++i) hits += classes[argmax_row(q, i)] == set.labels[i];
  return 100.0 * static_cast<double>(hits) / static_cast<double>(set.labels.size());
}

double linear_probe_accuracy(const world::SynthWorld& world, const encoder::EncoderStack& stack,
                             const std::vector<ClassId>& classes, std::size_t train_per_class,
                             std::size_t test_per_class, std::uint64_t seed) {
  const EvalSet train_set = sample_eval(world, stack, classes, train_per_class, derive_seed(seed, "probe-train"));
  const EvalSet test_set = sample_eval(world, stack, classes, test_per_class, derive_seed(seed, "probe-test"));
  auto index_of = [&](ClassId c) { return static_cast<std::size_t>(std::find(classes.begin(), classes.end(), c) - classes.begin()); };
  std::vector<std::size_t> labels;
  for (ClassId c : train_set.labels) labels.push_back(index_of(c));

  const std::size_t d = train_set.features.cols(), C = classes.size();
  Tensor w({d, C}, 0.0), b({C}, 0.0);
  Adam opt(0.05);
  const std::vector<NamedParam> params{{"w", &w}, {"b", &b}};
  for (int step = 0; step < 300; ++step) {
    Graph g;
    Var wv = g.leaf_ref(w, true), bv = g.leaf_ref(b, true);
    Var loss = cross_entropy(add(matmul(g.constant(train_set.features), wv), bv), labels);
    g.backward(loss);
    opt.step(params, {{"w", wv.grad()}, {"b", bv.grad()}});
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test_set.labels.size(); ++i) {
    std::size_t best = 0;
    double best_v = -1e300;
    for (std::size_t c = 0; c < C; ++c) {
      double v = b[c];
      for (std::size_t k = 0; k < d; ++k) v += test_set.features.at(i, k) * w.at(k, c);
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    hits += classes[best] == test_set.labels[i];
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(test_set.labels.size());
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

}  // namespace anop::eval
