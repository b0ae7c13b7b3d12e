// SPDX-License-Identifier: Apache-2.0
#include "anop/world/synth_world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "anop/util/rng.hpp"

namespace anop::world {
namespace {

void normalize_row(Tensor& t, std::size_t r) {
  double ss = 0.0;
  for (double v : t.row(r)) ss += v * v;
  const double n = std::sqrt(ss);
  for (double& v : t.row(r)) v /= n;
}

Tensor gaussian(ad::Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

void recompute_class_latents(SynthWorld& w) {
  const std::size_t C = w.params.classes, A = w.params.attributes, k = w.params.latent_dim;
  w.class_latents = Tensor({C, k}, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t j = 0; j < k; ++j) {
      double v = w.params.unique_weight * w.class_unique.at(c, j);
      for (std::size_t a = 0; a < A; ++a) v += w.class_attribute_mix.at(c, a) * w.attribute_latents.at(a, j);
      w.class_latents.at(c, j) = v;
    }
  }
}

// Logits of the descriptive words for a latent.
std::vector<double> word_logits(const SynthWorld& w, const Tensor& latent) {
  const std::size_t words = w.word_render.rows(), k = w.params.latent_dim;
  std::vector<double> logits(words, 0.0);
  for (std::size_t i = 0; i < words; ++i)
    for (std::size_t j = 0; j < k; ++j) logits[i] += w.word_render.at(i, j) * latent[j];
  return logits;
}

std::size_t sample_word(const std::vector<double>& logits, double sharpness, Rng& rng) {
  // Gumbel-max sampling from softmax(sharpness * logits).
  std::size_t best = 0;
  double best_v = -1e300;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double v = sharpness * logits[i] + rng.gumbel();
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  return vocab::kDescriptorBase + best;
}

std::size_t dominant_attribute(const SynthWorld& w, ClassId c) {
  std::size_t best = 0;
  for (std::size_t a = 1; a < w.params.attributes; ++a) {
    if (w.class_attribute_mix.at(c, a) > w.class_attribute_mix.at(c, best)) best = a;
  }
  return best;
}

void check_class(const SynthWorld& w, ClassId c) {
  if (c >= w.params.classes) {
    throw std::invalid_argument("class id " + std::to_string(c) + " outside world of " +
                                std::to_string(w.params.classes) + " classes");
  }
}

}  // namespace

std::string_view shift_name(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::rotate_render_map:
      return "rotate-render-map";
    case ShiftKind::raise_noise:
      return "raise-noise";
    case ShiftKind::remap_attribute_mix:
      return "remap-attribute-mix";
  }
  return "unknown";
}

ShiftKind parse_shift(std::string_view name) {
  for (ShiftKind k : {ShiftKind::rotate_render_map, ShiftKind::raise_noise, ShiftKind::remap_attribute_mix}) {
    if (shift_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown shift '" + std::string(name) + "'");
}

SynthWorld generate_world(std::uint64_t seed, std::size_t classes, std::size_t attributes, std::size_t latent_dim,
                          double noise_sigma) {
  WorldParams p;
  p.seed = seed;
  p.classes = classes;
  p.attributes = attributes;
  p.latent_dim = latent_dim;
  p.noise_sigma = noise_sigma;
  return generate_world(p);
}

SynthWorld generate_world(const WorldParams& params) {
  if (params.classes < 4) throw std::invalid_argument("generate_world: need at least 4 classes");
  if (params.attributes < 1 || params.attributes > vocab::kMaxAttributes) {
    throw std::invalid_argument("generate_world: attribute count must lie in [1, 8]");
  }
  if (params.latent_dim < 4) throw std::invalid_argument("generate_world: latent dimension must be at least 4");
  if (!(params.noise_sigma >= 0.0) || !(params.jitter_per_sigma >= 0.0)) {
    throw std::invalid_argument("generate_world: noise levels must be nonnegative");
  }
  if (params.patches == 0 || params.patch_dim == 0) throw std::invalid_argument("generate_world: empty image grid");
  const std::size_t name_pool = params.vocab_size > vocab::kClassNameBase ? params.vocab_size - vocab::kClassNameBase : 0;
  if (2 * params.classes > name_pool) {
    throw std::invalid_argument("generate_world: vocabulary too small for " + std::to_string(params.classes) +
                                " class names");
  }

  const std::size_t C = params.classes, A = params.attributes, k = params.latent_dim;
  SynthWorld w;
  w.params = params;
  w.noise_sigma = params.noise_sigma;
  Rng rng(derive_seed(params.seed, "world"));

  w.attribute_latents = gaussian({A, k}, rng, 1.0);
  for (std::size_t a = 0; a < A; ++a) normalize_row(w.attribute_latents, a);
  w.class_unique = gaussian({C, k}, rng, 1.0);
  for (std::size_t c = 0; c < C; ++c) normalize_row(w.class_unique, c);

  w.class_attribute_mix = Tensor({C, A}, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t n_attr = A == 1 ? 1 : 1 + rng.index(2);
    std::vector<std::size_t> order(A);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = A; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double total = 0.0;
    for (std::size_t i = 0; i < n_attr; ++i) total += (w.class_attribute_mix.at(c, order[i]) = 0.3 + 0.7 * rng.uniform());
    for (std::size_t a = 0; a < A; ++a) w.class_attribute_mix.at(c, a) /= total;
  }
  recompute_class_latents(w);

  std::vector<std::size_t> names(name_pool);
  std::iota(names.begin(), names.end(), vocab::kClassNameBase);
  for (std::size_t i = names.size(); i > 1; --i) std::swap(names[i - 1], names[rng.index(i)]);
  std::size_t next = 0;
  w.class_name_tokens.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t len = 1 + rng.index(2);
    for (std::size_t i = 0; i < len; ++i) w.class_name_tokens[c].push_back(names[next++]);
  }

  w.image_render = gaussian({k, params.patches * params.patch_dim}, rng, 1.0);
  w.word_render = gaussian({vocab::kDescriptorCount, k}, rng, 1.0);
  return w;
}

Tensor sample_latent(const SynthWorld& w, ClassId class_id, std::uint64_t seed) {
  check_class(w, class_id);
  const std::size_t k = w.params.latent_dim;
  Rng rng(seed);
  Tensor z({k});
  const double sd = w.noise_sigma * w.params.jitter_per_sigma / std::sqrt(static_cast<double>(k));
  for (std::size_t j = 0; j < k; ++j) z[j] = w.class_latents.at(class_id, j) + (sd > 0.0 ? rng.normal(0.0, sd) : 0.0);
  return z;
}

Tensor render_image(const SynthWorld& w, const Tensor& latent, std::uint64_t seed) {
  const std::size_t k = w.params.latent_dim, P = w.params.patches, D = w.params.patch_dim;
  Rng rng(seed);
  Tensor grid({P, D}, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    const double z = latent[j];
    auto rrow = w.image_render.row(j);
    for (std::size_t i = 0; i < P * D; ++i) grid[i] += z * rrow[i];
  }
  if (w.noise_sigma > 0.0) {
    for (double& v : grid.values()) v += rng.normal(0.0, w.noise_sigma);
  }
  return grid;
}

std::vector<LabeledSample> sample_dataset(const SynthWorld& world, const std::vector<ClassId>& classes,
                                          std::size_t n_per_class, std::uint64_t seed) {
  if (classes.empty()) throw std::invalid_argument("sample_dataset: empty class set");
  for (ClassId c : classes) check_class(world, c);
  std::vector<LabeledSample> out;
  out.reserve(classes.size() * n_per_class);
  for (ClassId c : classes) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const std::uint64_t s = derive_seed(derive_seed(seed, c), i);
      LabeledSample sample;
      sample.label = c;
      sample.image_grid = render_image(world, sample_latent(world, c, derive_seed(s, "latent")), derive_seed(s, "noise"));
      out.push_back(std::move(sample));
    }
  }
  return out;
}

std::vector<TokenSeq> generate_descriptions(const SynthWorld& world, ClassId class_id, std::size_t n,
                                            double perturbation, std::uint64_t seed) {
  check_class(world, class_id);
  if (n == 0) throw std::invalid_argument("generate_descriptions: n must be positive");
  const std::size_t A = world.params.attributes, k = world.params.latent_dim;
  Rng rng(derive_seed(derive_seed(derive_seed(world.params.seed, "descriptions"), seed), class_id));
  std::vector<TokenSeq> out;
  out.reserve(n);
  for (std::size_t d = 0; d < n; ++d) {
    std::vector<double> mix(A);
    double total = 0.0;
    for (std::size_t a = 0; a < A; ++a) {
      mix[a] = world.class_attribute_mix.at(class_id, a);
      if (perturbation > 0.0) mix[a] = std::max(0.0, mix[a] + rng.normal(0.0, 0.5 * perturbation));
      total += mix[a];
    }
    if (total <= 0.0) {
      for (std::size_t a = 0; a < A; ++a) mix[a] = world.class_attribute_mix.at(class_id, a);
      total = 1.0;
    }
    for (double& m : mix) m /= total;

    Tensor z({k});
    for (std::size_t j = 0; j < k; ++j) {
      double v = world.params.unique_weight * world.class_unique.at(class_id, j);
      for (std::size_t a = 0; a < A; ++a) v += mix[a] * world.attribute_latents.at(a, j);
      if (perturbation > 0.0) v += rng.normal(0.0, 0.3 * perturbation / std::sqrt(static_cast<double>(k)));
      z[j] = v;
    }

    TokenSeq seq{vocab::kStart};
    std::vector<std::size_t> attrs(A);
    std::iota(attrs.begin(), attrs.end(), 0);
    std::stable_sort(attrs.begin(), attrs.end(), [&](std::size_t x, std::size_t y) { return mix[x] > mix[y]; });
    for (std::size_t i = 0; i < std::min<std::size_t>(2, A); ++i) {
      if (mix[attrs[i]] >= 0.25) seq.push_back(vocab::kAttributeBase + attrs[i]);
    }
    const std::vector<double> logits = word_logits(world, z);
    std::vector<std::size_t> words(logits.size());
    std::iota(words.begin(), words.end(), 0);
    std::partial_sort(words.begin(), words.begin() + 3, words.end(),
                      [&](std::size_t x, std::size_t y) { return logits[x] > logits[y]; });
    for (std::size_t i = 0; i < 3; ++i) seq.push_back(vocab::kDescriptorBase + words[i]);
    seq.insert(seq.end(), world.class_name_tokens[class_id].begin(), world.class_name_tokens[class_id].end());
    seq.push_back(vocab::kEnd);
    out.push_back(std::move(seq));
  }
  return out;
}

TokenSeq generate_caption(const SynthWorld& world, ClassId class_id, const Tensor& latent, std::uint64_t seed) {
  check_class(world, class_id);
  Rng rng(seed);
  const std::vector<double> logits = word_logits(world, latent);
  const TokenSeq& name = world.class_name_tokens[class_id];
  const std::size_t attr = vocab::kAttributeBase + dominant_attribute(world, class_id);
  TokenSeq seq{vocab::kStart};
  auto word = [&] { return sample_word(logits, 1.5, rng); };
  switch (rng.index(6)) {
    case 0:
      seq.insert(seq.end(), {vocab::kA, vocab::kPhoto, vocab::kOf});
      break;
    case 1:
      seq.push_back(word());
      seq.push_back(word());
      break;
    case 2:
      seq.insert(seq.end(), {vocab::kA, attr, vocab::kPhoto, vocab::kOf});
      break;
    case 3:
      seq.insert(seq.end(), {word(), attr, vocab::kWith});
      break;
    case 4:
      seq.insert(seq.end(), {vocab::kA, vocab::kPhoto, vocab::kAt, word(), vocab::kOf});
      break;
    default:
      // Caption without the class name: descriptive words only.
      seq.insert(seq.end(), {attr, word(), word(), word()});
      seq.push_back(vocab::kEnd);
      return seq;
  }
  seq.insert(seq.end(), name.begin(), name.end());
  seq.push_back(vocab::kEnd);
  return seq;
}

SplitSpec base_novel_split(const SynthWorld& world, double base_fraction, std::uint64_t seed) {
  if (!(base_fraction > 0.0 && base_fraction < 1.0)) {
    throw std::invalid_argument("base_novel_split: fraction must lie strictly between 0 and 1");
  }
  const std::size_t C = world.params.classes;
  const auto n_base = static_cast<std::size_t>(std::llround(base_fraction * static_cast<double>(C)));
  if (n_base == 0 || n_base >= C) throw std::invalid_argument("base_novel_split: fraction leaves one side empty");
  std::vector<ClassId> order(C);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = C; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  SplitSpec split;
  split.base_classes.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_base));
  split.novel_classes.assign(order.begin() + static_cast<std::ptrdiff_t>(n_base), order.end());
  std::sort(split.base_classes.begin(), split.base_classes.end());
  std::sort(split.novel_classes.begin(), split.novel_classes.end());
  return split;
}

SynthWorld shift_world(const SynthWorld& world, const ShiftSpec& shift) {
  if (!(shift.factor >= 0.0)) throw std::invalid_argument("shift_world: factor must be nonnegative");
  SynthWorld out = world;
  Rng rng(derive_seed(derive_seed(world.params.seed, "shift"), shift.seed));
  switch (shift.kind) {
    case ShiftKind::raise_noise:
      out.noise_sigma = world.noise_sigma * shift.factor;
      break;
    case ShiftKind::rotate_render_map: {
      // Rotating towards an independent map keeps the entry distribution.
      const double angle = std::min(shift.factor, 1.0) * std::acos(0.0);
      const double c = std::cos(angle), s = std::sin(angle);
      for (double& v : out.image_render.values()) v = c * v + s * rng.normal();
      break;
    }
    case ShiftKind::remap_attribute_mix: {
      const double f = std::min(shift.factor, 1.0);
      const std::size_t C = world.params.classes, A = world.params.attributes;
      for (std::size_t c = 0; c < C; ++c) {
        double total = 0.0;
        std::vector<double> fresh(A);
        for (double& v : fresh) total += (v = rng.uniform());
        double row_total = 0.0;
        for (std::size_t a = 0; a < A; ++a) {
          double& m = out.class_attribute_mix.at(c, a);
          m = (1.0 - f) * m + f * fresh[a] / total;
          row_total += m;
        }
        for (std::size_t a = 0; a < A; ++a) out.class_attribute_mix.at(c, a) /= row_total;
      }
      recompute_class_latents(out);
      break;
    }
  }
  out.shifts.push_back(shift);
  return out;
}

SynthWorld rebuild_world(const WorldParams& params, const std::vector<ShiftSpec>& shifts) {
  SynthWorld w = generate_world(params);
  for (const ShiftSpec& s : shifts) w = shift_world(w, s);
  return w;
}

std::string describe_world(const SynthWorld& world) {
  std::ostringstream os;
  const std::size_t C = world.params.classes, A = world.params.attributes;
  os << "seed: " << world.params.seed << "\n";
  os << "classes (C): " << C << "\n";
  os << "attributes (A): " << A << "\n";
  os << "latent_dim: " << world.params.latent_dim << "\n";
  os << "noise_sigma: " << world.noise_sigma << "\n";
  os << "image grid: " << world.params.patches << " x " << world.params.patch_dim << "\n";
  for (const ShiftSpec& s : world.shifts) os << "shift: " << shift_name(s.kind) << " factor " << s.factor << "\n";
  os << "class  name_tokens  attribute_mix\n";
  for (std::size_t c = 0; c < C; ++c) {
    os << c << "  [";
    for (std::size_t i = 0; i < world.class_name_tokens[c].size(); ++i) {
      os << (i ? " " : "") << world.class_name_tokens[c][i];
    }
    os << "]  ";
    for (std::size_t a = 0; a < A; ++a) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s%.3f", a ? " " : "", world.class_attribute_mix.at(c, a));
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace anop::world
