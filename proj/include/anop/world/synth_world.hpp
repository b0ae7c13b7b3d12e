// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "anop/autodiff/tensor.hpp"

namespace anop::world {

using ad::Tensor;
using TokenSeq = std::vector<std::size_t>;
using ClassId = std::size_t;

// Fixed vocabulary layout shared by the world and the text encoder.
namespace vocab {
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kStart = 1;  // prompt prefix
inline constexpr std::size_t kEnd = 2;    // prompt suffix, pooled position
inline constexpr std::size_t kA = 3;
inline constexpr std::size_t kPhoto = 4;
inline constexpr std::size_t kOf = 5;
inline constexpr std::size_t kWith = 6;
inline constexpr std::size_t kAt = 7;
inline constexpr std::size_t kSun = 8;
inline constexpr std::size_t kSea = 9;
inline constexpr std::size_t kAttributeBase = 12;   // one word per attribute, up to 8
inline constexpr std::size_t kMaxAttributes = 8;
inline constexpr std::size_t kDescriptorBase = 20;  // descriptive words
inline constexpr std::size_t kDescriptorCount = 44;
inline constexpr std::size_t kClassNameBase = 64;   // class-name tokens up to the vocabulary end
}  // namespace vocab

struct WorldParams {
  std::uint64_t seed = 0;
  std::size_t classes = 16;
  std::size_t attributes = 4;
  std::size_t latent_dim = 12;
  double noise_sigma = 0.3;
  // Per-sample displacement of the latent around its class center, as a
  // multiple of noise_sigma (so a noise-free world renders identical samples).
  double jitter_per_sigma = 3.0;
  // Weight of the class-unique direction relative to the shared attribute mix.
  double unique_weight = 0.8;
  std::size_t patches = 9;
  std::size_t patch_dim = 24;
  std::size_t vocab_size = 128;
};

enum class ShiftKind { rotate_render_map, raise_noise, remap_attribute_mix };

struct ShiftSpec {
  ShiftKind kind = ShiftKind::raise_noise;
  double factor = 1.0;
  std::uint64_t seed = 0;
};

std::string_view shift_name(ShiftKind kind);
// Throws std::invalid_argument for names other than the three supported shifts.
ShiftKind parse_shift(std::string_view name);

struct SynthWorld {
  WorldParams params;
  Tensor attribute_latents;    // A x k, unit rows
  Tensor class_unique;         // C x k, unit rows
  Tensor class_attribute_mix;  // C x A, nonnegative, rows sum to 1
  Tensor class_latents;        // C x k
  std::vector<TokenSeq> class_name_tokens;
  Tensor image_render;  // k x (P * d_img)
  Tensor word_render;   // descriptor words x k: latent -> caption-token logits
  double noise_sigma = 0.0;
  std::vector<ShiftSpec> shifts;  // applied after generation, in order

  std::size_t num_classes() const { return params.classes; }
  std::size_t num_attributes() const { return params.attributes; }
};

struct LabeledSample {
  Tensor image_grid;  // P x d_img
  ClassId label = 0;
};

struct SplitSpec {
  std::vector<ClassId> base_classes;
  std::vector<ClassId> novel_classes;
};

SynthWorld generate_world(const WorldParams& params);
SynthWorld generate_world(std::uint64_t seed, std::size_t classes, std::size_t attributes, std::size_t latent_dim,
                          double noise_sigma);

std::vector<LabeledSample> sample_dataset(const SynthWorld& world, const std::vector<ClassId>& classes,
                                          std::size_t n_per_class, std::uint64_t seed);

// Descriptions are attribute words plus the strongest descriptive words of a
// perturbed class latent, always ending in the class name.
std::vector<TokenSeq> generate_descriptions(const SynthWorld& world, ClassId class_id, std::size_t n,
                                            double perturbation = 0.5, std::uint64_t seed = 0);

// A pretraining caption for one image latent.
TokenSeq generate_caption(const SynthWorld& world, ClassId class_id, const Tensor& latent, std::uint64_t seed);

// Noise-free class-center latent plus jitter; used by sample_dataset and pretraining.
Tensor sample_latent(const SynthWorld& world, ClassId class_id, std::uint64_t seed);
Tensor render_image(const SynthWorld& world, const Tensor& latent, std::uint64_t seed);

SplitSpec base_novel_split(const SynthWorld& world, double base_fraction, std::uint64_t seed);

SynthWorld shift_world(const SynthWorld& world, const ShiftSpec& shift);
// Regenerates a world from its parameters and recorded shifts.
SynthWorld rebuild_world(const WorldParams& params, const std::vector<ShiftSpec>& shifts);

std::string describe_world(const SynthWorld& world);

}  // namespace anop::world
