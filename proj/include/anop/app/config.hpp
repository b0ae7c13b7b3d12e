// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "anop/encoder/pretrain.hpp"
#include "anop/train/trainers.hpp"
#include "anop/world/synth_world.hpp"

namespace anop::app {

enum class Paradigm { two_stage, one_stage };
std::string_view paradigm_name(Paradigm p);
Paradigm parse_paradigm(std::string_view name);

// of, with, at, sun, sea; `none` means no preposition token.
std::optional<std::size_t> parse_preposition(std::string_view name);
std::string preposition_name(const std::optional<std::size_t>& token);

struct ExperimentConfig {
  std::string name;  // experiment.name, required
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<train::Method> methods{train::Method::coop, train::Method::anchoropt};
  Paradigm paradigm = Paradigm::two_stage;
  std::string output_dir = "out";

  world::WorldParams world;
  double base_fraction = 0.5;
  encoder::PretrainConfig pretrain;  // pretrain.dims doubles as the encoder dims
  std::size_t shots = 16;            // training images per base class
  train::TrainConfig train;
  std::size_t n_eval = 50;
  bool ensemble = true;

  const encoder::EncoderDims& dims() const { return pretrain.dims; }
  // Resolved `key = value` listing of every field, in grammar order.
  std::string echo() const;
  // Digest of the echo without output.dir; names the run, not where it lands.
  std::string digest() const;
  // Digest of the fields that determine the world and the pretrained encoder.
  std::string encoder_digest() const;
};

// Line-level diagnostic. line == 0 for overrides and cross-field checks.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, std::size_t line, const std::string& message);
  const std::string& key() const { return key_; }
  std::size_t line() const { return line_; }

 private:
  std::string key_;
  std::size_t line_;
};

// Grammar: one `key = value` per line, `#` starts a comment, blank lines are
// ignored, `[section]` prefixes later keys with `section.`. Lists are comma
// separated. Duplicate and unknown keys are errors.
ExperimentConfig parse_config(std::string_view text, const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

// Sets one key on a resolved config, with the same value syntax.
void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value, std::size_t line = 0);
// Every accepted key, in grammar order.
std::vector<std::string> config_keys();

}  // namespace anop::app
