// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "anop/app/config.hpp"
#include "anop/eval/bench.hpp"

namespace anop::app {

// One training + evaluation unit. Methods other than anchoropt have no stage
// I, so their paradigm is always recorded as two_stage.
struct RunSpec {
  std::string run_id;
  train::Method method = train::Method::anchoropt;
  Paradigm paradigm = Paradigm::two_stage;
  std::string axis = "method";
  std::string value;
  std::uint64_t seed = 0;
  train::TrainConfig train;
  bool ensemble = true;
};

struct RunOutcome {
  RunSpec spec;
  eval::MetricsRecord metrics;
  double ce_final = 0.0;
  double kd_final = 0.0;
  std::vector<double> anchor_trace;
  train::TrainState state;
};

// Ablation axes and their value grids.
std::vector<std::string> ablation_axes();
std::vector<std::string> ablation_values(const std::string& axis);  // throws for unknown axes
// Applies one axis value to a spec; kd=off sets lambda_kd to exactly 0.
void apply_ablation(RunSpec& spec, const std::string& axis, const std::string& value);
// Rejects grids that name more than one axis.
std::string single_axis(const std::vector<std::string>& axes);

// Metrics CSV, RFC-4180 quoting, one row per run.
std::string csv_header();
std::string csv_row(const RunOutcome& outcome);
std::string csv_quote(const std::string& field);

struct MethodSummary {
  std::string name;
  eval::Summary base, novel, hm;
};
std::vector<MethodSummary> summarize_by(const std::vector<RunOutcome>& runs, bool by_value);
// Base / Novel / HM as mean ± std, one row per entry.
std::string markdown_table(const std::vector<MethodSummary>& rows, const std::string& label = "Method");

// World, split and frozen encoder of one configuration, plus run bookkeeping.
// All artifacts land under config.output_dir.
class Experiment {
 public:
  // Loads the encoder from <out>/cache when a checkpoint for the same world,
  // encoder and pretraining settings exists; pretrains and caches otherwise.
  Experiment(ExperimentConfig config, std::ostream& log);

  const ExperimentConfig& config() const { return config_; }
  const world::SynthWorld& world() const { return world_; }
  const world::SplitSpec& split() const { return split_; }
  const encoder::EncoderStack& stack() const { return stack_; }
  const encoder::PretrainReport& pretrain_report() const { return pretrain_; }
  bool encoder_from_cache() const { return cached_; }
  std::string encoder_path() const;

  RunSpec spec(train::Method method, Paradigm paradigm, std::uint64_t seed) const;

  // Pipeline pieces; each draws from streams named after its phase.
  train::TrainState init_state(const RunSpec& spec) const;
  train::Stage1Result stage1(const RunSpec& spec, train::TrainState& state) const;
  train::Stage2Result stage2(const RunSpec& spec, train::TrainState& state) const;
  train::OneStageResult one_stage(const RunSpec& spec, train::TrainState& state) const;
  eval::MetricsRecord evaluate(const RunSpec& spec, const train::TrainState& state) const;

  // Full run: train per paradigm, evaluate, write state checkpoint and
  // position-matrix dump under <out>/runs/<run_id>/, and record the run.
  RunOutcome run(const RunSpec& spec);

  std::string run_dir(const std::string& run_id) const;
  void save_state(const RunSpec& spec, const train::TrainState& state, const std::string& path) const;
  train::TrainState load_state(const std::string& path, train::Method* method = nullptr) const;

  // Manifest with the resolved config, versions and every recorded run.
  void write_manifest(const std::string& command) const;
  // Same content plus the error; written when a command fails midway.
  void write_failure(const std::string& command, const std::string& error) const;

 private:
  ExperimentConfig config_;
  std::ostream* log_;
  world::SynthWorld world_;
  world::SplitSpec split_;
  encoder::EncoderStack stack_;
  encoder::PretrainReport pretrain_;
  bool cached_ = false;
  std::vector<RunSpec> recorded_;
};

// Writes a position-matrix dump: logits plus the noise-free assignment.
std::string position_dump(const prompt::PositionMatrix& pm);

}  // namespace anop::app
