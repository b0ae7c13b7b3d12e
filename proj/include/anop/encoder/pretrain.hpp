// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "anop/encoder/dual_encoder.hpp"
#include "anop/world/synth_world.hpp"

namespace anop::encoder {

struct PretrainConfig {
  EncoderDims dims;
  std::size_t max_steps = 3000;
  std::size_t min_steps = 600;
  std::size_t eval_every = 100;
  double lr = 3e-3;
  double target = 0.9;            // held-out image->caption top-1
  std::size_t heldout_groups = 8;  // groups of one pair per class
  double initial_logit_scale = 10.0;
  double max_logit_scale = 100.0;
};

struct PretrainReport {
  std::size_t steps = 0;
  double retrieval = 0.0;         // held-out top-1, image -> caption
  double matched_cosine = 0.0;    // mean over held-out matched pairs
  double mismatched_cosine = 0.0;
  double final_loss = 0.0;
  std::vector<double> loss_trace;
};

class PretrainFailure : public std::runtime_error {
 public:
  PretrainFailure(const std::string& what, PretrainReport report)
      : std::runtime_error(what), report_(std::move(report)) {}
  const PretrainReport& report() const { return report_; }

 private:
  PretrainReport report_;
};

// Symmetric InfoNCE over in-batch negatives; every batch holds one pair per
// class. Returns a frozen stack. Throws PretrainFailure below target.
EncoderStack pretrain_contrastive(const world::SynthWorld& world, const PretrainConfig& config, std::uint64_t seed,
                                  PretrainReport* report = nullptr);

// Held-out retrieval measurement, also used by tests.
PretrainReport measure_retrieval(const world::SynthWorld& world, const EncoderStack& stack, std::size_t groups,
                                 std::uint64_t seed);

}  // namespace anop::encoder
