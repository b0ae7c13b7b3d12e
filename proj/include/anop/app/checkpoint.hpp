// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "anop/encoder/dual_encoder.hpp"
#include "anop/train/trainers.hpp"

namespace anop::app {

using ad::Tensor;

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout, all integers little-endian:
//   "ANOP" | u32 version | str digest | u64 world seed | str stage
//   | u32 n_meta  { str key, str value }
//   | u32 n_tensor { str name, u32 rank, u64 dim[rank], u64 count, f64 value[count] }
//   | u32 crc32 of every preceding byte
// str = u32 length + bytes.
struct CheckpointData {
  std::string config_digest;
  std::uint64_t world_seed = 0;
  std::string stage;  // "encoder" or a training stage tag
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const std::string& meta_value(const std::string& key) const;  // throws when absent
  const Tensor* tensor(const std::string& name) const;           // nullptr when absent
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, magic, version, checksum, format };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data);
// Magic, then version, then checksum, and only then the body.
CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes);

// Writes through a temporary file and a rename.
void save_checkpoint(const CheckpointData& data, const std::string& path);
CheckpointData load_checkpoint(const std::string& path);

CheckpointData stack_checkpoint(const encoder::EncoderStack& stack, const std::string& digest,
                                std::uint64_t world_seed);
encoder::EncoderStack stack_from_checkpoint(const CheckpointData& data);

CheckpointData state_checkpoint(const train::TrainState& state, train::Method method, const std::string& digest,
                                std::uint64_t world_seed);
train::TrainState state_from_checkpoint(const CheckpointData& data);

}  // namespace anop::app
