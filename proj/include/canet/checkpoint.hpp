// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint container:
//
//   "CANT" | u32 version | u32 json_len | json | u32 tensor_count |
//   per tensor: u16 name_len | name | u8 dtype (1 = f64) | u8 rank |
//               rank x u64 dims | row-major f64 data |
//   u64 rng_state | u32 epoch
//
// All integers and floats are little-endian.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "canet/numerics.hpp"

namespace canet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointData {
  nlohmann::json meta;
  std::vector<StoredTensor> tensors;
  std::uint64_t rng_state = 0;
  std::uint32_t epoch = 0;

  const StoredTensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

std::string encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

}  // namespace canet
