// SPDX-License-Identifier: Apache-2.0
#pragma once

// A checkpoint is <stem>.json (manifest) plus <stem>.bin holding every
// tensor as little-endian float32, concatenated in manifest order.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "heronet/params.hpp"

namespace heronet {

struct Checkpoint {
  std::string stage;
  nlohmann::json config;
  std::uint64_t seed = 0;
  long step = 0;
  ParamStore<float> params;
};

void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& stem);
bool checkpoint_exists(const std::filesystem::path& stem);

}  // namespace heronet
