// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "heronet/model.hpp"
#include "heronet/rng.hpp"

namespace heronet::test {

/// d_model = 8 encoder-decoder small enough for exhaustive checks.
inline ModelConfig toy_config(int vocab = 12, bool separate = false) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 16;
  c.max_seq_len = 12;
  c.d_proj = 4;
  c.init_std = 0.3;
  c.separate_sqd_encoder = separate;
  return c;
}

/// Random ids in [kEou + 1, vocab).
inline std::vector<int> random_ids(Rng& rng, int len, int vocab) {
  std::vector<int> out(static_cast<std::size_t>(len));
  for (auto& x : out) x = kEou + 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(vocab - kEou - 1)));
  return out;
}

/// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("heronet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace heronet::test
