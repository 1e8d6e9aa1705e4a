// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "heronet/model.hpp"

namespace heronet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::string profile = "desk";

  // Candidate counts.
  int m = 20;
  int n = 1;
  int k = 5;

  // Data.
  std::uint64_t seed = 7;
  int n_train = 1000;
  int n_eval = 200;
  int pool_size = 500;
  int n_topics = 24;
  int vocab_max = 512;

  // Model.
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 256;
  int d_proj = 64;
  int max_seq_len = 64;
  int gen_max_len = 32;

  // Schedule.
  int bs = 16;
  int epochs_warmup = 3;
  int epochs_multitask = 5;
  int epochs_adversarial = 10;
  int epochs_rerank = 3;
  double warmup_lr = 4e-4;
  double retrieval_lr = 1e-4;
  double g_lr = 2e-4;
  double d_lr = 1e-4;
  double rerank_lr = 5e-5;

  // Losses.
  double margin1 = 0.5;
  double margin2 = 0.5;
  double lambda = 1e-4;
  double alpha = 0.5;
  double sqd_margin = 1.0;
  double dropout_rate = 0.15;

  // Desk-scale pacing.
  int train_negatives = 4;
  int qrm_random_negatives = 4;
  int adv_queries_per_epoch = 128;
  int rerank_queries_per_epoch = 400;
  int eval_candidates = 100;
  int eval_queries = 0;  // 0 = whole split
  int threads = 0;       // 0 = OpenMP default

  // Ablations.
  bool no_kg = false;
  bool no_reward = false;
  bool no_multi_learning = false;

  /// Throws ConfigError naming the first offending field.
  void validate() const;
  ModelConfig model_config(int vocab_size) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Names accepted by parse_config, in declaration order.
const std::vector<std::string>& config_keys();

/// Defaults of a named profile ("desk" or "full").
TrainConfig profile_defaults(std::string_view profile);

/// Parses `key = value` lines. '#' starts a comment. A `profile` line, when
/// present, selects the defaults before any other key is applied.
TrainConfig parse_config_text(std::string_view text);
TrainConfig parse_config(const std::filesystem::path& path);

/// Applies one key/value pair; throws ConfigError on unknown keys or bad values.
void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value);

}  // namespace heronet
