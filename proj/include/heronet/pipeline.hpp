// SPDX-License-Identifier: Apache-2.0
#pragma once

// Stage orchestration over an output directory:
//   gen-data -> warmup -> pretrain-retrieval -> adv-train -> rerank-train -> evaluate
// Each training stage reads the previous stage's checkpoint, appends one
// row per epoch to log.csv and writes <stage>.json/.bin.

#include <array>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "heronet/config.hpp"
#include "heronet/metrics.hpp"

namespace heronet {

class StageOrderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<std::string_view, 4> kTrainStages{"warmup", "pretrain-retrieval", "adv-train",
                                                              "rerank-train"};

/// One line of log.csv. Fields that do not apply to a stage are NaN and are
/// written as empty cells.
struct LogRow {
  long step = 0;
  std::string stage;
  int epoch = 0;
  double loss = 0.0;
  double ce_loss = 0.0;
  double pg_loss = 0.0;
  double d_loss = 0.0;
  double alpha = 0.0;
  double valid = 0.0;
  double wall_s = 0.0;
};

std::string log_header();
std::string format_log_row(const LogRow& row);
void append_log(const std::filesystem::path& path, const LogRow& row);

struct EvalReport {
  GenReport generation;
  RetrReport retrieval;
  RetrReport bm25;
  double adversarial_auc = 0.0;
  int queries = 0;
  int m = 0;
  int n = 0;
  nlohmann::json to_json() const;
};

/// Writes the synthetic corpus and vocabulary into `out`.
void gen_data(const TrainConfig& cfg, const std::filesystem::path& out);

void run_warmup(const TrainConfig& cfg, const std::filesystem::path& out);
void run_pretrain_retrieval(const TrainConfig& cfg, const std::filesystem::path& out);
void run_adv_train(const TrainConfig& cfg, const std::filesystem::path& out);

/// Re-rank learning from `<in_dir>/adv-train` into `<out_dir>/rerank-train`,
/// with data read from `data_dir`.
void run_rerank_train(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                      const std::filesystem::path& in_dir, const std::filesystem::path& out_dir);

/// Scores the test split with the rerank-train checkpoint in `ckpt_dir` and
/// writes report.json and ranking_trace.jsonl there.
EvalReport run_evaluate(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                        const std::filesystem::path& ckpt_dir);

/// Ranks each truth of `split` (train, valid or test) among itself and
/// eval_candidates - 1 distractor pool responses by matching score, using
/// the `stage` checkpoint in `ckpt_dir`.
RetrReport selection_probe(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                           const std::filesystem::path& ckpt_dir, std::string_view stage, std::string_view split);

struct SweepRow {
  int m = 0;
  int n = 0;
  EvalReport report;
};

std::string sweep_header();
std::string format_sweep_row(const SweepRow& row);

/// For every (m, n), m-major, runs rerank-train and evaluate under
/// `<out>/sweep/m<M>_n<N>` and writes `<out>/sweep.csv`.
std::vector<SweepRow> run_sweep(const TrainConfig& cfg, const std::filesystem::path& out,
                                const std::vector<int>& m_values, const std::vector<int>& n_values);

/// Reads one query per line, prints the rank-1 response and the top-k
/// retrieved responses with scores. Returns at end of input.
void run_chat(const TrainConfig& cfg, const std::filesystem::path& out, std::istream& in, std::ostream& os);

/// Dispatches by stage name (also "gen-data" and "evaluate").
void run_stage(std::string_view stage, const TrainConfig& cfg, const std::filesystem::path& out);

}  // namespace heronet
