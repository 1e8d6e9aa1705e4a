// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace heronet {

using Words = std::vector<std::string>;

struct GenReport {
  double bleu = 0.0;     // 0-100
  double rouge_l = 0.0;  // 0-100
  double meteor = 0.0;   // 0-1
  double chrf = 0.0;     // 0-100
};

struct RetrReport {
  double mrr = 0.0;
  double acc = 0.0;
  double hit5 = 0.0;
  double hit10 = 0.0;
  double hit50 = 0.0;
};

/// Corpus BLEU-4 with clipped counts, zero matches replaced by 1e-9, brevity
/// penalty, x100. Orders for which the candidates contain no n-grams at all
/// are left out of the geometric mean.
double bleu(std::span<const Words> candidates, std::span<const Words> references);

/// LCS F1 x100 for one pair.
double rouge_l(const Words& candidate, const Words& reference);
double rouge_l(std::span<const Words> candidates, std::span<const Words> references);

/// Exact-match METEOR with the alignment that minimizes chunks.
double meteor(const Words& candidate, const Words& reference);
double meteor(std::span<const Words> candidates, std::span<const Words> references);

/// Character n-gram F-score, n = 1..6, beta = 2, spaces removed, x100.
double chrf(std::string_view candidate, std::string_view reference);
double chrf(std::span<const Words> candidates, std::span<const Words> references);

GenReport generation_metrics(std::span<const Words> candidates, std::span<const Words> references);

struct RankOutcome {
  int rank = 1;  // 1-based rank of the truth
  int pool_size = 1;
};

RetrReport retrieval_metrics(std::span<const RankOutcome> rankings);

/// Area under the ROC curve of positives vs negatives, ties count one half.
double ranking_auc(std::span<const double> positives, std::span<const double> negatives);

nlohmann::json to_json(const GenReport& g);
nlohmann::json to_json(const RetrReport& r);

}  // namespace heronet
