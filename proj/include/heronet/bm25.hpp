// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "heronet/corpus.hpp"

namespace heronet {

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

/// Okapi BM25 over documents given as token id sequences.
class Bm25Index {
 public:
  struct Posting {
    int doc;
    int tf;
  };

  Bm25Index() = default;
  explicit Bm25Index(const std::vector<TokenSequence>& docs, Bm25Params params = {});

  int doc_count() const { return static_cast<int>(doc_len_.size()); }
  double avgdl() const { return avgdl_; }
  int doc_length(int doc) const { return doc_len_.at(static_cast<std::size_t>(doc)); }
  int df(int term) const;
  double idf(int term) const;
  const Bm25Params& params() const { return params_; }
  const std::vector<Posting>& postings(int term) const;

  /// Sum over distinct query terms. Throws std::out_of_range on a bad doc id.
  double score(std::span<const int> query, int doc) const;
  /// Scores for every document, accumulated through the postings lists.
  std::vector<double> score_all(std::span<const int> query) const;
  /// Descending score, ties by ascending id; ids in `exclude` are skipped.
  std::vector<int> top_k(std::span<const int> query, int k, const std::unordered_set<int>& exclude = {}) const;

 private:
  Bm25Params params_;
  std::vector<int> doc_len_;
  double avgdl_ = 0.0;
  std::unordered_map<int, std::vector<Posting>> postings_;
};

/// Index over pool queries (SQD mining) or pool responses (re-rank negatives).
Bm25Index index_pool_queries(const CandidatePool& pool, const Vocab& vocab, int max_seq_len);
Bm25Index index_pool_responses(const CandidatePool& pool, const Vocab& vocab, int max_seq_len);

}  // namespace heronet
