// SPDX-License-Identifier: Apache-2.0
#pragma once

// Re-rank learning: with the encoder frozen, fine-tune the qrm adapter on
// retrieved, generated and BM25 negatives, then order candidate sets.

#include <span>
#include <string>
#include <vector>

#include "heronet/bm25.hpp"
#include "heronet/generation.hpp"
#include "heronet/model.hpp"
#include "heronet/retrieval.hpp"

namespace heronet {

enum class Provenance { retrieved, generated, truth, bm25 };

const char* provenance_name(Provenance p);

struct Candidate {
  Ids response;
  Provenance provenance = Provenance::retrieved;
};

struct RankedEntry {
  Ids response;
  double score = 0.0;
  Provenance provenance = Provenance::retrieved;
  int index = 0;  // position in the input list
};

struct RankedCandidates {
  std::vector<RankedEntry> entries;
  /// 1-based rank of the first truth entry; 0 when absent.
  int truth_rank() const;
};

/// Keeps the first copy of each distinct token sequence; a truth duplicate
/// passes its provenance to the kept copy.
std::vector<Candidate> dedupe_candidates(const std::vector<Candidate>& candidates);

/// Scores by the matching head and sorts descending, stable on input order.
RankedCandidates rerank(const AdapterParams& qrm, std::span<const double> query_emb,
                        const std::vector<Candidate>& candidates, const std::vector<SentenceEmbedding>& candidate_emb);
RankedCandidates rerank(const Model<float>& model, std::span<const int> query, const std::vector<Candidate>& candidates);

struct SelectedOutputs {
  RankedEntry generated_result;
  std::vector<RankedEntry> retrieved_results;
};

SelectedOutputs select_outputs(const RankedCandidates& ranked, int k);

/// One re-rank training query: frozen sentence embeddings of the query and
/// of each candidate, labels 1 for truth and 0 otherwise.
struct RerankExample {
  SentenceEmbedding query;
  std::vector<SentenceEmbedding> candidates;
  std::vector<int> labels;
};

/// Mean BCE over every candidate of the batch; only qrm.* is trainable.
template <class T>
Var rerank_loss(Tape<T>& tape, const Model<T>& model, std::span<const RerankExample> batch);

double rerank_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                   std::span<const RerankExample> batch, double lr);

struct RerankTrainQuery {
  Ids query;           // bare query, for retrieval and scoring
  Ids generator_query; // context-spliced query, for generation
  Ids truth;
};

struct RerankEpochOptions {
  int m = 20;
  int n = 1;
  int bs = 16;
  bool kg = true;
  int max_new = 32;
  double lr = 1e-4;
};

/// Builds candidate sets (m retrieved + n generated + BM25 top-max(m,1)
/// responses + truth) for every query and trains the qrm adapter on them.
/// Returns the mean step loss.
double rerank_train_epoch(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                          const std::vector<RerankTrainQuery>& queries, const EncodedPool& pool,
                          const PoolCache& cache, const Bm25Index& response_index, const RerankEpochOptions& options,
                          Rng& rng);

}  // namespace heronet
