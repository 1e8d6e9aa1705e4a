// SPDX-License-Identifier: Apache-2.0
#pragma once

// Retrieval multi-task learning: SQD (similar-query discovery) with
// BM25-mined negatives, QRM (query-response matching) with SQD-mined
// negatives, and two-stage top-m retrieval over the candidate pool.

#include <span>
#include <stdexcept>
#include <vector>

#include "heronet/bm25.hpp"
#include "heronet/corpus.hpp"
#include "heronet/model.hpp"
#include "heronet/params.hpp"
#include "heronet/rng.hpp"

namespace heronet {

using Ids = std::vector<int>;

class NumericalAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pool entries as token ids. Empty pool queries are stored as [UNK].
struct EncodedPool {
  std::vector<Ids> queries;
  std::vector<Ids> responses;
  std::size_t size() const { return responses.size(); }
};

EncodedPool encode_pool(const CandidatePool& pool, const Vocab& vocab, int max_seq_len);

/// Embeddings of every pool entry under the current parameters.
struct PoolCache {
  std::vector<std::vector<double>> sqd_queries;  // psi_D(query), rows for distance scans
  std::vector<SentenceEmbedding> qrm_queries;    // shared-encoder query embeddings
  std::vector<SentenceEmbedding> qrm_responses;  // shared-encoder response embeddings
  std::size_t size() const { return qrm_responses.size(); }
};

/// Sentence embeddings for many sequences. The parallel and serial paths
/// give bit-identical results.
std::vector<SentenceEmbedding> embed_all(const Model<float>& model, const std::vector<Ids>& seqs, Task task,
                                         bool parallel = true);

PoolCache build_pool_cache(const Model<float>& model, const EncodedPool& pool, bool parallel = true);

struct TripletBatch {
  std::vector<Ids> anchors;
  std::vector<Ids> positives;
  std::vector<std::vector<Ids>> negatives;  // per anchor
  bool truncated = false;                   // fewer than m negatives were available
};

struct MatchExample {
  Ids query;
  Ids response;
  int label = 0;
};

/// One positive followed by its negatives.
using MatchGroup = std::vector<MatchExample>;

struct MatchBatch {
  std::vector<MatchGroup> groups;
};

/// Word dropout at `drop_rate` plus one adjacent-word swap. Never empty.
Ids augment_positive(std::span<const int> anchor, double drop_rate, Rng& rng);

/// Negatives are the BM25 top-m pool queries, skipping exact copies of the anchor.
TripletBatch mine_sqd_batch(const std::vector<Ids>& anchors, const EncodedPool& pool, const Bm25Index& query_index,
                            int m, double drop_rate, Rng& rng);

struct SqdOptions {
  double margin = 1.0;
  double lr = 1e-4;
};

/// Mean over anchors of the summed triplet hinge; updates the SQD encoder and psi_D.
double sqd_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt, const TripletBatch& batch,
                const SqdOptions& options);

/// Triplet hinge loss on a tape (mean over anchors). Exposed for gradient checks.
template <class T>
Var sqd_loss(Tape<T>& tape, const Model<T>& model, const TripletBatch& batch, T margin);

/// Pool ids ordered by psi_D distance to `query`, at most `count`, ties by id.
/// Only ids in `candidates` are considered (all when empty); ids flagged in
/// `excluded` are skipped.
std::vector<int> nearest_queries(std::span<const double> query, const PoolCache& cache, int count,
                                 std::span<const int> candidates = {}, const std::vector<bool>* excluded = nullptr);

struct QrmMiningOptions {
  int m = 4;
  int random_negatives = 0;
};

/// For each (query, response) anchor: one positive, m <q, r_j> and m <q_j, r>
/// negatives from the SQD-nearest pool queries, then `random_negatives`
/// uniformly drawn <q, r_j> negatives.
MatchBatch mine_qrm_batch(const Model<float>& model, const std::vector<std::pair<Ids, Ids>>& anchors,
                          const EncodedPool& pool, const PoolCache& cache, const QrmMiningOptions& options, Rng& rng);

/// Mean binary cross-entropy of the matching score over every example.
double qrm_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt, const MatchBatch& batch,
                double lr);

template <class T>
Var qrm_loss(Tape<T>& tape, const Model<T>& model, const MatchBatch& batch);

struct Retrieved {
  int pool_id;
  double score;
};

/// Stage 1: the 4m pool entries whose queries are nearest under psi_D.
/// Stage 2: their responses scored against the query with the matching
/// head; top m by descending score, ties by ascending pool id.
std::vector<Retrieved> retrieve_top_m(const Model<float>& model, std::span<const int> query, const PoolCache& cache,
                                      int m, std::span<const int> candidates = {});

/// Same as retrieve_top_m with precomputed query embeddings.
std::vector<Retrieved> retrieve_top_m(const AdapterParams& sqd, const AdapterParams& qrm,
                                      std::span<const double> query_sqd_emb, std::span<const double> query_qrm_emb,
                                      const PoolCache& cache, int m, std::span<const int> candidates = {});

}  // namespace heronet
