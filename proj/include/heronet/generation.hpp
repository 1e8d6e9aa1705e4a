// SPDX-License-Identifier: Apache-2.0
#pragma once

// Generator side: MLE warm-up, Monte Carlo roll-outs, the policy-gradient
// update fused with cross-entropy, and knowledge-spliced generator inputs.

#include <optional>
#include <span>
#include <vector>

#include "heronet/corpus.hpp"
#include "heronet/model.hpp"
#include "heronet/retrieval.hpp"

namespace heronet {

/// query [SEP] knowledge; the query alone when there is no knowledge.
Utterance splice_knowledge(const Utterance& query, const Utterance* knowledge);

/// Token-level splice bounded by `max_seq_len`: the (already truncated) query
/// is kept whole and the knowledge is cut from its tail.
Ids splice_knowledge_ids(std::span<const int> query, std::span<const int> knowledge, bool has_knowledge,
                         int max_seq_len);

struct GenExample {
  Ids input;     // encoder input
  Ids response;  // target tokens, no BOS/EOS
};

/// Teacher-forced -sum log p over response tokens plus EOS, mean over the batch.
template <class T>
Var ce_loss(Tape<T>& tape, const Model<T>& model, std::span<const GenExample> batch);

double warmup_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                   std::span<const GenExample> batch, double lr);

/// Mean per-example cross-entropy without updating anything.
double mean_ce(const Model<float>& model, std::span<const GenExample> examples);

/// n completions of `prefix` sampled at temperature 1 with the current
/// generator. Each starts with `prefix`.
std::vector<TokenSequence> mc_rollouts(const Model<float>& model, const HiddenStates<float>& hs,
                                       std::span<const int> prefix, int n, Rng& rng, int max_new);

struct Rollout {
  Ids input;
  Ids response;                        // ground truth for the cross-entropy term
  std::vector<TokenSequence> samples;  // each starts with BOS
  std::vector<double> rewards;
};

struct GenLossReport {
  double ce_loss = 0.0;
  double pg_loss = 0.0;
  double fused = 0.0;
  double alpha = 0.0;
};

/// Batch-mean reward, computed so that equal rewards give that exact value.
double reward_baseline(std::span<const Rollout> batch);

/// pg = -mean over samples of (R - baseline) * sum_t log p(w_t); fused = ce + alpha * pg.
template <class T>
Var pg_surrogate(Tape<T>& tape, const Model<T>& model, std::span<const Rollout> batch, double baseline);

GenLossReport pg_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                      std::span<const Rollout> batch, double lr, double alpha);

struct GenerateOptions {
  int n = 1;
  int m = 20;
  bool kg = true;
  bool greedy_first = false;  // first candidate greedy, the rest sampled
  int max_new = 32;
};

struct GeneratedCandidates {
  Ids input;                       // generator input actually used
  std::optional<int> knowledge;    // pool id spliced in, if any
  std::vector<Ids> responses;      // generated tokens, BOS/EOS stripped
  std::vector<TokenSequence> raw;  // full sequences including BOS
};

/// Retrieves top-m, splices the best-scored response onto the query when
/// `kg` is on, then produces n responses.
GeneratedCandidates generate_candidates(const Model<float>& model, std::span<const int> query,
                                        std::span<const int> generator_query, const PoolCache& cache,
                                        const EncodedPool& pool, const GenerateOptions& options, Rng& rng,
                                        std::span<const int> candidates = {});

}  // namespace heronet
