// SPDX-License-Identifier: Apache-2.0
#include "heronet/rerank.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "heronet/train_step.hpp"

namespace heronet {

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::retrieved: return "retrieved";
    case Provenance::generated: return "generated";
    case Provenance::truth: return "truth";
    case Provenance::bm25: return "bm25";
  }
  return "unknown";
}

int RankedCandidates::truth_rank() const {
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].provenance == Provenance::truth) return static_cast<int>(i) + 1;
  return 0;
}

std::vector<Candidate> dedupe_candidates(const std::vector<Candidate>& candidates) {
  std::vector<Candidate> out;
  std::map<Ids, std::size_t> seen;
  for (const auto& c : candidates) {
    auto [it, inserted] = seen.emplace(c.response, out.size());
    if (inserted)
      out.push_back(c);
    else if (c.provenance == Provenance::truth)
      out[it->second].provenance = Provenance::truth;
  }
  return out;
}

RankedCandidates rerank(const AdapterParams& qrm, std::span<const double> query_emb,
                        const std::vector<Candidate>& candidates, const std::vector<SentenceEmbedding>& candidate_emb) {
  if (candidates.empty()) throw std::invalid_argument("rerank: no candidates");
  if (candidates.size() != candidate_emb.size()) throw std::invalid_argument("rerank: one embedding per candidate");
  const auto pq = adapter_apply(qrm, query_emb);
  RankedCandidates out;
  out.entries.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i)
    out.entries.push_back({candidates[i].response, match_score_projected(qrm, pq, adapter_apply(qrm, candidate_emb[i])),
                           candidates[i].provenance, static_cast<int>(i)});
  std::stable_sort(out.entries.begin(), out.entries.end(),
                   [](const RankedEntry& a, const RankedEntry& b) { return a.score > b.score; });
  return out;
}

RankedCandidates rerank(const Model<float>& model, std::span<const int> query, const std::vector<Candidate>& candidates) {
  std::vector<SentenceEmbedding> emb;
  emb.reserve(candidates.size());
  for (const auto& c : candidates) emb.push_back(model.sentence_embedding(encodable(c.response), Task::qrm));
  return rerank(adapter_params(model.params(), Task::qrm), model.sentence_embedding(query, Task::qrm), candidates, emb);
}

SelectedOutputs select_outputs(const RankedCandidates& ranked, int k) {
  if (ranked.entries.empty()) throw std::invalid_argument("select_outputs: empty ranking");
  if (k < 1 || k > static_cast<int>(ranked.entries.size()))
    throw std::invalid_argument("select_outputs: k must lie in [1, candidate count]");
  SelectedOutputs s;
  s.generated_result = ranked.entries.front();
  s.retrieved_results.assign(ranked.entries.begin(), ranked.entries.begin() + k);
  return s;
}

template <class T>
Var rerank_loss(Tape<T>& tape, const Model<T>& model, std::span<const RerankExample> batch) {
  std::vector<Var> terms;
  auto as_row = [&](const SentenceEmbedding& e) {
    Tensor<T> t(1, static_cast<int>(e.size()));
    for (std::size_t i = 0; i < e.size(); ++i) t.data[i] = static_cast<T>(e[i]);
    return tape.constant(std::move(t));
  };
  for (const auto& ex : batch) {
    if (ex.candidates.size() != ex.labels.size()) throw std::invalid_argument("rerank_loss: one label per candidate");
    Var pq = model.project(tape, as_row(ex.query), Task::qrm);
    for (std::size_t i = 0; i < ex.candidates.size(); ++i) {
      Var pr = model.project(tape, as_row(ex.candidates[i]), Task::qrm);
      terms.push_back(tape.bce_with_logits(model.score_logit(tape, pq, pr), static_cast<T>(ex.labels[i])));
    }
  }
  if (terms.empty()) throw std::invalid_argument("rerank_loss: empty batch");
  return tape.scale(tape.add_n(terms), T(1) / static_cast<T>(terms.size()));
}

double rerank_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                   std::span<const RerankExample> batch, double lr) {
  return run_train_step(params, opt, lr, {"qrm."}, "rerank_step",
                        [&](Tape<float>& tape) { return rerank_loss(tape, model, batch); });
}

double rerank_train_epoch(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                          const std::vector<RerankTrainQuery>& queries, const EncodedPool& pool,
                          const PoolCache& cache, const Bm25Index& response_index, const RerankEpochOptions& options,
                          Rng& rng) {
  std::vector<RerankExample> examples;
  examples.reserve(queries.size());
  for (const auto& q : queries) {
    std::vector<int> eligible;
    std::unordered_set<int> excluded;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (pool.responses[i] == q.truth)
        excluded.insert(static_cast<int>(i));
      else
        eligible.push_back(static_cast<int>(i));
    }
    std::vector<Candidate> cands;
    std::vector<int> pool_ids;  // -1 when not a pool entry
    if (options.m > 0 && !eligible.empty())
      for (const auto& r : retrieve_top_m(model, q.query, cache, options.m, eligible)) {
        cands.push_back({pool.responses[r.pool_id], Provenance::retrieved});
        pool_ids.push_back(r.pool_id);
      }
    if (options.n > 0) {
      GenerateOptions go;
      go.n = options.n;
      go.m = options.m;
      go.kg = options.kg;
      go.max_new = options.max_new;
      for (auto& g : generate_candidates(model, q.query, q.generator_query, cache, pool, go, rng, eligible).responses) {
        cands.push_back({std::move(g), Provenance::generated});
        pool_ids.push_back(-1);
      }
    }
    if (response_index.doc_count() > 0)
      for (int id : response_index.top_k(q.query, std::max(options.m, 1), excluded)) {
        cands.push_back({pool.responses[id], Provenance::bm25});
        pool_ids.push_back(id);
      }
    cands.push_back({q.truth, Provenance::truth});
    pool_ids.push_back(-1);

    RerankExample ex;
    ex.query = model.sentence_embedding(q.query, Task::qrm);
    std::map<Ids, std::size_t> seen;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      auto [it, inserted] = seen.emplace(cands[i].response, ex.candidates.size());
      const int label = cands[i].provenance == Provenance::truth ? 1 : 0;
      if (!inserted) {
        ex.labels[it->second] = std::max(ex.labels[it->second], label);
        continue;
      }
      ex.candidates.push_back(pool_ids[i] >= 0 ? cache.qrm_responses[pool_ids[i]]
                                               : model.sentence_embedding(encodable(cands[i].response), Task::qrm));
      ex.labels.push_back(label);
    }
    examples.push_back(std::move(ex));
  }
  double total = 0.0;
  int steps = 0;
  const std::span<const RerankExample> all(examples);
  for (std::size_t start = 0; start < all.size(); start += static_cast<std::size_t>(options.bs)) {
    const auto len = std::min(all.size() - start, static_cast<std::size_t>(options.bs));
    total += rerank_step(model, params, opt, all.subspan(start, len), options.lr);
    ++steps;
  }
  return steps == 0 ? 0.0 : total / steps;
}

template Var rerank_loss<float>(Tape<float>&, const Model<float>&, std::span<const RerankExample>);
template Var rerank_loss<double>(Tape<double>&, const Model<double>&, std::span<const RerankExample>);

}  // namespace heronet
