// SPDX-License-Identifier: Apache-2.0
#include "heronet/retrieval.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <unordered_set>

#include "heronet/kernels.hpp"
#include "heronet/train_step.hpp"

namespace heronet {

EncodedPool encode_pool(const CandidatePool& pool, const Vocab& vocab, int max_seq_len) {
  EncodedPool out;
  out.queries.reserve(pool.size());
  out.responses.reserve(pool.size());
  for (const auto& e : pool.entries) {
    out.queries.push_back(e.query.empty() ? Ids{kUnk} : encode_text(e.query, vocab, max_seq_len).ids);
    out.responses.push_back(encode_text(e.response, vocab, max_seq_len).ids);
  }
  return out;
}

std::vector<SentenceEmbedding> embed_all(const Model<float>& model, const std::vector<Ids>& seqs, Task task,
                                         bool parallel) {
  std::vector<SentenceEmbedding> out(seqs.size());
  const auto n = static_cast<long>(seqs.size());
  if (parallel) {
#pragma omp parallel for schedule(dynamic, 8)
    for (long i = 0; i < n; ++i) out[i] = model.sentence_embedding(seqs[i], task);
  } else {
    for (long i = 0; i < n; ++i) out[i] = model.sentence_embedding(seqs[i], task);
  }
  return out;
}

PoolCache build_pool_cache(const Model<float>& model, const EncodedPool& pool, bool parallel) {
  PoolCache c;
  const auto sqd = adapter_params(model.params(), Task::sqd);
  const auto sqd_emb = embed_all(model, pool.queries, Task::sqd, parallel);
  c.sqd_queries.reserve(sqd_emb.size());
  for (const auto& e : sqd_emb) c.sqd_queries.push_back(adapter_apply(sqd, e).v);
  c.qrm_queries = model.encoder_for(Task::sqd) == model.encoder_for(Task::qrm) ? sqd_emb
                                                                              : embed_all(model, pool.queries, Task::qrm, parallel);
  c.qrm_responses = embed_all(model, pool.responses, Task::qrm, parallel);
  return c;
}

// ---------------------------------------------------------------------------
// SQD

Ids augment_positive(std::span<const int> anchor, double drop_rate, Rng& rng) {
  Ids out;
  for (int id : anchor)
    if (!bernoulli(rng, drop_rate)) out.push_back(id);
  if (out.empty()) out.assign(anchor.begin(), anchor.end());
  if (out.size() >= 2 && bernoulli(rng, drop_rate)) {
    const auto i = uniform_index(rng, out.size() - 1);
    std::swap(out[i], out[i + 1]);
  }
  return out;
}

TripletBatch mine_sqd_batch(const std::vector<Ids>& anchors, const EncodedPool& pool, const Bm25Index& query_index,
                            int m, double drop_rate, Rng& rng) {
  if (m < 1) throw std::invalid_argument("mine_sqd_batch: m must be >= 1");
  TripletBatch b;
  for (const auto& a : anchors) {
    std::unordered_set<int> exclude;
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (pool.queries[i] == a) exclude.insert(static_cast<int>(i));
    const auto top = query_index.top_k(a, m, exclude);
    if (static_cast<int>(top.size()) < m) b.truncated = true;
    std::vector<Ids> negs;
    negs.reserve(top.size());
    for (int id : top) negs.push_back(pool.queries[id]);
    b.anchors.push_back(a);
    b.positives.push_back(augment_positive(a, drop_rate, rng));
    b.negatives.push_back(std::move(negs));
  }
  return b;
}

template <class T>
Var sqd_loss(Tape<T>& tape, const Model<T>& model, const TripletBatch& batch, T margin) {
  if (batch.anchors.empty()) throw std::invalid_argument("sqd_loss: empty batch");
  std::vector<Var> terms;
  for (std::size_t i = 0; i < batch.anchors.size(); ++i) {
    Var va = model.embed(tape, batch.anchors[i], Task::sqd);
    Var vp = model.embed(tape, batch.positives[i], Task::sqd);
    Var d_pos = tape.distance(va, vp);
    for (const auto& neg : batch.negatives[i]) {
      Var d_neg = tape.distance(va, model.embed(tape, neg, Task::sqd));
      terms.push_back(tape.relu(tape.add_scalar(tape.sub(d_pos, d_neg), margin)));
    }
  }
  if (terms.empty()) return tape.constant(Tensor<T>(1, 1));
  return tape.scale(tape.add_n(terms), T(1) / static_cast<T>(batch.anchors.size()));
}

double sqd_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt, const TripletBatch& batch,
                const SqdOptions& options) {
  const std::vector<std::string> prefixes{model.encoder_for(Task::sqd) + ".", "sqd."};
  return run_train_step(params, opt, options.lr, prefixes, "sqd_step", [&](Tape<float>& tape) {
    return sqd_loss(tape, model, batch, static_cast<float>(options.margin));
  });
}

std::vector<int> nearest_queries(std::span<const double> query, const PoolCache& cache, int count,
                                 std::span<const int> candidates, const std::vector<bool>* excluded) {
  const auto dist = kernels::parallel::euclidean_distances(query, cache.sqd_queries);
  std::vector<int> ids;
  if (candidates.empty()) {
    ids.resize(dist.size());
    std::iota(ids.begin(), ids.end(), 0);
  } else {
    ids.assign(candidates.begin(), candidates.end());
  }
  if (excluded) std::erase_if(ids, [&](int id) { return (*excluded)[id]; });
  const auto keep = std::min<std::size_t>(ids.size(), static_cast<std::size_t>(std::max(count, 0)));
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep), ids.end(),
                    [&](int a, int b) { return dist[a] != dist[b] ? dist[a] < dist[b] : a < b; });
  ids.resize(keep);
  return ids;
}

// ---------------------------------------------------------------------------
// QRM

MatchBatch mine_qrm_batch(const Model<float>& model, const std::vector<std::pair<Ids, Ids>>& anchors,
                          const EncodedPool& pool, const PoolCache& cache, const QrmMiningOptions& options, Rng& rng) {
  const auto sqd = adapter_params(model.params(), Task::sqd);
  MatchBatch b;
  for (const auto& [q, r] : anchors) {
    std::vector<bool> excluded(pool.size(), false);
    for (std::size_t i = 0; i < pool.size(); ++i) excluded[i] = pool.responses[i] == r;
    const auto pq = adapter_apply(sqd, model.sentence_embedding(q, Task::sqd));
    const auto near = nearest_queries(pq.v, cache, options.m, {}, &excluded);
    MatchGroup g;
    g.push_back({q, r, 1});
    for (int j : near) g.push_back({q, pool.responses[j], 0});
    for (int j : near) g.push_back({pool.queries[j], r, 0});
    if (options.random_negatives > 0) {
      for (int j : near) excluded[j] = true;
      std::vector<int> eligible;
      for (std::size_t i = 0; i < pool.size(); ++i)
        if (!excluded[i]) eligible.push_back(static_cast<int>(i));
      for (int t = 0; t < options.random_negatives && !eligible.empty(); ++t) {
        const auto pick = uniform_index(rng, eligible.size());
        g.push_back({q, pool.responses[eligible[pick]], 0});
        eligible.erase(eligible.begin() + static_cast<std::ptrdiff_t>(pick));
      }
    }
    b.groups.push_back(std::move(g));
  }
  return b;
}

template <class T>
Var qrm_loss(Tape<T>& tape, const Model<T>& model, const MatchBatch& batch) {
  std::map<Ids, Var> proj;
  auto embed = [&](const Ids& ids) {
    auto it = proj.find(ids);
    if (it == proj.end()) it = proj.emplace(ids, model.embed(tape, ids, Task::qrm)).first;
    return it->second;
  };
  std::vector<Var> terms;
  for (const auto& g : batch.groups)
    for (const auto& ex : g) {
      Var logit = model.score_logit(tape, embed(ex.query), embed(ex.response));
      terms.push_back(tape.bce_with_logits(logit, static_cast<T>(ex.label)));
    }
  if (terms.empty()) throw std::invalid_argument("qrm_loss: empty batch");
  return tape.scale(tape.add_n(terms), T(1) / static_cast<T>(terms.size()));
}

double qrm_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt, const MatchBatch& batch,
                double lr) {
  const std::vector<std::string> prefixes{"enc.", "qrm."};
  return run_train_step(params, opt, lr, prefixes, "qrm_step",
                        [&](Tape<float>& tape) { return qrm_loss(tape, model, batch); });
}

// ---------------------------------------------------------------------------
// Two-stage retrieval

std::vector<Retrieved> retrieve_top_m(const AdapterParams& sqd, const AdapterParams& qrm,
                                      std::span<const double> query_sqd_emb, std::span<const double> query_qrm_emb,
                                      const PoolCache& cache, int m, std::span<const int> candidates) {
  if (m < 1) throw std::invalid_argument("retrieve_top_m: m must be >= 1");
  const auto pq_sqd = adapter_apply(sqd, query_sqd_emb);
  const auto recall = nearest_queries(pq_sqd.v, cache, 4 * m, candidates);
  const auto pq = adapter_apply(qrm, query_qrm_emb);
  std::vector<Retrieved> scored;
  scored.reserve(recall.size());
  for (int id : recall)
    scored.push_back({id, match_score_projected(qrm, pq, adapter_apply(qrm, cache.qrm_responses[id]))});
  std::sort(scored.begin(), scored.end(), [](const Retrieved& a, const Retrieved& b) {
    return a.score != b.score ? a.score > b.score : a.pool_id < b.pool_id;
  });
  if (static_cast<int>(scored.size()) > m) scored.resize(static_cast<std::size_t>(m));
  return scored;
}

std::vector<Retrieved> retrieve_top_m(const Model<float>& model, std::span<const int> query, const PoolCache& cache,
                                      int m, std::span<const int> candidates) {
  const auto e_sqd = model.sentence_embedding(query, Task::sqd);
  const auto e_qrm = model.encoder_for(Task::sqd) == model.encoder_for(Task::qrm)
                         ? e_sqd
                         : model.sentence_embedding(query, Task::qrm);
  return retrieve_top_m(adapter_params(model.params(), Task::sqd), adapter_params(model.params(), Task::qrm), e_sqd,
                        e_qrm, cache, m, candidates);
}

template Var sqd_loss<float>(Tape<float>&, const Model<float>&, const TripletBatch&, float);
template Var sqd_loss<double>(Tape<double>&, const Model<double>&, const TripletBatch&, double);
template Var qrm_loss<float>(Tape<float>&, const Model<float>&, const MatchBatch&);
template Var qrm_loss<double>(Tape<double>&, const Model<double>&, const MatchBatch&);

}  // namespace heronet
