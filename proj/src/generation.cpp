// SPDX-License-Identifier: Apache-2.0
#include "heronet/generation.hpp"

#include <cmath>
#include <stdexcept>

#include "heronet/train_step.hpp"

namespace heronet {

Utterance splice_knowledge(const Utterance& query, const Utterance* knowledge) {
  Utterance out = query;
  if (knowledge == nullptr) return out;
  out.words.emplace_back(kReservedTokens[kSep]);
  out.words.insert(out.words.end(), knowledge->words.begin(), knowledge->words.end());
  return out;
}

Ids splice_knowledge_ids(std::span<const int> query, std::span<const int> knowledge, bool has_knowledge,
                         int max_seq_len) {
  if (max_seq_len < 1) throw std::invalid_argument("splice_knowledge_ids: max_seq_len must be positive");
  Ids out(query.begin(), query.begin() + std::min<std::ptrdiff_t>(query.size(), max_seq_len));
  if (!has_knowledge || static_cast<int>(out.size()) + 1 >= max_seq_len) return out;
  out.push_back(kSep);
  const auto room = static_cast<std::size_t>(max_seq_len) - out.size();
  out.insert(out.end(), knowledge.begin(), knowledge.begin() + std::min(room, knowledge.size()));
  return out;
}

template <class T>
Var ce_loss(Tape<T>& tape, const Model<T>& model, std::span<const GenExample> batch) {
  if (batch.empty()) throw std::invalid_argument("ce_loss: empty batch");
  std::vector<Var> terms;
  terms.reserve(batch.size());
  for (const auto& ex : batch) {
    Var memory = model.encode(tape, ex.input);
    const auto tf = teacher_forcing_pair(ex.response, model.config().max_seq_len);
    terms.push_back(model.sequence_nll(tape, memory, ex.input, tf.dec_in, tf.targets));
  }
  return tape.scale(tape.add_n(terms), T(1) / static_cast<T>(batch.size()));
}

double warmup_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                   std::span<const GenExample> batch, double lr) {
  return run_train_step(params, opt, lr, {"enc.", "dec."}, "warmup_step",
                        [&](Tape<float>& tape) { return ce_loss(tape, model, batch); });
}

double mean_ce(const Model<float>& model, std::span<const GenExample> examples) {
  if (examples.empty()) return 0.0;
  std::vector<double> per(examples.size());
  const auto n = static_cast<long>(examples.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (long i = 0; i < n; ++i) {
    Tape<float> tape;
    per[i] = tape.scalar(ce_loss(tape, model, examples.subspan(static_cast<std::size_t>(i), 1)));
  }
  double total = 0.0;
  for (double v : per) total += v;
  return total / static_cast<double>(examples.size());
}

std::vector<TokenSequence> mc_rollouts(const Model<float>& model, const HiddenStates<float>& hs,
                                       std::span<const int> prefix, int n, Rng& rng, int max_new) {
  if (n < 1) throw std::invalid_argument("mc_rollouts: n must be >= 1");
  std::vector<TokenSequence> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(model.sample_sequence(hs, SampleMode{1.0}, &rng, max_new, prefix));
  return out;
}

double reward_baseline(std::span<const Rollout> batch) {
  bool first = true;
  double r0 = 0.0, acc = 0.0;
  long count = 0;
  for (const auto& r : batch)
    for (double x : r.rewards) {
      if (first) {
        r0 = x;
        first = false;
      }
      acc += x - r0;
      ++count;
    }
  if (count == 0) throw std::invalid_argument("reward_baseline: no rewards");
  return r0 + acc / static_cast<double>(count);
}

template <class T>
Var pg_surrogate(Tape<T>& tape, const Model<T>& model, std::span<const Rollout> batch, double baseline) {
  std::vector<Var> terms;
  long samples = 0;
  for (const auto& r : batch) {
    if (r.samples.size() != r.rewards.size()) throw std::invalid_argument("pg_surrogate: one reward per sample");
    if (r.samples.empty()) continue;
    Var memory = model.encode(tape, r.input);
    for (std::size_t s = 0; s < r.samples.size(); ++s) {
      const auto& ids = r.samples[s].ids;
      ++samples;
      if (ids.size() < 2) continue;
      const std::span<const int> all(ids);
      Var nll = model.sequence_nll(tape, memory, r.input, all.first(all.size() - 1), all.subspan(1));
      terms.push_back(tape.scale(nll, static_cast<T>(r.rewards[s] - baseline)));
    }
  }
  if (samples == 0) throw std::invalid_argument("pg_surrogate: empty rollouts");
  if (terms.empty()) return tape.constant(Tensor<T>(1, 1));
  return tape.scale(tape.add_n(terms), T(1) / static_cast<T>(samples));
}

GenLossReport pg_step(const Model<float>& model, ParamStore<float>& params, Adam<float>& opt,
                      std::span<const Rollout> batch, double lr, double alpha) {
  if (batch.empty()) throw std::invalid_argument("pg_step: empty rollouts");
  std::vector<GenExample> truth;
  truth.reserve(batch.size());
  for (const auto& r : batch) truth.push_back({r.input, r.response});
  const double baseline = reward_baseline(batch);
  GenLossReport rep;
  rep.alpha = alpha;
  if (alpha == 0.0) {
    Tape<float> probe;
    rep.pg_loss = probe.scalar(pg_surrogate(probe, model, batch, baseline));
  }
  rep.fused = run_train_step(params, opt, lr, {"enc.", "dec."}, "pg_step", [&](Tape<float>& tape) {
    Var ce = ce_loss<float>(tape, model, truth);
    rep.ce_loss = tape.scalar(ce);
    if (alpha == 0.0) return ce;
    Var pg = pg_surrogate(tape, model, batch, baseline);
    rep.pg_loss = tape.scalar(pg);
    return tape.add(ce, tape.scale(pg, static_cast<float>(alpha)));
  });
  return rep;
}

GeneratedCandidates generate_candidates(const Model<float>& model, std::span<const int> query,
                                        std::span<const int> generator_query, const PoolCache& cache,
                                        const EncodedPool& pool, const GenerateOptions& options, Rng& rng,
                                        std::span<const int> candidates) {
  GeneratedCandidates out;
  const int max_len = model.config().max_seq_len;
  if (options.kg && options.m > 0) {
    const auto top = retrieve_top_m(model, query, cache, options.m, candidates);
    if (!top.empty()) out.knowledge = top.front().pool_id;
  }
  out.input = out.knowledge ? splice_knowledge_ids(generator_query, pool.responses[*out.knowledge], true, max_len)
                            : splice_knowledge_ids(generator_query, {}, false, max_len);
  if (options.n <= 0) return out;
  const auto hs = model.hidden(out.input);
  for (int i = 0; i < options.n; ++i) {
    const SampleMode mode{options.greedy_first && i == 0 ? 0.0 : 1.0};
    auto seq = model.sample_sequence(hs, mode, &rng, options.max_new);
    out.responses.push_back(strip_special(seq.ids));
    out.raw.push_back(std::move(seq));
  }
  return out;
}

template Var ce_loss<float>(Tape<float>&, const Model<float>&, std::span<const GenExample>);
template Var ce_loss<double>(Tape<double>&, const Model<double>&, std::span<const GenExample>);
template Var pg_surrogate<float>(Tape<float>&, const Model<float>&, std::span<const Rollout>, double);
template Var pg_surrogate<double>(Tape<double>&, const Model<double>&, std::span<const Rollout>, double);

}  // namespace heronet
