// SPDX-License-Identifier: Apache-2.0
#include "heronet/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_set>

#include "heronet/bm25.hpp"
#include "heronet/checkpoint.hpp"
#include "heronet/corpus.hpp"
#include "heronet/discriminator.hpp"
#include "heronet/generation.hpp"
#include "heronet/kernels.hpp"
#include "heronet/model.hpp"
#include "heronet/rerank.hpp"
#include "heronet/retrieval.hpp"

namespace heronet {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// RNG streams, one per consumer.
constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kProbeStream = 0x9B0B;
constexpr std::uint64_t kEvalStream = 0xE7A1;

std::uint64_t stage_stream(std::string_view stage) { return hash_string(stage); }

// ---------------------------------------------------------------------------
// Data

struct EncodedPair {
  Ids query;      // bare query
  Ids gen_query;  // query spliced with its context
  Ids response;
};

struct StageData {
  Corpus corpus;
  Vocab vocab;
  EncodedPool pool;
  std::map<Ids, std::vector<int>> by_response;
  std::vector<EncodedPair> train, valid, test;

  /// Pool ids whose response differs from `truth`.
  std::vector<int> eligible_for(const Ids& truth) const {
    std::vector<int> out;
    out.reserve(pool.size());
    auto it = by_response.find(truth);
    const std::vector<int> none;
    const auto& skip = it == by_response.end() ? none : it->second;
    std::size_t s = 0;
    for (int i = 0; i < static_cast<int>(pool.size()); ++i) {
      if (s < skip.size() && skip[s] == i) {
        ++s;
        continue;
      }
      out.push_back(i);
    }
    return out;
  }
};

bool data_exists(const fs::path& dir) {
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "pool.jsonl", "vocab.txt"})
    if (!fs::exists(dir / f)) return false;
  return true;
}

std::vector<EncodedPair> encode_pairs(const std::vector<DialoguePair>& pairs, const Vocab& vocab, int max_len) {
  std::vector<EncodedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs)
    out.push_back({encode_text(p.query, vocab, max_len).ids, encode_text(splice_context(p), vocab, max_len).ids,
                   encode_text(p.response, vocab, max_len).ids});
  return out;
}

StageData load_data(const TrainConfig& cfg, const fs::path& dir) {
  if (!data_exists(dir)) throw StageOrderError("no corpus in " + dir.string() + "; run gen-data first");
  StageData d;
  d.corpus = load_corpus(dir);
  if (auto errors = validate_corpus(d.corpus); !errors.empty())
    throw std::runtime_error("corpus in " + dir.string() + " is invalid: " + errors.front());
  d.vocab = Vocab::load(dir / "vocab.txt");
  d.pool = encode_pool(d.corpus.pool, d.vocab, cfg.max_seq_len);
  for (int i = 0; i < static_cast<int>(d.pool.size()); ++i) d.by_response[d.pool.responses[i]].push_back(i);
  d.train = encode_pairs(d.corpus.train, d.vocab, cfg.max_seq_len);
  d.valid = encode_pairs(d.corpus.valid, d.vocab, cfg.max_seq_len);
  d.test = encode_pairs(d.corpus.test, d.vocab, cfg.max_seq_len);
  return d;
}

// ---------------------------------------------------------------------------
// Checkpoints and stage order

fs::path stem_for(const fs::path& dir, std::string_view stage) { return dir / std::string(stage); }

int stage_index(std::string_view stage) {
  for (std::size_t i = 0; i < kTrainStages.size(); ++i)
    if (kTrainStages[i] == stage) return static_cast<int>(i);
  return -1;
}

// Keys that must agree between a checkpoint and the running configuration.
constexpr std::array<const char*, 13> kFrozenKeys{"seed",    "n_train", "n_eval", "pool_size", "n_topics",
                                                  "vocab_max", "d_model", "n_heads", "n_layers", "d_ff",
                                                  "d_proj",  "max_seq_len", "profile"};

Checkpoint require_checkpoint(const TrainConfig& cfg, const fs::path& dir, std::string_view stage,
                              std::string_view wanted_by) {
  const auto stem = stem_for(dir, stage);
  if (!checkpoint_exists(stem))
    throw StageOrderError(std::string(wanted_by) + " requires the " + std::string(stage) + " checkpoint in " +
                          dir.string());
  auto ckpt = load_checkpoint(stem);
  if (ckpt.stage != stage)
    throw StageOrderError("checkpoint " + stem.string() + " holds stage " + ckpt.stage + ", expected " +
                          std::string(stage));
  const json now = cfg.to_json();
  for (const char* key : kFrozenKeys)
    if (ckpt.config.contains(key) && ckpt.config.at(key) != now.at(key))
      throw ConfigError(std::string("config field ") + key + ": differs from the " + std::string(stage) +
                        " checkpoint (" + ckpt.config.at(key).dump() + ")");
  return ckpt;
}

void save_stage(const TrainConfig& cfg, const fs::path& dir, std::string_view stage, long step,
                const ParamStore<float>& params) {
  Checkpoint ckpt;
  ckpt.stage = std::string(stage);
  ckpt.config = cfg.to_json();
  ckpt.seed = cfg.seed;
  ckpt.step = step;
  ckpt.params = params.cast<float>();
  save_checkpoint(stem_for(dir, stage), ckpt);
  // Later stages were trained from an older lineage.
  for (int i = stage_index(stage) + 1; i >= 1 && i < static_cast<int>(kTrainStages.size()); ++i) {
    const auto later = stem_for(dir, kTrainStages[static_cast<std::size_t>(i)]);
    fs::remove(fs::path(later).replace_extension(".json"));
    fs::remove(fs::path(later).replace_extension(".bin"));
  }
}

ModelConfig model_config_for(const TrainConfig& cfg, const Vocab& vocab, const ParamStore<float>& params) {
  auto mc = cfg.model_config(vocab.size());
  mc.separate_sqd_encoder = params.contains("enc2.tok_emb");
  return mc;
}

void apply_threads(const TrainConfig& cfg) {
  if (cfg.threads > 0) kernels::set_threads(cfg.threads);
}

class StageClock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

LogRow make_row(std::string_view stage, long step, int epoch, const StageClock& clock) {
  LogRow r;
  r.step = step;
  r.stage = std::string(stage);
  r.epoch = epoch;
  r.loss = r.ce_loss = r.pg_loss = r.d_loss = r.alpha = r.valid = kNan;
  r.wall_s = clock.seconds();
  return r;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  shuffle(idx, rng);
  return idx;
}

// ---------------------------------------------------------------------------
// Probes

/// Ranks the truth among itself plus `candidates - 1` distractor pool
/// responses with the matching head. Ties are resolved against the truth.
RetrReport selection_probe_impl(const Model<float>& model, const StageData& d, const std::vector<EncodedPair>& pairs,
                                const PoolCache& cache, int candidates, std::uint64_t seed, int max_queries) {
  const auto qrm = adapter_params(model.params(), Task::qrm);
  const std::size_t count = max_queries > 0 ? std::min<std::size_t>(pairs.size(), max_queries) : pairs.size();
  std::vector<RankOutcome> ranks(count);
  const auto n = static_cast<long>(count);
#pragma omp parallel for schedule(dynamic, 4)
  for (long i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    auto eligible = d.eligible_for(p.response);
    shuffle(eligible, rng);
    eligible.resize(std::min<std::size_t>(eligible.size(), static_cast<std::size_t>(candidates - 1)));
    const auto e_q = model.sentence_embedding(p.query, Task::qrm);
    const double s_t = match_score(qrm, e_q, model.sentence_embedding(p.response, Task::qrm));
    int rank = 1;
    for (int id : eligible) rank += match_score(qrm, e_q, cache.qrm_responses[id]) >= s_t;
    ranks[static_cast<std::size_t>(i)] = {rank, static_cast<int>(eligible.size()) + 1};
  }
  return retrieval_metrics(ranks);
}

struct GeneratedSample {
  Ids input;
  std::vector<int> retrieved;  // pool ids, best first
  std::vector<TokenSequence> samples;
};

/// Retrieval over pool entries whose response differs from the truth, the
/// knowledge splice and `count` sampled continuations.
GeneratedSample sample_for(const Model<float>& model, const StageData& d, const PoolCache& cache,
                           const EncodedPair& p, int m, bool kg, int count, int max_new, Rng& rng) {
  GeneratedSample g;
  const auto eligible = d.eligible_for(p.response);
  if (m > 0 && !eligible.empty())
    for (const auto& r : retrieve_top_m(model, p.query, cache, m, eligible)) g.retrieved.push_back(r.pool_id);
  const int L = model.config().max_seq_len;
  g.input = kg && !g.retrieved.empty() ? splice_knowledge_ids(p.gen_query, d.pool.responses[g.retrieved.front()], true, L)
                                       : splice_knowledge_ids(p.gen_query, {}, false, L);
  const auto hs = model.hidden(g.input);
  const int bos[] = {kBos};
  g.samples = mc_rollouts(model, hs, bos, count, rng, max_new);
  return g;
}

/// Real-vs-generated AUC of the matching score on up to `max_queries` pairs.
double adversarial_auc(const Model<float>& model, const StageData& d, const std::vector<EncodedPair>& pairs,
                       const PoolCache& cache, const TrainConfig& cfg, std::uint64_t seed, int max_queries) {
  const auto qrm = adapter_params(model.params(), Task::qrm);
  const std::size_t count = std::min<std::size_t>(pairs.size(), static_cast<std::size_t>(max_queries));
  std::vector<double> pos(count), neg(count);
  const auto n = static_cast<long>(count);
#pragma omp parallel for schedule(dynamic, 2)
  for (long i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const auto g = sample_for(model, d, cache, p, cfg.m, !cfg.no_kg, 1, cfg.gen_max_len, rng);
    const auto e_q = model.sentence_embedding(p.query, Task::qrm);
    pos[static_cast<std::size_t>(i)] = match_score(qrm, e_q, model.sentence_embedding(p.response, Task::qrm));
    neg[static_cast<std::size_t>(i)] =
        match_score(qrm, e_q, model.sentence_embedding(encodable(strip_special(g.samples.front().ids)), Task::qrm));
  }
  return ranking_auc(pos, neg);
}

constexpr int kProbeQueries = 200;
constexpr int kAucQueries = 100;

Words to_words(const Ids& ids, const Vocab& vocab) { return decode_tokens(TokenSequence{ids}, vocab).words; }

std::string to_text(const Ids& ids, const Vocab& vocab) { return decode_tokens(TokenSequence{ids}, vocab).text(); }

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Logs

std::string log_header() { return "step,stage,epoch,loss,ce_loss,pg_loss,d_loss,alpha,valid,wall_s"; }

std::string format_log_row(const LogRow& r) {
  std::ostringstream os;
  os << r.step << ',' << r.stage << ',' << r.epoch << ',' << fmt(r.loss) << ',' << fmt(r.ce_loss) << ','
     << fmt(r.pg_loss) << ',' << fmt(r.d_loss) << ',' << fmt(r.alpha) << ',' << fmt(r.valid) << ','
     << fmt(r.wall_s);
  return os.str();
}

void append_log(const fs::path& path, const LogRow& row) {
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot open log " + path.string());
  if (fresh) f << log_header() << '\n';
  f << format_log_row(row) << '\n';
  std::cerr << row.stage << " epoch " << row.epoch << ": loss " << fmt(row.loss) << " valid " << fmt(row.valid)
            << " (" << fmt(std::round(row.wall_s * 10) / 10) << " s)\n";
}

json EvalReport::to_json() const {
  json j;
  j["generation"] = heronet::to_json(generation);
  j["retrieval"] = heronet::to_json(retrieval);
  j["bm25"] = heronet::to_json(bm25);
  j["adversarial_auc"] = adversarial_auc;
  j["queries"] = queries;
  j["m"] = m;
  j["n"] = n;
  return j;
}

// ---------------------------------------------------------------------------
// Stages

void gen_data(const TrainConfig& cfg, const fs::path& out) {
  cfg.validate();
  CorpusOptions opts;
  opts.n_topics = cfg.n_topics;
  const auto corpus = generate_synthetic_corpus(cfg.seed, cfg.n_train, cfg.n_eval, cfg.pool_size, opts);
  if (auto errors = validate_corpus(corpus); !errors.empty())
    throw std::runtime_error("generated corpus is invalid: " + errors.front());
  fs::create_directories(out);
  save_corpus(out, corpus);
  Vocab::build(corpus, cfg.vocab_max).save(out / "vocab.txt");
}

void run_warmup(const TrainConfig& cfg, const fs::path& out) {
  constexpr std::string_view stage = "warmup";
  cfg.validate();
  apply_threads(cfg);
  if (!data_exists(out)) gen_data(cfg, out);
  const StageData d = load_data(cfg, out);
  const StageClock clock;

  auto mc = cfg.model_config(d.vocab.size());
  mc.separate_sqd_encoder = false;
  auto params = init_params<float>(mc, derive_seed(cfg.seed, kInitStream));
  const Model<float> model(mc, params);

  // Knowledge for warm-up inputs: the response of the BM25-nearest pool
  // query, never the truth itself.
  const Bm25Index qidx = index_pool_queries(d.corpus.pool, d.vocab, cfg.max_seq_len);
  auto examples = [&](const std::vector<EncodedPair>& pairs) {
    std::vector<GenExample> out_ex;
    out_ex.reserve(pairs.size());
    for (const auto& p : pairs) {
      Ids input = splice_knowledge_ids(p.gen_query, {}, false, cfg.max_seq_len);
      if (!cfg.no_kg) {
        std::unordered_set<int> skip;
        if (auto it = d.by_response.find(p.response); it != d.by_response.end())
          skip.insert(it->second.begin(), it->second.end());
        const auto top = qidx.top_k(p.query, 1, skip);
        if (!top.empty()) input = splice_knowledge_ids(p.gen_query, d.pool.responses[top.front()], true, cfg.max_seq_len);
      }
      out_ex.push_back({std::move(input), p.response});
    }
    return out_ex;
  };
  const auto train = examples(d.train);
  const auto valid = examples(d.valid);

  Rng rng(derive_seed(cfg.seed, stage_stream(stage)));
  Adam<float> opt;
  long step = 0;
  auto row = make_row(stage, step, 0, clock);
  row.valid = mean_ce(model, valid);
  append_log(out / "log.csv", row);
  for (int epoch = 1; epoch <= cfg.epochs_warmup; ++epoch) {
    const auto order = shuffled_indices(train.size(), rng);
    double total = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.bs)) {
      std::vector<GenExample> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.bs); ++i) batch.push_back(train[order[i]]);
      total += warmup_step(model, params, opt, batch, cfg.warmup_lr);
      ++steps;
      ++step;
    }
    row = make_row(stage, step, epoch, clock);
    row.loss = row.ce_loss = total / steps;
    row.valid = mean_ce(model, valid);
    append_log(out / "log.csv", row);
  }
  save_stage(cfg, out, stage, step, params);
}

void run_pretrain_retrieval(const TrainConfig& cfg, const fs::path& out) {
  constexpr std::string_view stage = "pretrain-retrieval";
  cfg.validate();
  apply_threads(cfg);
  auto ckpt = require_checkpoint(cfg, out, "warmup", stage);
  const StageData d = load_data(cfg, out);
  const StageClock clock;

  auto& params = ckpt.params;
  if (cfg.no_multi_learning && !params.contains("enc2.tok_emb")) {
    std::vector<std::pair<std::string, Tensor<float>>> copies;
    params.for_each([&](const Param<float>& p) {
      if (has_prefix(p.name, "enc.")) copies.emplace_back("enc2." + p.name.substr(4), p.value);
    });
    for (auto& [name, value] : copies) params.add(name, std::move(value));
  }
  const auto mc = model_config_for(cfg, d.vocab, params);
  const Model<float> model(mc, params);
  const Bm25Index qidx = index_pool_queries(d.corpus.pool, d.vocab, cfg.max_seq_len);

  Rng rng(derive_seed(cfg.seed, stage_stream(stage)));
  Adam<float> sqd_opt, qrm_opt;
  long step = ckpt.step;
  const std::uint64_t probe_seed = derive_seed(cfg.seed, kProbeStream);
  auto row = make_row(stage, step, 0, clock);
  row.valid = selection_probe_impl(model, d, d.valid, build_pool_cache(model, d.pool), cfg.eval_candidates,
                                   probe_seed, kProbeQueries)
                  .hit5;
  append_log(out / "log.csv", row);
  for (int epoch = 1; epoch <= cfg.epochs_multitask; ++epoch) {
    const PoolCache cache = build_pool_cache(model, d.pool);
    const bool with_qrm = epoch >= 2 || cfg.epochs_multitask == 1;
    const auto order = shuffled_indices(d.train.size(), rng);
    double sqd_total = 0.0, qrm_total = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.bs)) {
      std::vector<Ids> anchors;
      std::vector<std::pair<Ids, Ids>> pairs;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.bs); ++i) {
        anchors.push_back(d.train[order[i]].query);
        pairs.emplace_back(d.train[order[i]].query, d.train[order[i]].response);
      }
      const auto tb = mine_sqd_batch(anchors, d.pool, qidx, cfg.train_negatives, cfg.dropout_rate, rng);
      sqd_total += sqd_step(model, params, sqd_opt, tb, {cfg.sqd_margin, cfg.retrieval_lr});
      if (with_qrm) {
        const auto mb = mine_qrm_batch(model, pairs, d.pool, cache, {cfg.train_negatives, cfg.qrm_random_negatives}, rng);
        qrm_total += qrm_step(model, params, qrm_opt, mb, cfg.retrieval_lr);
      }
      ++steps;
      ++step;
    }
    row = make_row(stage, step, epoch, clock);
    row.loss = sqd_total / steps;
    if (with_qrm) row.d_loss = qrm_total / steps;
    row.valid = selection_probe_impl(model, d, d.valid, build_pool_cache(model, d.pool), cfg.eval_candidates,
                                     probe_seed, kProbeQueries)
                    .hit5;
    append_log(out / "log.csv", row);
  }
  save_stage(cfg, out, stage, step, params);
}

void run_adv_train(const TrainConfig& cfg, const fs::path& out) {
  constexpr std::string_view stage = "adv-train";
  cfg.validate();
  apply_threads(cfg);
  auto ckpt = require_checkpoint(cfg, out, "pretrain-retrieval", stage);
  const StageData d = load_data(cfg, out);
  const StageClock clock;

  auto& params = ckpt.params;
  const Model<float> model(model_config_for(cfg, d.vocab, params), params);
  const double alpha = cfg.no_reward ? 0.0 : cfg.alpha;
  const HingeConfig hinge{cfg.margin1, cfg.margin2, cfg.lambda};
  const int rollouts = std::max(cfg.n, 1);

  Rng rng(derive_seed(cfg.seed, stage_stream(stage)));
  Adam<float> g_opt, d_opt;
  long step = ckpt.step;
  const std::uint64_t auc_seed = derive_seed(cfg.seed, kProbeStream + 1);
  for (int epoch = 1; epoch <= cfg.epochs_adversarial; ++epoch) {
    const PoolCache cache = build_pool_cache(model, d.pool);
    auto order = shuffled_indices(d.train.size(), rng);
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(cfg.adv_queries_per_epoch)));
    double fused = 0.0, ce = 0.0, pg = 0.0, dl = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.bs)) {
      const auto qrm = adapter_params(model.params(), Task::qrm);
      std::vector<Rollout> batch;
      std::vector<DiscExample> disc;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.bs); ++i) {
        const auto& p = d.train[order[i]];
        auto g = sample_for(model, d, cache, p, cfg.m, !cfg.no_kg, rollouts, cfg.gen_max_len, rng);
        const auto e_q = model.sentence_embedding(p.query, Task::qrm);
        Rollout r{g.input, p.response, g.samples, {}};
        DiscExample ex{p.query, p.response, {}, {}};
        for (const auto& s : g.samples) {
          const auto text = encodable(strip_special(s.ids));
          r.rewards.push_back(match_score(qrm, e_q, model.sentence_embedding(text, Task::qrm)));
          if (cfg.n > 0) ex.generated.push_back(strip_special(s.ids));
        }
        for (int id : g.retrieved) ex.retrieved.push_back(d.pool.responses[id]);
        batch.push_back(std::move(r));
        if (!ex.retrieved.empty() || !ex.generated.empty()) disc.push_back(std::move(ex));
      }
      const auto rep = pg_step(model, params, g_opt, batch, cfg.g_lr, alpha);
      fused += rep.fused;
      ce += rep.ce_loss;
      pg += rep.pg_loss;
      if (!disc.empty()) dl += disc_step(model, params, d_opt, disc, hinge, cfg.d_lr);
      ++steps;
      ++step;
    }
    auto row = make_row(stage, step, epoch, clock);
    row.loss = fused / steps;
    row.ce_loss = ce / steps;
    row.pg_loss = pg / steps;
    row.d_loss = dl / steps;
    row.alpha = alpha;
    row.valid = adversarial_auc(model, d, d.valid, build_pool_cache(model, d.pool), cfg, auc_seed, kAucQueries);
    append_log(out / "log.csv", row);
  }
  save_stage(cfg, out, stage, step, params);
}

void run_rerank_train(const TrainConfig& cfg, const fs::path& data_dir, const fs::path& in_dir,
                      const fs::path& out_dir) {
  constexpr std::string_view stage = "rerank-train";
  cfg.validate();
  apply_threads(cfg);
  auto ckpt = require_checkpoint(cfg, in_dir, "adv-train", stage);
  const StageData d = load_data(cfg, data_dir);
  const StageClock clock;
  fs::create_directories(out_dir);

  auto& params = ckpt.params;
  const Model<float> model(model_config_for(cfg, d.vocab, params), params);
  const Bm25Index ridx = index_pool_responses(d.corpus.pool, d.vocab, cfg.max_seq_len);
  // The encoder is frozen, so pool embeddings stay valid for the whole stage.
  const PoolCache cache = build_pool_cache(model, d.pool);
  auto frozen_sum = [&] {
    std::uint64_t h = 0;
    params.for_each([&](const Param<float>& p) {
      if (has_prefix(p.name, "qrm.")) return;
      for (float v : p.value.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        h = splitmix64(h ^ bits);
      }
    });
    return h;
  };
  const auto frozen_before = frozen_sum();

  RerankEpochOptions opts;
  opts.m = cfg.m;
  opts.n = cfg.n;
  opts.bs = cfg.bs;
  opts.kg = !cfg.no_kg;
  opts.max_new = cfg.gen_max_len;
  opts.lr = cfg.rerank_lr;

  Rng rng(derive_seed(cfg.seed, stage_stream(stage)));
  Adam<float> opt;
  long step = ckpt.step;
  const std::uint64_t probe_seed = derive_seed(cfg.seed, kProbeStream);
  auto row = make_row(stage, step, 0, clock);
  row.valid = selection_probe_impl(model, d, d.valid, cache, cfg.eval_candidates, probe_seed, kProbeQueries).mrr;
  append_log(out_dir / "log.csv", row);
  for (int epoch = 1; epoch <= cfg.epochs_rerank; ++epoch) {
    auto order = shuffled_indices(d.train.size(), rng);
    order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(cfg.rerank_queries_per_epoch)));
    std::vector<RerankTrainQuery> queries;
    queries.reserve(order.size());
    for (auto i : order) queries.push_back({d.train[i].query, d.train[i].gen_query, d.train[i].response});
    row = make_row(stage, step, epoch, clock);
    row.loss = rerank_train_epoch(model, params, opt, queries, d.pool, cache, ridx, opts, rng);
    step += static_cast<long>((queries.size() + cfg.bs - 1) / cfg.bs);
    row.step = step;
    row.valid = selection_probe_impl(model, d, d.valid, cache, cfg.eval_candidates, probe_seed, kProbeQueries).mrr;
    row.wall_s = clock.seconds();
    append_log(out_dir / "log.csv", row);
  }
  if (frozen_sum() != frozen_before) throw std::logic_error("rerank-train changed frozen parameters");
  save_stage(cfg, out_dir, stage, step, params);
}

EvalReport run_evaluate(const TrainConfig& cfg, const fs::path& data_dir, const fs::path& ckpt_dir) {
  cfg.validate();
  apply_threads(cfg);
  auto ckpt = require_checkpoint(cfg, ckpt_dir, "rerank-train", "evaluate");
  const StageData d = load_data(cfg, data_dir);
  const auto& params = ckpt.params;
  const Model<float> model(model_config_for(cfg, d.vocab, params), params);
  const auto qrm = adapter_params(params, Task::qrm);
  const PoolCache cache = build_pool_cache(model, d.pool);
  const Bm25Index ridx = index_pool_responses(d.corpus.pool, d.vocab, cfg.max_seq_len);

  const std::size_t count =
      cfg.eval_queries > 0 ? std::min<std::size_t>(d.test.size(), cfg.eval_queries) : d.test.size();
  std::vector<Words> cands(count), refs(count);
  std::vector<RankOutcome> ranks(count), bm25_ranks(count);
  std::vector<double> truth_scores(count);
  std::vector<std::vector<double>> gen_scores(count);
  std::vector<json> traces(count);
  const std::uint64_t seed = derive_seed(cfg.seed, kEvalStream);
  const auto n = static_cast<long>(count);

#pragma omp parallel for schedule(dynamic, 1)
  for (long qi = 0; qi < n; ++qi) {
    const auto i = static_cast<std::size_t>(qi);
    const auto& p = d.test[i];
    Rng rng(derive_seed(seed, i));

    // Candidate set: the truth's pool entry plus distractors with other responses.
    const auto truth_id = d.by_response.at(p.response).front();
    auto distractors = d.eligible_for(p.response);
    shuffle(distractors, rng);
    distractors.resize(std::min<std::size_t>(distractors.size(), static_cast<std::size_t>(cfg.eval_candidates - 1)));
    std::sort(distractors.begin(), distractors.end());
    std::vector<int> with_truth = distractors;
    with_truth.insert(std::lower_bound(with_truth.begin(), with_truth.end(), truth_id), truth_id);

    const auto e_q = model.sentence_embedding(p.query, Task::qrm);
    auto score_of = [&](const Ids& r) { return match_score(qrm, e_q, model.sentence_embedding(encodable(r), Task::qrm)); };

    // Generation: retrieval without the truth, knowledge splice, n responses.
    std::vector<Candidate> gen_cands;
    std::vector<Ids> generated;
    Ids knowledge_input;
    {
      std::vector<int> retrieved;
      if (cfg.m > 0)
        for (const auto& r : retrieve_top_m(model, p.query, cache, cfg.m, distractors)) retrieved.push_back(r.pool_id);
      const Ids input = !cfg.no_kg && !retrieved.empty()
                            ? splice_knowledge_ids(p.gen_query, d.pool.responses[retrieved.front()], true, cfg.max_seq_len)
                            : splice_knowledge_ids(p.gen_query, {}, false, cfg.max_seq_len);
      if (cfg.n > 0) {
        const auto hs = model.hidden(input);
        for (int j = 0; j < cfg.n; ++j) {
          const auto seq = model.sample_sequence(hs, SampleMode{j == 0 ? 0.0 : 1.0}, &rng, cfg.gen_max_len);
          generated.push_back(strip_special(seq.ids));
        }
      }
      for (int id : retrieved) gen_cands.push_back({d.pool.responses[id], Provenance::retrieved});
      for (const auto& g : generated) gen_cands.push_back({g, Provenance::generated});
      const auto ranked = rerank(model, p.query, dedupe_candidates(gen_cands));
      cands[i] = to_words(ranked.entries.front().response, d.vocab);
      refs[i] = to_words(p.response, d.vocab);
    }

    // Retrieval: reranked head (retrieved with the truth available, plus the
    // generated responses), then the remaining candidates by score.
    std::vector<Candidate> head_cands;
    std::vector<int> retrieved;
    if (cfg.m > 0)
      for (const auto& r : retrieve_top_m(model, p.query, cache, cfg.m, with_truth)) {
        retrieved.push_back(r.pool_id);
        head_cands.push_back({d.pool.responses[r.pool_id],
                              r.pool_id == truth_id ? Provenance::truth : Provenance::retrieved});
      }
    for (const auto& g : generated) head_cands.push_back({g, Provenance::generated});
    const auto head = rerank(model, p.query, dedupe_candidates(head_cands));
    std::map<Ids, bool> placed;
    for (const auto& e : head.entries) placed[e.response] = true;
    std::vector<std::pair<double, int>> tail;
    for (int id : with_truth) {
      if (placed.count(d.pool.responses[id])) continue;
      tail.emplace_back(match_score(qrm, e_q, cache.qrm_responses[id]), id);
    }
    std::sort(tail.begin(), tail.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    int rank = head.truth_rank();
    if (rank == 0)
      for (std::size_t t = 0; t < tail.size(); ++t)
        if (tail[t].second == truth_id) rank = static_cast<int>(head.entries.size() + t) + 1;
    ranks[i] = {rank, static_cast<int>(head.entries.size() + tail.size())};

    // BM25 baseline over the same candidate responses.
    std::vector<std::pair<double, int>> bm;
    for (int id : with_truth) bm.emplace_back(ridx.score(p.query, id), id);
    std::sort(bm.begin(), bm.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t t = 0; t < bm.size(); ++t)
      if (bm[t].second == truth_id) bm25_ranks[i] = {static_cast<int>(t) + 1, static_cast<int>(bm.size())};

    truth_scores[i] = score_of(p.response);
    for (const auto& g : generated) gen_scores[i].push_back(score_of(g));

    json trace;
    trace["query_id"] = qi;
    trace["truth_rank"] = rank;
    json list = json::array();
    for (std::size_t r = 0; r < head.entries.size(); ++r)
      list.push_back({{"rank", r + 1},
                      {"score", head.entries[r].score},
                      {"provenance", provenance_name(head.entries[r].provenance)},
                      {"response", to_text(head.entries[r].response, d.vocab)}});
    trace["candidates"] = std::move(list);
    traces[i] = std::move(trace);
  }

  EvalReport rep;
  rep.queries = static_cast<int>(count);
  rep.m = cfg.m;
  rep.n = cfg.n;
  rep.generation = generation_metrics(cands, refs);
  rep.retrieval = retrieval_metrics(ranks);
  rep.bm25 = retrieval_metrics(bm25_ranks);
  std::vector<double> negatives;
  for (const auto& g : gen_scores) negatives.insert(negatives.end(), g.begin(), g.end());
  rep.adversarial_auc = negatives.empty() ? kNan : ranking_auc(truth_scores, negatives);

  fs::create_directories(ckpt_dir);
  {
    std::ofstream f(ckpt_dir / "report.json");
    json j = rep.to_json();
    if (negatives.empty()) j["adversarial_auc"] = nullptr;
    f << j.dump(2) << '\n';
  }
  {
    std::ofstream f(ckpt_dir / "ranking_trace.jsonl");
    for (const auto& t : traces) f << t.dump() << '\n';
  }
  return rep;
}

RetrReport selection_probe(const TrainConfig& cfg, const fs::path& data_dir, const fs::path& ckpt_dir,
                           std::string_view stage, std::string_view split) {
  cfg.validate();
  apply_threads(cfg);
  auto ckpt = require_checkpoint(cfg, ckpt_dir, stage, "selection probe");
  const StageData d = load_data(cfg, data_dir);
  const Model<float> model(model_config_for(cfg, d.vocab, ckpt.params), ckpt.params);
  const auto& pairs = split == "valid" ? d.valid : split == "test" ? d.test : d.train;
  return selection_probe_impl(model, d, pairs, build_pool_cache(model, d.pool), cfg.eval_candidates,
                              derive_seed(cfg.seed, kProbeStream), 0);
}

std::string sweep_header() { return "m,n,bleu,rouge_l,meteor,chrf,mrr,acc,hit@5,hit@10,hit@50"; }

std::string format_sweep_row(const SweepRow& r) {
  const auto& g = r.report.generation;
  const auto& t = r.report.retrieval;
  std::ostringstream os;
  os << r.m << ',' << r.n << ',' << fmt(g.bleu) << ',' << fmt(g.rouge_l) << ',' << fmt(g.meteor) << ','
     << fmt(g.chrf) << ',' << fmt(t.mrr) << ',' << fmt(t.acc) << ',' << fmt(t.hit5) << ',' << fmt(t.hit10) << ','
     << fmt(t.hit50);
  return os.str();
}

std::vector<SweepRow> run_sweep(const TrainConfig& cfg, const fs::path& out, const std::vector<int>& m_values,
                                const std::vector<int>& n_values) {
  if (m_values.empty() || n_values.empty()) throw ConfigError("sweep: empty m or n grid");
  require_checkpoint(cfg, out, "adv-train", "sweep");
  std::vector<SweepRow> rows;
  for (int m : m_values)
    for (int n : n_values) {
      TrainConfig c = cfg;
      c.m = m;
      c.n = n;
      c.k = std::min(c.k, m + n + 1);
      c.validate();
      const auto dir = out / "sweep" / ("m" + std::to_string(m) + "_n" + std::to_string(n));
      run_rerank_train(c, out, out, dir);
      rows.push_back({m, n, run_evaluate(c, out, dir)});
    }
  std::ofstream f(out / "sweep.csv");
  f << sweep_header() << '\n';
  for (const auto& r : rows) f << format_sweep_row(r) << '\n';
  return rows;
}

void run_chat(const TrainConfig& cfg, const fs::path& out, std::istream& in, std::ostream& os) {
  cfg.validate();
  apply_threads(cfg);
  auto ckpt = require_checkpoint(cfg, out, "rerank-train", "chat");
  const StageData d = load_data(cfg, out);
  const auto& params = ckpt.params;
  const Model<float> model(model_config_for(cfg, d.vocab, params), params);
  const PoolCache cache = build_pool_cache(model, d.pool);

  std::string line;
  while (std::getline(in, line)) {
    const auto q = Utterance::parse(line);
    if (q.empty()) {
      os << "(empty line skipped)\n";
      continue;
    }
    const Ids query = encode_text(q, d.vocab, cfg.max_seq_len).ids;
    Rng rng(derive_seed(cfg.seed, hash_string(q.text())));
    std::vector<Candidate> cands;
    std::vector<int> retrieved;
    if (cfg.m > 0)
      for (const auto& r : retrieve_top_m(model, query, cache, cfg.m)) {
        retrieved.push_back(r.pool_id);
        cands.push_back({d.pool.responses[r.pool_id], Provenance::retrieved});
      }
    if (cfg.n > 0) {
      const Ids input = !cfg.no_kg && !retrieved.empty()
                            ? splice_knowledge_ids(query, d.pool.responses[retrieved.front()], true, cfg.max_seq_len)
                            : splice_knowledge_ids(query, {}, false, cfg.max_seq_len);
      const auto hs = model.hidden(input);
      for (int j = 0; j < cfg.n; ++j)
        cands.push_back({strip_special(model.sample_sequence(hs, SampleMode{j == 0 ? 0.0 : 1.0}, &rng,
                                                             cfg.gen_max_len).ids),
                         Provenance::generated});
    }
    const auto ranked = rerank(model, query, dedupe_candidates(cands));
    const auto sel = select_outputs(ranked, std::min<int>(cfg.k, static_cast<int>(ranked.entries.size())));
    char score[32];
    std::snprintf(score, sizeof score, "%.4f", sel.generated_result.score);
    os << "response: " << to_text(sel.generated_result.response, d.vocab) << "  [" << score << ", "
       << provenance_name(sel.generated_result.provenance) << "]\n";
    for (std::size_t r = 0; r < sel.retrieved_results.size(); ++r) {
      const auto& e = sel.retrieved_results[r];
      std::snprintf(score, sizeof score, "%.4f", e.score);
      os << "  " << r + 1 << ". " << score << "  " << provenance_name(e.provenance) << "  "
         << to_text(e.response, d.vocab) << '\n';
    }
    os.flush();
  }
}

void run_stage(std::string_view stage, const TrainConfig& cfg, const fs::path& out) {
  if (stage == "gen-data") return gen_data(cfg, out);
  if (stage == "warmup") return run_warmup(cfg, out);
  if (stage == "pretrain-retrieval") return run_pretrain_retrieval(cfg, out);
  if (stage == "adv-train") return run_adv_train(cfg, out);
  if (stage == "rerank-train") return run_rerank_train(cfg, out, out, out);
  if (stage == "evaluate") {
    run_evaluate(cfg, out, out);
    return;
  }
  throw std::invalid_argument("unknown stage: " + std::string(stage));
}

}  // namespace heronet
