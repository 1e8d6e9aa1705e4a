// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "heronet/rerank.hpp"
#include "support.hpp"

using namespace heronet;

namespace {

struct Scorer {
  Rng rng{19};
  AdapterParams qrm;
  Scorer() {
    auto t = [&](int r, int c) {
      Tensor<double> x(r, c);
      for (auto& v : x.data) v = standard_normal(rng);
      return x;
    };
    qrm.task = Task::qrm;
    qrm.w = t(8, 4);
    qrm.b = t(1, 4);
    qrm.ln_g = t(1, 4);
    qrm.ln_b = t(1, 4);
    qrm.w_m = t(12, 1);
  }
  std::vector<double> vec() {
    std::vector<double> v(8);
    for (auto& x : v) x = standard_normal(rng);
    return v;
  }
};

}  // namespace

TEST_CASE("rerank ordering" * doctest::test_suite("oracle")) {
  Scorer s;
  const auto q = s.vec();
  SUBCASE("single candidate is rank one") {
    const std::vector<Candidate> c{{{7}, Provenance::generated}};
    const auto r = rerank(s.qrm, q, c, {s.vec()});
    REQUIRE(r.entries.size() == 1);
    CHECK(r.entries[0].response == Ids{7});
  }
  SUBCASE("equal scores keep input order") {
    const auto e = s.vec();
    const std::vector<Candidate> c{{{7}, Provenance::retrieved}, {{8}, Provenance::bm25}, {{9}, Provenance::truth}};
    const auto r = rerank(s.qrm, q, c, {e, e, e});
    CHECK(r.entries[0].index == 0);
    CHECK(r.entries[1].index == 1);
    CHECK(r.entries[2].index == 2);
    CHECK(r.truth_rank() == 3);
  }
  SUBCASE("ten candidates against a score-then-sort oracle") {
    for (int t = 0; t < 20; ++t) {
      std::vector<Candidate> c;
      std::vector<SentenceEmbedding> e;
      for (int i = 0; i < 10; ++i) {
        c.push_back({{7 + i}, i == 4 ? Provenance::truth : Provenance::retrieved});
        e.push_back(s.vec());
      }
      std::vector<double> score;
      for (const auto& x : e) score.push_back(match_score(s.qrm, q, x));
      std::vector<int> order(10);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] > score[b]; });
      const auto r = rerank(s.qrm, q, c, e);
      std::set<int> seen;
      for (int i = 0; i < 10; ++i) {
        CHECK(r.entries[i].index == order[i]);
        CHECK(r.entries[i].score == score[order[i]]);
        CHECK(r.entries[i].response == c[order[i]].response);
        seen.insert(r.entries[i].index);
      }
      CHECK(seen.size() == 10);
      CHECK(r.truth_rank() == 1 + static_cast<int>(std::find(order.begin(), order.end(), 4) - order.begin()));
    }
  }
  SUBCASE("mismatched inputs are rejected") {
    CHECK_THROWS(rerank(s.qrm, q, {}, {}));
    CHECK_THROWS(rerank(s.qrm, q, {{{7}, Provenance::retrieved}}, {}));
  }
}

TEST_CASE("output selection") {
  RankedCandidates r;
  r.entries = {{{7}, 0.9, Provenance::generated, 2},
               {{8}, 0.7, Provenance::truth, 0},
               {{9}, 0.5, Provenance::bm25, 1},
               {{10}, 0.1, Provenance::retrieved, 3}};
  const auto one = select_outputs(r, 1);
  CHECK(one.generated_result.response == Ids{7});
  REQUIRE(one.retrieved_results.size() == 1);
  CHECK(one.retrieved_results[0].response == Ids{7});
  const auto all = select_outputs(r, 4);
  REQUIRE(all.retrieved_results.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(all.retrieved_results[i].response == r.entries[i].response);
    CHECK(all.retrieved_results[i].provenance == r.entries[i].provenance);
  }
  CHECK(all.generated_result.provenance == Provenance::generated);
  CHECK_THROWS(select_outputs(r, 0));
  CHECK_THROWS(select_outputs(r, 5));
  CHECK(std::string(provenance_name(Provenance::bm25)) == "bm25");
}

TEST_CASE("candidate de-duplication") {
  const std::vector<Candidate> c{{{7, 8}, Provenance::retrieved},
                                 {{9}, Provenance::generated},
                                 {{7, 8}, Provenance::truth},
                                 {{9}, Provenance::bm25}};
  const auto d = dedupe_candidates(c);
  REQUIRE(d.size() == 2);
  CHECK(d[0].response == Ids{7, 8});
  CHECK(d[0].provenance == Provenance::truth);
  CHECK(d[1].provenance == Provenance::generated);
}

TEST_CASE("rerank loss equals a BCE oracle") {
  const auto cfg = test::toy_config(12);
  const auto params = init_params<double>(cfg, 3);
  const Model<double> model(cfg, params);
  Rng rng(4);
  auto vec = [&] {
    SentenceEmbedding v(8);
    for (auto& x : v) x = standard_normal(rng);
    return v;
  };
  std::vector<RerankExample> batch(2);
  for (auto& ex : batch) {
    ex.query = vec();
    for (int i = 0; i < 3; ++i) {
      ex.candidates.push_back(vec());
      ex.labels.push_back(i == 1);
    }
  }
  const auto qrm = adapter_params(params, Task::qrm);
  double want = 0.0;
  for (const auto& ex : batch)
    for (std::size_t i = 0; i < 3; ++i) {
      const double s = match_score(qrm, ex.query, ex.candidates[i]);
      want -= ex.labels[i] ? std::log(s) : std::log(1.0 - s);
    }
  want /= 6.0;
  Tape<double> tape;
  CHECK(std::abs(tape.scalar(rerank_loss(tape, model, std::span<const RerankExample>(batch))) - want) <= 1e-10);
}

TEST_CASE("re-rank epochs touch only the qrm adapter") {
  const auto corpus = generate_synthetic_corpus(3, 40, 10, 60);
  const auto vocab = Vocab::build(corpus, 256);
  auto cfg = test::toy_config(vocab.size());
  cfg.max_seq_len = 24;
  auto params = init_params<float>(cfg, 5);
  const Model<float> model(cfg, params);
  const auto pool = encode_pool(corpus.pool, vocab, cfg.max_seq_len);
  const auto cache = build_pool_cache(model, pool);
  const auto response_index = index_pool_responses(corpus.pool, vocab, cfg.max_seq_len);
  std::vector<RerankTrainQuery> queries;
  for (std::size_t i = 0; i < 6; ++i) {
    const Ids q = encode_text(corpus.train[i].query, vocab, cfg.max_seq_len).ids;
    queries.push_back({q, q, encode_text(corpus.train[i].response, vocab, cfg.max_seq_len).ids});
  }
  auto frozen = [&] {
    return std::vector<std::uint64_t>{params.checksum("enc."), params.checksum("dec."), params.checksum("sqd.")};
  };
  for (const auto& [m, n] : std::vector<std::pair<int, int>>{{3, 2}, {0, 0}}) {
    CAPTURE(m);
    CAPTURE(n);
    const auto before = frozen();
    const auto qrm_before = params.checksum("qrm.");
    Adam<float> opt;
    Rng rng(7);
    RerankEpochOptions o;
    o.m = m;
    o.n = n;
    o.bs = 4;
    o.max_new = 6;
    o.lr = 1e-3;
    const double loss = rerank_train_epoch(model, params, opt, queries, pool, cache, response_index, o, rng);
    CHECK(std::isfinite(loss));
    CHECK(loss > 0.0);
    CHECK(frozen() == before);
    CHECK(params.checksum("qrm.") != qrm_before);
  }
}
