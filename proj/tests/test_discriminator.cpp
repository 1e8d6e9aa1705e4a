// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "heronet/discriminator.hpp"
#include "heronet/generation.hpp"
#include "support.hpp"

using namespace heronet;

namespace {

double score_of(const Model<float>& model, const Ids& q, const Ids& r) {
  return match_score(adapter_params(model.params(), Task::qrm), model.sentence_embedding(q, Task::qrm),
                     model.sentence_embedding(encodable(r), Task::qrm));
}

}  // namespace

TEST_CASE("hinge loss scalar cases") {
  const HingeConfig half{0.5, 0.5, 0.0};
  const double eps = 1e-12;
  CHECK(hinge_loss(1.0 - eps, std::vector<double>{eps, eps}, std::vector<double>{eps}, half, 0.0) == 0.0);
  // Only the retrieved term is active: 0.5 - 0.6 + 0.4 = 0.3.
  CHECK(hinge_loss(0.6, std::vector<double>{0.3, 0.5}, std::vector<double>{0.0}, half, 0.0) ==
        doctest::Approx(0.3).epsilon(1e-12));
  const HingeConfig reg{0.5, 0.5, 0.01};
  CHECK(hinge_loss(1.0, std::vector<double>{0.0}, std::vector<double>{0.0}, reg, 3.0 * 3.0 + 4.0 * 4.0) ==
        doctest::Approx(0.25).epsilon(1e-12));
  CHECK_THROWS(hinge_loss(0.5, std::vector<double>{}, std::vector<double>{0.1}, half, 0.0));
  CHECK_THROWS(hinge_loss(0.5, std::vector<double>{0.1}, std::vector<double>{}, half, 0.0));
}

TEST_CASE("hinge loss properties") {
  Rng rng(3);
  const HingeConfig cfg{0.5, 0.5, 0.3};
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> ret(1 + uniform_index(rng, 4)), gen(1 + uniform_index(rng, 4));
    for (auto& x : ret) x = uniform01(rng);
    for (auto& x : gen) x = uniform01(rng);
    const double norm = 5.0 * uniform01(rng);
    const double s = uniform01(rng);
    const double l = hinge_loss(s, ret, gen, cfg, norm);
    CHECK(l >= cfg.lambda * norm);
    CHECK(hinge_loss(std::min(1.0, s + 0.1), ret, gen, cfg, norm) <= l);
  }
  CHECK_THROWS((HingeConfig{0.0, 0.5, 0.0}).validate());
  CHECK_THROWS((HingeConfig{0.5, 0.5, -1.0}).validate());
}

TEST_CASE("regularizer covers only the qrm adapter") {
  ParamStore<double> p;
  Tensor<double> w(1, 2);
  w.data = {3.0, 4.0};
  p.add("qrm.W", w);
  p.add("enc.tok_emb", Tensor<double>(2, 2, 10.0));
  CHECK(qrm_sq_norm(p) == 25.0);
}

TEST_CASE("disc_loss agrees with the scalar hinge") {
  const auto cfg = test::toy_config(14);
  const auto params = init_params<double>(cfg, 2);
  const Model<double> model(cfg, params);
  Rng rng(8);
  DiscExample ex;
  ex.query = test::random_ids(rng, 4, 14);
  ex.positive = test::random_ids(rng, 3, 14);
  ex.retrieved = {test::random_ids(rng, 3, 14), test::random_ids(rng, 5, 14)};
  ex.generated = {test::random_ids(rng, 2, 14), {}};
  const HingeConfig h{0.5, 0.7, 1e-3};
  const auto qrm = adapter_params(params, Task::qrm);
  auto s = [&](const Ids& r) {
    return match_score(qrm, model.sentence_embedding(ex.query, Task::qrm),
                       model.sentence_embedding(encodable(r), Task::qrm));
  };
  std::vector<double> ret, gen;
  for (const auto& r : ex.retrieved) ret.push_back(s(r));
  for (const auto& r : ex.generated) gen.push_back(s(r));
  const double want = hinge_loss(s(ex.positive), ret, gen, h, qrm_sq_norm(params));
  Tape<double> tape;
  const std::vector<DiscExample> batch{ex};
  CHECK(std::abs(tape.scalar(disc_loss(tape, model, std::span<const DiscExample>(batch), h)) - want) <= 1e-10);

  SUBCASE("an empty side is left out") {
    auto only_ret = ex;
    only_ret.generated.clear();
    Tape<double> t2;
    const std::vector<DiscExample> b2{only_ret};
    double mean_ret = 0.0;
    for (double x : ret) mean_ret += x / static_cast<double>(ret.size());
    const double w2 = std::max(0.0, 0.5 - s(ex.positive) + mean_ret) + 1e-3 * qrm_sq_norm(params);
    CHECK(std::abs(t2.scalar(disc_loss(t2, model, std::span<const DiscExample>(b2), h)) - w2) <= 1e-10);
  }
  SUBCASE("no negatives at all is rejected") {
    auto none = ex;
    none.retrieved.clear();
    none.generated.clear();
    Tape<double> t3;
    const std::vector<DiscExample> b3{none};
    CHECK_THROWS(disc_loss(t3, model, std::span<const DiscExample>(b3), h));
  }
}

TEST_CASE("a satisfied batch changes only the regularized adapter") {
  const auto cfg = test::toy_config(14);
  auto params = init_params<float>(cfg, 4);
  const Model<float> model(cfg, params);
  Rng rng(12);
  const Ids q = test::random_ids(rng, 4, 14);
  std::vector<std::pair<double, Ids>> scored;
  for (int i = 0; i < 6; ++i) {
    const Ids r = test::random_ids(rng, 3, 14);
    scored.push_back({score_of(model, q, r), r});
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const double gap = scored[0].first - scored[1].first;
  REQUIRE(gap > 0.0);
  DiscExample ex{q, scored[0].second, {scored[1].second, scored[2].second}, {scored[3].second}};
  const HingeConfig h{0.5 * gap, 0.5 * gap, 1e-2};
  const auto enc_before = params.checksum("enc.");
  const auto qrm_before = params.checksum("qrm.");
  const auto dec_before = params.checksum("dec.");
  Adam<float> opt;
  const std::vector<DiscExample> batch{ex};
  const double loss = disc_step(model, params, opt, batch, h, 1e-3);
  CHECK(loss == doctest::Approx(1e-2 * qrm_sq_norm(init_params<float>(cfg, 4))).epsilon(1e-5));
  CHECK(params.checksum("enc.") == enc_before);
  CHECK(params.checksum("dec.") == dec_before);
  CHECK(params.checksum("qrm.") != qrm_before);
}

TEST_CASE("discriminator steps widen the positive margin") {
  const auto cfg = test::toy_config(14);
  auto params = init_params<float>(cfg, 6);
  const Model<float> model(cfg, params);
  Rng rng(15);
  std::vector<DiscExample> batch;
  for (int i = 0; i < 4; ++i) {
    DiscExample ex;
    ex.query = test::random_ids(rng, 4, 14);
    ex.positive = test::random_ids(rng, 4, 14);
    ex.retrieved = {test::random_ids(rng, 4, 14), test::random_ids(rng, 4, 14)};
    ex.generated = {test::random_ids(rng, 3, 14)};
    batch.push_back(ex);
  }
  auto margin = [&] {
    double total = 0.0;
    for (const auto& ex : batch) {
      double worst = 0.0;
      for (const auto* set : {&ex.retrieved, &ex.generated})
        for (const auto& r : *set) worst = std::max(worst, score_of(model, ex.query, r));
      total += score_of(model, ex.query, ex.positive) - worst;
    }
    return total;
  };
  Adam<float> opt;
  const HingeConfig h{0.5, 0.5, 1e-4};
  double prev = margin();
  int improving = 0;
  for (int s = 0; s < 20; ++s) {
    disc_step(model, params, opt, batch, h, 1e-3);
    const double now = margin();
    improving += now > prev;
    prev = now;
  }
  CHECK(improving >= 15);
}

TEST_CASE("alternating generator and discriminator updates stay finite") {
  const auto corpus = generate_synthetic_corpus(9, 40, 10, 40);
  const auto vocab = Vocab::build(corpus, 256);
  auto cfg = test::toy_config(vocab.size());
  cfg.max_seq_len = 16;
  auto params = init_params<float>(cfg, 10);
  const Model<float> model(cfg, params);
  const auto pool = encode_pool(corpus.pool, vocab, cfg.max_seq_len);
  Adam<float> gen_opt, disc_opt;
  Rng rng(77);
  const HingeConfig h;
  bool finite = true;
  for (int step = 0; step < 500 && finite; ++step) {
    const auto& pair = corpus.train[static_cast<std::size_t>(step) % corpus.train.size()];
    const Ids q = encode_text(pair.query, vocab, cfg.max_seq_len).ids;
    const Ids r = encode_text(pair.response, vocab, cfg.max_seq_len).ids;
    Rollout ro;
    ro.input = q;
    ro.response = r;
    ro.samples = mc_rollouts(model, model.hidden(q), std::vector<int>{kBos}, 2, rng, 6);
    for (const auto& smp : ro.samples) ro.rewards.push_back(score_of(model, q, strip_special(smp.ids)));
    const std::vector<Rollout> gb{ro};
    const auto rep = pg_step(model, params, gen_opt, gb, 1e-3, 0.5);
    DiscExample ex{q, r, {pool.responses[uniform_index(rng, pool.size())]}, {strip_special(ro.samples[0].ids)}};
    const std::vector<DiscExample> db{ex};
    const double d = disc_step(model, params, disc_opt, db, h, 1e-3);
    finite = std::isfinite(rep.fused) && std::isfinite(d) && params.all_finite();
  }
  CHECK(finite);
}
