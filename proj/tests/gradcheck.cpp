// SPDX-License-Identifier: Apache-2.0
// Central finite differences against the tape gradients of every training
// loss, in double precision on toy models.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "heronet/discriminator.hpp"
#include "heronet/generation.hpp"
#include "heronet/rerank.hpp"
#include "heronet/retrieval.hpp"
#include "support.hpp"

using namespace heronet;

namespace {

constexpr double kStep = 1e-5;
constexpr double kTolerance = 1e-4;
constexpr std::size_t kMaxEntries = 48;
// Below this norm a tensor's gradient counts as identically zero (attention
// key biases) and is compared in absolute terms.
constexpr double kZeroFloor = 1e-8;

using LossFn = std::function<Var(Tape<double>&, const Model<double>&)>;

struct TensorResult {
  std::string name;
  double rel_error;
  bool zero;
};

double eval_loss(const LossFn& loss, const Model<double>& model) {
  Tape<double> tape;
  return tape.scalar(loss(tape, model));
}

/// Worst per-tensor relative error over the trainable tensors.
bool check(const char* label, const ModelConfig& cfg, ParamStore<double>& params,
           const std::vector<std::string>& prefixes, const LossFn& loss, Rng& rng) {
  const Model<double> model(cfg, params);
  params.zero_grads();
  {
    Tape<double> tape(true, prefixes);
    const Var l = loss(tape, model);
    tape.backward(l);
    tape.accumulate_param_grads(params);
  }
  std::vector<TensorResult> results;
  params.for_each([&](Param<double>& p) {
    if (std::none_of(prefixes.begin(), prefixes.end(), [&](const auto& pre) { return has_prefix(p.name, pre); }))
      return;
    std::vector<std::size_t> idx(p.value.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > kMaxEntries) {
      shuffle(idx, rng);
      idx.resize(kMaxEntries);
    }
    double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
    for (std::size_t i : idx) {
      const double saved = p.value.data[i];
      p.value.data[i] = saved + kStep;
      const double up = eval_loss(loss, model);
      p.value.data[i] = saved - kStep;
      const double down = eval_loss(loss, model);
      p.value.data[i] = saved;
      const double numeric = (up - down) / (2.0 * kStep);
      const double analytic = p.grad.size() == 0 ? 0.0 : p.grad.data[i];
      diff += (analytic - numeric) * (analytic - numeric);
      norm_a += analytic * analytic;
      norm_n += numeric * numeric;
    }
    const double denom = std::sqrt(norm_a) + std::sqrt(norm_n);
    if (std::getenv("GRADCHECK_VERBOSE"))
      std::printf("  %-20s |a| %.3e |n| %.3e |a-n| %.3e\n", p.name.c_str(), std::sqrt(norm_a), std::sqrt(norm_n),
                  std::sqrt(diff));
    const bool zero = std::sqrt(norm_a) < kZeroFloor && std::sqrt(norm_n) < kZeroFloor;
    results.push_back({p.name, zero ? std::sqrt(diff) / kZeroFloor * kTolerance : std::sqrt(diff) / denom, zero});
  });
  const auto worst = std::max_element(results.begin(), results.end(),
                                      [](const auto& a, const auto& b) { return a.rel_error < b.rel_error; });
  int nonzero = 0;
  params.for_each([&](const Param<double>& p) {
    for (double g : p.grad.data)
      if (g != 0.0) {
        ++nonzero;
        break;
      }
  });
  const auto zeros = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.zero; });
  const bool ok = worst != results.end() && worst->rel_error <= kTolerance && nonzero > 0;
  std::printf("%-12s %s  tensors %zu (zero-gradient %ld)  worst %.3e (%s)\n", label, ok ? "PASS" : "FAIL",
              results.size(), static_cast<long>(zeros), worst == results.end() ? 0.0 : worst->rel_error,
              worst == results.end() ? "-" : worst->name.c_str());
  return ok;
}

Ids ids(Rng& rng, int len, int vocab) { return test::random_ids(rng, len, vocab); }

SentenceEmbedding vec(Rng& rng, int d) {
  SentenceEmbedding v(static_cast<std::size_t>(d));
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

}  // namespace

int main() {
  const auto start = std::chrono::steady_clock::now();
  constexpr int V = 14;
  Rng rng(2024);
  bool ok = true;

  {
    for (bool separate : {false, true}) {
      const auto cfg = test::toy_config(V, separate);
      auto params = init_params<double>(cfg, 11);
      TripletBatch batch;
      for (int a = 0; a < 2; ++a) {
        batch.anchors.push_back(ids(rng, 5, V));
        batch.positives.push_back(ids(rng, 4, V));
        batch.negatives.push_back({ids(rng, 5, V), ids(rng, 3, V), ids(rng, 6, V)});
      }
      // A wide margin keeps every hinge term active and away from its kink.
      const LossFn loss = [&](Tape<double>& t, const Model<double>& m) { return sqd_loss(t, m, batch, 50.0); };
      const std::string enc = separate ? "enc2." : "enc.";
      ok &= check(separate ? "sqd_loss/sep" : "sqd_loss", cfg, params, {enc, "sqd."}, loss, rng);
    }
  }
  {
    const auto cfg = test::toy_config(V);
    auto params = init_params<double>(cfg, 12);
    MatchBatch batch;
    for (int g = 0; g < 2; ++g) {
      MatchGroup group;
      const Ids q = ids(rng, 5, V);
      group.push_back({q, ids(rng, 4, V), 1});
      group.push_back({q, ids(rng, 6, V), 0});
      group.push_back({ids(rng, 3, V), ids(rng, 4, V), 0});
      batch.groups.push_back(group);
    }
    const LossFn loss = [&](Tape<double>& t, const Model<double>& m) { return qrm_loss(t, m, batch); };
    ok &= check("qrm_loss", cfg, params, {"enc.", "qrm."}, loss, rng);
  }
  {
    const auto cfg = test::toy_config(V);
    auto params = init_params<double>(cfg, 13);
    const std::vector<GenExample> batch{{ids(rng, 5, V), ids(rng, 4, V)}, {ids(rng, 3, V), ids(rng, 6, V)}};
    const LossFn loss = [&](Tape<double>& t, const Model<double>& m) {
      return ce_loss(t, m, std::span<const GenExample>(batch));
    };
    ok &= check("ce_loss", cfg, params, {"enc.", "dec."}, loss, rng);
  }
  {
    const auto cfg = test::toy_config(V);
    auto params = init_params<double>(cfg, 14);
    std::vector<Rollout> batch(2);
    for (auto& r : batch) {
      r.input = ids(rng, 5, V);
      r.response = ids(rng, 4, V);
      for (int s = 0; s < 3; ++s) {
        TokenSequence seq;
        seq.ids.push_back(kBos);
        for (int x : ids(rng, 2 + s, V)) seq.ids.push_back(x);
        seq.ids.push_back(kEos);
        r.samples.push_back(seq);
        r.rewards.push_back(uniform01(rng));
      }
    }
    const double baseline = reward_baseline(batch);
    const LossFn loss = [&](Tape<double>& t, const Model<double>& m) {
      return pg_surrogate(t, m, std::span<const Rollout>(batch), baseline);
    };
    ok &= check("pg_surrogate", cfg, params, {"enc.", "dec."}, loss, rng);
  }
  {
    const auto cfg = test::toy_config(V);
    auto params = init_params<double>(cfg, 15);
    std::vector<DiscExample> batch(2);
    for (auto& ex : batch) {
      ex.query = ids(rng, 5, V);
      ex.positive = ids(rng, 4, V);
      ex.retrieved = {ids(rng, 4, V), ids(rng, 6, V)};
      ex.generated = {ids(rng, 3, V)};
    }
    // Margins near one keep both hinge terms active.
    const HingeConfig h{0.9, 0.8, 1e-2};
    const LossFn loss = [&](Tape<double>& t, const Model<double>& m) {
      return disc_loss(t, m, std::span<const DiscExample>(batch), h);
    };
    ok &= check("disc_loss", cfg, params, {"enc.", "qrm."}, loss, rng);
  }
  {
    const auto cfg = test::toy_config(V);
    auto params = init_params<double>(cfg, 16);
    std::vector<RerankExample> batch(2);
    for (auto& ex : batch) {
      ex.query = vec(rng, cfg.d_model);
      for (int c = 0; c < 4; ++c) {
        ex.candidates.push_back(vec(rng, cfg.d_model));
        ex.labels.push_back(c == 0);
      }
    }
    const LossFn loss = [&](Tape<double>& t, const Model<double>& m) {
      return rerank_loss(t, m, std::span<const RerankExample>(batch));
    };
    ok &= check("rerank_loss", cfg, params, {"qrm."}, loss, rng);
  }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("gradcheck %s in %.1f s\n", ok ? "PASS" : "FAIL", secs);
  return ok && secs <= 60.0 ? 0 : 1;
}
