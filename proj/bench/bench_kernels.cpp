// SPDX-License-Identifier: Apache-2.0
// Serial reference against OpenMP kernels. Usage: bench_kernels [threads]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>

#include "heronet/config.hpp"
#include "heronet/kernels.hpp"
#include "heronet/retrieval.hpp"

using namespace heronet;

namespace {

double time_ms(const std::function<void()>& f, int reps) {
  f();
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count() / reps;
}

void row(const char* name, double serial, double parallel, bool same) {
  std::printf("%-28s serial %9.3f ms  parallel %9.3f ms  speedup %5.2fx  %s\n", name, serial, parallel,
              serial / parallel, same ? "identical" : "MISMATCH");
}

Tensor<float> random_tensor(Rng& rng, int r, int c) {
  Tensor<float> t(r, c);
  for (auto& x : t.data) x = static_cast<float>(standard_normal(rng));
  return t;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) kernels::set_threads(std::atoi(argv[1]));
  std::printf("threads %d\n", kernels::max_threads());
  Rng rng(1);
  using kernels::Trans;

  for (int n : {64, 256}) {
    const auto a = random_tensor(rng, n, n), b = random_tensor(rng, n, n);
    Tensor<float> cs(n, n), cp(n, n);
    const double s = time_ms([&] { kernels::serial::gemm(a, Trans::no, b, Trans::no, cs, false); }, 5);
    const double p = time_ms([&] { kernels::parallel::gemm(a, Trans::no, b, Trans::no, cp, false); }, 5);
    char name[64];
    std::snprintf(name, sizeof name, "gemm %dx%dx%d", n, n, n);
    row(name, s, p, cs == cp);
  }

  {
    std::vector<std::vector<double>> rows(20000, std::vector<double>(64));
    for (auto& r : rows)
      for (auto& x : r) x = standard_normal(rng);
    std::vector<double> q(64);
    for (auto& x : q) x = standard_normal(rng);
    std::vector<double> ds, dp;
    const double s = time_ms([&] { ds = kernels::serial::euclidean_distances(q, rows); }, 10);
    const double p = time_ms([&] { dp = kernels::parallel::euclidean_distances(q, rows); }, 10);
    row("euclidean_distances 20000x64", s, p, ds == dp);
  }

  {
    const auto corpus = generate_synthetic_corpus(7, 200, 20, 500);
    const auto vocab = Vocab::build(corpus, 512);
    TrainConfig tc;
    const auto cfg = tc.model_config(vocab.size());
    const auto params = init_params<float>(cfg, 3);
    const Model<float> model(cfg, params);
    const auto pool = encode_pool(corpus.pool, vocab, cfg.max_seq_len);
    std::vector<SentenceEmbedding> es, ep;
    const double s = time_ms([&] { es = embed_all(model, pool.responses, Task::qrm, false); }, 1);
    const double p = time_ms([&] { ep = embed_all(model, pool.responses, Task::qrm, true); }, 1);
    row("embed_all 500 responses", s, p, es == ep);
  }
  return 0;
}
