// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>

#include "heronet/checkpoint.hpp"
#include "heronet/config.hpp"
#include "heronet/kernels.hpp"
#include "heronet/retrieval.hpp"
#include "support.hpp"

using namespace heronet;

namespace {

std::string error_of(std::string_view text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

template <class T>
Tensor<T> random_tensor(Rng& rng, int r, int c) {
  Tensor<T> t(r, c);
  for (auto& x : t.data) x = static_cast<T>(standard_normal(rng));
  return t;
}

}  // namespace

TEST_CASE("empty config gives the documented defaults") {
  const auto c = parse_config_text("");
  const TrainConfig d;
  CHECK(c.to_json() == d.to_json());
  CHECK(c.profile == "desk");
  CHECK(c.m == 20);
  CHECK(c.n == 1);
  CHECK(c.k == 5);
  CHECK(c.bs == 16);
  CHECK(c.d_model == 64);
  CHECK(c.vocab_max == 512);
  CHECK(c.max_seq_len == 64);
  CHECK(c.n_train == 1000);
  CHECK(c.pool_size == 500);
  CHECK(c.epochs_warmup == 3);
  CHECK(c.epochs_multitask == 5);
  CHECK(c.epochs_adversarial == 10);
  CHECK(c.epochs_rerank == 3);
  CHECK(c.warmup_lr == 4e-4);
  CHECK(c.retrieval_lr == 1e-4);
  CHECK(c.g_lr == 2e-4);
  CHECK(c.d_lr == 1e-4);
}

TEST_CASE("the larger profile carries the published schedule") {
  const auto c = parse_config_text("profile = full\n");
  CHECK(c.bs == 64);
  CHECK(c.epochs_warmup == 5);
  CHECK(c.epochs_multitask == 10);
  CHECK(c.epochs_adversarial == 20);
  CHECK(c.m == 20);
  CHECK(c.n == 1);
  // A profile line later in the file still selects the base before other keys.
  const auto d = parse_config_text("bs = 8\nprofile = full\n");
  CHECK(d.bs == 8);
  CHECK(d.epochs_warmup == 5);
}

TEST_CASE("key = value parsing") {
  const auto c = parse_config_text("# comment\nm = 20\n  n=1   # trailing\n\nno_kg = true\nalpha = 0.25\n");
  CHECK(c.m == 20);
  CHECK(c.n == 1);
  CHECK(c.no_kg);
  CHECK(c.alpha == 0.25);
  CHECK(parse_config_text("m = 5\nn = 0\nk = 6\n").k == 6);
}

TEST_CASE("config errors name the field or line") {
  const auto neg = error_of("m = -1\n");
  CHECK(neg.find("m") != std::string::npos);
  CHECK(error_of("\n\nthis line is wrong\n").find("line 3") != std::string::npos);
  const auto unknown = error_of("m = 2\nbogus = 1\n");
  CHECK(unknown.find("line 2") != std::string::npos);
  CHECK(unknown.find("bogus") != std::string::npos);
  CHECK(error_of("bs = many\n").find("line 1") != std::string::npos);
  CHECK(error_of("m = 0\nn = 0\n").find("m") != std::string::npos);
  CHECK(error_of("m = 2\nn = 1\nk = 5\n").find("k") != std::string::npos);
  CHECK(error_of("g_lr = 0\n").find("g_lr") != std::string::npos);
  CHECK(error_of("profile = huge\n").find("profile") != std::string::npos);
  CHECK_THROWS_AS(parse_config("/nonexistent/heronet.conf"), ConfigError);
}

TEST_CASE("config JSON round trip and the key list") {
  TrainConfig c;
  c.m = 7;
  c.no_reward = true;
  c.seed = 99;
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  for (const auto& key : config_keys()) CHECK(c.to_json().contains(key));
  TrainConfig d;
  set_config_value(d, "seed", "123");
  CHECK(d.seed == 123);
  CHECK_THROWS_AS(set_config_value(d, "nope", "1"), ConfigError);
}

TEST_CASE("model configuration follows the ablation flag") {
  TrainConfig c;
  CHECK_FALSE(c.model_config(100).separate_sqd_encoder);
  c.no_multi_learning = true;
  const auto mc = c.model_config(100);
  CHECK(mc.separate_sqd_encoder);
  CHECK(mc.vocab_size == 100);
  CHECK(mc.d_model == c.d_model);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const auto dir = test::scratch_dir("ckpt");
  Checkpoint a;
  a.stage = "warmup";
  a.config = TrainConfig{}.to_json();
  a.seed = 7;
  a.step = 42;
  a.params = init_params<float>(test::toy_config(), 3);
  save_checkpoint(dir / "a", a);
  CHECK(checkpoint_exists(dir / "a"));
  CHECK_FALSE(checkpoint_exists(dir / "missing"));
  const auto b = load_checkpoint(dir / "a");
  CHECK(b.stage == "warmup");
  CHECK(b.step == 42);
  CHECK(b.seed == 7);
  CHECK(b.config == a.config);
  CHECK(b.params.names() == a.params.names());
  a.params.for_each([&](const Param<float>& p) { CHECK(b.params.at(p.name).value == p.value); });

  save_checkpoint(dir / "b", b);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));
  CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));

  SUBCASE("a truncated blob is rejected") {
    const auto blob = slurp(dir / "a.bin");
    std::ofstream(dir / "a.bin", std::ios::binary | std::ios::trunc) << blob.substr(0, blob.size() - 4);
    CHECK_THROWS(load_checkpoint(dir / "a"));
  }
  SUBCASE("an oversized blob is rejected") {
    std::ofstream(dir / "a.bin", std::ios::binary | std::ios::app) << "junk";
    CHECK_THROWS(load_checkpoint(dir / "a"));
  }
  SUBCASE("a broken manifest is rejected") {
    std::ofstream(dir / "a.json", std::ios::trunc) << "{\"stage\": ";
    CHECK_THROWS(load_checkpoint(dir / "a"));
  }
}

TEST_CASE("parallel kernels are bit-identical to the serial references") {
  const int saved = kernels::max_threads();
  kernels::set_threads(4);
  Rng rng(8);
  using kernels::Trans;
  for (auto [ta, tb] : {std::pair{Trans::no, Trans::no}, std::pair{Trans::yes, Trans::no},
                        std::pair{Trans::no, Trans::yes}, std::pair{Trans::yes, Trans::yes}}) {
    const int m = 37, k = 29, n = 41;
    const auto a = ta == Trans::no ? random_tensor<float>(rng, m, k) : random_tensor<float>(rng, k, m);
    const auto b = tb == Trans::no ? random_tensor<float>(rng, k, n) : random_tensor<float>(rng, n, k);
    Tensor<float> cs = random_tensor<float>(rng, m, n), cp = cs;
    kernels::serial::gemm(a, ta, b, tb, cs, true);
    kernels::parallel::gemm(a, ta, b, tb, cp, true);
    CHECK(cs == cp);
    Tensor<double> ds(m, n), dp(m, n);
    kernels::serial::gemm(a.cast<double>(), ta, b.cast<double>(), tb, ds, false);
    kernels::parallel::gemm(a.cast<double>(), ta, b.cast<double>(), tb, dp, false);
    CHECK(ds == dp);
    // Serial reference against a naive triple loop.
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int x = 0; x < k; ++x)
          s += static_cast<double>(ta == Trans::no ? a(i, x) : a(x, i)) *
               static_cast<double>(tb == Trans::no ? b(x, j) : b(j, x));
        CHECK(std::abs(ds(i, j) - s) <= 1e-9);
      }
  }

  std::vector<std::vector<double>> rows(300, std::vector<double>(16));
  for (auto& r : rows)
    for (auto& x : r) x = standard_normal(rng);
  std::vector<double> q(16);
  for (auto& x : q) x = standard_normal(rng);
  CHECK(kernels::serial::euclidean_distances(q, rows) == kernels::parallel::euclidean_distances(q, rows));

  const auto corpus = generate_synthetic_corpus(2, 40, 10, 80);
  const auto vocab = Vocab::build(corpus, 256);
  const auto cfg = test::toy_config(vocab.size());
  const auto params = init_params<float>(cfg, 4);
  const Model<float> model(cfg, params);
  const auto pool = encode_pool(corpus.pool, vocab, cfg.max_seq_len);
  CHECK(embed_all(model, pool.responses, Task::qrm, true) == embed_all(model, pool.responses, Task::qrm, false));
  kernels::set_threads(saved);
}
