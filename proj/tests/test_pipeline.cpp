// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "heronet/checkpoint.hpp"
#include "heronet/pipeline.hpp"
#include "heronet/retrieval.hpp"
#include "support.hpp"

using namespace heronet;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.n_train = 40;
  c.n_eval = 10;
  c.pool_size = 40;
  c.n_topics = 20;
  c.vocab_max = 256;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.d_proj = 8;
  c.max_seq_len = 32;
  c.gen_max_len = 8;
  c.bs = 8;
  c.m = 3;
  c.n = 1;
  c.k = 3;
  c.epochs_warmup = 1;
  c.epochs_multitask = 1;
  c.epochs_adversarial = 1;
  c.epochs_rerank = 1;
  c.adv_queries_per_epoch = 8;
  c.rerank_queries_per_epoch = 10;
  c.eval_candidates = 20;
  c.train_negatives = 2;
  c.qrm_random_negatives = 1;
  c.validate();
  return c;
}

void run_all(const TrainConfig& cfg, const fs::path& dir) {
  for (auto stage : {"gen-data", "warmup", "pretrain-retrieval", "adv-train", "rerank-train", "evaluate"})
    run_stage(stage, cfg, dir);
}

/// One full tiny run shared by the read-only checks.
const fs::path& tiny_run() {
  static const fs::path dir = [] {
    auto d = test::scratch_dir("pipeline_tiny");
    run_all(tiny_config(), d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

int column(const std::vector<std::string>& header, const std::string& name) {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  FAIL("missing column " << name);
  return -1;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HERONET_CLI) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("stages enforce their order") {
  const auto cfg = tiny_config();
  const auto dir = test::scratch_dir("pipeline_order");
  CHECK_THROWS_AS(run_pretrain_retrieval(cfg, dir), StageOrderError);
  CHECK_THROWS_AS(run_adv_train(cfg, dir), StageOrderError);
  CHECK_THROWS_AS(run_rerank_train(cfg, dir, dir, dir), StageOrderError);
  CHECK_THROWS_AS(run_evaluate(cfg, dir, dir), StageOrderError);
  std::stringstream in, out;
  CHECK_THROWS_AS(run_chat(cfg, dir, in, out), StageOrderError);
  CHECK_THROWS_AS(run_sweep(cfg, dir, {1}, {1}), StageOrderError);
  gen_data(cfg, dir);
  CHECK_THROWS_AS(run_adv_train(cfg, dir), StageOrderError);
  run_warmup(cfg, dir);
  CHECK_THROWS_AS(run_adv_train(cfg, dir), StageOrderError);
  CHECK_THROWS_AS(run_evaluate(cfg, dir, dir), StageOrderError);
  run_pretrain_retrieval(cfg, dir);
  CHECK_THROWS_AS(run_rerank_train(cfg, dir, dir, dir), StageOrderError);
  // Re-running an earlier stage invalidates the later checkpoints.
  run_warmup(cfg, dir);
  CHECK_FALSE(checkpoint_exists(dir / "pretrain-retrieval"));
  CHECK_THROWS_AS(run_adv_train(cfg, dir), StageOrderError);
  // Frozen fields must match the checkpoint they build on.
  auto other = cfg;
  other.d_model = 32;
  CHECK_THROWS_AS(run_pretrain_retrieval(other, dir), ConfigError);
}

TEST_CASE("a tiny run produces logs, checkpoints and a report") {
  const auto& dir = tiny_run();
  for (auto stage : kTrainStages) CHECK(checkpoint_exists(dir / std::string(stage)));
  CHECK(load_checkpoint(dir / "rerank-train").stage == "rerank-train");
  const auto rows = read_csv(dir / "log.csv");
  REQUIRE(rows.size() >= 5);
  CHECK(rows[0][0] == "step");
  const int loss = column(rows[0], "loss");
  for (std::size_t r = 1; r < rows.size(); ++r)
    if (!rows[r][loss].empty()) CHECK(std::isfinite(std::stod(rows[r][loss])));

  const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
  for (const char* k : {"bleu", "rouge_l", "meteor", "chrf"}) CHECK(report.at("generation").contains(k));
  for (const char* k : {"mrr", "acc", "hit@5", "hit@10", "hit@50"}) {
    const double v = report.at("retrieval").at(k).get<double>();
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  std::ifstream trace(dir / "ranking_trace.jsonl");
  int lines = 0;
  for (std::string line; std::getline(trace, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    int truths = 0;
    for (const auto& c : j.at("candidates")) truths += c.at("provenance") == "truth";
    CHECK(truths <= 1);
    CHECK(j.at("truth_rank").get<int>() >= 1);
  }
  CHECK(lines == tiny_config().n_eval);
}

TEST_CASE("re-rank learning leaves every frozen tensor byte-identical") {
  const auto& dir = tiny_run();
  const auto adv = load_checkpoint(dir / "adv-train");
  const auto rr = load_checkpoint(dir / "rerank-train");
  for (const char* prefix : {"enc.", "dec.", "sqd."}) CHECK(adv.params.checksum(prefix) == rr.params.checksum(prefix));
  CHECK(adv.params.checksum("qrm.") != rr.params.checksum("qrm."));
}

TEST_CASE("sweep rows match single evaluate runs") {
  const auto& dir = tiny_run();
  const auto cfg = tiny_config();
  const auto single = nlohmann::json::parse(slurp(dir / "report.json"));
  const auto one = run_sweep(cfg, dir, {cfg.m}, {cfg.n});
  REQUIRE(one.size() == 1);
  CHECK(one[0].report.to_json() == single);

  const auto grid = run_sweep(cfg, dir, {1, 3}, {0, 2});
  REQUIRE(grid.size() == 4);
  CHECK(grid[0].m == 1);
  CHECK(grid[0].n == 0);
  CHECK(grid[1].m == 1);
  CHECK(grid[1].n == 2);
  CHECK(grid[2].m == 3);
  CHECK(grid[2].n == 0);
  CHECK(grid[3].m == 3);
  CHECK(grid[3].n == 2);
  const auto csv = read_csv(dir / "sweep.csv");
  REQUIRE(csv.size() == 5);
  CHECK(csv[0].size() == 11);
  for (std::size_t r = 1; r < csv.size(); ++r) CHECK(csv[r].size() == 11);
  CHECK(csv[0][0] == "m");
  CHECK(csv[0][1] == "n");
  // Reordering the grid reorders the rows and nothing else.
  const auto swapped = run_sweep(cfg, dir, {3, 1}, {2, 0});
  CHECK(swapped[0].report.to_json().dump() == grid[3].report.to_json().dump());
  CHECK(swapped[3].report.to_json().dump() == grid[0].report.to_json().dump());
}

TEST_CASE("chat answers deterministically and stops at end of input") {
  const auto& dir = tiny_run();
  const auto cfg = tiny_config();
  {
    std::stringstream in, out;
    run_chat(cfg, dir, in, out);
    CHECK(out.str().empty());
  }
  const auto corpus = load_corpus(dir);
  const std::string q = corpus.train[0].query.text();
  std::stringstream in(q + "\n\n" + q + "\n"), out;
  run_chat(cfg, dir, in, out);
  std::vector<std::string> blocks{""};
  for (std::string line; std::getline(out, line);) {
    if (line == "(empty line skipped)") {
      blocks.emplace_back();
      continue;
    }
    blocks.back() += line + "\n";
  }
  REQUIRE(blocks.size() == 2);
  CHECK(blocks[0] == blocks[1]);
  REQUIRE(blocks[0].rfind("response: ", 0) == 0);
  const auto open = blocks[0].find("  [");
  REQUIRE(open != std::string::npos);
  const double score = std::stod(blocks[0].substr(open + 3));
  CHECK(score > 0.0);
  CHECK(score < 1.0);
}

TEST_CASE("the no-reward ablation logs a zero fusion weight") {
  auto cfg = tiny_config();
  cfg.no_reward = true;
  const auto dir = test::scratch_dir("pipeline_noreward");
  for (auto stage : {"gen-data", "warmup", "pretrain-retrieval", "adv-train"}) run_stage(stage, cfg, dir);
  const auto rows = read_csv(dir / "log.csv");
  const int stage = column(rows[0], "stage"), alpha = column(rows[0], "alpha");
  int adv_rows = 0;
  for (std::size_t r = 1; r < rows.size(); ++r)
    if (rows[r][stage] == "adv-train") {
      ++adv_rows;
      CHECK(std::stod(rows[r][alpha]) == 0.0);
    }
  CHECK(adv_rows >= 1);
}

TEST_CASE("every ablation combination runs to completion") {
  for (int mask = 0; mask < 8; ++mask) {
    auto cfg = tiny_config();
    cfg.no_kg = mask & 1;
    cfg.no_reward = mask & 2;
    cfg.no_multi_learning = mask & 4;
    cfg.epochs_adversarial = 1;
    CAPTURE(mask);
    const auto dir = test::scratch_dir("pipeline_ablation" + std::to_string(mask));
    CHECK_NOTHROW(run_all(cfg, dir));
    CHECK(fs::exists(dir / "report.json"));
    CHECK(load_checkpoint(dir / "rerank-train").params.contains("enc2.tok_emb") == cfg.no_multi_learning);
  }
}

TEST_CASE("a numerical abort keeps the previous checkpoint") {
  auto cfg = tiny_config();
  const auto dir = test::scratch_dir("pipeline_nan");
  gen_data(cfg, dir);
  run_warmup(cfg, dir);
  const auto before = slurp(dir / "warmup.bin");
  cfg.warmup_lr = 1e30;
  cfg.epochs_warmup = 3;
  CHECK_THROWS_AS(run_warmup(cfg, dir), NumericalAbort);
  CHECK(slurp(dir / "warmup.bin") == before);
}

TEST_CASE("command-line exit codes") {
  const auto dir = test::scratch_dir("pipeline_cli");
  const auto conf = dir / "tiny.conf";
  {
    std::ofstream f(conf);
    const auto j = tiny_config().to_json();
    for (const auto& key : config_keys()) {
      const auto& v = j.at(key);
      f << key << " = " << (v.is_string() ? v.get<std::string>() : v.dump()) << '\n';
    }
  }
  const std::string base = "--config " + conf.string() + " --out " + (dir / "run").string();
  CHECK(run_cli("evaluate " + base) == 3);
  CHECK(run_cli("warmup " + base + " --set m=-1") == 2);
  CHECK(run_cli("warmup " + base + " --set bogus=1") == 2);
  CHECK(run_cli("warmup --config " + (dir / "missing.conf").string()) == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("gen-data " + base) == 0);
  CHECK(run_cli("warmup " + base) == 0);
  CHECK(run_cli("adv-train " + base) == 3);
  CHECK(run_cli("warmup " + base + " --set warmup_lr=1e30 --set epochs_warmup=3") == 4);
  CHECK(run_cli("pretrain-retrieval " + base + " --no-multi-learning") == 0);
  CHECK(run_cli("adv-train " + base + " --no-reward") == 0);
  CHECK(run_cli("rerank-train " + base) == 0);
  CHECK(run_cli("evaluate " + base) == 0);
  CHECK(run_cli("chat " + base + " </dev/null") == 0);
  CHECK(run_cli("sweep " + base + " --m-values 1 --n-values 1") == 0);
  CHECK(run_cli("sweep " + base + " --m-values 1,x --n-values 1") == 2);
}
