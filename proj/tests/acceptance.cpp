// SPDX-License-Identifier: Apache-2.0
// Runs the desk pipeline and prints one PASS/FAIL line per acceptance
// criterion. Usage: acceptance [work_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "heronet/checkpoint.hpp"
#include "heronet/pipeline.hpp"
#include "heronet/retrieval.hpp"

using namespace heronet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  failures += !ok;
  std::printf("criterion %d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

int run_command(const std::string& cmd) {
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

double run_pipeline(const TrainConfig& cfg, const fs::path& dir) {
  fs::remove_all(dir);
  const auto start = Clock::now();
  for (auto stage : {"gen-data", "warmup", "pretrain-retrieval", "adv-train", "rerank-train", "evaluate"})
    run_stage(stage, cfg, dir);
  return seconds_since(start);
}

struct LogTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw std::runtime_error("log.csv has no column " + name);
  }
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

LogTable read_log(const fs::path& path) {
  LogTable t;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  t.header = split_csv(line);
  while (std::getline(in, line)) t.rows.push_back(split_csv(line));
  return t;
}

double cell(const std::string& s) { return s.empty() ? std::nan("") : std::stod(s); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

/// Mean psi_D distance between train queries of the same paraphrase cluster
/// over the mean distance between all train query pairs.
double separation_ratio(const TrainConfig& cfg, const fs::path& dir) {
  CorpusOptions opts;
  opts.n_topics = cfg.n_topics;
  const auto corpus = generate_synthetic_corpus(cfg.seed, cfg.n_train, cfg.n_eval, cfg.pool_size, opts);
  const auto saved = load_corpus(dir);
  for (std::size_t i = 0; i < corpus.train.size(); ++i)
    if (corpus.train[i].query != saved.train[i].query)
      throw std::runtime_error("regenerated corpus differs from the saved one");
  const auto vocab = Vocab::load(dir / "vocab.txt");
  const auto ckpt = load_checkpoint(dir / "pretrain-retrieval");
  auto mc = cfg.model_config(vocab.size());
  mc.separate_sqd_encoder = ckpt.params.contains("enc2.tok_emb");
  const Model<float> model(mc, ckpt.params);
  const auto adapter = adapter_params(ckpt.params, Task::sqd);
  std::vector<ProjectedEmbedding> proj;
  for (const auto& p : corpus.train)
    proj.push_back(adapter_apply(adapter, model.sentence_embedding(encode_text(p.query, vocab, cfg.max_seq_len).ids,
                                                                   Task::sqd)));
  double intra = 0.0, all = 0.0;
  long n_intra = 0, n_all = 0;
  for (std::size_t i = 0; i < proj.size(); ++i)
    for (std::size_t j = i + 1; j < proj.size(); ++j) {
      const double dist = sentence_distance(proj[i], proj[j]);
      all += dist;
      ++n_all;
      if (corpus.train[i].topic == corpus.train[j].topic) {
        intra += dist;
        ++n_intra;
      }
    }
  return (intra / static_cast<double>(n_intra)) / (all / static_cast<double>(n_all));
}

bool logs_match(const fs::path& a, const fs::path& b, double tol, std::string& why) {
  const auto la = read_log(a), lb = read_log(b);
  if (la.header != lb.header || la.rows.size() != lb.rows.size()) {
    why = "log shapes differ";
    return false;
  }
  const int wall = la.col("wall_s"), stage = la.col("stage");
  double worst = 0.0;
  for (std::size_t r = 0; r < la.rows.size(); ++r)
    for (std::size_t c = 0; c < la.header.size(); ++c) {
      if (static_cast<int>(c) == wall) continue;
      if (static_cast<int>(c) == stage) {
        if (la.rows[r][c] != lb.rows[r][c]) {
          why = "stage column differs";
          return false;
        }
        continue;
      }
      const double x = cell(la.rows[r][c]), y = cell(lb.rows[r][c]);
      if (std::isnan(x) != std::isnan(y)) {
        why = "empty cells differ";
        return false;
      }
      if (!std::isnan(x)) worst = std::max(worst, std::abs(x - y));
    }
  why = fmt("max log difference %.3g", worst);
  return worst <= tol;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "heronet_acceptance";
  fs::create_directories(work);

  // 1. Gradient suite.
  {
    const auto start = Clock::now();
    const int rc = run_command(std::string(HERONET_GRADCHECK) + " > " + (work / "gradcheck.txt").string());
    const double secs = seconds_since(start);
    report(1, rc == 0 && secs < 60.0, fmt("gradcheck exit %.0f in %.1f s", rc, secs));
  }

  // 2. Oracle equivalence.
  {
    const int rc = run_command(std::string(HERONET_UNIT_TESTS) + " -ts=oracle > " + (work / "oracle.txt").string());
    report(2, rc == 0, fmt("oracle suite exit %.0f", rc));
  }

  TrainConfig cfg;
  cfg.threads = 1;
  cfg.validate();
  const fs::path full = work / "full";
  const double wall = run_pipeline(cfg, full);
  std::printf("desk pipeline finished in %.1f s\n", wall);

  // 3. Warm-up learning.
  {
    const auto log = read_log(full / "log.csv");
    const int stage = log.col("stage"), epoch = log.col("epoch"), valid = log.col("valid");
    double first = std::nan(""), last = std::nan("");
    for (const auto& row : log.rows)
      if (row[stage] == "warmup") {
        if (std::stoi(row[epoch]) == 0) first = cell(row[valid]);
        last = cell(row[valid]);
      }
    report(3, last <= 0.5 * first, fmt("valid CE %.3f -> %.3f (ratio %.3f)", first, last, last / first));
  }

  // 4. Retrieval learning.
  {
    const auto probe = selection_probe(cfg, full, full, "pretrain-retrieval", "test");
    const double ratio = separation_ratio(cfg, full);
    report(4, probe.hit5 >= 0.25 && ratio < 0.8,
           fmt("Hit@5 %.3f on %.0f-candidate pools, separation ratio %.3f", probe.hit5, cfg.eval_candidates, ratio));
  }

  // 5. Adversarial phase health.
  {
    const auto log = read_log(full / "log.csv");
    const int stage = log.col("stage");
    bool finite = true;
    int epochs = 0;
    double auc = std::nan("");
    for (const auto& row : log.rows) {
      if (row[stage] != "adv-train") continue;
      ++epochs;
      for (const char* c : {"loss", "ce_loss", "pg_loss", "d_loss"}) finite &= std::isfinite(cell(row[log.col(c)]));
      auc = cell(row[log.col("valid")]);
    }
    report(5, finite && epochs == cfg.epochs_adversarial && auc >= 0.7,
           fmt("%.0f epochs, losses finite %.0f, final AUC %.4f", epochs, finite, auc));
  }

  const auto rep = read_json(full / "report.json");
  const double mrr = rep.at("retrieval").at("mrr").get<double>();
  const double bleu = rep.at("generation").at("bleu").get<double>();

  // 6. Re-rank gain over BM25.
  {
    const double bm25 = rep.at("bm25").at("mrr").get<double>();
    report(6, mrr >= bm25, fmt("MRR %.4f vs BM25 %.4f", mrr, bm25));
  }

  // 7. Ablation direction.
  {
    auto nm = cfg;
    nm.no_multi_learning = true;
    const fs::path dir = work / "no_multi";
    run_pipeline(nm, dir);
    const auto r = read_json(dir / "report.json");
    const double nm_mrr = r.at("retrieval").at("mrr").get<double>();
    const double nm_bleu = r.at("generation").at("bleu").get<double>();
    report(7, mrr >= nm_mrr && bleu >= nm_bleu,
           fmt("MRR %.4f vs %.4f, BLEU %.3f", mrr, nm_mrr, bleu) + fmt(" vs %.3f", nm_bleu));
  }

  // 8. Determinism.
  {
    const fs::path again = work / "full_again";
    run_pipeline(cfg, again);
    std::string why;
    bool ok = logs_match(full / "log.csv", again / "log.csv", 1e-12, why);
    int same = 0;
    for (auto stage : kTrainStages)
      for (const char* ext : {".bin", ".json"}) {
        const std::string name = std::string(stage) + ext;
        same += slurp(full / name) == slurp(again / name);
      }
    ok &= same == static_cast<int>(2 * kTrainStages.size());
    report(8, ok, why + fmt(", %.0f/%.0f checkpoint files identical", same, 2.0 * kTrainStages.size()));
  }

  // 9. Runtime budget.
  report(9, wall <= 1800.0, fmt("desk pipeline %.1f s on one thread (budget 1800 s)", wall));

  std::printf("acceptance: %d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
