// SPDX-License-Identifier: Apache-2.0
// heronet gen-data|warmup|pretrain-retrieval|adv-train|rerank-train|evaluate|sweep|chat

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "heronet/config.hpp"
#include "heronet/pipeline.hpp"
#include "heronet/retrieval.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStageOrder = 3;
constexpr int kExitNumerical = 4;

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw heronet::ConfigError(std::string(what) + ": not an integer list: " + text);
    }
  }
  if (out.empty()) throw heronet::ConfigError(std::string(what) + ": empty list");
  return out;
}

void print_report(const heronet::EvalReport& r) {
  const auto& g = r.generation;
  const auto& t = r.retrieval;
  const auto& b = r.bm25;
  std::printf("queries %d, m %d, n %d\n\n", r.queries, r.m, r.n);
  std::printf("%-10s %10s %10s %10s %10s\n", "", "BLEU", "ROUGE-L", "METEOR", "CHRF");
  std::printf("%-10s %10.4f %10.4f %10.4f %10.4f\n\n", "heronet", g.bleu, g.rouge_l, g.meteor, g.chrf);
  std::printf("%-10s %10s %10s %10s %10s %10s\n", "", "MRR", "Acc", "Hit@5", "Hit@10", "Hit@50");
  std::printf("%-10s %10.4f %10.4f %10.4f %10.4f %10.4f\n", "heronet", t.mrr, t.acc, t.hit5, t.hit10, t.hit50);
  std::printf("%-10s %10.4f %10.4f %10.4f %10.4f %10.4f\n\n", "bm25", b.mrr, b.acc, b.hit5, b.hit10, b.hit50);
  std::printf("discriminator real-vs-generated AUC %.4f\n", r.adversarial_auc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid retrieval-generation dialogue pipeline"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string out_dir = "run";
  std::uint64_t seed = 0;
  bool no_kg = false, no_reward = false, no_multi = false;
  std::vector<std::string> overrides;
  std::string m_values, n_values;

  const std::vector<std::string> stages{"gen-data",     "warmup",   "pretrain-retrieval", "adv-train",
                                        "rerank-train", "evaluate", "sweep",              "chat"};
  for (const auto& name : stages) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "override the configured seed");
    sub->add_flag("--no-kg", no_kg, "generate without the retrieved-knowledge splice");
    sub->add_flag("--no-reward", no_reward, "train the generator without discriminator rewards");
    sub->add_flag("--no-multi-learning", no_multi, "separate encoders for the two retrieval tasks");
    sub->add_option("--set", overrides, "extra key=value overrides");
    if (name == "sweep") {
      sub->add_option("--m-values", m_values, "comma-separated m grid")->required();
      sub->add_option("--n-values", n_values, "comma-separated n grid")->required();
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    heronet::TrainConfig cfg = config_path.empty() ? heronet::TrainConfig{} : heronet::parse_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw heronet::ConfigError("--set expects key=value, got " + kv);
      heronet::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (app.get_subcommands().front()->count("--seed") > 0) cfg.seed = seed;
    cfg.no_kg = cfg.no_kg || no_kg;
    cfg.no_reward = cfg.no_reward || no_reward;
    cfg.no_multi_learning = cfg.no_multi_learning || no_multi;
    cfg.validate();

    const std::filesystem::path out(out_dir);
    if (stage == "sweep") {
      const auto rows = heronet::run_sweep(cfg, out, parse_int_list(m_values, "--m-values"),
                                           parse_int_list(n_values, "--n-values"));
      std::cout << heronet::sweep_header() << '\n';
      for (const auto& r : rows) std::cout << heronet::format_sweep_row(r) << '\n';
    } else if (stage == "chat") {
      heronet::run_chat(cfg, out, std::cin, std::cout);
    } else if (stage == "evaluate") {
      print_report(heronet::run_evaluate(cfg, out, out));
    } else {
      heronet::run_stage(stage, cfg, out);
    }
  } catch (const heronet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const heronet::StageOrderError& e) {
    std::cerr << "stage order error: " << e.what() << '\n';
    return kExitStageOrder;
  } catch (const heronet::NumericalAbort& e) {
    std::cerr << "numerical abort: " << e.what() << " (no checkpoint written for " << stage << ")\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
