// SPDX-License-Identifier: Apache-2.0
#include "heronet/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace heronet {

using nlohmann::json;

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class N>
N parse_number(std::string_view key, std::string_view v) {
  N out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end)
    throw ConfigError("config field " + std::string(key) + ": cannot parse '" + std::string(v) + "'");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config field " + std::string(key) + ": expected a boolean, got '" + std::string(v) + "'");
}

using Setter = std::function<void(TrainConfig&, std::string_view)>;

struct Field {
  std::string key;
  Setter set;
  std::function<json(const TrainConfig&)> get;
};

template <class M>
Field field(std::string key, M TrainConfig::*member) {
  Setter set = [key, member](TrainConfig& c, std::string_view v) {
    using V = std::remove_cvref_t<decltype(c.*member)>;
    if constexpr (std::is_same_v<V, bool>)
      c.*member = parse_bool(key, v);
    else if constexpr (std::is_same_v<V, std::string>)
      c.*member = std::string(v);
    else
      c.*member = parse_number<V>(key, v);
  };
  return {key, set, [member](const TrainConfig& c) { return json(c.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> k{
      field("profile", &TrainConfig::profile),
      field("m", &TrainConfig::m),
      field("n", &TrainConfig::n),
      field("k", &TrainConfig::k),
      field("seed", &TrainConfig::seed),
      field("n_train", &TrainConfig::n_train),
      field("n_eval", &TrainConfig::n_eval),
      field("pool_size", &TrainConfig::pool_size),
      field("n_topics", &TrainConfig::n_topics),
      field("vocab_max", &TrainConfig::vocab_max),
      field("d_model", &TrainConfig::d_model),
      field("n_heads", &TrainConfig::n_heads),
      field("n_layers", &TrainConfig::n_layers),
      field("d_ff", &TrainConfig::d_ff),
      field("d_proj", &TrainConfig::d_proj),
      field("max_seq_len", &TrainConfig::max_seq_len),
      field("gen_max_len", &TrainConfig::gen_max_len),
      field("bs", &TrainConfig::bs),
      field("epochs_warmup", &TrainConfig::epochs_warmup),
      field("epochs_multitask", &TrainConfig::epochs_multitask),
      field("epochs_adversarial", &TrainConfig::epochs_adversarial),
      field("epochs_rerank", &TrainConfig::epochs_rerank),
      field("warmup_lr", &TrainConfig::warmup_lr),
      field("retrieval_lr", &TrainConfig::retrieval_lr),
      field("g_lr", &TrainConfig::g_lr),
      field("d_lr", &TrainConfig::d_lr),
      field("rerank_lr", &TrainConfig::rerank_lr),
      field("margin1", &TrainConfig::margin1),
      field("margin2", &TrainConfig::margin2),
      field("lambda", &TrainConfig::lambda),
      field("alpha", &TrainConfig::alpha),
      field("sqd_margin", &TrainConfig::sqd_margin),
      field("dropout_rate", &TrainConfig::dropout_rate),
      field("train_negatives", &TrainConfig::train_negatives),
      field("qrm_random_negatives", &TrainConfig::qrm_random_negatives),
      field("adv_queries_per_epoch", &TrainConfig::adv_queries_per_epoch),
      field("rerank_queries_per_epoch", &TrainConfig::rerank_queries_per_epoch),
      field("eval_candidates", &TrainConfig::eval_candidates),
      field("eval_queries", &TrainConfig::eval_queries),
      field("threads", &TrainConfig::threads),
      field("no_kg", &TrainConfig::no_kg),
      field("no_reward", &TrainConfig::no_reward),
      field("no_multi_learning", &TrainConfig::no_multi_learning),
  };
  return k;
}

const Field* find_field(std::string_view key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

void require(bool ok, const char* field_name, const std::string& what) {
  if (!ok) throw ConfigError("config field " + std::string(field_name) + ": " + what);
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

TrainConfig profile_defaults(std::string_view profile) {
  TrainConfig c;
  if (profile == "desk") return c;
  if (profile == "full") {
    c.profile = "full";
    c.bs = 64;
    c.max_seq_len = 256;
    c.epochs_warmup = 5;
    c.epochs_multitask = 10;
    c.epochs_adversarial = 20;
    c.epochs_rerank = 3;
    c.train_negatives = 20;
    return c;
  }
  throw ConfigError("config field profile: unknown profile '" + std::string(profile) + "'");
}

void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + std::string(key) + "'");
  f->set(cfg, value);
}

void TrainConfig::validate() const {
  require(profile == "desk" || profile == "full", "profile", "must be desk or full");
  require(m >= 0, "m", "must be >= 0");
  require(n >= 0, "n", "must be >= 0");
  require(m + n > 0, "m", "m and n cannot both be 0");
  require(k >= 1, "k", "must be >= 1");
  require(k <= m + n + 1, "k", "must not exceed m + n + 1");
  require(n_train >= 1, "n_train", "must be >= 1");
  require(n_eval >= 1, "n_eval", "must be >= 1");
  require(pool_size >= 20, "pool_size", "must be >= 20");
  require(pool_size >= n_eval, "pool_size", "must be >= n_eval");
  require(n_topics >= 20 && n_topics <= max_topics(), "n_topics", "must lie in [20, " + std::to_string(max_topics()) + "]");
  require(vocab_max > static_cast<int>(kReservedTokens.size()), "vocab_max", "must exceed the reserved tokens");
  require(d_model >= 1, "d_model", "must be >= 1");
  require(n_heads >= 1 && d_model % n_heads == 0, "n_heads", "must divide d_model");
  require(n_layers >= 1, "n_layers", "must be >= 1");
  require(d_ff >= 1, "d_ff", "must be >= 1");
  require(d_proj >= 1, "d_proj", "must be >= 1");
  require(max_seq_len >= 4, "max_seq_len", "must be >= 4");
  require(gen_max_len >= 1 && gen_max_len < max_seq_len, "gen_max_len", "must lie in [1, max_seq_len)");
  require(bs >= 1, "bs", "must be >= 1");
  require(epochs_warmup >= 0, "epochs_warmup", "must be >= 0");
  require(epochs_multitask >= 0, "epochs_multitask", "must be >= 0");
  require(epochs_adversarial >= 0, "epochs_adversarial", "must be >= 0");
  require(epochs_rerank >= 0, "epochs_rerank", "must be >= 0");
  require(warmup_lr > 0, "warmup_lr", "must be > 0");
  require(retrieval_lr > 0, "retrieval_lr", "must be > 0");
  require(g_lr > 0, "g_lr", "must be > 0");
  require(d_lr > 0, "d_lr", "must be > 0");
  require(rerank_lr > 0, "rerank_lr", "must be > 0");
  require(margin1 > 0, "margin1", "must be > 0");
  require(margin2 > 0, "margin2", "must be > 0");
  require(lambda >= 0, "lambda", "must be >= 0");
  require(alpha >= 0, "alpha", "must be >= 0");
  require(sqd_margin > 0, "sqd_margin", "must be > 0");
  require(dropout_rate >= 0 && dropout_rate < 1, "dropout_rate", "must lie in [0, 1)");
  require(train_negatives >= 1, "train_negatives", "must be >= 1");
  require(qrm_random_negatives >= 0, "qrm_random_negatives", "must be >= 0");
  require(adv_queries_per_epoch >= 1, "adv_queries_per_epoch", "must be >= 1");
  require(rerank_queries_per_epoch >= 1, "rerank_queries_per_epoch", "must be >= 1");
  require(eval_candidates >= 2 && eval_candidates <= pool_size + 1, "eval_candidates",
          "must lie in [2, pool_size + 1]");
  require(eval_queries >= 0, "eval_queries", "must be >= 0");
  require(threads >= 0, "threads", "must be >= 0");
}

ModelConfig TrainConfig::model_config(int vocab_size) const {
  ModelConfig mc;
  mc.vocab_size = vocab_size;
  mc.d_model = d_model;
  mc.n_heads = n_heads;
  mc.n_layers = n_layers;
  mc.d_ff = d_ff;
  mc.max_seq_len = max_seq_len;
  mc.d_proj = d_proj;
  mc.separate_sqd_encoder = no_multi_learning;
  return mc;
}

json TrainConfig::to_json() const {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c = profile_defaults(j.value("profile", std::string("desk")));
  for (const auto& [key, value] : j.items()) {
    const Field* f = find_field(key);
    if (!f) throw ConfigError("unknown config key '" + key + "'");
    f->set(c, value.is_string() ? value.get<std::string>() : value.dump());
  }
  c.validate();
  return c;
}

TrainConfig parse_config_text(std::string_view text) {
  std::vector<std::tuple<int, std::string, std::string>> entries;
  std::istringstream in{std::string(text)};
  int line_no = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key or value");
    entries.emplace_back(line_no, std::string(key), std::string(value));
  }
  std::string profile = "desk";
  for (const auto& [ln, key, value] : entries)
    if (key == "profile") profile = value;
  TrainConfig cfg = profile_defaults(profile);
  for (const auto& [ln, key, value] : entries) {
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(ln) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace heronet
