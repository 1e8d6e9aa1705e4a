// SPDX-License-Identifier: Apache-2.0
#include "heronet/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "heronet/rng.hpp"

namespace heronet {

namespace fs = std::filesystem;
using nlohmann::json;

Utterance Utterance::parse(std::string_view text) {
  Utterance u;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) u.words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return u;
}

std::string Utterance::text() const {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  for (auto t : kReservedTokens) {
    index_.emplace(std::string(t), static_cast<int>(tokens_.size()));
    tokens_.emplace_back(t);
  }
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  Vocab v;
  if (tokens.size() < kReservedTokens.size()) throw std::invalid_argument("vocab: missing reserved tokens");
  for (std::size_t i = 0; i < kReservedTokens.size(); ++i)
    if (tokens[i] != kReservedTokens[i]) throw std::invalid_argument("vocab: reserved token order mismatch");
  for (std::size_t i = kReservedTokens.size(); i < tokens.size(); ++i) {
    if (v.index_.contains(tokens[i])) throw std::invalid_argument("vocab: duplicate token " + tokens[i]);
    v.index_.emplace(tokens[i], static_cast<int>(v.tokens_.size()));
    v.tokens_.push_back(tokens[i]);
  }
  return v;
}

Vocab Vocab::build(const Corpus& corpus, int max_size) {
  if (corpus.train.empty() && corpus.pool.entries.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, long> counts;
  auto add = [&](const Utterance& u) {
    for (const auto& w : u.words) ++counts[w];
  };
  for (const auto& p : corpus.train) {
    for (const auto& c : p.context) add(c);
    add(p.query);
    add(p.response);
  }
  for (const auto& e : corpus.pool.entries) {
    add(e.query);
    add(e.response);
  }
  for (auto t : kReservedTokens) counts.erase(std::string(t));
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab v;
  const int room = std::max(0, max_size - static_cast<int>(kReservedTokens.size()));
  for (int i = 0; i < room && i < static_cast<int>(ranked.size()); ++i) {
    v.index_.emplace(ranked[i].first, v.size());
    v.tokens_.push_back(ranked[i].first);
  }
  return v;
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.contains(std::string(token)); }

const std::string& Vocab::token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

void Vocab::save(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) tokens.push_back(line);
  return from_tokens(std::move(tokens));
}

TokenSequence encode_text(const Utterance& text, const Vocab& vocab, int max_seq_len) {
  if (text.empty()) throw std::invalid_argument("encode_text: empty text");
  if (max_seq_len <= 0) throw std::invalid_argument("encode_text: max_seq_len must be positive");
  TokenSequence out;
  const auto n = std::min<std::size_t>(text.words.size(), static_cast<std::size_t>(max_seq_len));
  out.ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.ids.push_back(vocab.id(text.words[i]));
  return out;
}

Utterance decode_tokens(const TokenSequence& tokens, const Vocab& vocab) {
  Utterance u;
  for (int id : tokens.ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    u.words.push_back(vocab.token(id));
  }
  return u;
}

Utterance splice_context(const DialoguePair& pair) {
  Utterance out = pair.query;
  for (auto it = pair.context.rbegin(); it != pair.context.rend(); ++it) {
    out.words.emplace_back(kReservedTokens[kEou]);
    out.words.insert(out.words.end(), it->words.begin(), it->words.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

struct Subject {
  std::string_view name;
  std::array<std::string_view, 2> components;
};

constexpr std::array<Subject, 13> kSubjects{{
    {"wifi", {"network-manager", "iwlwifi"}},
    {"sound", {"pulseaudio", "alsamixer"}},
    {"printer", {"cups", "hplip"}},
    {"grub", {"bootloader", "grub-install"}},
    {"display", {"xorg", "xrandr"}},
    {"bluetooth", {"bluez", "bluetoothctl"}},
    {"disk", {"gparted", "fdisk"}},
    {"usb", {"udev", "lsusb"}},
    {"ssh", {"openssh-server", "sshd"}},
    {"firewall", {"ufw", "iptables"}},
    {"python", {"pip", "venv"}},
    {"kernel", {"dkms", "linux-image"}},
    {"mouse", {"libinput", "xinput"}},
}};

struct Intent {
  std::vector<std::string_view> queries;    // "{s}" = subject
  std::vector<std::string_view> responses;  // "{c}" = component
};

const std::array<Intent, 4>& intents() {
  static const std::array<Intent, 4> k{{
      {{"my {s} is not working", "{s} stopped working after the upgrade", "why does {s} keep failing",
        "{s} is broken again", "cannot get {s} to work"},
       {"restart {c} and check the logs", "look at dmesg for {c} errors", "reinstall {c} from the repos"}},
      {{"how do i install {s}", "what is the best way to set up {s}", "need help installing {s}",
        "where can i get {s}"},
       {"sudo apt install {c}", "install the {c} package with apt", "get {c} from the software center"}},
      {{"how can i configure {s}", "where are the settings for {s}", "how to change {s} options",
        "is there a config file for {s}"},
       {"edit the {c} config under etc", "use {c} to adjust the settings", "the {c} defaults live in etc"}},
      {{"how do i remove {s} completely", "uninstall {s} please", "how to get rid of {s}",
        "{s} is useless how do i purge it"},
       {"sudo apt purge {c} then autoremove", "remove {c} and its config files", "purge {c} with apt"}},
  }};
  return k;
}

constexpr std::array<std::string_view, 5> kReleases{"jammy", "focal", "bionic", "noble", "xenial"};
constexpr std::array<std::string_view, 4> kQueryPrefixes{"", "hi", "hey all", "hello"};
constexpr std::array<std::string_view, 4> kQuerySuffixes{"on {r}", "on {r} please", "running {r}", "using {r} any ideas"};
constexpr std::array<std::string_view, 4> kResponseSuffixes{"on {r}", "on {r} then reboot", "for {r} as root",
                                                            "on {r} and report back"};
constexpr std::array<std::string_view, 8> kChatter{"hi everyone",
                                                   "anyone around",
                                                   "i am on ubuntu {r}",
                                                   "just did a fresh install",
                                                   "this is my first time on irc",
                                                   "thanks in advance",
                                                   "it worked yesterday",
                                                   "i tried googling it"};

struct TopicSpec {
  int subject;
  int intent;
};

TopicSpec topic_spec(int topic) {
  const int s = topic % static_cast<int>(kSubjects.size());
  const int i = (topic / static_cast<int>(kSubjects.size()) + s) % 4;
  return {s, i};
}

std::string fill(std::string_view tmpl, std::string_view key, std::string_view value) {
  std::string out(tmpl);
  for (std::size_t pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size()))
    out.replace(pos, key.size(), value);
  return out;
}

template <class C>
const auto& pick(const C& c, Rng& rng) {
  return c[uniform_index(rng, c.size())];
}

std::string release(Rng& rng) { return std::string(pick(kReleases, rng)); }

Utterance make_query(int topic, int variant, std::string_view rel, Rng& rng) {
  const auto spec = topic_spec(topic);
  const auto& intent = intents()[spec.intent];
  std::string body = fill(intent.queries[variant % intent.queries.size()], "{s}", kSubjects[spec.subject].name);
  std::string text = std::string(pick(kQueryPrefixes, rng)) + " " + body + " " +
                     fill(pick(kQuerySuffixes, rng), "{r}", rel);
  return Utterance::parse(text);
}

Utterance make_response(int topic, std::string_view rel, Rng& rng) {
  const auto spec = topic_spec(topic);
  const auto& intent = intents()[spec.intent];
  const auto& tmpl = pick(intent.responses, rng);
  const auto& comp = pick(kSubjects[spec.subject].components, rng);
  return Utterance::parse(fill(tmpl, "{c}", comp) + " " + fill(pick(kResponseSuffixes, rng), "{r}", rel));
}

int query_variants(int topic) { return static_cast<int>(intents()[topic_spec(topic).intent].queries.size()); }

// The release named in the query is echoed by its response.
DialoguePair make_pair(int topic, std::string& rel, Rng& rng) {
  DialoguePair p;
  rel = release(rng);
  p.topic = topic;
  const auto turns = uniform_index(rng, 4);
  for (std::uint64_t t = 0; t < turns; ++t)
    p.context.push_back(Utterance::parse(fill(pick(kChatter, rng), "{r}", rel)));
  p.query = make_query(topic, static_cast<int>(uniform_index(rng, query_variants(topic))), rel, rng);
  p.response = make_response(topic, rel, rng);
  return p;
}

std::string pair_key(const DialoguePair& p) {
  std::string k;
  for (const auto& c : p.context) k += c.text() + "|";
  return k + "#" + p.query.text() + "#" + p.response.text();
}

}  // namespace

int max_topics() { return static_cast<int>(kSubjects.size() * intents().size()); }

Corpus generate_synthetic_corpus(std::uint64_t seed, int n_train, int n_eval, int pool_size,
                                 const CorpusOptions& options) {
  if (n_train < 1 || n_eval < 1) throw std::invalid_argument("generate_synthetic_corpus: counts must be >= 1");
  if (pool_size < 20) throw std::invalid_argument("generate_synthetic_corpus: pool_size must be >= 20");
  if (pool_size < n_eval)
    throw std::invalid_argument("generate_synthetic_corpus: pool_size smaller than the number of test pairs");
  if (options.n_topics < 20 || options.n_topics > max_topics())
    throw std::invalid_argument("generate_synthetic_corpus: n_topics must lie in [20, " +
                                std::to_string(max_topics()) + "]");
  Rng rng(derive_seed(seed, 0xC0'4B05ULL));
  Corpus corpus;
  std::set<std::string> seen;
  std::vector<std::string> test_releases;
  auto draw_split = [&](int count, std::vector<DialoguePair>& out, std::vector<std::string>* releases) {
    out.reserve(count);
    std::string rel;
    while (static_cast<int>(out.size()) < count) {
      const int topic = static_cast<int>(uniform_index(rng, options.n_topics));
      DialoguePair p = make_pair(topic, rel, rng);
      if (!seen.insert(pair_key(p)).second) continue;
      out.push_back(std::move(p));
      if (releases != nullptr) releases->push_back(rel);
    }
  };
  draw_split(n_train, corpus.train, nullptr);
  draw_split(n_eval, corpus.valid, nullptr);
  draw_split(n_eval, corpus.test, &test_releases);

  std::vector<PoolEntry> entries;
  entries.reserve(pool_size);
  for (std::size_t t = 0; t < corpus.test.size(); ++t) {
    // Store the true response under a different paraphrase of its query.
    const auto& p = corpus.test[t];
    const auto& rel = test_releases[t];
    PoolEntry e;
    e.topic = p.topic;
    const int variants = query_variants(p.topic);
    Utterance q = make_query(p.topic, static_cast<int>(uniform_index(rng, variants)), rel, rng);
    for (int attempt = 0; attempt < 8 && q == p.query; ++attempt)
      q = make_query(p.topic, static_cast<int>(uniform_index(rng, variants)), rel, rng);
    e.query = std::move(q);
    e.response = p.response;
    entries.push_back(std::move(e));
  }
  while (static_cast<int>(entries.size()) < pool_size) {
    PoolEntry e;
    e.topic = static_cast<int>(uniform_index(rng, options.n_topics));
    const auto rel = release(rng);
    e.query = make_query(e.topic, static_cast<int>(uniform_index(rng, query_variants(e.topic))), rel, rng);
    e.response = make_response(e.topic, rel, rng);
    entries.push_back(std::move(e));
  }
  shuffle(entries, rng);
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].id = static_cast<int>(i);
  corpus.pool.entries = std::move(entries);
  return corpus;
}

std::vector<std::string> validate_corpus(const Corpus& corpus) {
  std::vector<std::string> errors;
  auto check_pairs = [&](const std::vector<DialoguePair>& pairs, std::string_view split) {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (pairs[i].query.empty()) errors.push_back(std::string(split) + "[" + std::to_string(i) + "]: empty query");
      if (pairs[i].response.empty())
        errors.push_back(std::string(split) + "[" + std::to_string(i) + "]: empty response");
    }
  };
  check_pairs(corpus.train, "train");
  check_pairs(corpus.valid, "valid");
  check_pairs(corpus.test, "test");

  std::map<std::string, std::string> owner;
  auto check_disjoint = [&](const std::vector<DialoguePair>& pairs, const std::string& split) {
    for (const auto& p : pairs) {
      auto [it, inserted] = owner.emplace(pair_key(p), split);
      if (!inserted && it->second != split)
        errors.push_back("pair shared between " + it->second + " and " + split + ": " + p.query.text());
    }
  };
  check_disjoint(corpus.train, "train");
  check_disjoint(corpus.valid, "valid");
  check_disjoint(corpus.test, "test");

  std::set<std::string> responses;
  for (std::size_t i = 0; i < corpus.pool.entries.size(); ++i) {
    const auto& e = corpus.pool.entries[i];
    if (e.id != static_cast<int>(i)) errors.push_back("pool ids are not dense at index " + std::to_string(i));
    if (e.response.empty()) errors.push_back("pool entry " + std::to_string(i) + " has empty response");
    responses.insert(e.response.text());
  }
  for (const auto& p : corpus.test)
    if (!responses.contains(p.response.text()))
      errors.push_back("test response missing from pool: " + p.response.text());
  return errors;
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

}  // namespace

void write_pairs_jsonl(const fs::path& path, const std::vector<DialoguePair>& pairs) {
  auto out = open_out(path);
  for (const auto& p : pairs) {
    json j;
    j["context"] = json::array();
    for (const auto& c : p.context) j["context"].push_back(c.text());
    j["query"] = p.query.text();
    j["response"] = p.response.text();
    out << j.dump() << '\n';
  }
}

std::vector<DialoguePair> read_pairs_jsonl(const fs::path& path) {
  auto in = open_in(path);
  std::vector<DialoguePair> pairs;
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      DialoguePair p;
      for (const auto& c : j.at("context")) p.context.push_back(Utterance::parse(c.get<std::string>()));
      p.query = Utterance::parse(j.at("query").get<std::string>());
      p.response = Utterance::parse(j.at("response").get<std::string>());
      if (p.query.empty() || p.response.empty()) throw std::invalid_argument("empty query or response");
      pairs.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pairs;
}

void write_pool_jsonl(const fs::path& path, const CandidatePool& pool) {
  auto out = open_out(path);
  for (const auto& e : pool.entries) {
    json j;
    j["id"] = e.id;
    j["query"] = e.query.text();
    j["response"] = e.response.text();
    out << j.dump() << '\n';
  }
}

CandidatePool read_pool_jsonl(const fs::path& path) {
  auto in = open_in(path);
  CandidatePool pool;
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      PoolEntry e;
      e.id = j.at("id").get<int>();
      e.query = Utterance::parse(j.at("query").get<std::string>());
      e.response = Utterance::parse(j.at("response").get<std::string>());
      if (e.id != static_cast<int>(pool.entries.size())) throw std::invalid_argument("pool ids must be dense");
      if (e.response.empty()) throw std::invalid_argument("empty response");
      pool.entries.push_back(std::move(e));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pool;
}

void save_corpus(const fs::path& dir, const Corpus& corpus) {
  fs::create_directories(dir);
  write_pairs_jsonl(dir / "train.jsonl", corpus.train);
  write_pairs_jsonl(dir / "valid.jsonl", corpus.valid);
  write_pairs_jsonl(dir / "test.jsonl", corpus.test);
  write_pool_jsonl(dir / "pool.jsonl", corpus.pool);
}

Corpus load_corpus(const fs::path& dir) {
  Corpus c;
  c.train = read_pairs_jsonl(dir / "train.jsonl");
  c.valid = read_pairs_jsonl(dir / "valid.jsonl");
  c.test = read_pairs_jsonl(dir / "test.jsonl");
  c.pool = read_pool_jsonl(dir / "pool.jsonl");
  return c;
}

}  // namespace heronet
