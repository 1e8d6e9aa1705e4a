// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace heronet {

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kBos = 2;
inline constexpr int kEos = 3;
inline constexpr int kSep = 4;
inline constexpr int kEou = 5;
inline constexpr std::array<std::string_view, 6> kReservedTokens{"[PAD]", "[UNK]", "[BOS]", "[EOS]", "[SEP]", "[EOU]"};

/// Whitespace-delimited words of one turn.
struct Utterance {
  std::vector<std::string> words;

  static Utterance parse(std::string_view text);
  std::string text() const;
  bool empty() const { return words.empty(); }
  std::size_t size() const { return words.size(); }

  friend bool operator==(const Utterance&, const Utterance&) = default;
  friend auto operator<=>(const Utterance&, const Utterance&) = default;
};

struct DialoguePair {
  std::vector<Utterance> context;  // oldest first
  Utterance query;
  Utterance response;
  int topic = -1;  // paraphrase cluster; in-memory only

  friend bool operator==(const DialoguePair& a, const DialoguePair& b) {
    return a.context == b.context && a.query == b.query && a.response == b.response;
  }
};

struct PoolEntry {
  int id = 0;
  Utterance query;
  Utterance response;
  int topic = -1;

  friend bool operator==(const PoolEntry& a, const PoolEntry& b) {
    return a.id == b.id && a.query == b.query && a.response == b.response;
  }
};

struct CandidatePool {
  std::vector<PoolEntry> entries;
  std::size_t size() const { return entries.size(); }
  friend bool operator==(const CandidatePool&, const CandidatePool&) = default;
};

struct Corpus {
  std::vector<DialoguePair> train;
  std::vector<DialoguePair> valid;
  std::vector<DialoguePair> test;
  CandidatePool pool;
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

struct TokenSequence {
  std::vector<int> ids;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  std::span<const int> span() const { return ids; }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
  friend auto operator<=>(const TokenSequence&, const TokenSequence&) = default;
};

class Vocab {
 public:
  Vocab();

  static Vocab build(const Corpus& corpus, int max_size = 512);
  static Vocab from_tokens(std::vector<std::string> tokens);

  int id(std::string_view token) const;  // UNK when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Unknown words map to UNK; output truncated to `max_seq_len`. Throws on empty text.
TokenSequence encode_text(const Utterance& text, const Vocab& vocab, int max_seq_len);
/// Inverse of encode_text; PAD, BOS and EOS are dropped.
Utterance decode_tokens(const TokenSequence& tokens, const Vocab& vocab);

/// query [EOU] turn_k [EOU] ... [EOU] turn_1, most recent turn first.
Utterance splice_context(const DialoguePair& pair);

struct CorpusOptions {
  int n_topics = 24;
};

/// Number of distinct paraphrase clusters the generator can produce.
int max_topics();

Corpus generate_synthetic_corpus(std::uint64_t seed, int n_train, int n_eval, int pool_size,
                                 const CorpusOptions& options = {});

/// Returns human-readable invariant violations; empty when the corpus is valid.
std::vector<std::string> validate_corpus(const Corpus& corpus);

void write_pairs_jsonl(const std::filesystem::path& path, const std::vector<DialoguePair>& pairs);
std::vector<DialoguePair> read_pairs_jsonl(const std::filesystem::path& path);
void write_pool_jsonl(const std::filesystem::path& path, const CandidatePool& pool);
CandidatePool read_pool_jsonl(const std::filesystem::path& path);

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace heronet
