// SPDX-License-Identifier: Apache-2.0
#include "heronet/bm25.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace heronet {

namespace {

std::vector<int> distinct_terms(std::span<const int> query) {
  std::vector<int> terms(query.begin(), query.end());
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
  return terms;
}

}  // namespace

Bm25Index::Bm25Index(const std::vector<TokenSequence>& docs, Bm25Params params) : params_(params) {
  doc_len_.reserve(docs.size());
  long total = 0;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    std::map<int, int> tf;
    for (int t : docs[d].ids) ++tf[t];
    for (auto [term, count] : tf) postings_[term].push_back({static_cast<int>(d), count});
    doc_len_.push_back(static_cast<int>(docs[d].size()));
    total += static_cast<long>(docs[d].size());
  }
  avgdl_ = total == 0 ? 1.0 : static_cast<double>(total) / static_cast<double>(docs.size());
}

int Bm25Index::df(int term) const {
  auto it = postings_.find(term);
  return it == postings_.end() ? 0 : static_cast<int>(it->second.size());
}

double Bm25Index::idf(int term) const {
  const double n = doc_count();
  const double d = df(term);
  return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
}

const std::vector<Bm25Index::Posting>& Bm25Index::postings(int term) const {
  static const std::vector<Posting> empty;
  auto it = postings_.find(term);
  return it == postings_.end() ? empty : it->second;
}

double Bm25Index::score(std::span<const int> query, int doc) const {
  if (doc < 0 || doc >= doc_count()) throw std::out_of_range("bm25: invalid doc id " + std::to_string(doc));
  const double norm = params_.k1 * (1.0 - params_.b + params_.b * doc_len_[doc] / avgdl_);
  double s = 0.0;
  for (int term : distinct_terms(query)) {
    const auto& plist = postings(term);
    auto it = std::lower_bound(plist.begin(), plist.end(), doc, [](const Posting& p, int d) { return p.doc < d; });
    if (it == plist.end() || it->doc != doc) continue;
    const double tf = it->tf;
    s += idf(term) * tf * (params_.k1 + 1.0) / (tf + norm);
  }
  return s;
}

std::vector<double> Bm25Index::score_all(std::span<const int> query) const {
  std::vector<double> scores(doc_len_.size(), 0.0);
  for (int term : distinct_terms(query)) {
    const double w = idf(term);
    for (const auto& p : postings(term)) {
      const double norm = params_.k1 * (1.0 - params_.b + params_.b * doc_len_[p.doc] / avgdl_);
      scores[p.doc] += w * p.tf * (params_.k1 + 1.0) / (p.tf + norm);
    }
  }
  return scores;
}

std::vector<int> Bm25Index::top_k(std::span<const int> query, int k, const std::unordered_set<int>& exclude) const {
  if (k < 1) throw std::invalid_argument("bm25 top_k: k must be >= 1");
  const auto scores = score_all(query);
  std::vector<int> ids;
  ids.reserve(scores.size());
  for (int d = 0; d < doc_count(); ++d)
    if (!exclude.contains(d)) ids.push_back(d);
  auto better = [&](int a, int b) { return scores[a] != scores[b] ? scores[a] > scores[b] : a < b; };
  const auto keep = std::min<std::size_t>(ids.size(), static_cast<std::size_t>(k));
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep), ids.end(), better);
  ids.resize(keep);
  return ids;
}

Bm25Index index_pool_queries(const CandidatePool& pool, const Vocab& vocab, int max_seq_len) {
  std::vector<TokenSequence> docs;
  docs.reserve(pool.size());
  for (const auto& e : pool.entries)
    docs.push_back(e.query.empty() ? TokenSequence{} : encode_text(e.query, vocab, max_seq_len));
  return Bm25Index(docs);
}

Bm25Index index_pool_responses(const CandidatePool& pool, const Vocab& vocab, int max_seq_len) {
  std::vector<TokenSequence> docs;
  docs.reserve(pool.size());
  for (const auto& e : pool.entries) docs.push_back(encode_text(e.response, vocab, max_seq_len));
  return Bm25Index(docs);
}

}  // namespace heronet
