// SPDX-License-Identifier: Apache-2.0
#include "heronet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <tuple>
#include <stdexcept>
#include <unordered_map>

namespace heronet {

namespace {

void check_pairs(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": candidate/reference count mismatch");
  if (a == 0) throw std::invalid_argument(std::string(what) + ": empty input");
}

std::map<std::vector<std::string>, int> ngram_counts(const Words& w, std::size_t n) {
  std::map<std::vector<std::string>, int> c;
  if (w.size() < n) return c;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++c[std::vector<std::string>(w.begin() + i, w.begin() + i + n)];
  return c;
}

}  // namespace

double bleu(std::span<const Words> candidates, std::span<const Words> references) {
  check_pairs(candidates.size(), references.size(), "bleu");
  constexpr double eps = 1e-9;
  double matches[4] = {0, 0, 0, 0}, totals[4] = {0, 0, 0, 0};
  double cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cc = ngram_counts(candidates[i], n);
      const auto rc = ngram_counts(references[i], n);
      for (const auto& [g, count] : cc) {
        totals[n - 1] += count;
        if (auto it = rc.find(g); it != rc.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  if (cand_len == 0) return 0.0;
  double log_sum = 0.0;
  int orders = 0;
  for (int n = 0; n < 4; ++n) {
    if (totals[n] == 0) continue;
    log_sum += std::log((matches[n] > 0 ? matches[n] : eps) / totals[n]);
    ++orders;
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return 100.0 * bp * std::exp(log_sum / orders);
}

double rouge_l(const Words& candidate, const Words& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const std::size_t n = candidate.size(), m = reference.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j)
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  const double lcs = prev[m];
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(n), r = lcs / static_cast<double>(m);
  return 100.0 * 2.0 * p * r / (p + r);
}

double rouge_l(std::span<const Words> candidates, std::span<const Words> references) {
  check_pairs(candidates.size(), references.size(), "rouge_l");
  double s = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += rouge_l(candidates[i], references[i]);
  return s / static_cast<double>(candidates.size());
}

namespace {

// Minimum chunk count over all maximum exact-match alignments.
class ChunkSearch {
 public:
  ChunkSearch(const Words& c, const Words& r) : c_(c), r_(r) {
    std::unordered_map<std::string, int> rc, cc;
    for (const auto& w : r) ++rc[w];
    for (const auto& w : c) ++cc[w];
    for (const auto& [w, k] : cc) need_[w] = std::min(k, rc.count(w) ? rc.at(w) : 0);
  }

  int matches() const {
    int m = 0;
    for (const auto& [w, k] : need_) m += k;
    return m;
  }

  int min_chunks() {
    if (r_.size() > 64) return greedy_chunks();
    return search(0, -1, 0, need_);
  }

 private:
  using Need = std::unordered_map<std::string, int>;

  int occurrences_from(std::size_t i, const std::string& w) const {
    int k = 0;
    for (std::size_t j = i; j < c_.size(); ++j) k += c_[j] == w;
    return k;
  }

  int search(std::size_t i, int prev_ref, std::uint64_t used, Need& need) {
    if (i == c_.size()) return 0;
    const auto key = std::make_tuple(i, prev_ref, used);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    const auto& w = c_[i];
    int best = std::numeric_limits<int>::max() / 2;
    auto nit = need.find(w);
    const int still = nit == need.end() ? 0 : nit->second;
    if (occurrences_from(i + 1, w) >= still) best = search(i + 1, -1, used, need);
    if (still > 0) {
      for (std::size_t j = 0; j < r_.size(); ++j) {
        if (r_[j] != w || (used >> j & 1U)) continue;
        --nit->second;
        const int add = (prev_ref >= 0 && static_cast<int>(j) == prev_ref + 1) ? 0 : 1;
        best = std::min(best, add + search(i + 1, static_cast<int>(j), used | (std::uint64_t{1} << j), need));
        ++nit->second;
      }
    }
    memo_.emplace(key, best);
    return best;
  }

  int greedy_chunks() {
    std::vector<bool> used(r_.size(), false);
    Need need = need_;
    int chunks = 0, prev = -2;
    for (std::size_t i = 0; i < c_.size(); ++i) {
      auto it = need.find(c_[i]);
      if (it == need.end() || it->second == 0) {
        prev = -2;
        continue;
      }
      int pick = -1;
      if (prev >= -1 && prev + 1 < static_cast<int>(r_.size()) && !used[prev + 1] && r_[prev + 1] == c_[i])
        pick = prev + 1;
      for (std::size_t j = 0; j < r_.size() && pick < 0; ++j)
        if (!used[j] && r_[j] == c_[i]) pick = static_cast<int>(j);
      used[pick] = true;
      --it->second;
      if (pick != prev + 1) ++chunks;
      prev = pick;
    }
    return chunks;
  }

  const Words& c_;
  const Words& r_;
  Need need_;
  std::map<std::tuple<std::size_t, int, std::uint64_t>, int> memo_;
};

}  // namespace

double meteor(const Words& candidate, const Words& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  ChunkSearch search(candidate, reference);
  const int matches = search.matches();
  if (matches == 0) return 0.0;
  const int chunks = search.min_chunks();
  const double p = static_cast<double>(matches) / static_cast<double>(candidate.size());
  const double r = static_cast<double>(matches) / static_cast<double>(reference.size());
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(chunks) / static_cast<double>(matches);
  return fmean * (1.0 - 0.5 * frag * frag * frag);
}

double meteor(std::span<const Words> candidates, std::span<const Words> references) {
  check_pairs(candidates.size(), references.size(), "meteor");
  double s = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += meteor(candidates[i], references[i]);
  return s / static_cast<double>(candidates.size());
}

double chrf(std::string_view candidate, std::string_view reference) {
  std::string c, r;
  for (char ch : candidate)
    if (ch != ' ') c.push_back(ch);
  for (char ch : reference)
    if (ch != ' ') r.push_back(ch);
  constexpr double beta = 2.0;
  double p_sum = 0.0, r_sum = 0.0;
  int orders = 0;
  for (std::size_t n = 1; n <= 6; ++n) {
    std::map<std::string, int> cc, rc;
    for (std::size_t i = 0; i + n <= c.size(); ++i) ++cc[c.substr(i, n)];
    for (std::size_t i = 0; i + n <= r.size(); ++i) ++rc[r.substr(i, n)];
    const double c_total = c.size() >= n ? static_cast<double>(c.size() - n + 1) : 0.0;
    const double r_total = r.size() >= n ? static_cast<double>(r.size() - n + 1) : 0.0;
    if (c_total == 0 && r_total == 0) continue;
    double match = 0.0;
    for (const auto& [g, k] : cc)
      if (auto it = rc.find(g); it != rc.end()) match += std::min(k, it->second);
    p_sum += c_total > 0 ? match / c_total : 0.0;
    r_sum += r_total > 0 ? match / r_total : 0.0;
    ++orders;
  }
  if (orders == 0) return 0.0;
  const double p = p_sum / orders, rr = r_sum / orders;
  if (p == 0.0 && rr == 0.0) return 0.0;
  return 100.0 * (1.0 + beta * beta) * p * rr / (beta * beta * p + rr);
}

double chrf(std::span<const Words> candidates, std::span<const Words> references) {
  check_pairs(candidates.size(), references.size(), "chrf");
  auto join = [](const Words& w) {
    std::string s;
    for (const auto& x : w) s += x;
    return s;
  };
  double s = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += chrf(join(candidates[i]), join(references[i]));
  return s / static_cast<double>(candidates.size());
}

GenReport generation_metrics(std::span<const Words> candidates, std::span<const Words> references) {
  return {bleu(candidates, references), rouge_l(candidates, references), meteor(candidates, references),
          chrf(candidates, references)};
}

RetrReport retrieval_metrics(std::span<const RankOutcome> rankings) {
  if (rankings.empty()) throw std::invalid_argument("retrieval_metrics: no rankings");
  RetrReport r;
  for (const auto& o : rankings) {
    if (o.rank < 1 || o.rank > o.pool_size) throw std::invalid_argument("retrieval_metrics: rank outside [1, pool_size]");
    r.mrr += 1.0 / o.rank;
    r.acc += o.rank <= 1;
    r.hit5 += o.rank <= 5;
    r.hit10 += o.rank <= 10;
    r.hit50 += o.rank <= 50;
  }
  const double n = static_cast<double>(rankings.size());
  r.mrr /= n;
  r.acc /= n;
  r.hit5 /= n;
  r.hit10 /= n;
  r.hit50 /= n;
  return r;
}

double ranking_auc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty()) throw std::invalid_argument("ranking_auc: empty class");
  double wins = 0.0;
  for (double p : positives)
    for (double q : negatives) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
  return wins / (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

nlohmann::json to_json(const GenReport& g) {
  return {{"bleu", g.bleu}, {"rouge_l", g.rouge_l}, {"meteor", g.meteor}, {"chrf", g.chrf}};
}

nlohmann::json to_json(const RetrReport& r) {
  return {{"mrr", r.mrr}, {"acc", r.acc}, {"hit@5", r.hit5}, {"hit@10", r.hit10}, {"hit@50", r.hit50}};
}

}  // namespace heronet
