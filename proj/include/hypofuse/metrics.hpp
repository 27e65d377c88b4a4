#pragma once

// Translation quality metrics.
//
// BLEU: corpus-level, orders 1..4, clipped n-gram precision, brevity penalty
//   BP = min(1, exp(1 - ref_len/hyp_len)), score = 100 * BP *
//   exp(mean log p_n). Tokenization separates punctuation characters, then
//   splits on whitespace. Smoothing: for n >= 2 only, a precision that would
//   be zero is replaced by (match+1)/(total+1); an order with no candidate
//   n-grams at all (total == 0) contributes p_n = 1 for n >= 2.
//
// chrF++: character n-grams 1..6 (whitespace removed) plus word n-grams 1..2,
//   beta = 2. F per order from corpus-accumulated clipped counts; orders with
//   no n-grams on either side are excluded from the average.
//
// Coverage: word n-gram sets, |X intersect ref| / |ref| per segment.
//
// The report keeps the sufficient statistics, so tests can check clipping and
// brevity behavior directly instead of reverse-engineering the score.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypofuse/common.hpp"

namespace hypofuse {

inline constexpr int kBleuOrder = 4;
inline constexpr int kChrfCharOrder = 6;
inline constexpr int kChrfWordOrder = 2;
inline constexpr double kChrfBeta = 2.0;

// Punctuation characters become standalone tokens, then whitespace splits.
inline std::vector<std::string> metric_tokenize(const std::string& text) {
  std::string spaced;
  spaced.reserve(text.size());
  for (char c : text) {
    if (std::ispunct(static_cast<unsigned char>(c))) {
      spaced.push_back(' ');
      spaced.push_back(c);
      spaced.push_back(' ');
    } else {
      spaced.push_back(c);
    }
  }
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : spaced) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

namespace detail {

inline std::map<std::string, int> ngram_counts(
    const std::vector<std::string>& tokens, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + static_cast<size_t>(n) <= tokens.size(); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) {
      if (j) key.push_back('\x1f');  // unit separator, never in tokens
      key += tokens[i + static_cast<size_t>(j)];
    }
    ++counts[key];
  }
  return counts;
}

inline std::map<std::string, int> char_ngram_counts(const std::string& text,
                                                    int n) {
  std::string chars;
  chars.reserve(text.size());
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) chars.push_back(c);
  std::map<std::string, int> counts;
  if (static_cast<int>(chars.size()) < n) return counts;
  for (size_t i = 0; i + static_cast<size_t>(n) <= chars.size(); ++i)
    ++counts[chars.substr(i, static_cast<size_t>(n))];
  return counts;
}

inline long long clipped_overlap(const std::map<std::string, int>& hyp,
                                 const std::map<std::string, int>& ref) {
  long long total = 0;
  for (const auto& [gram, count] : hyp) {
    auto it = ref.find(gram);
    if (it != ref.end()) total += std::min(count, it->second);
  }
  return total;
}

inline long long total_count(const std::map<std::string, int>& counts) {
  long long total = 0;
  for (const auto& [gram, count] : counts) total += count;
  return total;
}

}  // namespace detail

struct BleuStats {
  std::array<long long, kBleuOrder> matched{};  // clipped matches per order
  std::array<long long, kBleuOrder> total{};    // candidate n-grams per order
  long long hyp_len = 0;
  long long ref_len = 0;

  void accumulate(const std::vector<std::string>& hyp_tokens,
                  const std::vector<std::string>& ref_tokens) {
    hyp_len += static_cast<long long>(hyp_tokens.size());
    ref_len += static_cast<long long>(ref_tokens.size());
    for (int n = 1; n <= kBleuOrder; ++n) {
      const auto h = detail::ngram_counts(hyp_tokens, n);
      const auto r = detail::ngram_counts(ref_tokens, n);
      matched[static_cast<size_t>(n - 1)] += detail::clipped_overlap(h, r);
      total[static_cast<size_t>(n - 1)] += detail::total_count(h);
    }
  }
};

struct BleuResult {
  double score = 0.0;                       // 0..100
  double brevity_penalty = 1.0;
  std::array<double, kBleuOrder> precisions{};
  BleuStats stats;
};

inline BleuResult bleu_from_stats(const BleuStats& stats) {
  BleuResult r;
  r.stats = stats;
  if (stats.hyp_len == 0) {
    r.brevity_penalty = 0.0;
    return r;  // empty candidate corpus scores 0
  }
  r.brevity_penalty =
      stats.hyp_len >= stats.ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(stats.ref_len) /
                               static_cast<double>(stats.hyp_len));
  double log_sum = 0.0;
  for (int n = 1; n <= kBleuOrder; ++n) {
    const long long m = stats.matched[static_cast<size_t>(n - 1)];
    const long long t = stats.total[static_cast<size_t>(n - 1)];
    double p;
    if (t == 0) {
      // no candidate n-grams of this order exist at all
      if (n == 1) return r;  // empty corpus already handled; degenerate: 0
      p = 1.0;
    } else if (m > 0) {
      p = static_cast<double>(m) / static_cast<double>(t);
    } else if (n >= 2) {
      p = (static_cast<double>(m) + 1.0) / (static_cast<double>(t) + 1.0);
    } else {
      return r;  // zero unigram precision: score 0
    }
    r.precisions[static_cast<size_t>(n - 1)] = p;
    log_sum += std::log(p);
  }
  r.score = 100.0 * r.brevity_penalty * std::exp(log_sum / kBleuOrder);
  return r;
}

inline BleuResult corpus_bleu(const std::vector<std::string>& hyps,
                              const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size())
    throw DataError("bleu: " + std::to_string(hyps.size()) +
                    " hypotheses vs " + std::to_string(refs.size()) +
                    " references");
  if (hyps.empty()) throw DataError("bleu: empty corpus");
  BleuStats stats;
  for (size_t i = 0; i < hyps.size(); ++i) {
    if (metric_tokenize(refs[i]).empty())
      throw DataError("bleu: reference " + std::to_string(i) + " is empty");
    stats.accumulate(metric_tokenize(hyps[i]), metric_tokenize(refs[i]));
  }
  return bleu_from_stats(stats);
}

inline double sentence_bleu(const std::string& hyp, const std::string& ref) {
  return corpus_bleu({hyp}, {ref}).score;
}

// --- chrF++ ---

struct ChrfOrderStats {
  long long overlap = 0;
  long long hyp_total = 0;
  long long ref_total = 0;
};

struct ChrfResult {
  double score = 0.0;  // 0..100
  std::vector<ChrfOrderStats> orders;  // char 1..6 then word 1..2
};

inline ChrfResult corpus_chrf(const std::vector<std::string>& hyps,
                              const std::vector<std::string>& refs,
                              double beta = kChrfBeta) {
  if (hyps.size() != refs.size())
    throw DataError("chrf: " + std::to_string(hyps.size()) +
                    " hypotheses vs " + std::to_string(refs.size()) +
                    " references");
  if (hyps.empty()) throw DataError("chrf: empty corpus");
  ChrfResult res;
  res.orders.assign(kChrfCharOrder + kChrfWordOrder, ChrfOrderStats{});
  for (size_t i = 0; i < hyps.size(); ++i) {
    for (int n = 1; n <= kChrfCharOrder; ++n) {
      const auto h = detail::char_ngram_counts(hyps[i], n);
      const auto r = detail::char_ngram_counts(refs[i], n);
      ChrfOrderStats& s = res.orders[static_cast<size_t>(n - 1)];
      s.overlap += detail::clipped_overlap(h, r);
      s.hyp_total += detail::total_count(h);
      s.ref_total += detail::total_count(r);
    }
    const auto hyp_tokens = metric_tokenize(hyps[i]);
    const auto ref_tokens = metric_tokenize(refs[i]);
    for (int n = 1; n <= kChrfWordOrder; ++n) {
      const auto h = detail::ngram_counts(hyp_tokens, n);
      const auto r = detail::ngram_counts(ref_tokens, n);
      ChrfOrderStats& s = res.orders[static_cast<size_t>(kChrfCharOrder + n - 1)];
      s.overlap += detail::clipped_overlap(h, r);
      s.hyp_total += detail::total_count(h);
      s.ref_total += detail::total_count(r);
    }
  }
  const double b2 = beta * beta;
  double f_sum = 0.0;
  int included = 0;
  for (const ChrfOrderStats& s : res.orders) {
    if (s.hyp_total == 0 && s.ref_total == 0) continue;  // order absent
    ++included;
    if (s.hyp_total == 0 || s.ref_total == 0) continue;  // F = 0
    const double p = static_cast<double>(s.overlap) /
                     static_cast<double>(s.hyp_total);
    const double r = static_cast<double>(s.overlap) /
                     static_cast<double>(s.ref_total);
    if (p + r > 0.0) f_sum += (1.0 + b2) * p * r / (b2 * p + r);
  }
  res.score = included == 0 ? 0.0 : 100.0 * f_sum / included;
  return res;
}

// --- word n-gram coverage ---

inline std::set<std::string> word_ngram_set(const std::string& text, int n) {
  std::set<std::string> out;
  for (const auto& [gram, count] :
       detail::ngram_counts(metric_tokenize(text), n))
    out.insert(gram);
  return out;
}

inline std::set<std::string> union_ngram_set(
    const std::vector<std::string>& texts, int n) {
  std::set<std::string> out;
  for (const std::string& t : texts)
    for (const auto& g : word_ngram_set(t, n)) out.insert(g);
  return out;
}

// |candidate intersect reference| / |reference|; -1 when the reference has no
// n-grams of this order (callers skip those segments).
inline double ngram_coverage(const std::set<std::string>& candidate,
                             const std::set<std::string>& reference) {
  if (reference.empty()) return -1.0;
  size_t hit = 0;
  for (const std::string& g : reference)
    if (candidate.count(g)) ++hit;
  return static_cast<double>(hit) / static_cast<double>(reference.size());
}

// --- report serialization ---

inline nlohmann::json bleu_to_json(const BleuResult& r) {
  return nlohmann::json{
      {"score", r.score},
      {"brevity_penalty", r.brevity_penalty},
      {"precisions", std::vector<double>(r.precisions.begin(), r.precisions.end())},
      {"matched", std::vector<long long>(r.stats.matched.begin(), r.stats.matched.end())},
      {"total", std::vector<long long>(r.stats.total.begin(), r.stats.total.end())},
      {"hyp_len", r.stats.hyp_len},
      {"ref_len", r.stats.ref_len}};
}

}  // namespace hypofuse
