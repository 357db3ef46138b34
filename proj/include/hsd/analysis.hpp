#pragma once

#include "hsd/decoding.hpp"
#include "hsd/metrics.hpp"
#include "hsd/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsd {

inline constexpr int kRankBuckets = 100;

/// Source position with maximal weight for each head (ties to the lowest index).
template <typename T>
std::vector<int> referred_source_words(const RowMat<T>& rows) {
  if (rows.rows() < 1 || rows.cols() < 1) throw std::invalid_argument("referred_source_words: empty attention");
  std::vector<int> out;
  for (Eigen::Index h = 0; h < rows.rows(); ++h) {
    detail::check_stochastic_row<T>(rows.row(h), 1e-5, "referred_source_words");
    out.push_back(argmax_lowest(rows.row(h)));
  }
  return out;
}

/// Word-level translation by the baseline model: the source word alone is
/// decoded greedily and the first generated token is taken. Memoized.
template <typename T>
class ReferredWordTranslator {
 public:
  explicit ReferredWordTranslator(const Transformer<T>& baseline) : model_(baseline) { check_model_usable(baseline); }

  TokenId operator()(TokenId src_word) {
    auto it = cache_.find(src_word);
    if (it != cache_.end()) return it->second;
    const std::vector<TokenId> src{src_word};
    const auto out = greedy_decode(model_, std::span<const TokenId>(src), 1);
    const TokenId t = out.front();
    cache_.emplace(src_word, t);
    return t;
  }

 private:
  const Transformer<T>& model_;
  std::map<TokenId, TokenId> cache_;
};

template <typename T>
std::vector<TokenId> referred_target_words(const std::vector<TokenId>& source_words, const Transformer<T>& baseline) {
  ReferredWordTranslator<T> tr(baseline);
  std::vector<TokenId> out;
  for (TokenId w : source_words) out.push_back(tr(w));
  return out;
}

/// Ranks and NLLs of the per-head referred target words. Sums and counts are
/// kept so partial results merge associatively; means are derived.
struct HeadAlignmentStats {
  std::vector<long> rank_histogram = std::vector<long>(kRankBuckets + 1, 0);  // ranks 1..100, then overflow
  std::vector<double> head_nll_sum;
  std::vector<long> head_count;
  std::vector<double> rank_nll_sum;  // NLL of the token ranked r+1
  long steps = 0;

  [[nodiscard]] long events() const { return std::accumulate(rank_histogram.begin(), rank_histogram.end(), 0L); }

  [[nodiscard]] std::vector<double> per_head_nll() const {
    std::vector<double> out;
    for (std::size_t h = 0; h < head_nll_sum.size(); ++h)
      out.push_back(head_count[h] ? head_nll_sum[h] / static_cast<double>(head_count[h]) : 0.0);
    return out;
  }

  [[nodiscard]] double head_average_nll() const {
    const auto v = per_head_nll();
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }

  [[nodiscard]] std::vector<double> per_rank_nll() const {
    std::vector<double> out;
    for (double s : rank_nll_sum) out.push_back(steps ? s / static_cast<double>(steps) : 0.0);
    return out;
  }

  /// Fraction of referred target words ranked within the top `k`.
  [[nodiscard]] double fraction_in_top(int k) const {
    const long total = events();
    if (total == 0) return 0.0;
    long in = 0;
    for (int r = 0; r < std::min(k, kRankBuckets); ++r) in += rank_histogram[static_cast<std::size_t>(r)];
    return static_cast<double>(in) / static_cast<double>(total);
  }

  void merge(const HeadAlignmentStats& o) {
    for (std::size_t i = 0; i < rank_histogram.size(); ++i) rank_histogram[i] += o.rank_histogram[i];
    if (head_nll_sum.empty()) {
      head_nll_sum.assign(o.head_nll_sum.size(), 0.0);
      head_count.assign(o.head_count.size(), 0);
    }
    if (rank_nll_sum.empty()) rank_nll_sum.assign(o.rank_nll_sum.size(), 0.0);
    for (std::size_t h = 0; h < o.head_nll_sum.size(); ++h) {
      head_nll_sum[h] += o.head_nll_sum[h];
      head_count[h] += o.head_count[h];
    }
    for (std::size_t r = 0; r < o.rank_nll_sum.size(); ++r) rank_nll_sum[r] += o.rank_nll_sum[r];
    steps += o.steps;
  }
};

/// Walks the model's own greedy translation of each source. At every step,
/// each head of the final decoder layer's cross-attention refers to a source
/// word; that word's baseline translation is located in the next-token
/// softmax (rank and negative log-probability).
template <typename T>
HeadAlignmentStats alignment_stats(const std::vector<std::vector<TokenId>>& sources, const Transformer<T>& model,
                                   const Transformer<T>& baseline, int max_len = 64) {
  check_model_usable(model);
  ReferredWordTranslator<T> translate(baseline);
  const int n_heads = model.config().n_heads;
  const auto vocab = static_cast<std::size_t>(model.config().vocab_tgt);
  const std::size_t ranks = std::min<std::size_t>(vocab, kRankBuckets);
  HeadAlignmentStats stats;
  stats.head_nll_sum.assign(static_cast<std::size_t>(n_heads), 0.0);
  stats.head_count.assign(static_cast<std::size_t>(n_heads), 0);
  stats.rank_nll_sum.assign(ranks, 0.0);
  for (const auto& src : sources) {
    const auto trajectory = greedy_decode(model, std::span<const TokenId>(src), max_len);
    const RowMat<T> memory = model.encode(src);
    auto st = model.start_decode(memory);
    TokenId prev = kBos;
    for (TokenId next : trajectory) {
      auto out = model.decode_step(st, prev);
      std::vector<double> logits(out.logits.begin(), out.logits.end());
      const auto logp = log_softmax(std::span<const double>(logits));
      std::vector<std::size_t> order(vocab);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logp[a] > logp[b]; });
      std::vector<std::size_t> rank_of(vocab);
      for (std::size_t r = 0; r < vocab; ++r) rank_of[order[r]] = r;
      for (std::size_t r = 0; r < ranks; ++r) stats.rank_nll_sum[r] += -logp[order[r]];
      const auto& rows = out.cross.back().weights;
      const auto positions = referred_source_words(rows);
      for (int h = 0; h < n_heads; ++h) {
        const TokenId word = src[static_cast<std::size_t>(positions[static_cast<std::size_t>(h)])];
        const auto tgt = static_cast<std::size_t>(translate(word));
        const std::size_t rank = rank_of[tgt];
        ++stats.rank_histogram[std::min<std::size_t>(rank, kRankBuckets)];
        stats.head_nll_sum[static_cast<std::size_t>(h)] += -logp[tgt];
        ++stats.head_count[static_cast<std::size_t>(h)];
      }
      ++stats.steps;
      if (next == kEos) break;
      prev = next;
    }
  }
  return stats;
}

inline std::string rank_histogram_csv(const HeadAlignmentStats& s) {
  std::ostringstream os;
  os << "rank,count\n";
  for (int r = 0; r < kRankBuckets; ++r) os << r + 1 << "," << s.rank_histogram[static_cast<std::size_t>(r)] << "\n";
  os << "overflow," << s.rank_histogram.back() << "\n";
  return os.str();
}

inline std::string nll_table_csv(const HeadAlignmentStats& s) {
  std::ostringstream os;
  char buf[64];
  os << "row,nll\n";
  const auto heads = s.per_head_nll();
  for (std::size_t h = 0; h < heads.size(); ++h) {
    std::snprintf(buf, sizeof buf, "%.6f", heads[h]);
    os << "head_" << h + 1 << "," << buf << "\n";
  }
  std::snprintf(buf, sizeof buf, "%.6f", s.head_average_nll());
  os << "head_average," << buf << "\n";
  const auto ranks = s.per_rank_nll();
  for (std::size_t r = 0; r < ranks.size(); ++r) {
    std::snprintf(buf, sizeof buf, "%.6f", ranks[r]);
    os << "rank_" << r + 1 << "," << buf << "\n";
  }
  return os.str();
}

struct LengthBucket {
  std::size_t lo = 0;  // inclusive source length range
  std::size_t hi = 0;
  std::size_t sentences = 0;
  double pwb = 0;
  bool low_support = false;
};

/// Pair-wise BLEU per source-length bucket [k*w, (k+1)*w - 1]; only
/// populated buckets are returned. Buckets with < 5 sentences are flagged.
inline std::vector<LengthBucket> length_diversity_curve(const std::vector<HypothesisGroup>& groups,
                                                        const std::vector<std::size_t>& source_lengths,
                                                        std::size_t bucket_width) {
  if (bucket_width < 1) throw std::invalid_argument("length_diversity_curve: bucket_width must be >= 1");
  if (groups.size() != source_lengths.size()) throw std::invalid_argument("length_diversity_curve: size mismatch");
  std::map<std::size_t, std::vector<HypothesisGroup>> buckets;
  for (std::size_t i = 0; i < groups.size(); ++i) buckets[source_lengths[i] / bucket_width].push_back(groups[i]);
  std::vector<LengthBucket> out;
  for (const auto& [k, gs] : buckets) {
    LengthBucket b;
    b.lo = k * bucket_width;
    b.hi = (k + 1) * bucket_width - 1;
    b.sentences = gs.size();
    b.pwb = pairwise_bleu(gs);
    b.low_support = gs.size() < 5;
    out.push_back(b);
  }
  return out;
}

inline std::string length_curve_csv(const std::vector<LengthBucket>& curve) {
  std::ostringstream os;
  char buf[128];
  os << "len_lo,len_hi,sentences,pwb,low_support\n";
  for (const auto& b : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.4f,%d\n", b.lo, b.hi, b.sentences, b.pwb, b.low_support ? 1 : 0);
    os << buf;
  }
  return os.str();
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need >= 2 paired values");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace hsd
