#pragma once

#include "hsd/decoding.hpp"
#include "hsd/vocab.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace hsd {

/// Corpus BLEU: case-sensitive, whitespace tokens, up to 4-grams, clipped
/// counts summed over the corpus, no smoothing.
struct BleuScore {
  double value = 0;  // [0, 100]
  std::array<double, 4> precisions{};
  std::array<long, 4> matches{};
  std::array<long, 4> totals{};
  double brevity_penalty = 0;
  long hyp_length = 0;
  long ref_length = 0;
};

class UndefinedDeq : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

using NgramCounts = std::unordered_map<std::string, int>;

inline NgramCounts count_ngrams(const Sentence& s, std::size_t n) {
  NgramCounts c;
  if (s.size() < n) return c;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    std::string key = s[i];
    for (std::size_t j = 1; j < n; ++j) {
      key += '\x1f';
      key += s[i + j];
    }
    ++c[key];
  }
  return c;
}

/// Reference length closest to `hyp_len`; ties go to the shorter reference.
inline std::size_t closest_ref_length(std::size_t hyp_len, const std::vector<Sentence>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t x) { return x > hyp_len ? x - hyp_len : hyp_len - x; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

struct SentenceStats {
  std::array<long, 4> matches{};
  std::array<long, 4> totals{};
  long hyp_len = 0;
  long ref_len = 0;
};

inline SentenceStats sentence_stats(const Sentence& hyp, const std::vector<Sentence>& refs) {
  if (refs.empty()) throw std::invalid_argument("bleu: every hypothesis needs at least one reference");
  SentenceStats st;
  st.hyp_len = static_cast<long>(hyp.size());
  st.ref_len = static_cast<long>(closest_ref_length(hyp.size(), refs));
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto hc = count_ngrams(hyp, n);
    NgramCounts max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : count_ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    long m = 0, t = 0;
    for (const auto& [g, c] : hc) {
      t += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) m += std::min(c, it->second);
    }
    st.matches[n - 1] = m;
    st.totals[n - 1] = t;
  }
  return st;
}

inline double brevity_penalty(long hyp_len, long ref_len) {
  if (hyp_len == 0) return 0.0;
  if (hyp_len >= ref_len) return 1.0;
  return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
}

}  // namespace detail

inline BleuScore corpus_bleu(const std::vector<Sentence>& hypotheses, const std::vector<std::vector<Sentence>>& references) {
  if (hypotheses.size() != references.size()) throw std::invalid_argument("corpus_bleu: length mismatch");
  if (hypotheses.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  BleuScore b;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto st = detail::sentence_stats(hypotheses[i], references[i]);
    for (int n = 0; n < 4; ++n) {
      b.matches[static_cast<std::size_t>(n)] += st.matches[static_cast<std::size_t>(n)];
      b.totals[static_cast<std::size_t>(n)] += st.totals[static_cast<std::size_t>(n)];
    }
    b.hyp_length += st.hyp_len;
    b.ref_length += st.ref_len;
  }
  double log_sum = 0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    b.precisions[n] = b.totals[n] > 0 ? static_cast<double>(b.matches[n]) / static_cast<double>(b.totals[n]) : 0.0;
    if (b.precisions[n] <= 0) zero = true;
    else log_sum += std::log(b.precisions[n]);
  }
  b.brevity_penalty = detail::brevity_penalty(b.hyp_length, b.ref_length);
  b.value = zero ? 0.0 : 100.0 * b.brevity_penalty * std::exp(log_sum / 4.0);
  return b;
}

/// Convenience form with one reference per hypothesis.
inline BleuScore corpus_bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references) {
  std::vector<std::vector<Sentence>> refs;
  refs.reserve(references.size());
  for (const auto& r : references) refs.push_back({r});
  return corpus_bleu(hypotheses, refs);
}

/// Sentence BLEU with add-one smoothing on 2..4-gram precisions. Used only to
/// pick the best beam entry in the baseline_top protocol.
inline double smoothed_sentence_bleu(const Sentence& hyp, const std::vector<Sentence>& refs) {
  const auto st = detail::sentence_stats(hyp, refs);
  if (st.hyp_len == 0) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double add = n == 0 ? 0.0 : 1.0;
    const double num = static_cast<double>(st.matches[n]) + add;
    const double den = static_cast<double>(st.totals[n]) + add;
    if (num <= 0 || den <= 0) return 0.0;
    log_sum += std::log(num / den);
  }
  return 100.0 * detail::brevity_penalty(st.hyp_len, st.ref_len) * std::exp(log_sum / 4.0);
}

namespace detail {

inline std::size_t common_m(const std::vector<HypothesisGroup>& groups) {
  if (groups.empty()) throw std::invalid_argument("metrics: no hypothesis groups");
  const std::size_t m = groups.front().outputs.size();
  for (const auto& g : groups)
    if (g.outputs.size() != m) throw std::invalid_argument("metrics: groups have different M");
  return m;
}

inline std::vector<Sentence> slot(const std::vector<HypothesisGroup>& groups, std::size_t m) {
  std::vector<Sentence> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(g.outputs[m].words);
  return out;
}

}  // namespace detail

/// Mean corpus BLEU over all M(M-1) ordered slot pairs (a as hypotheses, b as
/// the single reference).
inline double pairwise_bleu(const std::vector<HypothesisGroup>& groups) {
  const std::size_t m = detail::common_m(groups);
  if (m < 2) throw std::invalid_argument("pairwise_bleu: need M >= 2");
  std::vector<std::vector<Sentence>> slots;
  for (std::size_t a = 0; a < m; ++a) slots.push_back(detail::slot(groups, a));
  double sum = 0;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b)
      if (a != b) sum += corpus_bleu(slots[a], slots[b]).value;
  return sum / static_cast<double>(m * (m - 1));
}

enum class ReferenceProtocol { baseline_top, average_of_m };

inline double reference_bleu(const std::vector<HypothesisGroup>& groups,
                             const std::vector<std::vector<Sentence>>& references, ReferenceProtocol mode) {
  const std::size_t m = detail::common_m(groups);
  if (m < 1) throw std::invalid_argument("reference_bleu: groups are empty");
  if (references.size() != groups.size()) throw std::invalid_argument("reference_bleu: references not aligned");
  if (mode == ReferenceProtocol::baseline_top) {
    std::vector<Sentence> picks;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      std::size_t best = 0;
      double best_score = -1;
      for (std::size_t k = 0; k < m; ++k) {
        const double s = smoothed_sentence_bleu(groups[i].outputs[k].words, references[i]);
        if (s > best_score) {
          best_score = s;
          best = k;
        }
      }
      picks.push_back(groups[i].outputs[best].words);
    }
    return corpus_bleu(picks, references).value;
  }
  double sum = 0;
  for (std::size_t k = 0; k < m; ++k) sum += corpus_bleu(detail::slot(groups, k), references).value;
  return sum / static_cast<double>(m);
}

/// Diversity enhancement per quality: (pwb* - pwb) / (rfb* - rfb).
inline double deq(double rfb_star, double pwb_star, double rfb, double pwb) {
  if (rfb_star == rfb) throw UndefinedDeq("DEQ undefined: system and baseline reference BLEU are equal");
  return (pwb_star - pwb) / (rfb_star - rfb);
}

struct MetricsReport {
  std::string system;
  double rfb = 0;
  double pwb = 0;
  std::optional<double> rfb_star;
  std::optional<double> pwb_star;
  std::optional<double> deq;
  bool deq_undefined = false;
  std::size_t sentences = 0;
  std::size_t m = 0;

  /// Attaches baseline values and computes DEQ when it is defined.
  void set_baseline(double rfb_b, double pwb_b) {
    rfb_star = rfb_b;
    pwb_star = pwb_b;
    try {
      deq = hsd::deq(rfb_b, pwb_b, rfb, pwb);
      deq_undefined = false;
    } catch (const UndefinedDeq&) {
      deq.reset();
      deq_undefined = true;
    }
  }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    j["system"] = system;
    j["rfb"] = rfb;
    j["pwb"] = pwb;
    j["sentences"] = sentences;
    j["M"] = m;
    if (rfb_star) j["rfb_star"] = *rfb_star;
    if (pwb_star) j["pwb_star"] = *pwb_star;
    if (deq) j["deq"] = *deq;
    else if (rfb_star) j["deq"] = "undefined";
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.system = j.value("system", "");
    r.rfb = j.at("rfb").get<double>();
    r.pwb = j.at("pwb").get<double>();
    r.sentences = j.value("sentences", std::size_t{0});
    r.m = j.value("M", std::size_t{0});
    if (j.contains("rfb_star") && j.contains("pwb_star")) r.set_baseline(j["rfb_star"], j["pwb_star"]);
    return r;
  }

  [[nodiscard]] std::string table() const {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-28s %8s %8s %8s\n", "system", "rfb", "pwb", "DEQ");
    os << buf;
    std::string d = deq ? std::to_string(*deq) : (deq_undefined ? "undefined" : "-");
    if (deq) {
      std::snprintf(buf, sizeof buf, "%.2f", *deq);
      d = buf;
    }
    std::snprintf(buf, sizeof buf, "%-28s %8.2f %8.2f %8s\n", system.c_str(), rfb, pwb, d.c_str());
    os << buf;
    return os.str();
  }
};

/// CSV rows "K,rfb,pwb,deq" for a threshold sweep.
inline std::string k_sweep_csv(const std::vector<std::pair<int, MetricsReport>>& rows) {
  std::ostringstream os;
  os << "K,rfb,pwb,deq\n";
  char buf[128];
  for (const auto& [k, r] : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.4f,%.4f,", k, r.rfb, r.pwb);
    os << buf;
    if (r.deq) {
      std::snprintf(buf, sizeof buf, "%.4f", *r.deq);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace hsd
