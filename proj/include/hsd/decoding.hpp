#pragma once

#include "hsd/model.hpp"
#include "hsd/numerics.hpp"
#include "hsd/rng.hpp"
#include "hsd/vocab.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace hsd {

enum class DecodeMode { beam, multinomial, head_sample, sibling_penalty, hamming_penalty };

inline const char* mode_name(DecodeMode m) {
  switch (m) {
    case DecodeMode::beam: return "beam";
    case DecodeMode::multinomial: return "multinomial";
    case DecodeMode::head_sample: return "head_sample";
    case DecodeMode::sibling_penalty: return "sibling_penalty";
    case DecodeMode::hamming_penalty: return "hamming_penalty";
  }
  return "?";
}

inline DecodeMode parse_mode(const std::string& s) {
  for (auto m : {DecodeMode::beam, DecodeMode::multinomial, DecodeMode::head_sample, DecodeMode::sibling_penalty,
                 DecodeMode::hamming_penalty})
    if (s == mode_name(m)) return m;
  throw std::invalid_argument("unknown decode mode: " + s);
}

struct DecodePolicy {
  DecodeMode mode = DecodeMode::beam;
  int beam_size = 5;
  int K = 0;                      // confusing-condition threshold, head_sample only
  int M = 5;                      // outputs per source sentence
  double penalty_strength = 0.0;  // sibling / hamming modes
  int max_len = 64;               // generated tokens, end-of-sentence included
  std::uint64_t seed = 1;
  double length_alpha = 0.6;
  int override_layer = -1;        // -1 = final decoder layer
  bool all_layers = false;        // sample heads in every decoder layer's cross-attention
  bool shared_head_sample = false;  // one sampled head per step shared by all hypotheses
  bool nbest = false;             // take the top M of one beam instead of M decodes

  void validate(int n_heads) const {
    if (beam_size < 1) throw std::invalid_argument("DecodePolicy: beam_size must be >= 1");
    if (K < 0 || K > n_heads) throw std::invalid_argument("DecodePolicy: K must be in [0, H]");
    if (M < 1) throw std::invalid_argument("DecodePolicy: M must be >= 1");
    if (max_len < 1) throw std::invalid_argument("DecodePolicy: max_len must be >= 1");
    if (penalty_strength < 0) throw std::invalid_argument("DecodePolicy: penalty_strength must be >= 0");
  }

  [[nodiscard]] std::string describe() const {
    std::ostringstream os;
    os << "mode=" << mode_name(mode) << " beam=" << beam_size << " K=" << K << " M=" << M
       << " penalty=" << penalty_strength << " max_len=" << max_len << " seed=" << seed
       << " alpha=" << length_alpha << " layer=" << (all_layers ? std::string("all") : std::to_string(override_layer))
       << " shared=" << shared_head_sample << " nbest=" << nbest;
    return os.str();
  }
};

/// Per-head argmax over source positions and the vote count of each position.
struct CandidateHistogram {
  std::vector<int> counts;      // n_i, length T
  std::vector<int> candidates;  // candidate^h, length H

  [[nodiscard]] int max_count() const { return counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end()); }
  [[nodiscard]] int total() const {
    int s = 0;
    for (int c : counts) s += c;
    return s;
  }
};

/// Index of the maximal entry; ties go to the lowest index.
template <typename Row>
int argmax_lowest(const Row& row) {
  int best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i)
    if (row(i) > row(best)) best = static_cast<int>(i);
  return best;
}

template <typename T>
CandidateHistogram candidate_histogram(const RowMat<T>& rows) {
  if (rows.rows() < 1 || rows.cols() < 1) throw std::invalid_argument("candidate_histogram: empty attention");
  CandidateHistogram h;
  h.counts.assign(static_cast<std::size_t>(rows.cols()), 0);
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    detail::check_stochastic_row<T>(rows.row(r), 1e-5, "candidate_histogram");
    const int c = argmax_lowest(rows.row(r));
    h.candidates.push_back(c);
    ++h.counts[static_cast<std::size_t>(c)];
  }
  return h;
}

/// Under the confusing condition max(n) <= K, copies the row of one uniformly
/// sampled head to every head; otherwise leaves the step unchanged.
template <typename T>
std::optional<HeadOverride<T>> head_sample_policy(const CandidateHistogram& hist, const RowMat<T>& rows, int K,
                                                  RngStream& rng, int layer = -1) {
  if (hist.max_count() > K) return std::nullopt;
  const auto head = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(rows.rows())));
  HeadOverride<T> ovr;
  ovr.layer = layer;
  ovr.rows = rows.row(head).replicate(rows.rows(), 1);
  return ovr;
}

/// Li et al. style rank penalty: the r-th best expansion (r from 0) of each
/// parent loses strength * r. Input rows are one parent's expansion scores
/// sorted descending.
inline std::vector<std::vector<double>> sibling_penalty_rerank(const std::vector<std::vector<double>>& expansions,
                                                               double strength) {
  auto out = expansions;
  for (auto& sib : out)
    for (std::size_t r = 0; r < sib.size(); ++r) sib[r] -= strength * static_cast<double>(r);
  return out;
}

/// Hamming diversity penalty: each token's score drops by strength times the
/// number of earlier groups that emitted it at this step.
inline std::vector<double> hamming_penalty(std::span<const double> logits, std::span<const int> prior_counts,
                                           double strength) {
  if (prior_counts.size() != logits.size()) throw std::invalid_argument("hamming_penalty: size mismatch");
  std::vector<double> out(logits.begin(), logits.end());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] -= strength * prior_counts[t];
  return out;
}

/// One traced decoder step of one hypothesis at one layer.
template <typename T>
struct StepTrace {
  int decode_index = 0;
  int step = 0;
  int layer = 0;
  std::optional<CandidateHistogram> histogram;  // present where the policy was evaluated
  bool overridden = false;
  const RowMat<T>* weights = nullptr;  // [H x T] as applied
};

template <typename T>
using TraceSink = std::function<void(const StepTrace<T>&)>;

template <typename T>
struct BeamHypothesis {
  std::vector<TokenId> tokens;  // generated tokens, EOS included when finished
  double score = 0;             // accumulated log-probability
  double normalized = 0;        // score / len^alpha
  bool finished = false;
  RngStream rng;
  std::vector<std::vector<CrossAttention<T>>> attention;  // [step][layer], when recorded
};

template <typename T>
void check_model_usable(const Transformer<T>& model) {
  bool ok = true;
  model.params().visit([&](const std::string&, const Tensor<T>& t) { ok = ok && t.all_finite(); });
  if (!ok) throw InvalidState("model parameters are not finite");
}

/// Beam over one source sentence; advanced one step at a time so that
/// grouped (hamming) decoding can interleave several beams.
template <typename T>
class Beam {
 public:
  Beam(const Transformer<T>& model, const RowMat<T>& memory, const DecodePolicy& policy, RngStream rng,
       int decode_index = 0, TraceSink<T> sink = {}, bool record_attention = false)
      : model_(model), policy_(policy), sink_(std::move(sink)), record_(record_attention),
        decode_index_(decode_index), shared_rng_(rng.split(0x5ba2ed)) {
    Node root;
    root.state = model.start_decode(memory);
    root.hyp.rng = rng;
    alive_.push_back(std::move(root));
  }

  [[nodiscard]] bool done() const {
    return alive_.empty() || static_cast<int>(finished_.size()) >= policy_.beam_size || step_ >= policy_.max_len;
  }
  [[nodiscard]] int step() const noexcept { return step_; }

  /// Tokens chosen by this beam at its most recent step.
  [[nodiscard]] const std::vector<TokenId>& last_tokens() const noexcept { return last_tokens_; }

  /// Expands every live hypothesis by one token. `adjust` may rewrite the
  /// per-token log-probabilities used for selection (not for the score).
  void advance(const std::function<void(std::vector<double>&)>& adjust = {}) {
    if (done()) return;
    const int vocab = model_.config().vocab_tgt;
    const int n_heads = model_.config().n_heads;
    const int k = std::min(policy_.beam_size, vocab - 2);
    std::optional<std::uint64_t> shared_head;
    if (policy_.mode == DecodeMode::head_sample && policy_.shared_head_sample)
      shared_head = shared_rng_.uniform_int(static_cast<std::uint64_t>(n_heads));

    struct Cand {
      std::size_t parent;
      TokenId token;
      double score;
      double select;
    };
    std::vector<Cand> cands;
    std::vector<std::vector<CrossAttention<T>>> step_attn(alive_.size());
    for (std::size_t i = 0; i < alive_.size(); ++i) {
      Node& node = alive_[i];
      const TokenId prev = node.hyp.tokens.empty() ? kBos : node.hyp.tokens.back();
      CrossAttentionHook<T> hook;
      if (policy_.mode == DecodeMode::head_sample || sink_) hook = make_hook(node, shared_head);
      auto out = model_.decode_step(node.state, prev, hook);
      if (sink_)
        for (const auto& ca : out.cross)
          if (!traced_layer(ca.layer)) emit(ca.layer, std::nullopt, ca.overridden, ca.weights);
      std::vector<double> logits(out.logits.begin(), out.logits.end());
      const auto logp = log_softmax(std::span<const double>(logits));
      std::vector<double> sel = logp;
      if (adjust) adjust(sel);
      std::vector<TokenId> ids;
      for (TokenId t = 0; t < vocab; ++t)
        if (t != kPad && t != kBos) ids.push_back(t);
      std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](TokenId a, TokenId b) {
        return sel[static_cast<std::size_t>(a)] > sel[static_cast<std::size_t>(b)] ||
               (sel[static_cast<std::size_t>(a)] == sel[static_cast<std::size_t>(b)] && a < b);
      });
      for (int r = 0; r < k; ++r) {
        const TokenId t = ids[static_cast<std::size_t>(r)];
        double s = node.hyp.score + sel[static_cast<std::size_t>(t)];
        if (policy_.mode == DecodeMode::sibling_penalty) s -= policy_.penalty_strength * r;
        cands.push_back({i, t, node.hyp.score + logp[static_cast<std::size_t>(t)], s});
      }
      if (record_) step_attn[i] = std::move(out.cross);
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.select != b.select) return a.select > b.select;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    const std::size_t keep = std::min<std::size_t>(cands.size(), static_cast<std::size_t>(policy_.beam_size));
    std::vector<Node> next;
    last_tokens_.clear();
    for (std::size_t c = 0; c < keep; ++c) {
      const auto& cand = cands[c];
      const Node& parent = alive_[cand.parent];
      Node child;
      child.hyp.tokens = parent.hyp.tokens;
      child.hyp.tokens.push_back(cand.token);
      child.hyp.score = cand.score;
      child.hyp.rng = parent.hyp.rng.split(static_cast<std::uint64_t>(cand.token));
      if (record_) {
        child.hyp.attention = parent.hyp.attention;
        child.hyp.attention.push_back(step_attn[cand.parent]);
      }
      last_tokens_.push_back(cand.token);
      const bool ends = cand.token == kEos || step_ + 1 >= policy_.max_len;
      if (ends) {
        child.hyp.finished = cand.token == kEos;
        finished_.push_back(std::move(child.hyp));
      } else {
        child.state = parent.state;
        next.push_back(std::move(child));
      }
    }
    alive_ = std::move(next);
    ++step_;
  }

  /// Finished hypotheses (or the live ones if none finished) sorted by
  /// length-normalized score, best first.
  [[nodiscard]] std::vector<BeamHypothesis<T>> results() const {
    std::vector<BeamHypothesis<T>> out = finished_;
    if (out.empty())
      for (const auto& n : alive_) out.push_back(n.hyp);
    for (auto& h : out)
      h.normalized = h.score / std::pow(static_cast<double>(std::max<std::size_t>(1, h.tokens.size())), policy_.length_alpha);
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
      if (a.normalized != b.normalized) return a.normalized > b.normalized;
      return a.tokens < b.tokens;
    });
    return out;
  }

 private:
  struct Node {
    BeamHypothesis<T> hyp;
    DecoderState<T> state;
  };

  [[nodiscard]] int target_layer() const {
    return policy_.override_layer < 0 ? model_.final_layer() : policy_.override_layer;
  }
  [[nodiscard]] bool traced_layer(int layer) const {
    return policy_.mode == DecodeMode::head_sample && (policy_.all_layers || layer == target_layer());
  }

  void emit(int layer, std::optional<CandidateHistogram> hist, bool overridden, const RowMat<T>& w) const {
    if (!sink_) return;
    StepTrace<T> tr;
    tr.decode_index = decode_index_;
    tr.step = step_;
    tr.layer = layer;
    tr.histogram = std::move(hist);
    tr.overridden = overridden;
    tr.weights = &w;
    sink_(tr);
  }

  CrossAttentionHook<T> make_hook(Node& node, std::optional<std::uint64_t> shared_head) {
    return [this, &node, shared_head](int layer, const RowMat<T>& w) -> std::optional<HeadOverride<T>> {
      if (!traced_layer(layer)) return std::nullopt;
      auto hist = candidate_histogram(w);
      std::optional<HeadOverride<T>> ovr;
      if (shared_head) {
        if (hist.max_count() <= policy_.K) {
          HeadOverride<T> o;
          o.layer = layer;
          o.rows = w.row(static_cast<Eigen::Index>(*shared_head)).replicate(w.rows(), 1);
          ovr = std::move(o);
        }
      } else {
        ovr = head_sample_policy(hist, w, policy_.K, node.hyp.rng, layer);
      }
      if (sink_) emit(layer, hist, ovr.has_value(), ovr ? ovr->rows : w);
      return ovr;
    };
  }

  const Transformer<T>& model_;
  const DecodePolicy& policy_;
  TraceSink<T> sink_;
  bool record_;
  int decode_index_;
  RngStream shared_rng_;
  std::vector<Node> alive_;
  std::vector<BeamHypothesis<T>> finished_;
  std::vector<TokenId> last_tokens_;
  int step_ = 0;
};

/// Length-normalized beam search. Modes beam, head_sample and
/// sibling_penalty; head_sample applies the sample policy per hypothesis.
template <typename T>
std::vector<BeamHypothesis<T>> beam_search(const Transformer<T>& model, std::span<const TokenId> src,
                                           const DecodePolicy& policy, std::uint64_t sentence_id = 0,
                                           int decode_index = 0, const TraceSink<T>& sink = {},
                                           bool record_attention = false) {
  if (policy.mode == DecodeMode::multinomial || policy.mode == DecodeMode::hamming_penalty)
    throw std::invalid_argument("beam_search: mode must be beam, head_sample or sibling_penalty");
  policy.validate(model.config().n_heads);
  check_model_usable(model);
  const RowMat<T> memory = model.encode(src);
  Beam<T> beam(model, memory, policy,
               RngStream::derive(policy.seed, {sentence_id, static_cast<std::uint64_t>(decode_index)}), decode_index,
               sink, record_attention);
  while (!beam.done()) beam.advance();
  return beam.results();
}

/// Greedy decoding (argmax token each step, lowest id on ties).
template <typename T>
std::vector<TokenId> greedy_decode(const Transformer<T>& model, std::span<const TokenId> src, int max_len) {
  const RowMat<T> memory = model.encode(src);
  auto st = model.start_decode(memory);
  std::vector<TokenId> out;
  TokenId prev = kBos;
  for (int t = 0; t < max_len; ++t) {
    auto step = model.decode_step(st, prev);
    TokenId best = kEos;
    for (TokenId v = 0; v < static_cast<TokenId>(step.logits.size()); ++v) {
      if (v == kPad || v == kBos) continue;
      if (best == kEos && v == kEos) continue;
      if (step.logits[static_cast<std::size_t>(v)] > step.logits[static_cast<std::size_t>(best)] ||
          (step.logits[static_cast<std::size_t>(v)] == step.logits[static_cast<std::size_t>(best)] && v < best))
        best = v;
    }
    out.push_back(best);
    if (best == kEos) break;
    prev = best;
  }
  return out;
}

struct Hypothesis {
  Sentence words;
  std::vector<TokenId> tokens;
  double score = 0;
};

struct HypothesisGroup {
  std::uint64_t sentence_id = 0;
  std::string policy;
  std::vector<Hypothesis> outputs;
};

template <typename T>
Hypothesis to_hypothesis(const BeamHypothesis<T>& h, const Vocab& tgt_vocab) {
  return {tgt_vocab.decode(h.tokens), h.tokens, h.normalized};
}

/// One token-by-token sample from the full next-token softmax.
template <typename T>
Hypothesis sample_sequence(const Transformer<T>& model, const RowMat<T>& memory, int max_len, RngStream rng,
                           const Vocab& tgt_vocab) {
  auto st = model.start_decode(memory);
  Hypothesis h;
  TokenId prev = kBos;
  for (int t = 0; t < max_len; ++t) {
    auto step = model.decode_step(st, prev);
    std::vector<double> logits(step.logits.begin(), step.logits.end());
    const auto p = softmax(std::span<const double>(logits));
    const double u = rng.uniform();
    double acc = 0;
    TokenId pick = static_cast<TokenId>(p.size() - 1);
    for (std::size_t v = 0; v < p.size(); ++v) {
      acc += p[v];
      if (u < acc) {
        pick = static_cast<TokenId>(v);
        break;
      }
    }
    h.tokens.push_back(pick);
    h.score += std::log(p[static_cast<std::size_t>(pick)]);
    if (pick == kEos) break;
    prev = pick;
  }
  h.words = tgt_vocab.decode(h.tokens);
  return h;
}

template <typename T>
HypothesisGroup multinomial_decode(const Transformer<T>& model, std::span<const TokenId> src, int M,
                                   std::uint64_t seed, const Vocab& tgt_vocab, std::uint64_t sentence_id = 0,
                                   int max_len = 64) {
  if (M < 1) throw std::invalid_argument("multinomial_decode: M must be >= 1");
  check_model_usable(model);
  const RowMat<T> memory = model.encode(src);
  HypothesisGroup g;
  g.sentence_id = sentence_id;
  for (int m = 0; m < M; ++m)
    g.outputs.push_back(sample_sequence(model, memory, max_len,
                                        RngStream::derive(seed, {sentence_id, static_cast<std::uint64_t>(m)}),
                                        tgt_vocab));
  return g;
}

/// Diverse beam search with M sequentially decoded groups and a hamming
/// penalty between groups; the best hypothesis of each group is returned.
template <typename T>
HypothesisGroup hamming_decode(const Transformer<T>& model, std::span<const TokenId> src, const DecodePolicy& policy,
                               const Vocab& tgt_vocab, std::uint64_t sentence_id = 0) {
  check_model_usable(model);
  const RowMat<T> memory = model.encode(src);
  std::vector<Beam<T>> groups;
  groups.reserve(static_cast<std::size_t>(policy.M));
  for (int g = 0; g < policy.M; ++g)
    groups.emplace_back(model, memory, policy,
                        RngStream::derive(policy.seed, {sentence_id, static_cast<std::uint64_t>(g)}), g);
  const auto vocab = static_cast<std::size_t>(model.config().vocab_tgt);
  for (;;) {
    bool any = false;
    std::vector<int> counts(vocab, 0);
    for (auto& beam : groups) {
      if (beam.done()) continue;
      any = true;
      beam.advance([&](std::vector<double>& logp) {
        logp = hamming_penalty(std::span<const double>(logp), std::span<const int>(counts), policy.penalty_strength);
      });
      for (TokenId t : beam.last_tokens()) ++counts[static_cast<std::size_t>(t)];
    }
    if (!any) break;
  }
  HypothesisGroup out;
  out.sentence_id = sentence_id;
  out.policy = policy.describe();
  for (const auto& beam : groups) out.outputs.push_back(to_hypothesis(beam.results().front(), tgt_vocab));
  return out;
}

/// M outputs for one source sentence under `policy`:
///  - beam / head_sample: M independent decodes (RNG streams keyed by
///    (seed, sentence_id, decode_index)), top of each beam; with `nbest`,
///    the top M of a single beam instead.
///  - sibling_penalty: top M of a single penalized beam.
///  - hamming_penalty: best of each of M groups.
///  - multinomial: M samples.
template <typename T>
HypothesisGroup diverse_decode(const Transformer<T>& model, std::span<const TokenId> src, const DecodePolicy& policy,
                               const Vocab& tgt_vocab, std::uint64_t sentence_id = 0, const TraceSink<T>& sink = {}) {
  policy.validate(model.config().n_heads);
  HypothesisGroup g;
  if (policy.mode == DecodeMode::multinomial) {
    g = multinomial_decode(model, src, policy.M, policy.seed, tgt_vocab, sentence_id, policy.max_len);
  } else if (policy.mode == DecodeMode::hamming_penalty) {
    g = hamming_decode(model, src, policy, tgt_vocab, sentence_id);
  } else if (policy.nbest || policy.mode == DecodeMode::sibling_penalty) {
    auto hyps = beam_search(model, src, policy, sentence_id, 0, sink);
    for (int m = 0; m < policy.M; ++m)
      g.outputs.push_back(to_hypothesis(hyps[std::min<std::size_t>(static_cast<std::size_t>(m), hyps.size() - 1)], tgt_vocab));
  } else {
    for (int m = 0; m < policy.M; ++m) {
      if (policy.mode == DecodeMode::beam && m > 0 && !sink) {
        g.outputs.push_back(g.outputs.front());  // plain beam search is deterministic
        continue;
      }
      auto hyps = beam_search(model, src, policy, sentence_id, m, sink);
      g.outputs.push_back(to_hypothesis(hyps.front(), tgt_vocab));
    }
  }
  g.sentence_id = sentence_id;
  g.policy = policy.describe();
  return g;
}

/// Decodes every source in parallel. Output order and content do not depend on `workers`.
template <typename T>
std::vector<HypothesisGroup> decode_corpus(const Transformer<T>& model, const std::vector<std::vector<TokenId>>& sources,
                                           const DecodePolicy& policy, const Vocab& tgt_vocab, int workers = 1) {
  std::vector<HypothesisGroup> out(sources.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= sources.size() || failed) return;
      try {
        out[i] = diverse_decode(model, std::span<const TokenId>(sources[i]), policy, tgt_vocab, i);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return out;
}

struct NoiseEvents {
  Sentence sentence;
  bool unk = false;
  bool swapped = false;
};

/// With probability p one uniformly chosen word becomes <unk>; independently,
/// with probability p two distinct positions swap. Length is preserved.
inline NoiseEvents noise_perturb_events(Sentence s, double p, RngStream& rng) {
  if (!(p >= 0 && p <= 1)) throw std::invalid_argument("noise_perturb: p must be in [0, 1]");
  NoiseEvents ev;
  const bool do_unk = rng.uniform() < p;
  const bool do_swap = rng.uniform() < p;
  if (do_unk && !s.empty()) {
    s[rng.uniform_int(s.size())] = kUnkToken;
    ev.unk = true;
  }
  if (do_swap && s.size() >= 2) {
    const auto i = rng.uniform_int(s.size());
    auto j = rng.uniform_int(s.size() - 1);
    if (j >= i) ++j;
    std::swap(s[i], s[j]);
    ev.swapped = true;
  }
  ev.sentence = std::move(s);
  return ev;
}

inline Sentence noise_perturb(Sentence s, double p, RngStream& rng) {
  return noise_perturb_events(std::move(s), p, rng).sentence;
}

/// Noise-set baseline: perturbs every output of every group.
inline std::vector<HypothesisGroup> noise_groups(std::vector<HypothesisGroup> groups, double p, std::uint64_t seed) {
  for (auto& g : groups) {
    for (std::size_t m = 0; m < g.outputs.size(); ++m) {
      auto rng = RngStream::derive(seed, {0x401e, g.sentence_id, m});
      g.outputs[m].words = noise_perturb(g.outputs[m].words, p, rng);
      g.outputs[m].tokens.clear();
    }
    std::ostringstream os;
    os << g.policy << " noise=" << p;
    g.policy = os.str();
  }
  return groups;
}

inline constexpr char kUnitSeparator = '\x1f';

/// "id<TAB>policy<TAB>out_1<US>...<US>out_M<TAB>score_1<US>...<US>score_M"
inline std::string format_group(const HypothesisGroup& g) {
  std::ostringstream os;
  os << g.sentence_id << '\t' << g.policy << '\t';
  for (std::size_t m = 0; m < g.outputs.size(); ++m) {
    if (m) os << kUnitSeparator;
    os << join(g.outputs[m].words);
  }
  os << '\t';
  char buf[32];
  for (std::size_t m = 0; m < g.outputs.size(); ++m) {
    if (m) os << kUnitSeparator;
    std::snprintf(buf, sizeof buf, "%.6f", g.outputs[m].score);
    os << buf;
  }
  return os.str();
}

inline HypothesisGroup parse_group(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  if (fields.size() != 4) throw std::invalid_argument("group record: expected 4 tab-separated fields");
  auto split_us = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t b = 0;
    for (;;) {
      const auto e = s.find(kUnitSeparator, b);
      out.push_back(s.substr(b, e == std::string::npos ? std::string::npos : e - b));
      if (e == std::string::npos) break;
      b = e + 1;
    }
    return out;
  };
  HypothesisGroup g;
  g.sentence_id = std::stoull(fields[0]);
  g.policy = fields[1];
  const auto outs = split_us(fields[2]);
  const auto scores = split_us(fields[3]);
  if (outs.size() != scores.size()) throw std::invalid_argument("group record: output/score count mismatch");
  for (std::size_t m = 0; m < outs.size(); ++m) g.outputs.push_back({tokenize(outs[m]), {}, std::stod(scores[m])});
  return g;
}

}  // namespace hsd
