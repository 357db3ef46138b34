#pragma once

#include "hsd/checkpoint.hpp"
#include "hsd/datagen.hpp"
#include "hsd/decoding.hpp"
#include "hsd/metrics.hpp"
#include "hsd/training.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsd {

struct AugmentationPlan {
  DecodePolicy policy;                    // how synthetic sources are generated
  bool reuse_training_targets = true;     // self back-translation; otherwise `monolingual_targets`
  std::vector<Sentence> monolingual_targets;
  double mixing_ratio = 1.0;              // fraction of the synthetic set mixed into training
  std::string output_path;
  int workers = 1;
};

/// For every target sentence e, M sources from the reverse (target->source)
/// model under the plan's policy, each paired with e unchanged.
inline std::vector<SentencePair> synthesize_pairs(const Checkpoint& reverse, const std::vector<Sentence>& targets,
                                                  const AugmentationPlan& plan) {
  if (targets.empty()) throw std::invalid_argument("synthesize_pairs: empty target set");
  const auto model = reverse.model();
  plan.policy.validate(model.config().n_heads);
  std::vector<std::vector<TokenId>> inputs;
  inputs.reserve(targets.size());
  for (const auto& e : targets) inputs.push_back(reverse.src_vocab.encode(e));
  const auto groups = decode_corpus(model, inputs, plan.policy, reverse.tgt_vocab, plan.workers);
  std::vector<SentencePair> out;
  out.reserve(targets.size() * static_cast<std::size_t>(plan.policy.M));
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (const auto& h : groups[i].outputs) {
      SentencePair p;
      p.src = h.words.empty() ? Sentence{kUnkToken} : h.words;
      p.tgt = targets[i];
      p.origin = "synth";
      out.push_back(std::move(p));
    }
  return out;
}

/// Original pairs plus round(ratio * |synthetic|) synthetic pairs, shuffled.
/// ratio = 0 returns the original corpus unchanged.
inline std::vector<SentencePair> mix_corpora(const std::vector<SentencePair>& original,
                                             const std::vector<SentencePair>& synthetic, double ratio,
                                             std::uint64_t seed) {
  if (!(ratio >= 0 && ratio <= 1)) throw std::invalid_argument("mix_corpora: ratio must be in [0, 1]");
  if (ratio == 0) return original;
  const auto take = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(synthetic.size())));
  std::vector<SentencePair> mixed = original;
  mixed.insert(mixed.end(), synthetic.begin(), synthetic.begin() + static_cast<std::ptrdiff_t>(take));
  auto rng = RngStream::derive(seed, {0x313c});
  for (std::size_t i = mixed.size(); i-- > 1;) std::swap(mixed[i], mixed[rng.uniform_int(i + 1)]);
  return mixed;
}

/// Corpus BLEU of the top beam output; `references[i]` holds every accepted
/// translation of `sources[i]`.
inline double evaluate_bleu(const Checkpoint& ck, const std::vector<Sentence>& sources,
                            const std::vector<std::vector<Sentence>>& references, int beam_size = 5, int workers = 1) {
  if (sources.size() != references.size()) throw std::invalid_argument("evaluate_bleu: references not aligned");
  const auto model = ck.model();
  DecodePolicy policy;
  policy.beam_size = beam_size;
  policy.M = 1;
  policy.max_len = model.config().max_len;
  std::vector<std::vector<TokenId>> srcs;
  for (const auto& s : sources) srcs.push_back(ck.src_vocab.encode(s));
  const auto groups = decode_corpus(model, srcs, policy, ck.tgt_vocab, workers);
  std::vector<Sentence> hyps;
  for (const auto& g : groups) hyps.push_back(g.outputs.front().words);
  return corpus_bleu(hyps, references).value;
}

/// Single-reference form: the target side of each test pair.
inline double evaluate_bleu(const Checkpoint& ck, const std::vector<SentencePair>& test, int beam_size = 5,
                            int workers = 1) {
  std::vector<Sentence> srcs;
  std::vector<std::vector<Sentence>> refs;
  for (const auto& p : test) {
    srcs.push_back(p.src);
    refs.push_back({p.tgt});
  }
  return evaluate_bleu(ck, srcs, refs, beam_size, workers);
}

struct AugmentationReport {
  std::size_t original_pairs = 0;
  std::size_t synthetic_pairs = 0;
  std::size_t training_pairs = 0;
  double test_bleu = 0;
};

/// Trains a fresh forward model on original + synthetic data and scores it on `test`.
inline std::pair<Checkpoint, AugmentationReport> mix_and_train(const std::vector<SentencePair>& original,
                                                               const std::vector<SentencePair>& synthetic,
                                                               double ratio, const Vocab& src_vocab,
                                                               const Vocab& tgt_vocab, const ModelConfig& cfg,
                                                               const TrainConfig& tc,
                                                               const std::vector<SentencePair>& test) {
  for (const auto& p : synthetic) {
    for (const auto& w : p.src)
      if (w != kUnkToken && !src_vocab.contains(w))
        throw std::invalid_argument("mix_and_train: synthetic source word outside the vocabulary: " + w);
    for (const auto& w : p.tgt)
      if (!tgt_vocab.contains(w))
        throw std::invalid_argument("mix_and_train: synthetic target word outside the vocabulary: " + w);
  }
  const auto mixed = mix_corpora(original, synthetic, ratio, tc.seed);
  auto ck = train_checkpoint(mixed, src_vocab, tgt_vocab, cfg, tc);
  AugmentationReport rep;
  rep.original_pairs = original.size();
  rep.synthetic_pairs = synthetic.size();
  rep.training_pairs = mixed.size();
  if (!test.empty()) rep.test_bleu = evaluate_bleu(ck, test);
  return {std::move(ck), rep};
}

}  // namespace hsd
