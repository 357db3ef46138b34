#pragma once

#include "hsd/checkpoint.hpp"
#include "hsd/datagen.hpp"
#include "hsd/model.hpp"
#include "hsd/numerics.hpp"
#include "hsd/rng.hpp"

#include <algorithm>
#include <cstdint>
#include <functional>
#include <span>
#include <thread>
#include <vector>

namespace hsd {

struct TrainConfig {
  int steps = 3000;
  int batch_size = 32;
  OptimizerConfig optimizer;
  std::uint64_t seed = 1;
  int workers = 1;
  /// Each batch is cut into this many fixed shards whose gradients are summed
  /// in shard order, so results do not depend on `workers`.
  int grad_shards = 4;
  int log_every = 100;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0;  // mean per-token loss of this step's batch
  double lr = 0;
};

inline std::vector<TokenPair> encode_pairs(const std::vector<SentencePair>& pairs, const Vocab& src_vocab,
                                           const Vocab& tgt_vocab) {
  std::vector<TokenPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({src_vocab.encode(p.src), tgt_vocab.encode(p.tgt)});
  return out;
}

/// Mini-batch Adam training with the inverse-square-root warmup schedule.
template <typename T>
class Trainer {
 public:
  Trainer(Transformer<T>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.optimizer.validate();
    if (cfg_.batch_size < 1 || cfg_.grad_shards < 1 || cfg_.workers < 1)
      throw std::invalid_argument("TrainConfig: batch_size, grad_shards and workers must be >= 1");
    model_.mutable_params().visit([&](const std::string&, Tensor<T>&) { states_.emplace_back(); });
  }

  /// One optimizer step on `batch`; returns the batch's mean token loss.
  double step(std::span<const TokenPair> batch) {
    if (batch.empty()) throw std::invalid_argument("Trainer::step: empty batch");
    const std::size_t shards = std::min<std::size_t>(static_cast<std::size_t>(cfg_.grad_shards), batch.size());
    std::vector<ModelParams<T>> grads(shards, model_.params().zeros_like());
    std::vector<LossSum<T>> sums(shards);
    const T smoothing = static_cast<T>(cfg_.optimizer.label_smoothing);
    auto run_shard = [&](std::size_t s) {
      const std::size_t b = batch.size() * s / shards;
      const std::size_t e = batch.size() * (s + 1) / shards;
      sums[s] = model_.forward_loss_sum(batch.subspan(b, e - b), smoothing, grads[s]);
    };
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg_.workers), shards);
    if (workers <= 1) {
      for (std::size_t s = 0; s < shards; ++s) run_shard(s);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t s = w; s < shards; s += workers) run_shard(s);
        });
      for (auto& t : pool) t.join();
    }
    double loss = 0;
    std::size_t tokens = 0;
    for (std::size_t s = 0; s < shards; ++s) {
      loss += sums[s].loss;
      tokens += sums[s].tokens;
    }
    auto& total = grads[0];
    for (std::size_t s = 1; s < shards; ++s) {
      std::vector<Tensor<T>*> dst;
      total.visit([&](const std::string&, Tensor<T>& t) { dst.push_back(&t); });
      std::size_t i = 0;
      grads[s].visit([&](const std::string&, const Tensor<T>& t) { dst[i++]->vec() += t.vec(); });
    }
    const T inv = T(1) / static_cast<T>(tokens);
    ++step_;
    const double lr = lr_at(step_, cfg_.optimizer);
    std::vector<Tensor<T>*> g;
    total.visit([&](const std::string&, Tensor<T>& t) { g.push_back(&t); });
    std::size_t i = 0;
    model_.mutable_params().visit([&](const std::string&, Tensor<T>& p) {
      auto& gt = *g[i];
      for (auto& x : gt.data) x *= inv;
      adam_step<T>(std::span<T>(p.data), std::span<const T>(gt.data), states_[i], step_, lr, cfg_.optimizer);
      ++i;
    });
    last_lr_ = lr;
    return loss / static_cast<double>(tokens);
  }

  /// Runs `cfg.steps` steps over epoch-wise shuffled batches of `data`.
  /// `on_log` is called every `log_every` steps and after the last one.
  std::vector<TrainLogEntry> train(const std::vector<TokenPair>& data,
                                   const std::function<void(const TrainLogEntry&)>& on_log = {}) {
    if (data.empty()) throw std::invalid_argument("train: empty training set");
    std::vector<TrainLogEntry> log;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::uint64_t epoch = 0;
    std::vector<TokenPair> batch;
    for (int s = 0; s < cfg_.steps; ++s) {
      batch.clear();
      while (batch.size() < static_cast<std::size_t>(cfg_.batch_size)) {
        if (cursor == order.size()) {
          order.resize(data.size());
          for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
          auto rng = RngStream::derive(cfg_.seed, {0x5407, epoch++});
          for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng.uniform_int(i + 1)]);
          cursor = 0;
        }
        batch.push_back(data[order[cursor++]]);
        if (batch.size() == data.size()) break;
      }
      const double loss = step(batch);
      if ((cfg_.log_every > 0 && step_ % cfg_.log_every == 0) || s + 1 == cfg_.steps) {
        TrainLogEntry e{static_cast<int>(step_), loss, last_lr_};
        log.push_back(e);
        if (on_log) on_log(e);
      }
    }
    return log;
  }

  [[nodiscard]] long steps_taken() const noexcept { return step_; }

 private:
  Transformer<T>& model_;
  TrainConfig cfg_;
  std::vector<AdamState<T>> states_;
  long step_ = 0;
  double last_lr_ = 0;
};

/// Builds a fresh model for `train` (vocabulary sizes taken from the vocabularies,
/// initialized from `tc.seed`) and trains it.
inline Checkpoint train_checkpoint(const std::vector<SentencePair>& train, const Vocab& src_vocab, const Vocab& tgt_vocab,
                                   ModelConfig cfg, const TrainConfig& tc,
                                   const std::function<void(const TrainLogEntry&)>& on_log = {},
                                   std::vector<TrainLogEntry>* log = nullptr) {
  cfg.vocab_src = static_cast<int>(src_vocab.size());
  cfg.vocab_tgt = static_cast<int>(tgt_vocab.size());
  Transformer<float> model(cfg, init_params<float>(cfg, tc.seed));
  Trainer<float> trainer(model, tc);
  auto entries = trainer.train(encode_pairs(train, src_vocab, tgt_vocab), on_log);
  if (log) *log = std::move(entries);
  return Checkpoint{cfg, model.params(), src_vocab, tgt_vocab, tc.seed};
}

}  // namespace hsd
