#pragma once

#include "hsd/numerics.hpp"
#include "hsd/rng.hpp"
#include "hsd/vocab.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hsd {

/// Raised when a model or decoder state is used in a way its contents do not support.
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct ModelConfig {
  int d_model = 512;
  int n_heads = 8;
  int n_enc_layers = 6;
  int n_dec_layers = 2;
  int d_ffn = 2048;
  int vocab_src = 0;
  int vocab_tgt = 0;
  int max_len = 128;
  bool tied_output = true;

  [[nodiscard]] int d_k() const { return d_model / n_heads; }

  void validate() const {
    if (d_model < 1 || n_heads < 1 || n_enc_layers < 1 || n_dec_layers < 1 || d_ffn < 1 || max_len < 2)
      throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
    if (vocab_src <= kNumSpecial || vocab_tgt <= kNumSpecial)
      throw std::invalid_argument("ModelConfig: vocabularies must contain non-special tokens");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, d_model, n_heads, n_enc_layers, n_dec_layers,
                                                d_ffn, vocab_src, vocab_tgt, max_len, tied_output)

template <typename T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;  // each [d_model x d_model]; head h owns columns [h*d_k, (h+1)*d_k)
};

template <typename T>
struct FeedForwardParams {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct NormParams {
  Tensor<T> gain, bias;
};

template <typename T>
struct EncoderLayerParams {
  AttentionParams<T> self_attn;
  NormParams<T> norm1;
  FeedForwardParams<T> ffn;
  NormParams<T> norm2;
};

template <typename T>
struct DecoderLayerParams {
  AttentionParams<T> self_attn;
  NormParams<T> norm1;
  AttentionParams<T> cross_attn;
  NormParams<T> norm2;
  FeedForwardParams<T> ffn;
  NormParams<T> norm3;
};

/// Sinusoidal position table [max_len x d_model].
template <typename T>
RowMat<T> sinusoid_positions(int max_len, int d_model) {
  RowMat<T> pe(max_len, d_model);
  for (int pos = 0; pos < max_len; ++pos)
    for (int i = 0; i < d_model; ++i) {
      const double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / d_model);
      pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

template <typename T>
struct ModelParams {
  Tensor<T> src_embed;  // [vocab_src x d_model]
  Tensor<T> tgt_embed;  // [vocab_tgt x d_model]; doubles as output projection when tied
  Tensor<T> out_proj;   // [d_model x vocab_tgt]; empty when tied
  std::vector<EncoderLayerParams<T>> encoder;
  std::vector<DecoderLayerParams<T>> decoder;

  /// Visits every trainable tensor in a fixed order with a stable name.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  [[nodiscard]] std::size_t num_parameters() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  /// Same layout, all zeros.
  [[nodiscard]] ModelParams zeros_like() const {
    ModelParams z = *this;
    z.visit([](const std::string&, Tensor<T>& t) { t.zero(); });
    return z;
  }

  template <typename U>
  [[nodiscard]] ModelParams<U> cast() const {
    ModelParams<U> out;
    auto conv = [](const Tensor<T>& t) {
      Tensor<U> u;
      u.shape = t.shape;
      u.data.assign(t.data.begin(), t.data.end());
      return u;
    };
    auto conv_attn = [&](const AttentionParams<T>& a) {
      return AttentionParams<U>{conv(a.wq), conv(a.wk), conv(a.wv), conv(a.wo)};
    };
    auto conv_ffn = [&](const FeedForwardParams<T>& a) {
      return FeedForwardParams<U>{conv(a.w1), conv(a.b1), conv(a.w2), conv(a.b2)};
    };
    auto conv_norm = [&](const NormParams<T>& a) { return NormParams<U>{conv(a.gain), conv(a.bias)}; };
    out.src_embed = conv(src_embed);
    out.tgt_embed = conv(tgt_embed);
    if (!out_proj.data.empty()) out.out_proj = conv(out_proj);
    for (const auto& l : encoder)
      out.encoder.push_back({conv_attn(l.self_attn), conv_norm(l.norm1), conv_ffn(l.ffn), conv_norm(l.norm2)});
    for (const auto& l : decoder)
      out.decoder.push_back({conv_attn(l.self_attn), conv_norm(l.norm1), conv_attn(l.cross_attn),
                             conv_norm(l.norm2), conv_ffn(l.ffn), conv_norm(l.norm3)});
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& p, F& f) {
    auto attn = [&](const std::string& pre, auto& a) {
      f(pre + ".wq", a.wq);
      f(pre + ".wk", a.wk);
      f(pre + ".wv", a.wv);
      f(pre + ".wo", a.wo);
    };
    auto norm = [&](const std::string& pre, auto& n) {
      f(pre + ".gain", n.gain);
      f(pre + ".bias", n.bias);
    };
    auto ffn = [&](const std::string& pre, auto& n) {
      f(pre + ".w1", n.w1);
      f(pre + ".b1", n.b1);
      f(pre + ".w2", n.w2);
      f(pre + ".b2", n.b2);
    };
    f("src_embed", p.src_embed);
    f("tgt_embed", p.tgt_embed);
    if (!p.out_proj.data.empty()) f("out_proj", p.out_proj);
    for (std::size_t i = 0; i < p.encoder.size(); ++i) {
      const std::string pre = "enc." + std::to_string(i);
      attn(pre + ".self", p.encoder[i].self_attn);
      norm(pre + ".norm1", p.encoder[i].norm1);
      ffn(pre + ".ffn", p.encoder[i].ffn);
      norm(pre + ".norm2", p.encoder[i].norm2);
    }
    for (std::size_t i = 0; i < p.decoder.size(); ++i) {
      const std::string pre = "dec." + std::to_string(i);
      attn(pre + ".self", p.decoder[i].self_attn);
      norm(pre + ".norm1", p.decoder[i].norm1);
      attn(pre + ".cross", p.decoder[i].cross_attn);
      norm(pre + ".norm2", p.decoder[i].norm2);
      ffn(pre + ".ffn", p.decoder[i].ffn);
      norm(pre + ".norm3", p.decoder[i].norm3);
    }
  }
};

/// Parameter layout for `cfg` with every entry zero.
template <typename T>
ModelParams<T> make_params(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ffn);
  auto attn = [&] { return AttentionParams<T>{Tensor<T>({d, d}), Tensor<T>({d, d}), Tensor<T>({d, d}), Tensor<T>({d, d})}; };
  auto norm = [&] { return NormParams<T>{Tensor<T>({d}, T(1)), Tensor<T>({d})}; };
  auto ffn = [&] { return FeedForwardParams<T>{Tensor<T>({d, f}), Tensor<T>({f}), Tensor<T>({f, d}), Tensor<T>({d})}; };
  ModelParams<T> p;
  p.src_embed = Tensor<T>({static_cast<std::size_t>(cfg.vocab_src), d});
  p.tgt_embed = Tensor<T>({static_cast<std::size_t>(cfg.vocab_tgt), d});
  if (!cfg.tied_output) p.out_proj = Tensor<T>({d, static_cast<std::size_t>(cfg.vocab_tgt)});
  for (int i = 0; i < cfg.n_enc_layers; ++i) p.encoder.push_back({attn(), norm(), ffn(), norm()});
  for (int i = 0; i < cfg.n_dec_layers; ++i) p.decoder.push_back({attn(), norm(), attn(), norm(), ffn(), norm()});
  return p;
}

/// Xavier-uniform matrices, N(0, d^-1/2)-scaled uniform embeddings, unit gains, zero biases.
/// Each tensor draws from its own stream keyed by its name.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = make_params<T>(cfg);
  p.visit([&](const std::string& name, Tensor<T>& t) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
    auto rng = RngStream::derive(seed, {h});
    const bool is_embed = name == "src_embed" || name == "tgt_embed";
    if (t.shape.size() == 1) return;  // gains stay 1, biases 0
    double limit;
    if (is_embed) {
      limit = std::sqrt(3.0) * std::pow(static_cast<double>(cfg.d_model), -0.5);
    } else {
      limit = std::sqrt(6.0 / static_cast<double>(t.shape[0] + t.shape[1]));
    }
    for (auto& x : t.data) x = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
    if (is_embed)
      for (std::size_t c = 0; c < t.cols(); ++c) t.data[c] = T(0);  // padding row
  });
  return p;
}

/// Per-head attention weights of one attention layer over a sequence of steps.
template <typename T>
struct AttentionRecord {
  int layer = 0;
  int head = 0;
  RowMat<T> weights;  // [target_steps x source_len]
};

/// Replacement post-softmax weights for one cross-attention layer: one row per head.
template <typename T>
struct HeadOverride {
  int layer = -1;  // -1 selects the final decoder layer
  RowMat<T> rows;  // [n_heads x source_len]
};

struct AttentionMask {
  bool causal = false;
  std::vector<std::uint8_t> key_valid;  // empty = all keys valid
};

template <typename T>
struct AttentionCache {
  RowMat<T> xq, xk, xv, q, k, v, ctx;
  std::vector<RowMat<T>> weights;  // per head [Lq x Lk]
};

template <typename T>
struct AttentionOutput {
  RowMat<T> out;                   // [Lq x d_model]
  std::vector<RowMat<T>> weights;  // per head [Lq x Lk], after any override
};

namespace detail {

template <typename T>
void check_stochastic_row(const auto& row, double tol, const char* what) {
  T sum = 0;
  for (Eigen::Index i = 0; i < row.size(); ++i) {
    if (!(row(i) >= T(0)) || !std::isfinite(row(i)))
      throw std::invalid_argument(std::string(what) + ": negative or non-finite weight");
    sum += row(i);
  }
  if (std::abs(static_cast<double>(sum) - 1.0) > tol)
    throw std::invalid_argument(std::string(what) + ": row does not sum to 1");
}

}  // namespace detail

template <typename T>
void validate_override(const HeadOverride<T>& ovr, int n_heads, Eigen::Index source_len) {
  if (ovr.rows.rows() != n_heads || ovr.rows.cols() != source_len)
    throw std::invalid_argument("HeadOverride: expected one row per head over the source positions");
  for (Eigen::Index h = 0; h < ovr.rows.rows(); ++h)
    detail::check_stochastic_row<T>(ovr.rows.row(h), 1e-5, "HeadOverride");
}

/// Multi-head scaled dot-product attention. When `override_rows` is given its
/// row h replaces head h's post-softmax weights for every query; each head
/// still applies its own value projection.
template <typename T>
AttentionOutput<T> multi_head_attention(const AttentionParams<T>& p, int n_heads, const RowMat<T>& xq,
                                        const RowMat<T>& xk, const RowMat<T>& xv, const AttentionMask& mask,
                                        const HeadOverride<T>* override_rows = nullptr,
                                        AttentionCache<T>* cache = nullptr) {
  const Eigen::Index d = static_cast<Eigen::Index>(p.wq.rows());
  if (xq.cols() != d || xk.cols() != d || xv.cols() != d || xk.rows() != xv.rows() || n_heads < 1 ||
      d % n_heads != 0)
    throw std::invalid_argument("multi_head_attention: dimension mismatch");
  const Eigen::Index lq = xq.rows();
  const Eigen::Index lk = xk.rows();
  if (!mask.key_valid.empty() && static_cast<Eigen::Index>(mask.key_valid.size()) != lk)
    throw std::invalid_argument("multi_head_attention: mask length mismatch");
  if (mask.causal && lq != lk) throw std::invalid_argument("multi_head_attention: causal mask needs square scores");
  if (override_rows) validate_override(*override_rows, n_heads, lk);

  const Eigen::Index dk = d / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  RowMat<T> q = xq * p.wq.mat();
  RowMat<T> k = xk * p.wk.mat();
  RowMat<T> v = xv * p.wv.mat();
  RowMat<T> ctx(lq, d);
  AttentionOutput<T> result;
  result.weights.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = h * dk;
    RowMat<T> a = (q.middleCols(c0, dk) * k.middleCols(c0, dk).transpose()) * scale;
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (Eigen::Index i = 0; i < lq; ++i)
      for (Eigen::Index j = 0; j < lk; ++j)
        if ((mask.causal && j > i) || (!mask.key_valid.empty() && !mask.key_valid[static_cast<std::size_t>(j)]))
          a(i, j) = neg_inf;
    softmax_rows(a);
    if (override_rows) {
      for (Eigen::Index i = 0; i < lq; ++i) a.row(i) = override_rows->rows.row(h);
      for (Eigen::Index j = 0; j < lk; ++j)
        if (!mask.key_valid.empty() && !mask.key_valid[static_cast<std::size_t>(j)]) a.col(j).setZero();
    }
    ctx.middleCols(c0, dk).noalias() = a * v.middleCols(c0, dk);
    result.weights.push_back(std::move(a));
  }
  result.out = ctx * p.wo.mat();
  if (cache) {
    cache->xq = xq;
    cache->xk = xk;
    cache->xv = xv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->ctx = std::move(ctx);
    cache->weights = result.weights;
  }
  return result;
}

template <typename T>
struct AttentionGrads {
  RowMat<T> dxq, dxk, dxv;
};

/// Backward pass of multi_head_attention (no override). Accumulates into `grads`.
template <typename T>
AttentionGrads<T> multi_head_attention_backward(const AttentionParams<T>& p, int n_heads,
                                                const AttentionCache<T>& c, const RowMat<T>& dout,
                                                AttentionParams<T>& grads) {
  const Eigen::Index d = static_cast<Eigen::Index>(p.wq.rows());
  const Eigen::Index dk = d / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  grads.wo.mat().noalias() += c.ctx.transpose() * dout;
  RowMat<T> dctx = dout * p.wo.mat().transpose();
  RowMat<T> dq(c.q.rows(), d), dk_(c.k.rows(), d), dv(c.v.rows(), d);
  for (int h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = h * dk;
    const RowMat<T>& a = c.weights[static_cast<std::size_t>(h)];
    RowMat<T> da = dctx.middleCols(c0, dk) * c.v.middleCols(c0, dk).transpose();
    dv.middleCols(c0, dk).noalias() = a.transpose() * dctx.middleCols(c0, dk);
    RowMat<T> ds = a.array() * (da.colwise() - (da.array() * a.array()).rowwise().sum().matrix()).array();
    ds *= scale;
    dq.middleCols(c0, dk).noalias() = ds * c.k.middleCols(c0, dk);
    dk_.middleCols(c0, dk).noalias() = ds.transpose() * c.q.middleCols(c0, dk);
  }
  grads.wq.mat().noalias() += c.xq.transpose() * dq;
  grads.wk.mat().noalias() += c.xk.transpose() * dk_;
  grads.wv.mat().noalias() += c.xv.transpose() * dv;
  return {dq * p.wq.mat().transpose(), dk_ * p.wk.mat().transpose(), dv * p.wv.mat().transpose()};
}

template <typename T>
struct FeedForwardCache {
  RowMat<T> x, hidden;  // hidden is post-ReLU
};

template <typename T>
RowMat<T> feed_forward(const FeedForwardParams<T>& p, const RowMat<T>& x, FeedForwardCache<T>* cache = nullptr) {
  RowMat<T> h = (x * p.w1.mat()).rowwise() + p.b1.vec();
  h = h.cwiseMax(T(0));
  RowMat<T> y = (h * p.w2.mat()).rowwise() + p.b2.vec();
  if (cache) {
    cache->x = x;
    cache->hidden = std::move(h);
  }
  return y;
}

template <typename T>
RowMat<T> feed_forward_backward(const FeedForwardParams<T>& p, const FeedForwardCache<T>& c, const RowMat<T>& dy,
                                FeedForwardParams<T>& g) {
  g.w2.mat().noalias() += c.hidden.transpose() * dy;
  g.b2.vec() += dy.colwise().sum();
  RowMat<T> dh = dy * p.w2.mat().transpose();
  dh = (c.hidden.array() > T(0)).select(dh, T(0));
  g.w1.mat().noalias() += c.x.transpose() * dh;
  g.b1.vec() += dh.colwise().sum();
  return dh * p.w1.mat().transpose();
}

/// Cross-attention weights of one decoder layer at one step: [n_heads x source_len].
template <typename T>
struct CrossAttention {
  int layer = 0;
  RowMat<T> weights;
  bool overridden = false;
};

/// Called with (layer, computed cross-attention weights [H x T]); a returned
/// override replaces those weights before the context is computed.
template <typename T>
using CrossAttentionHook = std::function<std::optional<HeadOverride<T>>(int, const RowMat<T>&)>;

/// Incremental decoding state: cached projections of the encoder memory and
/// of every previously generated position.
template <typename T>
struct DecoderState {
  struct LayerCache {
    RowMat<T> self_k, self_v;    // [step x d_model]
    RowMat<T> cross_k, cross_v;  // [source_len x d_model]
  };
  std::vector<LayerCache> layers;
  RowMat<T> hidden;  // s_t: final-layer output of the last step [1 x d_model]
  int source_len = 0;
  int step = 0;
};

template <typename T>
struct StepOutput {
  std::vector<T> logits;
  std::vector<CrossAttention<T>> cross;  // one per decoder layer
};

/// A training pair in token ids. `tgt` carries neither BOS nor EOS.
struct TokenPair {
  std::vector<TokenId> src;
  std::vector<TokenId> tgt;
};

template <typename T>
struct TeacherForcedOutput {
  RowMat<T> logits;                                   // [tgt_len+1 x vocab_tgt]
  std::vector<std::vector<RowMat<T>>> cross_weights;  // [layer][head] -> [tgt_len+1 x source_len]
};

template <typename T>
struct LossSum {
  double loss = 0;
  std::size_t tokens = 0;
};

template <typename T>
class Transformer {
 public:
  Transformer(ModelConfig cfg, ModelParams<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    check_layout();
    positions_ = sinusoid_positions<T>(cfg_.max_len, cfg_.d_model);
    embed_scale_ = std::sqrt(static_cast<T>(cfg_.d_model));
  }

  [[nodiscard]] const ModelConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] const ModelParams<T>& params() const noexcept { return params_; }
  [[nodiscard]] ModelParams<T>& mutable_params() noexcept { return params_; }
  [[nodiscard]] int final_layer() const noexcept { return cfg_.n_dec_layers - 1; }

  /// Encoder memory [len(src) x d_model].
  [[nodiscard]] RowMat<T> encode(std::span<const TokenId> src) const { return encode_impl(src, nullptr); }

  [[nodiscard]] DecoderState<T> start_decode(const RowMat<T>& memory) const {
    if (memory.cols() != cfg_.d_model || memory.rows() < 1)
      throw std::invalid_argument("start_decode: memory shape mismatch");
    DecoderState<T> st;
    st.source_len = static_cast<int>(memory.rows());
    for (const auto& layer : params_.decoder) {
      typename DecoderState<T>::LayerCache lc;
      lc.self_k.resize(0, cfg_.d_model);
      lc.self_v.resize(0, cfg_.d_model);
      lc.cross_k = memory * layer.cross_attn.wk.mat();
      lc.cross_v = memory * layer.cross_attn.wv.mat();
      st.layers.push_back(std::move(lc));
    }
    return st;
  }

  /// One incremental decoder step. `hook`, when set, sees every layer's
  /// computed cross-attention and may replace it.
  StepOutput<T> decode_step(DecoderState<T>& st, TokenId prev, const CrossAttentionHook<T>& hook = {}) const {
    if (st.layers.size() != params_.decoder.size() || st.source_len < 1)
      throw InvalidState("decode_step: state does not belong to this model");
    if (st.step >= cfg_.max_len) throw InvalidState("decode_step: maximum length reached");
    for (const auto& lc : st.layers)
      if (lc.self_k.rows() != st.step || lc.cross_k.rows() != st.source_len)
        throw InvalidState("decode_step: cache inconsistent with step index");
    check_tgt_token(prev);
    const Eigen::Index d = cfg_.d_model;
    RowMat<T> y = params_.tgt_embed.mat().row(prev) * embed_scale_ + positions_.row(st.step);
    StepOutput<T> out;
    for (std::size_t li = 0; li < params_.decoder.size(); ++li) {
      const auto& layer = params_.decoder[li];
      auto& lc = st.layers[li];
      // self-attention over the cached prefix plus this position
      lc.self_k.conservativeResize(st.step + 1, d);
      lc.self_v.conservativeResize(st.step + 1, d);
      lc.self_k.row(st.step) = y * layer.self_attn.wk.mat();
      lc.self_v.row(st.step) = y * layer.self_attn.wv.mat();
      RowMat<T> sa = attend_projected(layer.self_attn, y * layer.self_attn.wq.mat(), lc.self_k, lc.self_v, nullptr,
                                      nullptr);
      y = layer_norm_rows<T>(y + sa, layer.norm1.gain, layer.norm1.bias);

      CrossAttention<T> rec;
      rec.layer = static_cast<int>(li);
      const HeadOverride<T>* ovr_ptr = nullptr;
      std::optional<HeadOverride<T>> ovr;
      RowMat<T> q = y * layer.cross_attn.wq.mat();
      RowMat<T> computed = head_weights(q, lc.cross_k);
      if (hook) {
        ovr = hook(static_cast<int>(li), computed);
        if (ovr) {
          validate_override(*ovr, cfg_.n_heads, st.source_len);
          ovr_ptr = &*ovr;
        }
      }
      RowMat<T> ca = attend_projected(layer.cross_attn, q, lc.cross_k, lc.cross_v, ovr_ptr, &computed);
      rec.weights = ovr_ptr ? ovr_ptr->rows : computed;
      rec.overridden = ovr_ptr != nullptr;
      out.cross.push_back(std::move(rec));
      y = layer_norm_rows<T>(y + ca, layer.norm2.gain, layer.norm2.bias);
      RowMat<T> ff = feed_forward(layer.ffn, y);
      y = layer_norm_rows<T>(y + ff, layer.norm3.gain, layer.norm3.bias);
    }
    st.hidden = y;
    ++st.step;
    RowVec<T> logits = output_logits(y);
    out.logits.assign(logits.data(), logits.data() + logits.size());
    return out;
  }

  /// Convenience form: `ovr` (if any) applies to the layer it names.
  StepOutput<T> decode_step(DecoderState<T>& st, TokenId prev, const std::optional<HeadOverride<T>>& ovr) const {
    if (!ovr) return decode_step(st, prev, CrossAttentionHook<T>{});
    const int target = ovr->layer < 0 ? final_layer() : ovr->layer;
    if (target >= cfg_.n_dec_layers) throw std::invalid_argument("HeadOverride: layer out of range");
    return decode_step(st, prev, [&](int layer, const RowMat<T>&) -> std::optional<HeadOverride<T>> {
      if (layer == target) return ovr;
      return std::nullopt;
    });
  }

  /// Full-sequence (non-incremental) forward pass with teacher forcing on
  /// [BOS] + tgt. Independent of the incremental cache path.
  [[nodiscard]] TeacherForcedOutput<T> forward(std::span<const TokenId> src, std::span<const TokenId> tgt) const {
    RowMat<T> memory = encode(src);
    std::vector<TokenId> tin{kBos};
    tin.insert(tin.end(), tgt.begin(), tgt.end());
    TeacherForcedOutput<T> out;
    RowMat<T> y = decode_full(memory, tin, nullptr, &out.cross_weights);
    out.logits = output_logits(y);
    return out;
  }

  /// Summed label-smoothed loss over the target positions (tgt tokens + EOS)
  /// of every pair in the batch; parameter gradients of that sum are added to `grads`.
  LossSum<T> forward_loss_sum(std::span<const TokenPair> batch, T smoothing, ModelParams<T>& grads) const {
    LossSum<T> total;
    for (const auto& pair : batch) {
      Caches caches;
      RowMat<T> memory = encode_impl(pair.src, &caches.enc);
      std::vector<TokenId> tin{kBos};
      tin.insert(tin.end(), pair.tgt.begin(), pair.tgt.end());
      std::vector<TokenId> tout(pair.tgt.begin(), pair.tgt.end());
      tout.push_back(kEos);
      if (static_cast<int>(tin.size()) > cfg_.max_len) throw std::invalid_argument("forward_loss: target too long");
      for (TokenId t : tout) check_tgt_token(t);
      RowMat<T> y = decode_full(memory, tin, &caches.dec, nullptr);
      RowMat<T> logits = output_logits(y);
      RowMat<T> dlogits(logits.rows(), logits.cols());
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        std::span<const T> row(logits.row(r).data(), static_cast<std::size_t>(logits.cols()));
        auto lg = label_smoothed_loss<T>(row, static_cast<std::size_t>(tout[static_cast<std::size_t>(r)]), smoothing);
        total.loss += static_cast<double>(lg.loss);
        for (Eigen::Index c = 0; c < logits.cols(); ++c) dlogits(r, c) = lg.grad[static_cast<std::size_t>(c)];
      }
      total.tokens += tout.size();
      backward(pair, y, dlogits, caches, memory, grads);
    }
    return total;
  }

  /// Mean label-smoothed loss over all target positions and its gradient.
  std::pair<T, ModelParams<T>> forward_loss(std::span<const TokenPair> batch, T smoothing) const {
    if (batch.empty()) throw std::invalid_argument("forward_loss: empty batch");
    auto grads = params_.zeros_like();
    auto sum = forward_loss_sum(batch, smoothing, grads);
    const T inv = T(1) / static_cast<T>(sum.tokens);
    grads.visit([&](const std::string&, Tensor<T>& t) {
      for (auto& x : t.data) x *= inv;
    });
    return {static_cast<T>(sum.loss) * inv, std::move(grads)};
  }

 private:
  struct EncLayerCache {
    AttentionCache<T> attn;
    RowMat<T> res1;
    LayerNormCache<T> ln1;
    FeedForwardCache<T> ffn;
    LayerNormCache<T> ln2;
  };
  struct DecLayerCache {
    AttentionCache<T> self_attn;
    LayerNormCache<T> ln1;
    AttentionCache<T> cross_attn;
    LayerNormCache<T> ln2;
    FeedForwardCache<T> ffn;
    LayerNormCache<T> ln3;
  };
  struct Caches {
    std::vector<EncLayerCache> enc;
    std::vector<DecLayerCache> dec;
  };

  void check_layout() const {
    const auto expected = make_params<T>(cfg_);
    std::vector<std::vector<std::size_t>> a, b;
    expected.visit([&](const std::string&, const Tensor<T>& t) { a.push_back(t.shape); });
    params_.visit([&](const std::string&, const Tensor<T>& t) {
      if (t.size() == 0) throw std::invalid_argument("ModelParams: empty tensor");
      b.push_back(t.shape);
    });
    if (a != b) throw std::invalid_argument("ModelParams: shapes inconsistent with ModelConfig");
  }

  void check_tgt_token(TokenId t) const {
    if (t < 0 || t >= cfg_.vocab_tgt) throw std::invalid_argument("target token out of vocabulary");
  }

  RowMat<T> embed(const Tensor<T>& table, std::span<const TokenId> tokens, int vocab) const {
    RowMat<T> x(static_cast<Eigen::Index>(tokens.size()), cfg_.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] < 0 || tokens[i] >= vocab) throw std::invalid_argument("token out of vocabulary");
      x.row(static_cast<Eigen::Index>(i)) =
          table.mat().row(tokens[i]) * embed_scale_ + positions_.row(static_cast<Eigen::Index>(i));
    }
    return x;
  }

  RowMat<T> encode_impl(std::span<const TokenId> src, std::vector<EncLayerCache>* caches) const {
    if (src.empty() || static_cast<int>(src.size()) > cfg_.max_len)
      throw std::invalid_argument("encode: source length must be in [1, max_len]");
    RowMat<T> x = embed(params_.src_embed, src, cfg_.vocab_src);
    if (caches) caches->resize(params_.encoder.size());
    for (std::size_t li = 0; li < params_.encoder.size(); ++li) {
      const auto& layer = params_.encoder[li];
      EncLayerCache* c = caches ? &(*caches)[li] : nullptr;
      auto a = multi_head_attention(layer.self_attn, cfg_.n_heads, x, x, x, AttentionMask{}, static_cast<const HeadOverride<T>*>(nullptr),
                                    c ? &c->attn : nullptr);
      x = layer_norm_rows<T>(x + a.out, layer.norm1.gain, layer.norm1.bias, c ? &c->ln1 : nullptr);
      RowMat<T> f = feed_forward(layer.ffn, x, c ? &c->ffn : nullptr);
      x = layer_norm_rows<T>(x + f, layer.norm2.gain, layer.norm2.bias, c ? &c->ln2 : nullptr);
    }
    return x;
  }

  RowMat<T> decode_full(const RowMat<T>& memory, std::span<const TokenId> tin, std::vector<DecLayerCache>* caches,
                        std::vector<std::vector<RowMat<T>>>* cross_out) const {
    RowMat<T> y = embed(params_.tgt_embed, tin, cfg_.vocab_tgt);
    if (caches) caches->resize(params_.decoder.size());
    AttentionMask causal;
    causal.causal = true;
    for (std::size_t li = 0; li < params_.decoder.size(); ++li) {
      const auto& layer = params_.decoder[li];
      DecLayerCache* c = caches ? &(*caches)[li] : nullptr;
      auto sa = multi_head_attention(layer.self_attn, cfg_.n_heads, y, y, y, causal, static_cast<const HeadOverride<T>*>(nullptr),
                                     c ? &c->self_attn : nullptr);
      y = layer_norm_rows<T>(y + sa.out, layer.norm1.gain, layer.norm1.bias, c ? &c->ln1 : nullptr);
      auto ca = multi_head_attention(layer.cross_attn, cfg_.n_heads, y, memory, memory, AttentionMask{}, static_cast<const HeadOverride<T>*>(nullptr),
                                     c ? &c->cross_attn : nullptr);
      if (cross_out) cross_out->push_back(ca.weights);
      y = layer_norm_rows<T>(y + ca.out, layer.norm2.gain, layer.norm2.bias, c ? &c->ln2 : nullptr);
      RowMat<T> f = feed_forward(layer.ffn, y, c ? &c->ffn : nullptr);
      y = layer_norm_rows<T>(y + f, layer.norm3.gain, layer.norm3.bias, c ? &c->ln3 : nullptr);
    }
    return y;
  }

  RowMat<T> output_logits(const RowMat<T>& y) const {
    if (cfg_.tied_output) return y * params_.tgt_embed.mat().transpose();
    return y * params_.out_proj.mat();
  }

  /// Per-head weights [H x T] of a single query row against projected keys.
  RowMat<T> head_weights(const RowMat<T>& q, const RowMat<T>& k) const {
    const Eigen::Index dk = cfg_.d_k();
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));
    RowMat<T> w(cfg_.n_heads, k.rows());
    for (int h = 0; h < cfg_.n_heads; ++h)
      w.row(h) = (q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose()) * scale;
    softmax_rows(w);
    return w;
  }

  /// Attention output for one query row given already-projected keys/values.
  RowMat<T> attend_projected(const AttentionParams<T>& p, const RowMat<T>& q, const RowMat<T>& k, const RowMat<T>& v,
                             const HeadOverride<T>* ovr, const RowMat<T>* precomputed) const {
    const Eigen::Index dk = cfg_.d_k();
    RowMat<T> w = ovr ? ovr->rows : (precomputed ? *precomputed : head_weights(q, k));
    RowMat<T> ctx(1, cfg_.d_model);
    for (int h = 0; h < cfg_.n_heads; ++h)
      ctx.middleCols(h * dk, dk).noalias() = w.row(h) * v.middleCols(h * dk, dk);
    return ctx * p.wo.mat();
  }

  void backward(const TokenPair& pair, const RowMat<T>& y, const RowMat<T>& dlogits, Caches& c,
                const RowMat<T>& memory, ModelParams<T>& g) const {
    RowMat<T> dy;
    if (cfg_.tied_output) {
      dy = dlogits * params_.tgt_embed.mat();
      g.tgt_embed.mat().noalias() += dlogits.transpose() * y;
    } else {
      dy = dlogits * params_.out_proj.mat().transpose();
      g.out_proj.mat().noalias() += y.transpose() * dlogits;
    }
    RowMat<T> dmem = RowMat<T>::Zero(memory.rows(), memory.cols());
    for (std::size_t li = params_.decoder.size(); li-- > 0;) {
      const auto& p = params_.decoder[li];
      auto& gl = g.decoder[li];
      auto& cl = c.dec[li];
      RowMat<T> dr3 = layer_norm_rows_backward(dy, cl.ln3, p.norm3.gain, gl.norm3.gain, gl.norm3.bias);
      RowMat<T> dx2 = dr3 + feed_forward_backward(p.ffn, cl.ffn, dr3, gl.ffn);
      RowMat<T> dr2 = layer_norm_rows_backward(dx2, cl.ln2, p.norm2.gain, gl.norm2.gain, gl.norm2.bias);
      auto ca = multi_head_attention_backward(p.cross_attn, cfg_.n_heads, cl.cross_attn, dr2, gl.cross_attn);
      dmem += ca.dxk + ca.dxv;
      RowMat<T> dx1 = dr2 + ca.dxq;
      RowMat<T> dr1 = layer_norm_rows_backward(dx1, cl.ln1, p.norm1.gain, gl.norm1.gain, gl.norm1.bias);
      auto sa = multi_head_attention_backward(p.self_attn, cfg_.n_heads, cl.self_attn, dr1, gl.self_attn);
      dy = dr1 + sa.dxq + sa.dxk + sa.dxv;
    }
    // target embedding rows: [BOS] + tgt
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const TokenId tok = r == 0 ? kBos : pair.tgt[static_cast<std::size_t>(r - 1)];
      g.tgt_embed.mat().row(tok) += dy.row(r) * embed_scale_;
    }
    RowMat<T> dx = dmem;
    for (std::size_t li = params_.encoder.size(); li-- > 0;) {
      const auto& p = params_.encoder[li];
      auto& gl = g.encoder[li];
      auto& cl = c.enc[li];
      RowMat<T> dr2 = layer_norm_rows_backward(dx, cl.ln2, p.norm2.gain, gl.norm2.gain, gl.norm2.bias);
      RowMat<T> dx1 = dr2 + feed_forward_backward(p.ffn, cl.ffn, dr2, gl.ffn);
      RowMat<T> dr1 = layer_norm_rows_backward(dx1, cl.ln1, p.norm1.gain, gl.norm1.gain, gl.norm1.bias);
      auto sa = multi_head_attention_backward(p.self_attn, cfg_.n_heads, cl.attn, dr1, gl.self_attn);
      dx = dr1 + sa.dxq + sa.dxk + sa.dxv;
    }
    for (Eigen::Index r = 0; r < dx.rows(); ++r)
      g.src_embed.mat().row(pair.src[static_cast<std::size_t>(r)]) += dx.row(r) * embed_scale_;
  }

  ModelConfig cfg_;
  ModelParams<T> params_;
  RowMat<T> positions_;
  T embed_scale_;
};

}  // namespace hsd
