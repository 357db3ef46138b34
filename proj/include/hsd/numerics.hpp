#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsd {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Dense row-major tensor. Rank 1 or 2 in practice; rank-2 tensors expose an
/// Eigen view for the matrix kernels.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)) {
    if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
    std::size_t n = 1;
    for (auto d : shape) {
      if (d == 0) throw std::invalid_argument("Tensor: zero-sized dimension");
      n *= d;
    }
    data.assign(n, fill);
  }

  [[nodiscard]] std::size_t size() const noexcept { return data.size(); }
  [[nodiscard]] std::size_t rows() const noexcept { return shape.size() == 1 ? 1 : shape[0]; }
  [[nodiscard]] std::size_t cols() const noexcept { return shape.back(); }

  Eigen::Map<RowMat<T>> mat() {
    return {data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }
  Eigen::Map<const RowMat<T>> mat() const {
    return {data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
  }
  Eigen::Map<RowVec<T>> vec() { return {data.data(), static_cast<Eigen::Index>(size())}; }
  Eigen::Map<const RowVec<T>> vec() const { return {data.data(), static_cast<Eigen::Index>(size())}; }

  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](T x) { return std::isfinite(x); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace detail {
template <typename T>
void require_finite(std::span<const T> v, const char* what) {
  for (T x : v)
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + ": non-finite input");
}
}  // namespace detail

/// Numerically stable softmax (max subtraction).
template <typename T>
std::vector<T> softmax(std::span<const T> v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  detail::require_finite(v, "softmax");
  const T mx = *std::max_element(v.begin(), v.end());
  std::vector<T> out(v.size());
  T sum = 0;
  for (std::size_t i = 0; i < v.size(); ++i) sum += (out[i] = std::exp(v[i] - mx));
  for (auto& x : out) x /= sum;
  return out;
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& v) {
  return softmax(std::span<const T>(v));
}

template <typename T>
std::vector<T> log_softmax(std::span<const T> v) {
  if (v.empty()) throw std::invalid_argument("log_softmax: empty input");
  const T mx = *std::max_element(v.begin(), v.end());
  T sum = 0;
  for (T x : v) sum += std::exp(x - mx);
  const T lse = mx + std::log(sum);
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
  return out;
}

/// Row-wise softmax in place. Entries equal to -inf get weight exactly 0.
template <typename Derived>
void softmax_rows(Eigen::MatrixBase<Derived>& m) {
  using T = typename Derived::Scalar;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const T mx = row.maxCoeff();
    T sum = 0;
    for (Eigen::Index c = 0; c < row.size(); ++c) {
      const T e = std::isinf(row(c)) && row(c) < 0 ? T(0) : std::exp(row(c) - mx);
      row(c) = e;
      sum += e;
    }
    row /= sum;
  }
}

inline constexpr double kLayerNormEpsilon = 1e-6;

/// Layer normalization of one vector followed by the affine map.
template <typename T>
std::vector<T> layer_norm(std::span<const T> v, std::span<const T> gain, std::span<const T> bias) {
  if (v.size() < 2 || gain.size() != v.size() || bias.size() != v.size())
    throw std::invalid_argument("layer_norm: length mismatch");
  const T n = static_cast<T>(v.size());
  T mean = 0;
  for (T x : v) mean += x;
  mean /= n;
  T var = 0;
  for (T x : v) var += (x - mean) * (x - mean);
  var /= n;
  const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEpsilon));
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) * inv * gain[i] + bias[i];
  return out;
}

/// Row-wise layer norm over a matrix, caching what the backward pass needs.
template <typename T>
struct LayerNormCache {
  RowMat<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
RowMat<T> layer_norm_rows(const RowMat<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                          LayerNormCache<T>* cache = nullptr) {
  const auto n = x.cols();
  if (static_cast<std::size_t>(n) != gain.size() || gain.size() != bias.size())
    throw std::invalid_argument("layer_norm_rows: length mismatch");
  RowMat<T> xhat(x.rows(), n);
  std::vector<T> inv_std(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEpsilon));
    xhat.row(r) = (x.row(r).array() - mean) * inv;
    inv_std[static_cast<std::size_t>(r)] = inv;
  }
  RowMat<T> y = (xhat.array().rowwise() * gain.vec().array()).rowwise() + bias.vec().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

/// Returns dx; accumulates into dgain / dbias.
template <typename T>
RowMat<T> layer_norm_rows_backward(const RowMat<T>& dy, const LayerNormCache<T>& cache,
                                   const Tensor<T>& gain, Tensor<T>& dgain, Tensor<T>& dbias) {
  const auto n = static_cast<T>(dy.cols());
  dgain.vec() += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias.vec() += dy.colwise().sum();
  RowMat<T> dxhat = dy.array().rowwise() * gain.vec().array();
  RowMat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T s1 = dxhat.row(r).sum();
    const T s2 = dxhat.row(r).dot(cache.xhat.row(r));
    dx.row(r) = (cache.inv_std[static_cast<std::size_t>(r)] / n) *
                (n * dxhat.row(r).array() - s1 - cache.xhat.row(r).array() * s2);
  }
  return dx;
}

template <typename T>
struct LossAndGrad {
  T loss;
  std::vector<T> grad;
};

/// Cross-entropy against the smoothed target distribution: (1 - smoothing) on
/// the target, smoothing / (V - 1) spread over every other entry.
template <typename T>
LossAndGrad<T> label_smoothed_loss(std::span<const T> logits, std::size_t target, T smoothing) {
  const std::size_t vocab = logits.size();
  if (vocab < 2) throw std::invalid_argument("label_smoothed_loss: vocabulary must have >= 2 entries");
  if (target >= vocab) throw std::invalid_argument("label_smoothed_loss: target out of range");
  if (!(smoothing >= T(0) && smoothing < T(1)))
    throw std::invalid_argument("label_smoothed_loss: smoothing must be in [0, 1)");
  const auto logp = log_softmax(logits);
  const T off = smoothing / static_cast<T>(vocab - 1);
  const T on = T(1) - smoothing;
  LossAndGrad<T> out{T(0), std::vector<T>(vocab)};
  for (std::size_t i = 0; i < vocab; ++i) {
    const T q = i == target ? on : off;
    if (q != T(0)) out.loss -= q * logp[i];
    out.grad[i] = std::exp(logp[i]) - q;
  }
  return out;
}

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  int warmup_steps = 8000;
  int d_model = 512;
  double label_smoothing = 0.1;
  /// Multiplier on the inverse-square-root schedule; 1.0 is the plain schedule.
  double lr_scale = 1.0;

  void validate() const {
    if (!(beta1 > 0 && beta1 < 1)) throw std::invalid_argument("OptimizerConfig: beta1 must be in (0,1)");
    if (!(beta2 > 0 && beta2 < 1)) throw std::invalid_argument("OptimizerConfig: beta2 must be in (0,1)");
    if (!(epsilon > 0)) throw std::invalid_argument("OptimizerConfig: epsilon must be > 0");
    if (warmup_steps < 1) throw std::invalid_argument("OptimizerConfig: warmup_steps must be >= 1");
    if (d_model < 1) throw std::invalid_argument("OptimizerConfig: d_model must be >= 1");
    if (!(label_smoothing >= 0 && label_smoothing < 1))
      throw std::invalid_argument("OptimizerConfig: label_smoothing must be in [0,1)");
    if (!(lr_scale > 0)) throw std::invalid_argument("OptimizerConfig: lr_scale must be > 0");
  }
};

/// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), times lr_scale.
inline double lr_at(long step, const OptimizerConfig& cfg) {
  if (step < 1) throw std::invalid_argument("lr_at: step must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup_steps);
  return cfg.lr_scale * std::pow(static_cast<double>(cfg.d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
};

/// One bias-corrected Adam update over a flat parameter block.
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, long step, double lr,
               const OptimizerConfig& cfg) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: params/grads size mismatch");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: state size mismatch");
  if (step < 1) throw std::invalid_argument("adam_step: step must be >= 1");
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(step)));
  const T eps = static_cast<T>(cfg.epsilon);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    const T mhat = state.m[i] / c1;
    const T vhat = state.v[i] / c2;
    params[i] -= rate * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace hsd
