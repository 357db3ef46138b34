#include "hsd/numerics.hpp"
#include "hsd/rng.hpp"
#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace hsd;
using hsd::testing::numeric_gradient;
using hsd::testing::relative_error;

namespace {

// Reference softmax in long double, written independently of the library.
std::vector<long double> softmax_oracle(const std::vector<double>& v) {
  long double mx = v[0];
  for (double x : v) mx = std::max<long double>(mx, x);
  std::vector<long double> e;
  long double s = 0;
  for (double x : v) {
    e.push_back(std::exp(static_cast<long double>(x) - mx));
    s += e.back();
  }
  for (auto& x : e) x /= s;
  return e;
}

}  // namespace

TEST(Softmax, SymmetricInputIsUniform) {
  const auto p = softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LargeMagnitudeDoesNotOverflow) {
  const auto p = softmax(std::vector<double>{1000.0, 0.0});
  EXPECT_NEAR(p[0], 1.0, 1e-12);
  EXPECT_GE(p[1], 0.0);
  EXPECT_LT(p[1], 1e-300);
  const auto q = softmax(std::vector<float>{1e4f, -1e4f, 0.f});
  for (float x : q) EXPECT_TRUE(std::isfinite(x));
  EXPECT_NEAR(std::accumulate(q.begin(), q.end(), 0.0), 1.0, 1e-6);
}

TEST(Softmax, EmptyInputThrows) {
  EXPECT_THROW(softmax(std::vector<double>{}), std::invalid_argument);
  EXPECT_THROW(log_softmax(std::span<const double>{}), std::invalid_argument);
}

TEST(Softmax, MatchesHighPrecisionOracle) {
  auto rng = RngStream::derive(11, {1});
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(8);
    for (auto& x : v) x = 20 * (2 * rng.uniform() - 1);
    const auto p = softmax(v);
    const auto o = softmax_oracle(v);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(p[i], static_cast<double>(o[i]), 1e-9);
  }
}

TEST(Softmax, ProbabilityVectorAndMonotone) {
  auto rng = RngStream::derive(12, {1});
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> v(1 + rng.uniform_int(16));
    for (auto& x : v) x = static_cast<float>(1e4 * (2 * rng.uniform() - 1));
    const auto p = softmax(v);
    double s = 0;
    for (float x : p) {
      EXPECT_GE(x, 0.f);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = 0; j < v.size(); ++j)
        if (v[i] > v[j]) EXPECT_GE(p[i], p[j]);
  }
  // strict monotonicity where the gap is resolvable
  const auto q = softmax(std::vector<double>{0.1, 0.2, 0.3});
  EXPECT_LT(q[0], q[1]);
  EXPECT_LT(q[1], q[2]);
}

TEST(Softmax, NonFiniteInputThrows) {
  EXPECT_THROW(softmax(std::vector<double>{1.0, NAN}), std::invalid_argument);
}

TEST(Softmax, RowsGiveMinusInfinityZeroWeight) {
  RowMat<double> m(1, 3);
  m << 1.0, -std::numeric_limits<double>::infinity(), 1.0;
  softmax_rows(m);
  EXPECT_EQ(m(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(m(0, 0), 0.5);
}

TEST(Softmax, JacobianMatchesFiniteDifferences) {
  auto rng = RngStream::derive(13, {1});
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(9);
    std::vector<double> x(n), w(n);
    for (auto& v : x) v = 3 * (2 * rng.uniform() - 1);
    for (auto& v : w) v = 2 * rng.uniform() - 1;
    auto loss = [&] {
      const auto p = softmax(x);
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += w[i] * p[i];
      return s;
    };
    // analytic: dL/dx_j = p_j (w_j - sum_i w_i p_i)
    const auto p = softmax(x);
    double wp = 0;
    for (std::size_t i = 0; i < n; ++i) wp += w[i] * p[i];
    std::vector<double> g(n);
    for (std::size_t j = 0; j < n; ++j) g[j] = p[j] * (w[j] - wp);
    EXPECT_LT(relative_error(g, numeric_gradient(x, loss)), 1e-4);
  }
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
  const std::vector<double> v{1, 1, 1, 1}, g{1, 1, 1, 1}, b{0, 0, 0, 0};
  for (double x : layer_norm<double>(v, g, b)) EXPECT_EQ(x, 0.0);
}

TEST(LayerNorm, NormalizedInputIsKept) {
  const std::vector<double> v{1, -1}, g{1, 1}, b{0, 0};
  const auto y = layer_norm<double>(v, g, b);
  EXPECT_NEAR(y[0], 1.0, 1e-5);
  EXPECT_NEAR(y[1], -1.0, 1e-5);
}

TEST(LayerNorm, LengthMismatchThrows) {
  const std::vector<double> v{1, 2, 3}, g{1, 1}, b{0, 0, 0};
  EXPECT_THROW(layer_norm<double>(v, g, b), std::invalid_argument);
  const std::vector<double> one{1}, g1{1}, b1{0};
  EXPECT_THROW(layer_norm<double>(one, g1, b1), std::invalid_argument);
}

TEST(LayerNorm, MatchesDirectFormulaAndMoments) {
  auto rng = RngStream::derive(14, {1});
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(30);
    std::vector<double> v(n), ones(n, 1.0), zeros(n, 0.0);
    for (auto& x : v) x = 5 * (2 * rng.uniform() - 1);
    const auto y = layer_norm<double>(v, ones, zeros);
    long double mean = 0, var = 0;
    for (double x : v) mean += x;
    mean /= n;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= n;
    double ym = 0, yv = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double expect = static_cast<double>((v[i] - mean) / std::sqrt(var + 1e-6L));
      EXPECT_NEAR(y[i], expect, 1e-6);
      ym += y[i];
    }
    ym /= n;
    for (double x : y) yv += (x - ym) * (x - ym);
    yv /= n;
    EXPECT_NEAR(ym, 0.0, 1e-6);
    EXPECT_NEAR(yv, 1.0, 1e-5);
  }
}

TEST(LayerNorm, RowsAgreeWithVectorForm) {
  auto rng = RngStream::derive(15, {1});
  const auto x = hsd::testing::random_matrix(3, 6, rng, 2.0);
  const auto g = hsd::testing::random_tensor({6}, rng);
  const auto b = hsd::testing::random_tensor({6}, rng);
  const auto y = layer_norm_rows<double>(x, g, b);
  for (Eigen::Index r = 0; r < 3; ++r) {
    std::vector<double> row(x.row(r).data(), x.row(r).data() + 6);
    const auto v = layer_norm<double>(row, g.data, b.data);
    for (int c = 0; c < 6; ++c) EXPECT_NEAR(y(r, c), v[static_cast<std::size_t>(c)], 1e-12);
  }
}

TEST(LayerNorm, BackwardMatchesFiniteDifferences) {
  auto rng = RngStream::derive(16, {1});
  for (int trial = 0; trial < 25; ++trial) {
    const Eigen::Index rows = 1 + static_cast<Eigen::Index>(rng.uniform_int(3));
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.uniform_int(7));
    auto x = hsd::testing::random_matrix(rows, n, rng, 2.0);
    auto gain = hsd::testing::random_tensor({static_cast<std::size_t>(n)}, rng);
    auto bias = hsd::testing::random_tensor({static_cast<std::size_t>(n)}, rng);
    const auto w = hsd::testing::random_matrix(rows, n, rng);
    auto loss = [&] { return (layer_norm_rows<double>(x, gain, bias).array() * w.array()).sum(); };
    LayerNormCache<double> cache;
    layer_norm_rows<double>(x, gain, bias, &cache);
    Tensor<double> dgain({static_cast<std::size_t>(n)}), dbias({static_cast<std::size_t>(n)});
    const RowMat<double> dx = layer_norm_rows_backward<double>(w, cache, gain, dgain, dbias);

    std::vector<double> flat(x.data(), x.data() + x.size());
    auto loss_flat = [&] {
      x = Eigen::Map<RowMat<double>>(flat.data(), rows, n);
      return loss();
    };
    const auto ndx = numeric_gradient(flat, loss_flat);
    x = Eigen::Map<RowMat<double>>(flat.data(), rows, n);
    EXPECT_LT(relative_error(std::vector<double>(dx.data(), dx.data() + dx.size()), ndx), 1e-4);
    EXPECT_LT(relative_error(dgain.data, numeric_gradient(gain.data, loss)), 1e-4);
    EXPECT_LT(relative_error(dbias.data, numeric_gradient(bias.data, loss)), 1e-4);
  }
}

TEST(LabelSmoothedLoss, NoSmoothingIsCrossEntropy) {
  const std::vector<double> logits{0.3, -1.2, 2.0, 0.5};
  const auto lg = label_smoothed_loss<double>(logits, 2, 0.0);
  const auto lp = log_softmax(std::span<const double>(logits));
  EXPECT_DOUBLE_EQ(lg.loss, -lp[2]);
}

TEST(LabelSmoothedLoss, UniformLogitsGiveLogV) {
  for (double s : {0.0, 0.1, 0.5}) {
    const std::vector<double> logits(7, 0.25);
    EXPECT_NEAR(label_smoothed_loss<double>(logits, 3, s).loss, std::log(7.0), 1e-12);
  }
}

TEST(LabelSmoothedLoss, RejectsBadArguments) {
  const std::vector<double> logits{0.0, 1.0};
  EXPECT_THROW(label_smoothed_loss<double>(logits, 2, 0.1), std::invalid_argument);
  EXPECT_THROW(label_smoothed_loss<double>(logits, 0, 1.0), std::invalid_argument);
  EXPECT_THROW(label_smoothed_loss<double>(logits, 0, -0.1), std::invalid_argument);
}

TEST(LabelSmoothedLoss, GradientMatchesFiniteDifferences) {
  auto rng = RngStream::derive(17, {1});
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t v = 2 + rng.uniform_int(12);
    std::vector<double> logits(v);
    for (auto& x : logits) x = 4 * (2 * rng.uniform() - 1);
    const std::size_t target = rng.uniform_int(v);
    const auto lg = label_smoothed_loss<double>(logits, target, 0.1);
    auto f = [&] { return label_smoothed_loss<double>(logits, target, 0.1).loss; };
    EXPECT_LT(relative_error(lg.grad, numeric_gradient(logits, f)), 1e-4);
    // gradient = softmax - smoothed one-hot
    const auto p = softmax(logits);
    for (std::size_t i = 0; i < v; ++i)
      EXPECT_NEAR(lg.grad[i], p[i] - (i == target ? 0.9 : 0.1 / static_cast<double>(v - 1)), 1e-12);
  }
}

TEST(Adam, ZeroGradientsLeaveParamsUnchanged) {
  OptimizerConfig cfg;
  std::vector<double> p{0.5, -1.0, 2.0};
  const auto before = p;
  std::vector<double> g(3, 0.0);
  AdamState<double> st;
  adam_step<double>(p, g, st, 1, 1e-3, cfg);
  EXPECT_EQ(p, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  OptimizerConfig cfg;
  std::vector<double> p{0.0};
  std::vector<double> g{1.0};
  AdamState<double> st;
  adam_step<double>(p, g, st, 1, 0.001, cfg);
  EXPECT_LT(std::abs(p[0] + 0.001), 1e-6);
}

TEST(Adam, MatchesHandEvaluationOverSeveralSteps) {
  OptimizerConfig cfg;
  std::vector<double> p{1.0};
  AdamState<double> st;
  double m = 0, v = 0, x = 1.0;
  const double grads[] = {0.5, -0.25, 1.5, 0.0};
  for (int s = 1; s <= 4; ++s) {
    std::vector<double> g{grads[s - 1]};
    adam_step<double>(p, g, st, s, 0.01, cfg);
    m = 0.9 * m + 0.1 * grads[s - 1];
    v = 0.98 * v + 0.02 * grads[s - 1] * grads[s - 1];
    const double mh = m / (1 - std::pow(0.9, s));
    const double vh = v / (1 - std::pow(0.98, s));
    x -= 0.01 * mh / (std::sqrt(vh) + 1e-9);
    EXPECT_NEAR(p[0], x, 1e-12);
  }
}

TEST(Adam, ShapeMismatchThrows) {
  OptimizerConfig cfg;
  std::vector<double> p{1.0, 2.0};
  std::vector<double> g{1.0};
  AdamState<double> st;
  EXPECT_THROW(adam_step<double>(p, g, st, 1, 0.1, cfg), std::invalid_argument);
  std::vector<double> g2{1.0, 1.0};
  EXPECT_THROW(adam_step<double>(p, g2, st, 0, 0.1, cfg), std::invalid_argument);
  st.m.assign(3, 0.0);
  st.v.assign(3, 0.0);
  EXPECT_THROW(adam_step<double>(p, g2, st, 1, 0.1, cfg), std::invalid_argument);
}

TEST(Adam, HundredStepsAreBitIdentical) {
  OptimizerConfig cfg;
  auto run = [&] {
    std::vector<float> p(17);
    auto rng = RngStream::derive(3, {9});
    for (auto& x : p) x = static_cast<float>(rng.uniform());
    AdamState<float> st;
    for (int s = 1; s <= 100; ++s) {
      std::vector<float> g(p.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::sin(p[i] * static_cast<float>(s));
      adam_step<float>(p, g, st, s, lr_at(s, cfg), cfg);
    }
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(Schedule, ContinuousAtWarmup) {
  OptimizerConfig cfg;
  const double s = cfg.warmup_steps;
  EXPECT_DOUBLE_EQ(std::pow(s, -0.5), s * std::pow(s, -1.5));
  const double at = lr_at(cfg.warmup_steps, cfg);
  EXPECT_NEAR(lr_at(cfg.warmup_steps - 1, cfg), at, at * 1e-3);
  EXPECT_NEAR(lr_at(cfg.warmup_steps + 1, cfg), at, at * 1e-3);
}

TEST(Schedule, PaperSettingPeak) {
  OptimizerConfig cfg;
  EXPECT_EQ(cfg.warmup_steps, 8000);
  EXPECT_EQ(cfg.d_model, 512);
  EXPECT_NEAR(lr_at(8000, cfg), 4.941e-4, 1e-7);
}

TEST(Schedule, RisesThenDecays) {
  OptimizerConfig cfg;
  cfg.warmup_steps = 100;
  EXPECT_LT(lr_at(10, cfg), lr_at(50, cfg));
  EXPECT_GT(lr_at(200, cfg), lr_at(400, cfg));
  EXPECT_THROW(lr_at(0, cfg), std::invalid_argument);
}

TEST(OptimizerConfig, Validation) {
  OptimizerConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.beta1, 0.9);
  EXPECT_EQ(cfg.beta2, 0.98);
  EXPECT_EQ(cfg.epsilon, 1e-9);
  EXPECT_EQ(cfg.label_smoothing, 0.1);
  for (double b : {0.0, 1.0}) {
    auto c = cfg;
    c.beta1 = b;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = cfg;
    c.beta2 = b;
    EXPECT_THROW(c.validate(), std::invalid_argument);
  }
  auto c = cfg;
  c.epsilon = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = cfg;
  c.label_smoothing = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Tensor, ShapeAndFiniteness) {
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_TRUE(t.all_finite());
  t.data[4] = NAN;
  EXPECT_FALSE(t.all_finite());
  EXPECT_EQ(t.mat().rows(), 2);
  EXPECT_EQ(t.mat().cols(), 3);
}

TEST(Rng, StreamsAreReproducibleAndKeyed) {
  auto a = RngStream::derive(5, {1, 2});
  auto b = RngStream::derive(5, {1, 2});
  auto c = RngStream::derive(5, {2, 1});
  bool differs = false;
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs = differs || x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformIntIsUnbiased) {
  auto rng = RngStream::derive(6, {});
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) ++counts[rng.uniform_int(7)];
  const double expect = n / 7.0;
  const double se = std::sqrt(n * (1.0 / 7) * (6.0 / 7));
  for (int c : counts) EXPECT_LT(std::abs(c - expect), 4 * se);
  EXPECT_THROW(rng.uniform_int(0), std::invalid_argument);
}

TEST(Rng, UniformInUnitInterval) {
  auto rng = RngStream::derive(7, {});
  double sum = 0;
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 10000, 0.5, 0.015);
}
