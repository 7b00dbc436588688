#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "afdet/losses.hpp"
#include "afdet/nn/blocks.hpp"
#include "afdet/nn/checkpoint.hpp"
#include "afdet/nn/detector.hpp"
#include "afdet/nn/flops.hpp"
#include "afdet/nn/grad_check.hpp"
#include "afdet/nn/layers.hpp"
#include "afdet/nn/optim.hpp"

using namespace afdet;
using namespace afdet::nn;

namespace {

DTensor random_tensor(Rng& rng, std::vector<std::int64_t> shape, double lo,
                      double hi) {
  DTensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Fixed random projection turning a tensor-valued op into a scalar loss.
double dot(const DTensor& a, const DTensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(),
                     sizeof(float) * static_cast<std::size_t>(a.numel())) == 0;
}

}  // namespace

TEST(Conv2d, IdentityKernelPreservesInput) {
  Rng rng(1);
  const auto x = random_tensor(rng, {1, 2, 4, 4}, -1.0, 1.0);
  DTensor w({2, 2, 1, 1});
  w(0, 0, 0, 0) = 1.0;
  w(1, 1, 0, 0) = 1.0;
  DTensor b({2});
  const auto y = conv2d_forward(x, w, b, 1, 0, 1);
  ASSERT_TRUE(y.same_shape(x));
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Conv2d, OnesKernelOnConstantInput) {
  DTensor x({1, 1, 5, 5}, 1.0);
  DTensor w({1, 1, 3, 3}, 1.0);
  const auto y = conv2d_forward(x, w, DTensor{}, 1, 1, 1);
  EXPECT_DOUBLE_EQ(y(0, 0, 2, 2), 9.0);  // interior
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 0), 4.0);  // corner
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 2), 6.0);  // edge
}

TEST(Conv2d, OutputShapeFollowsConvArithmetic) {
  Rng rng(2);
  for (const auto& [h, k, s, p] :
       std::vector<std::array<std::int64_t, 4>>{{8, 3, 1, 1},
                                                {8, 3, 2, 1},
                                                {9, 5, 2, 2},
                                                {16, 1, 1, 0},
                                                {7, 7, 1, 3}}) {
    const auto x = random_tensor(rng, {1, 1, h, h}, 0.0, 1.0);
    const auto w = random_tensor(rng, {1, 1, k, k}, -1.0, 1.0);
    const auto y = conv2d_forward(x, w, DTensor{}, s, p, 1);
    EXPECT_EQ(y.dim(2), (h + 2 * p - k) / s + 1);
    EXPECT_EQ(y.dim(3), (h + 2 * p - k) / s + 1);
  }
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  Rng rng(3);
  const auto x = random_tensor(rng, {1, 2, 6, 6}, -1.0, 1.0);
  const auto w = random_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5);
  const auto b = random_tensor(rng, {3}, -0.2, 0.2);
  const auto y0 = conv2d_forward(x, w, b, 1, 1, 1);
  const auto r = random_tensor(rng, y0.shape(), -1.0, 1.0);

  const auto grads = conv2d_backward(r, x, w, 1, 1, 1);
  const auto fx = [&](const DTensor& v) {
    return dot(conv2d_forward(v, w, b, 1, 1, 1), r);
  };
  EXPECT_LT(grad_check(fx, x, grads.x), 1e-5);
  const auto fw = [&](const DTensor& v) {
    return dot(conv2d_forward(x, v, b, 1, 1, 1), r);
  };
  EXPECT_LT(grad_check(fw, w, grads.weight), 1e-5);
  const auto fb = [&](const DTensor& v) {
    return dot(conv2d_forward(x, w, v, 1, 1, 1), r);
  };
  EXPECT_LT(grad_check(fb, b, grads.bias), 1e-5);
}

TEST(Conv2d, StridedAndGroupedBackwardMatchFiniteDifferences) {
  Rng rng(4);
  const auto x = random_tensor(rng, {2, 4, 6, 6}, -1.0, 1.0);
  const auto w = random_tensor(rng, {4, 1, 3, 3}, -0.5, 0.5);  // depthwise
  const auto y0 = conv2d_forward(x, w, DTensor{}, 2, 1, 4);
  Rng rr(5);
  const auto r = random_tensor(rr, y0.shape(), -1.0, 1.0);
  const auto grads = conv2d_backward(r, x, w, 2, 1, 4);
  const auto fx = [&](const DTensor& v) {
    return dot(conv2d_forward(v, w, DTensor{}, 2, 1, 4), r);
  };
  EXPECT_LT(grad_check(fx, x, grads.x), 1e-5);
  const auto fw = [&](const DTensor& v) {
    return dot(conv2d_forward(x, v, DTensor{}, 2, 1, 4), r);
  };
  EXPECT_LT(grad_check(fw, w, grads.weight), 1e-5);
}

TEST(Conv2d, ZeroUpstreamGradientGivesZeroGradients) {
  Rng rng(6);
  const auto x = random_tensor(rng, {1, 2, 5, 5}, -1.0, 1.0);
  const auto w = random_tensor(rng, {2, 2, 3, 3}, -1.0, 1.0);
  DTensor zero({1, 2, 5, 5});
  const auto g = conv2d_backward(zero, x, w, 1, 1, 1);
  for (std::int64_t i = 0; i < g.x.numel(); ++i) EXPECT_EQ(g.x[i], 0.0);
  for (std::int64_t i = 0; i < g.weight.numel(); ++i)
    EXPECT_EQ(g.weight[i], 0.0);
  for (std::int64_t i = 0; i < g.bias.numel(); ++i) EXPECT_EQ(g.bias[i], 0.0);
}

TEST(Conv2d, BackwardIsLinearInUpstreamGradient) {
  Rng rng(7);
  const auto x = random_tensor(rng, {1, 2, 5, 5}, -1.0, 1.0);
  const auto w = random_tensor(rng, {2, 2, 3, 3}, -1.0, 1.0);
  const auto g1 = random_tensor(rng, {1, 2, 5, 5}, -1.0, 1.0);
  const auto g2 = random_tensor(rng, {1, 2, 5, 5}, -1.0, 1.0);
  DTensor gsum(g1.shape());
  for (std::int64_t i = 0; i < gsum.numel(); ++i) gsum[i] = g1[i] + g2[i];

  const auto a = conv2d_backward(gsum, x, w, 1, 1, 1);
  const auto b1 = conv2d_backward(g1, x, w, 1, 1, 1);
  const auto b2 = conv2d_backward(g2, x, w, 1, 1, 1);
  for (std::int64_t i = 0; i < a.x.numel(); ++i)
    EXPECT_NEAR(a.x[i], b1.x[i] + b2.x[i], 1e-12);
  for (std::int64_t i = 0; i < a.weight.numel(); ++i)
    EXPECT_NEAR(a.weight[i], b1.weight[i] + b2.weight[i], 1e-12);
}

TEST(Conv2d, ErrorCases) {
  DTensor x({1, 4, 6, 6}, 1.0);
  DTensor w({4, 2, 3, 3}, 1.0);
  EXPECT_THROW(conv2d_forward(x, w, DTensor{}, 1, 1, 1), InvalidArgument);
  DTensor w_ok({4, 4, 3, 3}, 1.0);
  DTensor bad_bias({3}, 0.0);
  EXPECT_THROW(conv2d_forward(x, w_ok, bad_bias, 1, 1, 1), InvalidArgument);
  EXPECT_THROW(conv2d_forward(x, w_ok, DTensor{}, 1, 1, 3), InvalidArgument);
  DTensor huge_kernel({1, 4, 9, 9}, 1.0);
  EXPECT_THROW(conv2d_forward(x, huge_kernel, DTensor{}, 1, 0, 1),
               InvalidArgument);
}

TEST(BatchNorm, EvalModeWithUnitStatsIsNearIdentity) {
  Rng rng(8);
  const auto x = random_tensor(rng, {2, 3, 4, 4}, -2.0, 2.0);
  DTensor gamma({3}, 1.0), beta({3}), mean({3}), var({3}, 1.0);
  const auto y =
      batchnorm_forward(x, gamma, beta, mean, var, false,
                        static_cast<BatchNormCacheT<double>*>(nullptr));
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-4);
}

TEST(BatchNorm, TrainingModeNormalizesPerChannel) {
  Rng rng(9);
  const auto x = random_tensor(rng, {4, 3, 5, 5}, -3.0, 5.0);
  DTensor gamma({3}, 1.0), beta({3}), mean({3}), var({3}, 1.0);
  BatchNormCacheT<double> cache;
  const auto y = batchnorm_forward(x, gamma, beta, mean, var, true, &cache);
  for (std::int64_t c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t yy = 0; yy < 5; ++yy)
        for (std::int64_t xx = 0; xx < 5; ++xx) m += y(n, c, yy, xx);
    m /= 100.0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t yy = 0; yy < 5; ++yy)
        for (std::int64_t xx = 0; xx < 5; ++xx) {
          const double d = y(n, c, yy, xx) - m;
          v += d * d;
        }
    v /= 100.0;
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-3);  // eps shifts variance slightly below 1
  }
}

TEST(BatchNorm, RunningStatsBlendWithMomentum) {
  Rng rng(10);
  const auto x = random_tensor(rng, {2, 1, 4, 4}, 0.0, 4.0);
  DTensor gamma({1}, 1.0), beta({1});
  DTensor mean({1}), var({1}, 1.0);
  mean[0] = 2.0;
  var[0] = 3.0;
  double batch_mean = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) batch_mean += x[i];
  batch_mean /= static_cast<double>(x.numel());
  double batch_var = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i)
    batch_var += (x[i] - batch_mean) * (x[i] - batch_mean);
  batch_var /= static_cast<double>(x.numel());

  BatchNormCacheT<double> cache;
  batchnorm_forward(x, gamma, beta, mean, var, true, &cache);
  EXPECT_NEAR(mean[0], 0.9 * 2.0 + 0.1 * batch_mean, 1e-12);
  EXPECT_NEAR(var[0], 0.9 * 3.0 + 0.1 * batch_var, 1e-12);
}

TEST(BatchNorm, BatchSizeOneOnlyAllowedInEval) {
  DTensor x({1, 2, 3, 3}, 0.5);
  DTensor gamma({2}, 1.0), beta({2}), mean({2}), var({2}, 1.0);
  BatchNormCacheT<double> cache;
  EXPECT_THROW(batchnorm_forward(x, gamma, beta, mean, var, true, &cache),
               InvalidArgument);
  EXPECT_NO_THROW(batchnorm_forward(x, gamma, beta, mean, var, false, &cache));
}

TEST(BatchNorm, TrainingBackwardMatchesFiniteDifferences) {
  Rng rng(11);
  const auto x = random_tensor(rng, {2, 2, 4, 4}, -1.0, 1.0);
  const auto gamma = random_tensor(rng, {2}, 0.5, 1.5);
  const auto beta = random_tensor(rng, {2}, -0.5, 0.5);
  const auto r = random_tensor(rng, x.shape(), -1.0, 1.0);

  const auto run = [&](const DTensor& xx, const DTensor& g, const DTensor& b,
                       BatchNormCacheT<double>* cache) {
    DTensor m({2}), v({2}, 1.0);  // fresh running stats; output ignores them
    return batchnorm_forward(xx, g, b, m, v, true, cache);
  };
  BatchNormCacheT<double> cache;
  const auto y = run(x, gamma, beta, &cache);
  const auto grads = batchnorm_backward(r, x, gamma, cache, true);

  const auto fx = [&](const DTensor& v) { return dot(run(v, gamma, beta, nullptr), r); };
  EXPECT_LT(grad_check(fx, x, grads.x), 1e-5);
  const auto fg = [&](const DTensor& v) { return dot(run(x, v, beta, nullptr), r); };
  EXPECT_LT(grad_check(fg, gamma, grads.gamma), 1e-5);
  const auto fb = [&](const DTensor& v) { return dot(run(x, gamma, v, nullptr), r); };
  EXPECT_LT(grad_check(fb, beta, grads.beta), 1e-5);
  (void)y;
}

TEST(BatchNorm, EvalBackwardMatchesFiniteDifferences) {
  Rng rng(12);
  const auto x = random_tensor(rng, {1, 2, 4, 4}, -1.0, 1.0);
  const auto gamma = random_tensor(rng, {2}, 0.5, 1.5);
  DTensor beta({2}), mean({2}), var({2});
  mean[0] = 0.3;
  mean[1] = -0.2;
  var[0] = 1.7;
  var[1] = 0.6;
  const auto r = random_tensor(rng, x.shape(), -1.0, 1.0);

  BatchNormCacheT<double> cache;
  batchnorm_forward(x, gamma, beta, mean, var, false, &cache);
  const auto grads = batchnorm_backward(r, x, gamma, cache, false);
  const auto fx = [&](const DTensor& v) {
    DTensor m = mean, vv = var;
    return dot(batchnorm_forward(v, gamma, beta, m, vv, false,
                                 static_cast<BatchNormCacheT<double>*>(nullptr)),
               r);
  };
  EXPECT_LT(grad_check(fx, x, grads.x), 1e-5);
}

TEST(Activations, ReluAndSigmoidBackwardMatchFiniteDifferences) {
  Rng rng(13);
  DTensor x = random_tensor(rng, {40}, -2.0, 2.0);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    if (std::abs(x[i]) < 1e-3) x[i] = 0.5;  // keep clear of the ReLU kink
  const auto r = random_tensor(rng, x.shape(), -1.0, 1.0);

  const auto relu_grad = relu_backward(r, x);
  const auto frelu = [&](const DTensor& v) { return dot(relu_forward(v), r); };
  EXPECT_LT(grad_check(frelu, x, relu_grad), 1e-5);

  const auto y = sigmoid_forward(x);
  const auto sig_grad = sigmoid_backward(r, y);
  const auto fsig = [&](const DTensor& v) { return dot(sigmoid_forward(v), r); };
  EXPECT_LT(grad_check(fsig, x, sig_grad), 1e-5);
}

TEST(AvgPool, BlockArithmeticAndErrors) {
  DTensor x({1, 1, 2, 2});
  x(0, 0, 0, 0) = 1.0;
  x(0, 0, 0, 1) = 2.0;
  x(0, 0, 1, 0) = 3.0;
  x(0, 0, 1, 1) = 4.0;
  const auto y = avgpool2x2_forward(x);
  EXPECT_DOUBLE_EQ(y(0, 0, 0, 0), 2.5);

  DTensor c({2, 3, 4, 4}, 0.7);
  const auto yc = avgpool2x2_forward(c);
  for (std::int64_t i = 0; i < yc.numel(); ++i) EXPECT_DOUBLE_EQ(yc[i], 0.7);

  DTensor odd({1, 1, 3, 4}, 1.0);
  EXPECT_THROW(avgpool2x2_forward(odd), InvalidArgument);
}

TEST(AvgPool, BackwardMatchesFiniteDifferences) {
  Rng rng(14);
  const auto x = random_tensor(rng, {1, 2, 4, 4}, -1.0, 1.0);
  const auto r = random_tensor(rng, {1, 2, 2, 2}, -1.0, 1.0);
  const auto g = avgpool2x2_backward(r, x.shape());
  const auto f = [&](const DTensor& v) { return dot(avgpool2x2_forward(v), r); };
  EXPECT_LT(grad_check(f, x, g), 1e-8);
}

TEST(Upsample, Factor2ReplicatesBlocks) {
  DTensor x({1, 1, 2, 2});
  x(0, 0, 0, 0) = 1.0;
  x(0, 0, 0, 1) = 2.0;
  x(0, 0, 1, 0) = 3.0;
  x(0, 0, 1, 1) = 4.0;
  const auto y = upsample_nearest_forward(x, 2);
  ASSERT_EQ(y.dim(2), 4);
  for (std::int64_t yy = 0; yy < 4; ++yy)
    for (std::int64_t xx = 0; xx < 4; ++xx)
      EXPECT_DOUBLE_EQ(y(0, 0, yy, xx), x(0, 0, yy / 2, xx / 2));
  EXPECT_THROW(upsample_nearest_forward(x, 1), InvalidArgument);
}

TEST(Upsample, BackwardSumsReplicationBlocks) {
  Rng rng(15);
  const auto x = random_tensor(rng, {1, 2, 3, 3}, -1.0, 1.0);
  const auto r = random_tensor(rng, {1, 2, 6, 6}, -1.0, 1.0);
  const auto g = upsample_nearest_backward(r, 2);
  const auto f = [&](const DTensor& v) {
    return dot(upsample_nearest_forward(v, 2), r);
  };
  EXPECT_LT(grad_check(f, x, g), 1e-8);
}

TEST(Shortcut, AddZeroIsIdentityAndMismatchThrows) {
  Rng rng(16);
  const auto x = random_tensor(rng, {1, 2, 3, 3}, -1.0, 1.0);
  DTensor zero(x.shape());
  const auto y = shortcut_add(x, zero);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
  DTensor other({1, 2, 3, 4});
  EXPECT_THROW(shortcut_add(x, other), InvalidArgument);
}

TEST(LiteBlock, KernelChainAndDepthwiseGrouping) {
  EXPECT_EQ(LiteBlockT<double>::kKernelChain,
            (std::array<std::int64_t, 4>{5, 1, 1, 5}));
  Rng rng(17);
  LiteBlockT<double> block;
  block.init("blk", 6, 10, rng);
  EXPECT_EQ(block.conv1.ksize, 5);
  EXPECT_EQ(block.conv1.groups, 6);  // depthwise on the input channels
  EXPECT_EQ(block.conv2.ksize, 1);
  EXPECT_EQ(block.conv3.ksize, 1);
  EXPECT_EQ(block.conv4.ksize, 5);
  EXPECT_EQ(block.conv4.groups, 10);  // depthwise on the output channels
}

TEST(LiteBlock, IdentityConstructionReproducesInput) {
  Rng rng(18);
  LiteBlockT<double> block;
  block.init("blk", 4, 4, rng);
  // Delta depthwise kernels, identity pointwise kernels, unit eval BN.
  block.conv1.weight.value.fill(0.0);
  block.conv4.weight.value.fill(0.0);
  for (std::int64_t c = 0; c < 4; ++c) {
    block.conv1.weight.value(c, 0, 2, 2) = 1.0;
    block.conv4.weight.value(c, 0, 2, 2) = 1.0;
  }
  block.conv2.weight.value.fill(0.0);
  block.conv3.weight.value.fill(0.0);
  for (std::int64_t c = 0; c < 4; ++c) {
    block.conv2.weight.value(c, c, 0, 0) = 1.0;
    block.conv3.weight.value(c, c, 0, 0) = 1.0;
  }

  const auto x = random_tensor(rng, {1, 4, 6, 6}, 0.0, 1.0);  // non-negative
  typename LiteBlockT<double>::Cache cc;
  const auto y = block.forward(x, false, cc);
  ASSERT_TRUE(y.same_shape(x));
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-4);
}

TEST(LiteBlock, PreservesSpatialShape) {
  Rng rng(19);
  LiteBlockT<double> block;
  block.init("blk", 6, 10, rng);
  const auto x = random_tensor(rng, {2, 6, 8, 8}, -1.0, 1.0);
  typename LiteBlockT<double>::Cache cc;
  const auto y = block.forward(x, true, cc);
  EXPECT_EQ(y.dim(0), 2);
  EXPECT_EQ(y.dim(1), 10);
  EXPECT_EQ(y.dim(2), 8);
  EXPECT_EQ(y.dim(3), 8);

  DTensor bad({2, 7, 8, 8}, 0.0);
  EXPECT_THROW(block.forward(bad, true, cc), InvalidArgument);
}

TEST(LiteBlock, BackwardMatchesFiniteDifferences) {
  Rng rng(20);
  LiteBlockT<double> block;
  block.init("blk", 3, 3, rng);
  const auto x = random_tensor(rng, {2, 3, 4, 4}, -1.0, 1.0);
  typename LiteBlockT<double>::Cache cc;
  const auto y = block.forward(x, true, cc);
  Rng rr(21);
  const auto r = random_tensor(rr, y.shape(), -1.0, 1.0);
  const auto gx = block.backward(r, cc, true);

  const auto f = [&](const DTensor& v) {
    auto blk = block;  // fresh caches, same weights
    typename LiteBlockT<double>::Cache c2;
    return dot(blk.forward(v, true, c2), r);
  };
  EXPECT_LT(grad_check(f, x, gx), 1e-5);
}

TEST(LiteBlock, FlopsRatioAgainstPlainConvMatchesAnalyticValue) {
  const double ratio = lite_plain_conv_ratio(48, 16, 16);
  const double analytic =
      (2.0 * 25.0 * 48.0 + 2.0 * 48.0 * 48.0) / (25.0 * 48.0 * 48.0);
  EXPECT_NEAR(ratio, analytic, 1e-12);
  EXPECT_NEAR(ratio, 0.121666666666667, 1e-12);
}

TEST(VdBlock, ConstantInputKeepsConstantOnShortcutPool) {
  Rng rng(22);
  VdBlockT<double> block;
  block.init("vd", 2, 3, rng);
  DTensor x({2, 2, 6, 6}, 0.37);
  typename VdBlockT<double>::Cache cc;
  const auto y = block.forward(x, true, cc);
  EXPECT_EQ(y.dim(2), 3);
  EXPECT_EQ(y.dim(3), 3);
  for (std::int64_t i = 0; i < cc.pooled.numel(); ++i)
    EXPECT_DOUBLE_EQ(cc.pooled[i], 0.37);
}

TEST(VdBlock, OddExtentThrows) {
  Rng rng(23);
  VdBlockT<double> block;
  block.init("vd", 2, 2, rng);
  DTensor odd({2, 2, 5, 6}, 1.0);
  typename VdBlockT<double>::Cache cc;
  EXPECT_THROW(block.forward(odd, true, cc), InvalidArgument);
}

TEST(VdBlock, BackwardMatchesFiniteDifferences) {
  Rng rng(24);
  VdBlockT<double> block;
  block.init("vd", 2, 3, rng);
  const auto x = random_tensor(rng, {2, 2, 4, 4}, -1.0, 1.0);
  typename VdBlockT<double>::Cache cc;
  const auto y = block.forward(x, true, cc);
  Rng rr(25);
  const auto r = random_tensor(rr, y.shape(), -1.0, 1.0);
  const auto gx = block.backward(r, cc, true);

  const auto f = [&](const DTensor& v) {
    auto blk = block;
    typename VdBlockT<double>::Cache c2;
    return dot(blk.forward(v, true, c2), r);
  };
  EXPECT_LT(grad_check(f, x, gx), 1e-5);
}

TEST(Sgd, PlainStepWithoutMomentumOrDecay) {
  DTensor p({3}), g({3}), v({3});
  p[0] = 1.0;
  p[1] = -2.0;
  p[2] = 0.5;
  g[0] = 0.1;
  g[1] = 0.2;
  g[2] = -0.3;
  sgd_step(p, g, v, 0.5, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.5 * 0.1);
  EXPECT_DOUBLE_EQ(p[1], -2.0 - 0.5 * 0.2);
  EXPECT_DOUBLE_EQ(p[2], 0.5 + 0.5 * 0.3);
}

TEST(Sgd, ZeroGradZeroVelocityLeavesParamsFixed) {
  DTensor p({2}, 1.5), g({2}), v({2});
  sgd_step(p, g, v, 0.1, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(p[0], 1.5);
  EXPECT_DOUBLE_EQ(p[1], 1.5);
}

TEST(Sgd, TwoMomentumStepsUnrollCorrectly) {
  DTensor p({1}), g({1}), v({1});
  p[0] = 1.0;
  g[0] = 0.2;
  const double lr = 0.1;
  sgd_step(p, g, v, lr, 0.9, 0.0);
  sgd_step(p, g, v, lr, 0.9, 0.0);
  // v1 = g, v2 = 1.9 g; total update lr*g*(1 + 1.9).
  EXPECT_NEAR(p[0], 1.0 - lr * 0.2 * 2.9, 1e-15);
}

TEST(Sgd, WeightDecayPullsTowardZero) {
  DTensor p({1}), g({1}), v({1});
  p[0] = 2.0;
  sgd_step(p, g, v, 0.1, 0.0, 0.5);
  EXPECT_NEAR(p[0], 2.0 - 0.1 * (0.5 * 2.0), 1e-15);
}

TEST(LrSchedule, PaperDefaults) {
  const auto ms = default_lr_milestones();
  EXPECT_NEAR(lr_schedule(0, kDefaultBaseLr, ms, kDefaultLrGamma), 0.015, 1e-15);
  EXPECT_NEAR(lr_schedule(11249, kDefaultBaseLr, ms, kDefaultLrGamma), 0.015,
              1e-15);
  EXPECT_NEAR(lr_schedule(11250, kDefaultBaseLr, ms, kDefaultLrGamma), 0.0015,
              1e-15);
  EXPECT_NEAR(lr_schedule(12000, kDefaultBaseLr, ms, kDefaultLrGamma), 0.0015,
              1e-15);
  EXPECT_NEAR(lr_schedule(14000, kDefaultBaseLr, ms, kDefaultLrGamma), 0.00015,
              1e-15);
}

TEST(LrSchedule, RejectsUnsortedMilestones) {
  EXPECT_THROW(lr_schedule(0, 0.01, {100, 100}, 0.1), InvalidArgument);
  EXPECT_THROW(lr_schedule(0, 0.01, {200, 100}, 0.1), InvalidArgument);
  EXPECT_THROW(lr_schedule(0, 0.0, {100}, 0.1), InvalidArgument);
}

namespace {

struct TinyParams {
  ParamT<double> a, b;
  std::vector<ParamT<double>*> all() { return {&a, &b}; }
};

TinyParams make_tiny_params(double va, double vb) {
  TinyParams t;
  t.a.init("a", {2});
  t.b.init("b", {3});
  t.a.value.fill(va);
  t.b.value.fill(vb);
  return t;
}

}  // namespace

TEST(Ema, ZeroDecayCopiesParams) {
  auto t = make_tiny_params(0.7, -1.2);
  EmaStateT<double> ema;
  ema.decay = 0.0;
  ema.init_from(t.all());
  t.a.value.fill(2.0);
  t.b.value.fill(3.0);
  auto params = t.all();
  ema_update(ema, params);
  EXPECT_DOUBLE_EQ(ema.shadow[0][0], 2.0);
  EXPECT_DOUBLE_EQ(ema.shadow[1][0], 3.0);
}

TEST(Ema, UnitDecayFreezesShadow) {
  auto t = make_tiny_params(0.7, -1.2);
  EmaStateT<double> ema;
  ema.decay = 1.0;
  ema.init_from(t.all());
  t.a.value.fill(9.0);
  auto params = t.all();
  ema_update(ema, params);
  EXPECT_DOUBLE_EQ(ema.shadow[0][0], 0.7);
}

TEST(Ema, GeometricErrorDecayTowardConstantParams) {
  auto t = make_tiny_params(1.0, 1.0);  // constant target W* = 1
  EmaStateT<double> ema;
  ema.decay = 0.9;
  ema.init_from(t.all());
  ema.shadow[0].fill(0.0);  // start the shadow away from W*
  ema.shadow[1].fill(0.0);
  auto params = t.all();
  double prev_err = 1.0;
  for (int k = 0; k < 10; ++k) {
    ema_update(ema, params);
    const double err = std::abs(ema.shadow[0][0] - 1.0);
    EXPECT_NEAR(err, prev_err * 0.9, 1e-12);
    prev_err = err;
  }
}

TEST(Ema, UpdateNeverTouchesParamsAndSwapRestores) {
  auto t = make_tiny_params(0.25, -0.5);
  EmaStateT<double> ema;
  ema.decay = 0.5;
  ema.init_from(t.all());
  auto params = t.all();
  t.a.value.fill(4.0);
  ema_update(ema, params);
  EXPECT_DOUBLE_EQ(t.a.value[0], 4.0);  // params untouched by EMA

  const double before_a = t.a.value[0];
  ema_swap(ema, params);
  EXPECT_NE(t.a.value[0], before_a);
  ema_swap(ema, params);
  EXPECT_DOUBLE_EQ(t.a.value[0], before_a);
}

TEST(Ema, MismatchThrows) {
  auto t = make_tiny_params(0.0, 0.0);
  EmaStateT<double> ema;
  ema.decay = 0.5;
  ema.init_from(t.all());
  ema.shadow.pop_back();
  auto params = t.all();
  EXPECT_THROW(ema_update(ema, params), InvalidArgument);
}

TEST(Flops, SingleOneByOneConv) {
  EXPECT_EQ(layer_macs(conv_desc("c", 1, 4, 4, 1, 1)), 16);
}

TEST(Flops, AdditiveAndScaleQuadraticInSpatialExtent) {
  const auto a = lite_block_descs(48, 48, 16, 16);
  std::int64_t sum = 0;
  for (const auto& d : a) sum += layer_macs(d);
  EXPECT_EQ(flops_count(a), sum);

  const auto b = lite_block_descs(48, 48, 32, 32);
  EXPECT_EQ(flops_count(b), 4 * flops_count(a));
}

TEST(Flops, DynamicShapeRejected) {
  LayerDesc d;
  d.name = "dyn";
  d.output_elements = 0;
  EXPECT_THROW(layer_macs(d), InvalidArgument);
}

TEST(GradCheckHarness, LinearMapIsExact) {
  Rng rng(26);
  const auto x = random_tensor(rng, {10}, -1.0, 1.0);
  DTensor analytic({10}, 3.0);
  const auto f = [](const DTensor& v) {
    double s = 0.0;
    for (std::int64_t i = 0; i < v.numel(); ++i) s += 3.0 * v[i];
    return s;
  };
  EXPECT_LT(grad_check(f, x, analytic), 1e-9);
}

TEST(GradCheckHarness, DetectsCorruptedGradient) {
  Rng rng(27);
  const auto x = random_tensor(rng, {8}, 0.5, 1.5);
  DTensor analytic({8});
  for (std::int64_t i = 0; i < 8; ++i) analytic[i] = 2.0 * x[i] * 1.01;
  const auto f = [](const DTensor& v) {
    double s = 0.0;
    for (std::int64_t i = 0; i < v.numel(); ++i) s += v[i] * v[i];
    return s;
  };
  const double err = grad_check(f, x, analytic);
  EXPECT_NEAR(err, 0.0099, 2e-3);
}

TEST(GradCheckHarness, ConvBnFocalChainPassesUnderThreshold) {
  Rng rng(28);
  const auto x = random_tensor(rng, {2, 2, 4, 4}, -1.0, 1.0);
  const auto w = random_tensor(rng, {2, 2, 3, 3}, -0.4, 0.4);
  const auto gamma = random_tensor(rng, {2}, 0.8, 1.2);
  const auto beta = random_tensor(rng, {2}, -0.1, 0.1);
  DTensor target({2, 4, 4});
  target(0, 1, 1) = 1.0;
  target(1, 2, 3) = 1.0;

  const auto net = [&](const DTensor& xx, BatchNormCacheT<double>* cache,
                       DTensor* conv_out, DTensor* sig_out) {
    auto c = conv2d_forward(xx, w, DTensor{}, 1, 1, 1);
    DTensor m({2}), v({2}, 1.0);
    auto b = batchnorm_forward(c, gamma, beta, m, v, true, cache);
    auto s = sigmoid_forward(b);
    double loss = 0.0;
    for (std::int64_t n = 0; n < 2; ++n) {
      DTensor p({2, 4, 4});
      for (std::int64_t ch = 0; ch < 2; ++ch)
        for (std::int64_t yy = 0; yy < 4; ++yy)
          for (std::int64_t xx2 = 0; xx2 < 4; ++xx2)
            p(ch, yy, xx2) = s(n, ch, yy, xx2);
      loss += focal_loss(p, target).value;
    }
    if (conv_out) *conv_out = std::move(c);
    if (sig_out) *sig_out = std::move(s);
    return loss;
  };

  // Analytic gradient via the hand-chained backward path.
  BatchNormCacheT<double> cache;
  DTensor conv_out, sig_out;
  net(x, &cache, &conv_out, &sig_out);
  DTensor grad_sig(sig_out.shape());
  for (std::int64_t n = 0; n < 2; ++n) {
    DTensor p({2, 4, 4});
    for (std::int64_t ch = 0; ch < 2; ++ch)
      for (std::int64_t yy = 0; yy < 4; ++yy)
        for (std::int64_t xx2 = 0; xx2 < 4; ++xx2)
          p(ch, yy, xx2) = sig_out(n, ch, yy, xx2);
    const auto fl = focal_loss(p, target);
    for (std::int64_t ch = 0; ch < 2; ++ch)
      for (std::int64_t yy = 0; yy < 4; ++yy)
        for (std::int64_t xx2 = 0; xx2 < 4; ++xx2)
          grad_sig(n, ch, yy, xx2) = fl.grad(ch, yy, xx2);
  }
  auto g = sigmoid_backward(grad_sig, sig_out);
  auto gb = batchnorm_backward(g, conv_out, gamma, cache, true);
  const auto gc = conv2d_backward(gb.x, x, w, 1, 1, 1);

  const auto f = [&](const DTensor& v) {
    return net(v, nullptr, nullptr, nullptr);
  };
  EXPECT_LT(grad_check(f, x, gc.x), 1e-5);
}

TEST(Detector, OutputShapesFollowStrideFourContract) {
  DetectorConfig cfg;
  cfg.num_classes = 3;
  ToyDetector det(cfg, 7);
  for (const std::int64_t hw : {32, 48, 64}) {
    Tensor x({1, 3, hw, hw}, 0.5f);
    ToyDetector::Cache cc;
    const auto out = det.forward(x, false, cc);
    EXPECT_EQ(out.loc_logits.dim(1), 3);
    EXPECT_EQ(out.loc_logits.dim(2), hw / 4);
    EXPECT_EQ(out.loc_logits.dim(3), hw / 4);
    EXPECT_EQ(out.reg_raw.dim(1), 4);
    EXPECT_EQ(out.distances.dim(2), hw / 4);
    for (std::int64_t i = 0; i < out.heatmap.numel(); ++i) {
      EXPECT_GT(out.heatmap[i], 0.0f);
      EXPECT_LT(out.heatmap[i], 1.0f);
    }
    for (std::int64_t i = 0; i < out.distances.numel(); ++i)
      EXPECT_GT(out.distances[i], 0.0f);
  }
  Tensor bad({1, 3, 40, 64}, 0.5f);
  ToyDetector::Cache cc;
  EXPECT_THROW(det.forward(bad, false, cc), InvalidArgument);
}

TEST(Detector, InitIsSeedDeterministic) {
  DetectorConfig cfg;
  ToyDetector a(cfg, 11), b(cfg, 11), c(cfg, 12);
  auto pa = a.trainable(), pb = b.trainable(), pc = c.trainable();
  ASSERT_EQ(pa.size(), pb.size());
  bool all_equal = true, any_diff_seed = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    all_equal &= tensors_equal(pa[i]->value, pb[i]->value);
    any_diff_seed |= !tensors_equal(pa[i]->value, pc[i]->value);
  }
  EXPECT_TRUE(all_equal);
  EXPECT_TRUE(any_diff_seed);
}

TEST(Detector, TrainingStepIsBitReproducible) {
  DetectorConfig cfg;
  cfg.num_classes = 2;
  const auto run = [&cfg]() {
    ToyDetector det(cfg, 21);
    Rng rng = Rng::stream(31, "input", 0, 0);
    Tensor x({2, 3, 32, 32});
    for (std::int64_t i = 0; i < x.numel(); ++i)
      x[i] = static_cast<float>(rng.uniform());
    for (int step = 0; step < 3; ++step) {
      det.zero_grad();
      ToyDetector::Cache cc;
      const auto out = det.forward(x, true, cc);
      Tensor gh(out.heatmap.shape());
      for (std::int64_t i = 0; i < gh.numel(); ++i)
        gh[i] = (out.heatmap[i] - 0.5f) / static_cast<float>(gh.numel());
      Tensor gd(out.distances.shape());
      for (std::int64_t i = 0; i < gd.numel(); ++i)
        gd[i] = (out.distances[i] - 8.0f) * 1e-4f / static_cast<float>(gd.numel());
      det.backward(gh, gd, cc, true);
      sgd_step(det.trainable(), 0.01);
    }
    return det;
  };
  auto d1 = run();
  auto d2 = run();
  auto p1 = d1.trainable(), p2 = d2.trainable();
  for (std::size_t i = 0; i < p1.size(); ++i)
    EXPECT_TRUE(tensors_equal(p1[i]->value, p2[i]->value)) << p1[i]->name;
}

TEST(Detector, FlopsDescsScaleQuadraticallyAndIgnoreParamValues) {
  DetectorConfig cfg;
  ToyDetector a(cfg, 1), b(cfg, 2);
  EXPECT_EQ(flops_count(a.flops_descs(64, 64)), flops_count(b.flops_descs(64, 64)));
  EXPECT_EQ(flops_count(a.flops_descs(128, 128)),
            4 * flops_count(a.flops_descs(64, 64)));
}

TEST(Checkpoint, RoundTripRestoresEverythingBitwise) {
  DetectorConfig cfg;
  cfg.num_classes = 2;
  ToyDetector src(cfg, 41);
  // Give velocities and EMA shadows non-trivial values.
  auto params = src.trainable();
  Rng rng(42);
  for (auto* p : params)
    for (std::int64_t i = 0; i < p->velocity.numel(); ++i)
      p->velocity[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  EmaState ema;
  ema.decay = 0.997;
  ema.init_from(params);
  ema_update(ema, params);

  const std::string path = "test_ckpt_roundtrip.bin";
  save_checkpoint<float>(path, params, src.buffers(), &ema, 1234, "cfghash");

  ToyDetector dst(cfg, 43);  // different seed -> different params
  EmaState ema2;
  const auto meta =
      load_checkpoint<float>(path, dst.trainable(), dst.buffers(), &ema2);
  EXPECT_EQ(meta.iteration, 1234);
  EXPECT_EQ(meta.config_hash, "cfghash");
  EXPECT_TRUE(meta.has_ema);
  EXPECT_DOUBLE_EQ(meta.ema_decay, 0.997);

  auto dparams = dst.trainable();
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_TRUE(tensors_equal(params[i]->value, dparams[i]->value));
    EXPECT_TRUE(tensors_equal(params[i]->velocity, dparams[i]->velocity));
    EXPECT_TRUE(tensors_equal(ema.shadow[i], ema2.shadow[i]));
  }
  auto sb = src.buffers(), db = dst.buffers();
  for (std::size_t i = 0; i < sb.size(); ++i)
    EXPECT_TRUE(tensors_equal(*sb[i].second, *db[i].second));
  std::remove(path.c_str());
}

// A restored detector must reproduce the saved one's eval forward bitwise.
// This fails if any stateful layer (e.g. a batchnorm inside a block) is left
// out of trainable() or buffers().
TEST(Checkpoint, RestoredDetectorMatchesEvalForwardBitwise) {
  DetectorConfig cfg;
  cfg.num_classes = 2;
  cfg.head_width = 16;
  cfg.stage_channels = {4, 8, 8, 8};
  ToyDetector src(cfg, 7);

  Rng rng(71);
  Tensor x({2, 3, 32, 32});
  for (std::int64_t i = 0; i < x.numel(); ++i)
    x[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (int step = 0; step < 5; ++step) {
    ToyDetector::Cache cc;
    const auto out = src.forward(x, true, cc);  // moves BN running stats
    Tensor gh(out.heatmap.shape());
    for (std::int64_t i = 0; i < gh.numel(); ++i)
      gh[i] = (out.heatmap[i] - 0.5f) / static_cast<float>(gh.numel());
    Tensor gd(out.distances.shape(), 0.0f);
    src.zero_grad();
    src.backward(gh, gd, cc, true);
    sgd_step(src.trainable(), 0.05);
  }

  const std::string path = "test_ckpt_forward.bin";
  save_checkpoint<float>(path, src.trainable(), src.buffers(), nullptr, 5, "h");
  ToyDetector dst(cfg, 8);
  load_checkpoint<float>(path, dst.trainable(), dst.buffers(), nullptr);

  ToyDetector::Cache ca, cb;
  const auto ya = src.forward(x, false, ca);
  const auto yb = dst.forward(x, false, cb);
  EXPECT_TRUE(tensors_equal(ya.heatmap, yb.heatmap));
  EXPECT_TRUE(tensors_equal(ya.distances, yb.distances));
  std::remove(path.c_str());
}

TEST(Checkpoint, MismatchedModelRejected) {
  DetectorConfig small;
  small.num_classes = 2;
  small.head_width = 16;
  ToyDetector src(small, 1);
  const std::string path = "test_ckpt_mismatch.bin";
  save_checkpoint<float>(path, src.trainable(), src.buffers(), nullptr, 1, "h");

  DetectorConfig wide = small;
  wide.head_width = 24;
  ToyDetector dst(wide, 1);
  EmaState ema;
  EXPECT_THROW(
      load_checkpoint<float>(path, dst.trainable(), dst.buffers(), &ema),
      InvalidArgument);
  std::remove(path.c_str());
}

TEST(Checkpoint, CorruptFilesRejected) {
  const std::string path = "test_ckpt_bad.bin";
  {
    std::ofstream os(path, std::ios::binary);
    os << "not a checkpoint at all";
  }
  DetectorConfig cfg;
  cfg.num_classes = 2;
  ToyDetector det(cfg, 1);
  EmaState ema;
  EXPECT_THROW(load_checkpoint<float>(path, det.trainable(), det.buffers(), &ema),
               InvalidArgument);
  std::remove(path.c_str());
  EXPECT_THROW(
      load_checkpoint<float>("no_such_file.bin", det.trainable(), det.buffers(),
                             &ema),
      InvalidArgument);
}

TEST(Checkpoint, TensorArchiveRoundTrip) {
  Rng rng(44);
  const auto a = random_tensor(rng, {2, 3, 4}, -1.0, 1.0);
  const auto b = random_tensor(rng, {5}, 0.0, 1.0);
  nlohmann::json extra;
  extra["note"] = "targets";
  const std::string path = "test_archive.bin";
  save_tensor_archive<double>(path, {{"a", &a}, {"b", &b}}, extra);

  nlohmann::json extra2;
  const auto loaded = load_tensor_archive<double>(path, &extra2);
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[0].first, "a");
  EXPECT_EQ(loaded[1].first, "b");
  EXPECT_EQ(extra2.at("note").get<std::string>(), "targets");
  for (std::int64_t i = 0; i < a.numel(); ++i)
    EXPECT_EQ(loaded[0].second[i], a[i]);
  for (std::int64_t i = 0; i < b.numel(); ++i)
    EXPECT_EQ(loaded[1].second[i], b[i]);
  std::remove(path.c_str());
}
