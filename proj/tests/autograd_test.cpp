#include <gtest/gtest.h>

#include <cmath>

#include "sgp/autograd.hpp"
#include "sgp/nn.hpp"

using sgp::Shape;
using sgp::Tensor;
namespace ag = sgp::ag;

TEST(Backward, SquareAtThree) {
  ag::ParamStore ps;
  auto& p = ps.add("p", Tensor::scalar(3.0));
  ag::Tape t;
  auto loss = ag::sum(ag::square(t.param(p)));
  t.backward(loss);
  EXPECT_DOUBLE_EQ(p.grad.item(), 6.0);
}

TEST(Backward, RejectsNonScalarAndSecondCall) {
  ag::ParamStore ps;
  auto& p = ps.add("p", Tensor(Shape{2}, {1.0, 2.0}));
  ag::Tape t;
  auto v = ag::square(t.param(p));
  EXPECT_THROW(t.backward(v), sgp::Error);
  auto loss = ag::sum(v);
  t.backward(loss);
  EXPECT_TRUE(t.consumed());
  EXPECT_THROW(t.backward(loss), sgp::Error);
}

TEST(Backward, FrozenParamGetsNoGradient) {
  ag::ParamStore ps;
  auto& a = ps.add("a", Tensor::scalar(2.0));
  auto& b = ps.add("b", Tensor::scalar(5.0), true);
  ag::Tape t;
  t.backward(ag::sum(ag::mul(t.param(a), t.param(b))));
  EXPECT_DOUBLE_EQ(a.grad.item(), 5.0);
  EXPECT_EQ(b.grad.item(), 0.0);
}

TEST(Backward, StopGradientBlocksUpstream) {
  // loss = x * sg(x): the stop-gradient copy contributes nothing.
  ag::ParamStore ps;
  auto& p = ps.add("x", Tensor::scalar(4.0));
  ag::Tape t;
  auto x = t.param(p);
  auto pinned = t.constant(t.stop_gradient(x.value()));
  t.backward(ag::sum(ag::mul(x, pinned)));
  EXPECT_DOUBLE_EQ(p.grad.item(), 4.0);
}

TEST(Backward, ZeroGradsMakesRepeatIdempotent) {
  ag::ParamStore ps;
  auto& p = ps.add("p", Tensor(Shape{3}, {0.1, -0.4, 2.0}));
  std::vector<double> first;
  for (int rep = 0; rep < 3; ++rep) {
    ps.zero_grads();
    for (double g : p.grad.vec()) EXPECT_EQ(g, 0.0);
    ag::Tape t;
    t.backward(ag::mean(ag::sin(t.param(p))));
    if (rep == 0) first = p.grad.vec();
    EXPECT_EQ(p.grad.vec(), first);
  }
}

TEST(Gradcheck, SinMatchesCosine) {
  ag::ParamStore ps;
  ps.add("p", Tensor::scalar(0.3));
  auto rep = ag::gradcheck([&](ag::Tape& t) { return ag::sum(ag::sin(t.param(ps.get("p")))); }, ps);
  ASSERT_EQ(rep.entries.size(), 1u);
  EXPECT_LE(rep.worst(), 1e-8);
  EXPECT_NEAR(ps.get("p").grad.item(), std::cos(0.3), 1e-15);
}

TEST(Gradcheck, FrozenReportedAsZeroAndSkipped) {
  ag::ParamStore ps;
  ps.add("live", Tensor::scalar(0.7));
  ps.add("fixed", Tensor::scalar(1.3), true);
  auto rep = ag::gradcheck(
      [&](ag::Tape& t) { return ag::sum(ag::mul(ag::tanh(t.param(ps.get("live"))), t.param(ps.get("fixed")))); }, ps);
  ASSERT_EQ(rep.entries.size(), 2u);
  EXPECT_TRUE(rep.entries[1].frozen);
  EXPECT_EQ(rep.entries[1].checked, 0u);
  EXPECT_EQ(ps.get("fixed").grad.item(), 0.0);
  EXPECT_LE(rep.worst(), 1e-8);
}

TEST(Gradcheck, DetectsNonDeterminism) {
  ag::ParamStore ps;
  ps.add("p", Tensor::scalar(1.0));
  int calls = 0;
  auto f = [&](ag::Tape& t) {
    ++calls;
    return ag::scale(ag::sum(t.param(ps.get("p"))), 1.0 + 0.1 * calls);
  };
  EXPECT_THROW(ag::gradcheck(f, ps), sgp::Error);
}

TEST(Gradcheck, PinnedThresholdRespectsStopGradient) {
  // loss = Σ (x − sg(max x))². Pinning keeps the FD probe on the analytic branch.
  ag::ParamStore ps;
  ps.add("x", Tensor(Shape{4}, {0.2, 1.5, -0.3, 0.9}));
  auto f = [&](ag::Tape& t) {
    auto x = t.param(ps.get("x"));
    Tensor m(x.shape());
    m.fill(x.value().max());
    return ag::sum(ag::square(ag::sub(x, t.constant(t.stop_gradient(m)))));
  };
  EXPECT_LE(ag::gradcheck(f, ps).worst(), 1e-8);
  auto open = ag::gradcheck(f, ps, {.eps = 1e-5, .freeze_tau = false});
  EXPECT_GT(open.worst(), 1e-3);
}

TEST(Ops, ConcatAndSliceRoundTrip) {
  ag::ParamStore ps;
  ps.add("a", Tensor(Shape{1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  ps.add("b", Tensor(Shape{1, 1, 2, 2}, {-1, -2, -3, -4}));
  ag::Tape t;
  auto a = t.param(ps.get("a")), b = t.param(ps.get("b"));
  auto c = ag::concat_channels({a, b});
  ASSERT_EQ(c.shape(), (Shape{1, 3, 2, 2}));
  EXPECT_EQ(ag::slice_channels(c, 0, 2).value(), a.value());
  EXPECT_EQ(ag::slice_channels(c, 2, 3).value(), b.value());
}

TEST(Ops, LayerGradients) {
  ag::ParamStore ps;
  sgp::Tensor x(Shape{1, 2, 5, 5});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.37 * static_cast<double>(i));
  ps.add("x", x);
  Tensor W(Shape{3, 2, 3, 3});
  for (std::size_t i = 0; i < W.size(); ++i) W[i] = 0.1 * std::cos(1.1 * static_cast<double>(i));
  ps.add("W", W);
  ps.add("b", Tensor(Shape{3}, {0.1, -0.2, 0.05}));
  Tensor V(Shape{2, 3});
  for (std::size_t i = 0; i < V.size(); ++i) V[i] = 0.3 * std::sin(2.0 + static_cast<double>(i));
  ps.add("V", V);
  ps.add("c", Tensor(Shape{2}, {0.0, 0.3}));
  auto f = [&](ag::Tape& t) {
    auto h = ag::tanh(ag::conv2d(t.param(ps.get("x")), t.param(ps.get("W")), t.param(ps.get("b")), 2, 1));
    auto y = ag::conv1x1(h, t.param(ps.get("V")), t.param(ps.get("c")));
    auto up = ag::softmax_channels(ag::resize_bilinear(y, 7, 6));
    return ag::mean(ag::mul(up, ag::sin(up)));
  };
  auto rep = ag::gradcheck(f, ps);
  for (const auto& e : rep.entries) EXPECT_LE(e.max_rel_error, 1e-6) << e.name;
}

TEST(Sgd, ZeroLearningRateIsNoOp) {
  ag::ParamStore ps;
  auto& p = ps.add("p", Tensor(Shape{2}, {1.0, -2.0}));
  p.grad = Tensor(Shape{2}, {5.0, 7.0});
  ag::sgd_step(ps, 0.0, 0.9, 5e-4);
  EXPECT_EQ(p.value.vec(), (std::vector<double>{1.0, -2.0}));
}

TEST(Sgd, PlainStep) {
  ag::ParamStore ps;
  auto& p = ps.add("p", Tensor::scalar(1.0));
  p.grad = Tensor::scalar(0.5);
  ag::sgd_step(ps, 0.1);
  EXPECT_DOUBLE_EQ(p.value.item(), 0.95);
}

TEST(Sgd, MomentumTwoSteps) {
  // v1 = g1 + wd p0; p1 = p0 − lr v1; v2 = m v1 + g2 + wd p1; p2 = p1 − lr v2
  ag::ParamStore ps;
  auto& p = ps.add("p", Tensor::scalar(2.0));
  const double lr = 0.1, m = 0.9, wd = 0.01;
  p.grad = Tensor::scalar(1.0);
  ag::sgd_step(ps, lr, m, wd);
  const double v1 = 1.0 + wd * 2.0, p1 = 2.0 - lr * v1;
  EXPECT_NEAR(p.value.item(), p1, 1e-15);
  p.grad = Tensor::scalar(-0.5);
  ag::sgd_step(ps, lr, m, wd);
  const double v2 = m * v1 - 0.5 + wd * p1, p2 = p1 - lr * v2;
  EXPECT_NEAR(p.value.item(), p2, 1e-15);
}

TEST(Sgd, FrozenUntouched) {
  ag::ParamStore ps;
  auto& p = ps.add("p", Tensor::scalar(1.0), true);
  p.grad = Tensor::scalar(3.0);
  ag::sgd_step(ps, 1.0);
  EXPECT_EQ(p.value.item(), 1.0);
}
