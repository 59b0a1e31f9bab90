#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "synfuse/optim.hpp"

using namespace synfuse;

TEST(Adam, SingleStepHandComputed) {
  // m = 0.1, v = 0.002; bias corrections make m_hat = v_hat = 1,
  // so p = 0 - 0.1 * 1 / (1 + 1e-9).
  Tensor p({1}, {0.0}, true);
  p.mutable_grad()[0] = 1.0;
  AdamState st;
  st.learning_rate = 0.1;
  std::vector<Tensor> params = {p};
  adam_step(params, st);
  EXPECT_EQ(st.step, 1u);
  EXPECT_NEAR(p.item(), -0.1 / (1.0 + 1e-9), 1e-15);
  EXPECT_NEAR(p.item(), -0.1, 1e-9);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Tensor p({3}, {0.5, -1.0, 2.0}, true);
  p.zero_grad();
  AdamState st;
  st.learning_rate = 0.1;
  std::vector<Tensor> params = {p};
  adam_step(params, st);
  EXPECT_EQ(p.to_vector(), (std::vector<double>{0.5, -1.0, 2.0}));
}

TEST(Adam, FrozenParametersAreSkipped) {
  Tensor frozen({2}, {1.0, 2.0}, false);
  Tensor live({1}, {0.0}, true);
  live.mutable_grad()[0] = -1.0;
  AdamState st;
  st.learning_rate = 0.01;
  std::vector<Tensor> params = {frozen, live};
  adam_step(params, st);
  EXPECT_EQ(frozen.to_vector(), (std::vector<double>{1.0, 2.0}));
  EXPECT_GT(live.item(), 0.0);
}

TEST(Adam, MomentsMatchParameterShapes) {
  Tensor a = Tensor::zeros({2, 3}, true), b = Tensor::zeros({4}, true);
  AdamState st;
  std::vector<Tensor> params = {a, b};
  adam_step(params, st);
  ASSERT_EQ(st.m.size(), 2u);
  EXPECT_EQ(st.m[0].size(), 6u);
  EXPECT_EQ(st.v[1].size(), 4u);
}

TEST(Noam, WarmupPeakAndDecay) {
  const NoamSchedule s{2.0, 64, 100};
  EXPECT_NEAR(s(100), 2.0 / 8.0 / 10.0, 1e-15);
  EXPECT_LT(s(50), s(100));
  EXPECT_LT(s(400), s(100));
  EXPECT_NEAR(s(400), 2.0 / 8.0 / 20.0, 1e-15);
  EXPECT_NEAR(s(1), 2.0 / 8.0 * 1.0 / 1000.0, 1e-15);
}

TEST(Accumulation, TwoHalfBatchesEqualOneSummedBatch) {
  Rng rng(3);
  const Tensor x1 = numcheck::random_tensor({2, 4}, rng, -1, 1, false);
  const Tensor x2 = numcheck::random_tensor({3, 4}, rng, -1, 1, false);
  Tensor w = numcheck::random_tensor({4, 2}, rng);
  const auto loss = [&](const Tensor& x) { return numcheck::contract(matmul(x, w), 5); };

  backward(loss(x1));
  backward(loss(x2));
  const std::vector<double> accumulated(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(add(loss(x1), loss(x2)));
  for (std::size_t i = 0; i < accumulated.size(); ++i) EXPECT_NEAR(w.grad()[i], accumulated[i], 1e-15);
}

TEST(Accumulation, StepsEverySecondBatchWithTokenMean) {
  Tensor p({1}, {0.0}, true);
  std::vector<Tensor> params = {p};
  Adam opt(0.9, 0.998, 1e-9, NoamSchedule{1.0, 1, 1});
  GradAccumulator acc(2);
  p.mutable_grad()[0] = 3.0;
  EXPECT_FALSE(acc.add_batch(params, opt, 3));
  EXPECT_EQ(p.item(), 0.0);
  p.mutable_grad()[0] += 5.0;
  EXPECT_TRUE(acc.add_batch(params, opt, 5));
  EXPECT_EQ(opt.state().step, 1u);
  // first Adam step moves by lr regardless of gradient scale
  EXPECT_NEAR(p.item(), -1.0, 1e-8);
  EXPECT_EQ(p.grad()[0], 0.0);
  EXPECT_EQ(acc.pending(), 0u);
}
