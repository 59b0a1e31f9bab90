#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "op_cases.hpp"
#include "synfuse/optim.hpp"
#include "synfuse/tensor.hpp"

using namespace synfuse;
using synfuse::numcheck::contract;
using synfuse::numcheck::gradcheck;
using synfuse::numcheck::random_tensor;
using synfuse::numcheck::OpCase;
using synfuse::numcheck::op_cases;

namespace {

void expect_near_all(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], tol) << "at " << i;
}

}  // namespace

TEST(TensorBasics, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.at(1, 2), 6.0);
}

TEST(TensorBasics, MatmulIdentityReturnsInput) {
  Rng rng(3);
  const Tensor x = random_tensor({3, 5}, rng, -1, 1, false);
  expect_near_all(matmul(Tensor::identity(3), x), x, 0.0);
}

TEST(TensorBasics, ShapeErrorsNameBothShapes) {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2,3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4,2)"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(concat(a, b, 1), ShapeError);
}

TEST(TensorBasics, ConcatShapes) {
  EXPECT_EQ(concat(Tensor::zeros({2, 4}), Tensor::zeros({2, 1}), 1).shape(), (Shape{2, 5}));
  EXPECT_EQ(concat(Tensor::zeros({2, 4}), Tensor::zeros({3, 4}), 0).shape(), (Shape{5, 4}));
}

TEST(TensorBasics, TransposeValues) {
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor tt = transpose(t);
  EXPECT_EQ(tt.shape(), (Shape{3, 2}));
  EXPECT_EQ(tt.to_vector(), (std::vector<double>{1, 4, 2, 5, 3, 6}));
}

TEST(Softmax, SymmetricInputIsUniform) {
  const Tensor s = softmax(Tensor({1, 2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.data()[1], 0.5);
}

TEST(Softmax, LargeEqualLogitsDoNotOverflow) {
  const Tensor s = softmax(Tensor({1, 3}, {1000, 1000, 1000}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({4, 9}, rng, -30, 30, false);
    const Tensor s = softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 9; ++c) {
        EXPECT_GT(s.at(r, c), 0.0);
        EXPECT_LT(s.at(r, c), 1.0);
        total += s.at(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
    const double c = rng.uniform(-50, 50);
    std::vector<double> shifted = x.to_vector();
    for (auto& v : shifted) v += c;
    expect_near_all(softmax(Tensor({4, 9}, shifted)), s, 1e-12);
  }
}

TEST(Softmax, ColumnAxis) {
  Rng rng(8);
  const Tensor x = random_tensor({5, 3}, rng, -2, 2, false);
  expect_near_all(softmax(x, 0), transpose(softmax(transpose(x), 1)), 1e-15);
}

TEST(Dropout, RateZeroAndEvalAreIdentity) {
  Rng rng(1);
  const Tensor x = random_tensor({3, 4}, rng, -1, 1, false);
  EXPECT_TRUE(dropout(x, 0.0, true, rng).same(x));
  EXPECT_TRUE(dropout(x, 0.5, false, rng).same(x));
}

TEST(Dropout, KeptFractionConcentrates) {
  Rng rng(2024);
  const Tensor x = Tensor::full({1000, 1000}, 1.0);
  const Tensor y = dropout(x, 0.1, true, rng);
  std::size_t kept = 0;
  for (double v : y.data()) {
    if (v != 0.0) {
      ++kept;
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.9);
    }
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1e6, 0.9, 0.003);
}

TEST(Dropout, SeededMasksAreReproducible) {
  const Tensor x = Tensor::full({10, 10}, 1.0);
  Rng a(9), b(9);
  EXPECT_EQ(dropout(x, 0.3, true, a).to_vector(), dropout(x, 0.3, true, b).to_vector());
}

TEST(Embedding, MatchesOneHotMatmul) {
  Rng rng(4);
  const Tensor table = random_tensor({7, 5}, rng, -1, 1, false);
  const std::vector<int> ids = {3, 0, 6, 3, 1};
  std::vector<double> onehot(ids.size() * 7, 0.0);
  for (std::size_t i = 0; i < ids.size(); ++i) onehot[i * 7 + static_cast<std::size_t>(ids[i])] = 1.0;
  expect_near_all(embedding_lookup(table, ids), matmul(Tensor({ids.size(), 7}, onehot), table), 0.0);
}

TEST(Embedding, EmptyIdsGiveEmptyRows) {
  const Tensor e = embedding_lookup(Tensor::zeros({4, 6}), std::vector<int>{});
  EXPECT_EQ(e.shape(), (Shape{0, 6}));
}

TEST(Embedding, RepeatedIdAccumulatesGradient) {
  Tensor table = Tensor::full({3, 2}, 0.5, true);
  backward(sum(embedding_lookup(table, std::vector<int>{1})));
  const std::vector<double> single(table.grad().begin(), table.grad().end());
  table.zero_grad();
  backward(sum(embedding_lookup(table, std::vector<int>{1, 1})));
  for (std::size_t i = 0; i < single.size(); ++i) EXPECT_DOUBLE_EQ(table.grad()[i], 2.0 * single[i]);
  EXPECT_EQ(table.grad()[0], 0.0);
  EXPECT_EQ(table.grad()[4], 0.0);
}

TEST(Embedding, OutOfRangeIdThrows) {
  EXPECT_THROW(embedding_lookup(Tensor::zeros({3, 2}), std::vector<int>{3}), ShapeError);
}

TEST(CrossEntropy, NoSmoothingConfidentLogitsGiveNearZeroLoss) {
  const Tensor logits({2, 3}, {50, 0, 0, 0, 0, 50});
  EXPECT_LT(cross_entropy_label_smoothed(logits, std::vector<int>{0, 2}, 0.0).item(), 1e-20);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  const Tensor logits = Tensor::zeros({1, 5});
  EXPECT_NEAR(cross_entropy_label_smoothed(logits, std::vector<int>{2}, 0.1).item(), std::log(5.0), 1e-15);
}

TEST(CrossEntropy, PadRowsExcludedFromMean) {
  Rng rng(6);
  const Tensor logits = random_tensor({3, 4}, rng, -2, 2, false);
  const double with_pad = cross_entropy_label_smoothed(logits, std::vector<int>{1, 0, 3}, 0.1, 0).item();
  const Tensor kept = concat(row(logits, 0), row(logits, 2), 0);
  EXPECT_NEAR(with_pad, cross_entropy_label_smoothed(kept, std::vector<int>{1, 3}, 0.1).item(), 1e-15);
}

TEST(CrossEntropy, SumReductionIsRowCountTimesMean) {
  Rng rng(7);
  const Tensor logits = random_tensor({4, 6}, rng, -2, 2, false);
  const std::vector<int> t = {1, 2, 5, 0};
  const double mean = cross_entropy_label_smoothed(logits, t, 0.1).item();
  const double total = cross_entropy_label_smoothed(logits, t, 0.1, std::nullopt, Reduction::sum).item();
  EXPECT_NEAR(total, 4.0 * mean, 1e-13);
}

TEST(Backward, RejectsNonScalar) {
  Tensor x = Tensor::full({2, 2}, 1.0, true);
  EXPECT_THROW(backward(scale(x, 2.0)), Error);
}

TEST(Backward, TwoPassesDoubleLeafGradients) {
  Rng rng(10);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  const auto f = [&] { return contract(softmax(matmul(a, b)), 1); };
  backward(f());
  const std::vector<double> g1(a.grad().begin(), a.grad().end());
  backward(f());
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(a.grad()[i], 2.0 * g1[i]);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor a = Tensor::full({2, 2}, 1.0, true);
  NoGradGuard guard;
  const Tensor y = scale(a, 3.0);
  EXPECT_FALSE(y.requires_grad());
}

class GradCheck : public ::testing::TestWithParam<OpCase> {};

TEST_P(GradCheck, MatchesCentralDifferences) {
  Rng rng(1234);
  auto [f, inputs] = GetParam().make(rng);
  const auto r = gradcheck(f, inputs);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, GetParam().tolerance) << GetParam().name << " abs " << r.max_abs_error;
}

INSTANTIATE_TEST_SUITE_P(Ops, GradCheck, ::testing::ValuesIn(op_cases()),
                         [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(Glorot, BoundAndDeterminism) {
  Rng a(42), b(42);
  const Tensor x = glorot_init({30, 20}, a);
  const Tensor y = glorot_init({30, 20}, b);
  EXPECT_EQ(x.to_vector(), y.to_vector());
  const double limit = std::sqrt(6.0 / 50.0);
  double lo = 1, hi = -1;
  for (double v : x.data()) {
    EXPECT_LE(std::abs(v), limit);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_LT(lo, -0.8 * limit);
  EXPECT_GT(hi, 0.8 * limit);
}
