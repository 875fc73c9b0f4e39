#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "segcaps/ops.hpp"
#include "support.hpp"

using namespace segcaps;
using segcaps::testing::random_away_from_zero;
using segcaps::testing::random_shape;
using segcaps::testing::random_tensor;

TEST(Tensor, NumelMatchesShape) {
  Tensor t(Shape{2, 3, 4}, 1.5);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.at({1, 2, 3}), 1.5);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, NonFiniteInputToOpIsHardError) {
  Tensor a(Shape{2}, std::vector<double>{1.0, 0.0});
  EXPECT_THROW(ops::log(a), NumericError);
  Tensor b(Shape{1}, std::vector<double>{1e308});
  EXPECT_THROW(ops::mul(b, 10.0), NumericError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x(Shape{3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad();
  backward(ops::sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  Tensor x(Shape{3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad();
  backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x(Shape{3}, 1.0);
  x.set_requires_grad();
  EXPECT_THROW(backward(ops::mul(x, 2.0)), Error);
}

TEST(Backward, UntrackedLeavesUntouched) {
  Tensor x(Shape{2}, 1.0), y(Shape{2}, 2.0);
  x.set_requires_grad();
  backward(ops::sum(ops::mul(x, y)));
  EXPECT_FALSE(y.has_grad());
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, MultipleConsumersAccumulate) {
  Tensor x(Shape{1}, std::vector<double>{3.0});
  x.set_requires_grad();
  const Tensor a = ops::mul(x, 2.0);
  const Tensor b = ops::add(ops::mul(a, a), a);  // 4x^2 + 2x
  backward(ops::sum(b));
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0 * 3.0 + 2.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x(Shape{2}, 1.0);
  x.set_requires_grad();
  Tensor y;
  {
    NoGradGuard g;
    y = ops::sum(ops::mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Graph, EachNodeOnceInTopologicalOrder) {
  Tensor x(Shape{2}, 1.0);
  x.set_requires_grad();
  Tensor h = ops::mul(x, x);
  Tensor y = ops::add(h, ops::mul(h, 3.0));
  Tensor loss = ops::sum(ops::add(y, h));
  const auto g = Graph::collect(loss);
  std::set<std::uint64_t> ids;
  std::unordered_map<const detail::Node*, std::size_t> pos;
  for (std::size_t i = 0; i < g.nodes().size(); ++i) {
    ids.insert(g.nodes()[i]->id);
    pos[g.nodes()[i].get()] = i;
  }
  EXPECT_EQ(ids.size(), g.size());
  for (const auto& n : g.nodes())
    for (const auto& in : n->inputs)
      if (in->requires_grad) EXPECT_LT(pos.at(in.get()), pos.at(n.get()));
}

TEST(Ops, ShapeErrorNamesOpAndShapes) {
  try {
    ops::add(Tensor(Shape{2, 3}), Tensor(Shape{3, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.op(), "add");
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("[3,2]"), std::string::npos) << e.what();
  }
}

TEST(Ops, ScalarBroadcastOnly) {
  const Tensor s = Tensor::scalar(2.0);
  const Tensor t(Shape{3}, 1.0);
  EXPECT_EQ(ops::mul(s, t)[2], 2.0);
  EXPECT_THROW(ops::add(Tensor(Shape{1}, 1.0), t), ShapeError);
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  const Tensor s = ops::softmax(Tensor(Shape{2}, 0.0), 0);
  EXPECT_EQ(s[0], 0.5);
  EXPECT_EQ(s[1], 0.5);
}

TEST(Conv, SamePaddingKeepsSize) {
  const Tensor y = ops::conv2d(Tensor(Shape{1, 8, 8}, 1.0), Tensor(Shape{1, 1, 3, 3}, 1.0));
  EXPECT_EQ(y.shape(), (Shape{1, 8, 8}));
  EXPECT_EQ(y.at({0, 0, 0}), 4.0);
  EXPECT_EQ(y.at({0, 4, 4}), 9.0);
}

TEST(Conv, SamePaddingRejectsEvenKernel) {
  EXPECT_THROW(ops::conv2d(Tensor(Shape{1, 8, 8}), Tensor(Shape{1, 1, 2, 2})), Error);
}

TEST(Conv, TransposeShapeIsAdjointShape) {
  // Oracle: stride-2 conv of an 8x8 gives 4x4, so its adjoint maps 4x4 to 8x8.
  const Tensor k(Shape{1, 1, 3, 3}, 1.0);
  ops::Conv2dOptions opt{.stride = 2};
  EXPECT_EQ(ops::conv2d(Tensor(Shape{1, 8, 8}), k, opt).shape(), (Shape{1, 4, 4}));
  EXPECT_EQ(ops::conv2d_transpose(Tensor(Shape{1, 4, 4}), k, opt).shape(), (Shape{1, 8, 8}));
}

TEST(Conv, ValidPadding) {
  const Tensor y = ops::conv2d(Tensor(Shape{2, 7, 6}, 1.0), Tensor(Shape{3, 2, 3, 3}, 1.0),
                               {.stride = 2, .padding = ops::Padding::valid});
  EXPECT_EQ(y.shape(), (Shape{3, 3, 2}));
  EXPECT_EQ(y[0], 18.0);
}

TEST(Conv, MatchesDirectLoopOracle) {
  CounterRng rng(7, 1);
  const Tensor x = random_tensor({2, 5, 6}, rng);
  const Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const Tensor y = ops::conv2d(x, k, {.stride = 2});
  ASSERT_EQ(y.shape(), (Shape{3, 3, 3}));
  // ceil(5/2)=3: total pad = (3-1)*2+3-5 = 2, top 1. ceil(6/2)=3: total 1, left 0.
  for (std::size_t co = 0; co < 3; ++co)
    for (std::size_t oy = 0; oy < 3; ++oy)
      for (std::size_t ox = 0; ox < 3; ++ox) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < 2; ++ci)
          for (long i = 0; i < 3; ++i)
            for (long j = 0; j < 3; ++j) {
              const long iy = static_cast<long>(oy) * 2 + i - 1;
              const long ix = static_cast<long>(ox) * 2 + j - 0;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
              acc += x.at({ci, std::size_t(iy), std::size_t(ix)}) * k.at({co, ci, std::size_t(i), std::size_t(j)});
            }
        EXPECT_NEAR(y.at({co, oy, ox}), acc, 1e-14);
      }
}

class ConvAdjoint : public ::testing::TestWithParam<int> {};

TEST_P(ConvAdjoint, DotProductIdentity) {
  CounterRng rng(100 + GetParam(), 0);
  const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(3);
  const std::size_t h = 5 + rng.below(6), w = 5 + rng.below(6);
  const std::size_t k = 1 + 2 * rng.below(3), stride = 1 + rng.below(3);
  const ops::Padding pad = rng.below(2) ? ops::Padding::same : ops::Padding::valid;
  const Tensor x = random_tensor({ci, h, w}, rng);
  const Tensor kern = random_tensor({co, ci, k, k}, rng);
  const ops::Conv2dOptions opt{.stride = stride, .padding = pad};
  const Tensor y = ops::conv2d(x, kern, opt);
  const Tensor r = random_tensor(y.shape(), rng);
  const Tensor xt = ops::conv2d_transpose(r, kern, opt, h, w);
  EXPECT_NEAR(ops::dot(y, r), ops::dot(x, xt), 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Random, ConvAdjoint, ::testing::Range(0, 30));

TEST(Determinism, ForwardIsBitIdentical) {
  auto run = [] {
    CounterRng rng(42, 3);
    const Tensor x = random_tensor({2, 9, 9}, rng);
    const Tensor k = random_tensor({4, 2, 3, 3}, rng);
    return ops::sum(ops::sigmoid(ops::conv2d(x, k, {.stride = 2}))).item();
  };
  EXPECT_EQ(run(), run());
}
