#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "test_util.hpp"

using namespace pglode;
using namespace pglode::ad;

namespace {

/// Weighted sum with fixed random weights, so every output element gets a distinct upstream gradient.
Var probe_loss(Tape& tape, const Var& y, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return sum(mul(y, tape.constant(testutil::random_tensor(y.shape(), rng))));
}

/// Random values with magnitude at least `gap`, keeping relu / clamp / pool inputs away from kinks.
Tensor away_from_zero(Shape shape, SplitMix64& rng, double gap = 0.1) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) {
    const double m = gap + rng.exponential();
    v = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

Tensor positive(Shape shape, SplitMix64& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = 0.2 + 2.0 * rng.uniform();
  return t;
}

constexpr double kFdTol = 1e-4;

}  // namespace

TEST(Primitives, SigmoidOfZero) {
  Tape tape;
  const Var y = sigmoid(tape.constant(Tensor::scalar(0.0)));
  EXPECT_EQ(y.value().item(), 0.5);
}

TEST(Primitives, IdentityKernelConvolution) {
  SplitMix64 rng(1);
  const Tensor x = testutil::random_tensor({3, 5, 6}, rng);
  Tensor w({3, 3, 3, 3}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) w[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
  Tape tape;
  const Var y = conv2d(tape.constant(x), tape.constant(w));
  EXPECT_EQ(y.value(), x);
}

TEST(Primitives, MatmulMatchesNaiveLoops) {
  SplitMix64 rng(2);
  const Tensor a = testutil::random_tensor({2, 3}, rng);
  const Tensor b = testutil::random_tensor({3, 2}, rng);
  Tape tape;
  const Var c = matmul(tape.constant(a), tape.constant(b));
  ASSERT_EQ(c.shape(), (Shape{2, 2}));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 2 + j];
      EXPECT_NEAR(c.value()[i * 2 + j], s, 1e-12);
    }
  }
}

TEST(Primitives, ConvolutionMatchesDirectSum) {
  SplitMix64 rng(3);
  const std::size_t ci = 2, co = 3, h = 4, w = 5;
  const Tensor x = testutil::random_tensor({ci, h, w}, rng);
  const Tensor k = testutil::random_tensor({co, ci, 3, 3}, rng);
  const Tensor b = testutil::random_tensor({co}, rng);
  Tape tape;
  const Var y = conv2d(tape.constant(x), tape.constant(k), tape.constant(b));
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        double s = b[o];
        for (std::size_t i = 0; i < ci; ++i) {
          for (int dr = -1; dr <= 1; ++dr) {
            for (int dc = -1; dc <= 1; ++dc) {
              const long rr = long(r) + dr, cc = long(c) + dc;
              if (rr < 0 || cc < 0 || rr >= long(h) || cc >= long(w)) continue;  // zero padding
              s += k[((o * ci + i) * 3 + (dr + 1)) * 3 + (dc + 1)] * x[(i * h + rr) * w + cc];
            }
          }
        }
        EXPECT_NEAR(y.value()[(o * h + r) * w + c], s, 1e-12);
      }
    }
  }
}

TEST(Primitives, PoolingUpsamplingAndChannelOps) {
  Tape tape;
  const Tensor x({1, 2, 4}, {1, 5, 2, 0, 3, -1, 7, 4});
  const Var v = tape.constant(x);
  EXPECT_EQ(max_pool(v, 2).value(), Tensor({1, 1, 2}, {5, 7}));
  EXPECT_EQ(avg_pool(v, 2).value(), Tensor({1, 1, 2}, {2, 3.25}));
  const Var up = upsample_nearest(tape.constant(Tensor({1, 1, 2}, {1, 2})), 2);
  EXPECT_EQ(up.value(), Tensor({1, 2, 4}, {1, 1, 2, 2, 1, 1, 2, 2}));
  const Var doubled = scale(v, 2.0);
  const Var cat = concat_channels({v, doubled});
  ASSERT_EQ(cat.shape(), (Shape{2, 2, 4}));
  const Var second = slice_channels(cat, 1, 1);
  EXPECT_EQ(second.value(), doubled.value());
}

TEST(Primitives, ElementwiseValues) {
  Tape tape;
  const Var x = tape.constant(Tensor({3}, {-1.0, 0.5, 2.0}));
  EXPECT_EQ(relu(x).value(), Tensor({3}, {0.0, 0.5, 2.0}));
  EXPECT_EQ(clamp(x, 0.0, 1.0).value(), Tensor({3}, {0.0, 0.5, 1.0}));
  EXPECT_DOUBLE_EQ(tanh(x).value()[2], std::tanh(2.0));
  EXPECT_DOUBLE_EQ(exp(x).value()[1], std::exp(0.5));
  EXPECT_DOUBLE_EQ(ad::log(ad::exp(x)).value()[0], -1.0);
  EXPECT_DOUBLE_EQ(sum(x).value().item(), 1.5);
  EXPECT_DOUBLE_EQ(mean(x).value().item(), 0.5);
}

TEST(Primitives, ShapeMismatchNamesPrimitiveAndShapes) {
  Tape tape;
  const Var a = tape.constant(Tensor({2, 3}));
  const Var b = tape.constant(Tensor({2, 2}));
  try {
    (void)matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,2]"), std::string::npos) << msg;
  }
  EXPECT_THROW((void)add(a, b), ShapeError);
  EXPECT_THROW((void)mul(a, b), ShapeError);
  EXPECT_THROW((void)conv2d(tape.constant(Tensor({2, 4, 4})), tape.constant(Tensor({1, 3, 3, 3}))), ShapeError);
  EXPECT_THROW((void)max_pool(tape.constant(Tensor({1, 3, 4})), 2), ShapeError);
  EXPECT_THROW((void)slice_channels(tape.constant(Tensor({2, 2, 2})), 1, 2), ShapeError);
}

// Vector-Jacobian products of every primitive against central differences on small shapes.

struct PrimitiveCase {
  const char* name;
  GraphBuilder f;
  std::vector<Tensor> point;
};

std::vector<PrimitiveCase> primitive_cases() {
  SplitMix64 rng(11);
  const Shape s{4, 4, 8};
  std::vector<PrimitiveCase> cases;
  auto unary = [&](const char* name, auto op, Tensor x) {
    cases.push_back({name, [op](Tape& t, std::span<const Var> v) { return probe_loss(t, op(v[0]), 5); }, {std::move(x)}});
  };
  auto binary = [&](const char* name, auto op, Tensor a, Tensor b) {
    cases.push_back({name, [op](Tape& t, std::span<const Var> v) { return probe_loss(t, op(v[0], v[1]), 6); },
                     {std::move(a), std::move(b)}});
  };
  binary("add", [](const Var& a, const Var& b) { return add(a, b); }, testutil::random_tensor(s, rng),
         testutil::random_tensor(s, rng));
  binary("add_broadcast", [](const Var& a, const Var& b) { return add(a, b); }, testutil::random_tensor(s, rng),
         testutil::random_tensor({1, 4, 8}, rng));
  binary("sub", [](const Var& a, const Var& b) { return sub(a, b); }, testutil::random_tensor(s, rng),
         testutil::random_tensor(s, rng));
  binary("mul", [](const Var& a, const Var& b) { return mul(a, b); }, testutil::random_tensor(s, rng),
         testutil::random_tensor(s, rng));
  binary("matmul", [](const Var& a, const Var& b) { return matmul(a, b); }, testutil::random_tensor({3, 4}, rng),
         testutil::random_tensor({4, 5}, rng));
  unary("scale", [](const Var& x) { return scale(x, -1.7); }, testutil::random_tensor(s, rng));
  unary("add_scalar", [](const Var& x) { return add_scalar(x, 0.3); }, testutil::random_tensor(s, rng));
  unary("sigmoid", [](const Var& x) { return sigmoid(x); }, testutil::random_tensor(s, rng));
  unary("tanh", [](const Var& x) { return tanh(x); }, testutil::random_tensor(s, rng));
  unary("relu", [](const Var& x) { return relu(x); }, away_from_zero(s, rng));
  unary("exp", [](const Var& x) { return exp(x); }, testutil::random_tensor(s, rng, 0.5));
  unary("log", [](const Var& x) { return ad::log(x); }, positive(s, rng));
  unary("clamp", [](const Var& x) { return clamp(x, -0.8, 0.8); }, away_from_zero(s, rng));
  unary("sum", [](const Var& x) { return scale(sum(mul(x, x)), 0.5); }, testutil::random_tensor(s, rng));
  unary("mean", [](const Var& x) { return mean(mul(x, x)); }, testutil::random_tensor(s, rng));
  unary("max_pool", [](const Var& x) { return max_pool(x, 2); }, testutil::random_tensor(s, rng));
  unary("avg_pool", [](const Var& x) { return avg_pool(x, 2); }, testutil::random_tensor(s, rng));
  unary("upsample_nearest", [](const Var& x) { return upsample_nearest(x, 2); },
        testutil::random_tensor({2, 2, 4}, rng));
  unary("slice_channels", [](const Var& x) { return slice_channels(x, 1, 2); }, testutil::random_tensor(s, rng));
  binary("concat_channels", [](const Var& a, const Var& b) { return concat_channels({a, b}); },
         testutil::random_tensor({2, 4, 4}, rng), testutil::random_tensor({3, 4, 4}, rng));
  cases.push_back({"conv2d",
                   [](Tape& t, std::span<const Var> v) { return probe_loss(t, conv2d(v[0], v[1], v[2]), 7); },
                   {testutil::random_tensor({2, 4, 4}, rng), testutil::random_tensor({3, 2, 3, 3}, rng),
                    testutil::random_tensor({3}, rng)}});
  cases.push_back({"conv1x1",
                   [](Tape& t, std::span<const Var> v) { return probe_loss(t, conv1x1(v[0], v[1], v[2]), 8); },
                   {testutil::random_tensor({4, 4, 8}, rng), testutil::random_tensor({3, 4}, rng),
                    testutil::random_tensor({3}, rng)}});
  return cases;
}

TEST(Backward, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& c : primitive_cases()) {
    EXPECT_LE(grad_check(c.f, c.point), kFdTol) << c.name;
  }
}

TEST(Backward, SumGivesOnes) {
  SplitMix64 rng(4);
  const auto g = gradients([](Tape&, std::span<const Var> v) { return sum(v[0]); },
                           {testutil::random_tensor({2, 3, 5}, rng)});
  EXPECT_EQ(g[0], Tensor({2, 3, 5}, 1.0));
}

TEST(Backward, HalfSumOfSquaresGivesX) {
  SplitMix64 rng(5);
  const Tensor x = testutil::random_tensor({3, 4}, rng);
  const auto g =
      gradients([](Tape&, std::span<const Var> v) { return scale(sum(mul(v[0], v[0])), 0.5); }, {x});
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(g[0][i], x[i]);
}

TEST(Backward, SharedSubexpressionsAccumulate) {
  const auto g = gradients([](Tape&, std::span<const Var> v) { return add(sum(v[0]), sum(v[0])); },
                           {Tensor({2, 2}, 0.3)});
  EXPECT_EQ(g[0], Tensor({2, 2}, 2.0));
}

TEST(Backward, ThreeLayerConvSigmoidComposite) {
  SplitMix64 rng(6);
  const GraphBuilder f = [](Tape& t, std::span<const Var> v) {
    Var x = sigmoid(conv2d(v[0], v[1], v[2]));
    x = sigmoid(conv2d(x, v[3], v[4]));
    x = sigmoid(conv1x1(x, v[5], v[6]));
    return probe_loss(t, x, 9);
  };
  const std::vector<Tensor> point = {
      testutil::random_tensor({2, 6, 6}, rng), testutil::random_tensor({4, 2, 3, 3}, rng, 0.5),
      testutil::random_tensor({4}, rng),       testutil::random_tensor({3, 4, 3, 3}, rng, 0.5),
      testutil::random_tensor({3}, rng),       testutil::random_tensor({2, 3}, rng),
      testutil::random_tensor({2}, rng)};
  EXPECT_LE(grad_check(f, point), kFdTol);
}

TEST(Backward, GradShapesMatchValues) {
  Tape tape;
  const Var x = tape.leaf(Tensor({2, 4, 4}, 0.5));
  const Var w = tape.leaf(Tensor({3, 2, 3, 3}, 0.1));
  const Var y = sum(relu(conv2d(x, w)));
  tape.backward(y);
  EXPECT_EQ(x.grad().shape(), x.shape());
  EXPECT_EQ(w.grad().shape(), w.shape());
}

TEST(Backward, ConstantsCarryNoGradient) {
  Tape tape;
  const Var c = tape.constant(Tensor({2}, 1.0));
  const Var x = tape.leaf(Tensor({2}, 2.0));
  EXPECT_FALSE(c.requires_grad());
  EXPECT_TRUE(mul(c, x).requires_grad());
  EXPECT_FALSE(exp(c).requires_grad());
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape tape;
  const Var x = tape.leaf(Tensor({3}, 1.0));
  EXPECT_THROW(tape.backward(scale(x, 2.0)), ShapeError);
}

TEST(Backward, RejectsSecondCallWithoutReset) {
  Tape tape;
  const Var x = tape.leaf(Tensor({3}, 1.0));
  const Var loss = sum(mul(x, x));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), Error);
  tape.reset_grads();
  EXPECT_NO_THROW(tape.backward(loss));
  EXPECT_EQ(x.grad(), Tensor({3}, 2.0));
}

TEST(Backward, ReplayIsBitwiseDeterministic) {
  for (const auto& c : primitive_cases()) {
    EXPECT_EQ(gradients(c.f, c.point), gradients(c.f, c.point)) << c.name;
  }
}

TEST(Tape, ParentsPrecedeChildren) {
  Tape tape;
  const Var a = tape.leaf(Tensor({2, 2}, 1.0));
  const Var b = tape.constant(Tensor({2, 2}, 3.0));
  const Var y = mean(sigmoid(add(mul(a, b), a)));
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (auto p : tape.parents(i)) EXPECT_LT(p, i);
  }
  EXPECT_EQ(tape.op(y.id()), OpKind::kMean);
}

TEST(GradCheck, LinearFunctionIsExact) {
  SplitMix64 rng(8);
  const Tensor w = testutil::random_tensor({3, 4}, rng);
  const GraphBuilder f = [&w](Tape& t, std::span<const Var> v) { return sum(mul(v[0], t.constant(w))); };
  EXPECT_LE(grad_check(f, {testutil::random_tensor({3, 4}, rng)}), 1e-9);
}

TEST(GradCheck, ConstantFunctionHasZeroGradients) {
  const GraphBuilder f = [](Tape& t, std::span<const Var>) { return t.constant(Tensor::scalar(4.2)); };
  const std::vector<Tensor> point = {Tensor({2, 3}, 1.0)};
  const auto g = gradients(f, point);
  EXPECT_EQ(g[0], Tensor({2, 3}, 0.0));
  EXPECT_EQ(grad_check(f, point), 0.0);
}

TEST(GradCheck, NonFiniteValuesAreErrors) {
  const GraphBuilder f = [](Tape&, std::span<const Var> v) { return sum(ad::log(v[0])); };
  EXPECT_THROW((void)grad_check(f, {Tensor({2}, -1.0)}), NumericalError);
}
