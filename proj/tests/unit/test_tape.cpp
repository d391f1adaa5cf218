#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "twopass/error.hpp"
#include "twopass/grad_check.hpp"
#include "twopass/tape.hpp"

namespace twopass {
namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, std::uint64_t seed, bool grad = true) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return T::from(std::move(shape), std::move(v), grad);
}

TEST(TapeOps, SoftmaxOfZerosIsUniform) {
  Tape<double> tape(false);
  const auto y = tape.softmax(T::zeros({4}));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(TapeOps, LayerNormOfConstantIsZeroBeforeAffine) {
  Tape<double> tape(false);
  auto x = T::from({1, 6}, std::vector<double>(6, -2.0));
  auto gain = T::from({6}, std::vector<double>(6, 1.0));
  auto bias = T::zeros({6});
  const auto y = tape.layer_norm(x, gain, bias);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(TapeOps, MatmulShape) {
  Tape<double> tape(false);
  const auto c = tape.matmul(T::zeros({2, 3}), T::zeros({3, 4}));
  EXPECT_EQ(c.shape(), (Shape{2, 4}));
}

TEST(TapeOps, ShapeMismatchNamesOpAndShapes) {
  Tape<double> tape(false);
  try {
    tape.matmul(T::zeros({2, 3}), T::zeros({4, 4}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(tape.add(T::zeros({2, 3}), T::zeros({2})), ShapeError);
}

TEST(TapeOps, LogSoftmaxIsLogOfSoftmax) {
  Tape<double> tape(false);
  const auto x = random_tensor({5, 7}, 1, false);
  const auto a = tape.softmax(x);
  const auto b = tape.log_softmax(x);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_NEAR(std::log(a.values()[i]), b.values()[i], 1e-12);
  }
}

TEST(Backward, SumGivesOnes) {
  auto x = T::from({3}, {1.0, -2.0, 5.0}, true);
  Tape<double> tape;
  tape.backward(tape.sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  auto x = T::from({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  tape.backward(tape.sum(tape.mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, AccumulatesUntilZeroGrad) {
  auto x = T::from({2}, {1.0, 2.0}, true);
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    tape.backward(tape.sum(tape.scale(x, 3.0)));
  }
  EXPECT_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossIsAnError) {
  auto x = T::from({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  const auto y = tape.scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, SharedInputReceivesBothContributions) {
  auto x = T::from({1}, {3.0}, true);
  Tape<double> tape;
  // x² + 5x -> 2x + 5 = 11
  tape.backward(tape.sum(tape.add(tape.mul(x, x), tape.scale(x, 5.0))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 11.0);
}

TEST(Backward, Linearity) {
  auto w = random_tensor({4, 3}, 2);
  const auto in = random_tensor({5, 4}, 3, false);
  auto f = [&](Tape<double>& t) { return t.sum(t.relu(t.matmul(in, w))); };
  auto g = [&](Tape<double>& t) { return t.sum(t.softmax(t.matmul(in, w))); };
  auto grad_of = [&](auto build) {
    w.zero_grad();
    Tape<double> t;
    t.backward(build(t));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  const auto gf = grad_of(f);
  const auto gg = grad_of(g);
  const auto gc = grad_of([&](Tape<double>& t) {
    return t.add(t.scale(f(t), 2.0), t.scale(g(t), -0.5));
  });
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], 2.0 * gf[i] - 0.5 * gg[i], 1e-12);
}

TEST(GradCheck, QuadraticFormIsNearlyExact) {
  auto x = random_tensor({6}, 4);
  const auto a = random_tensor({6, 6}, 5, false);
  ParameterList<double> params = {{"x", x}};
  const auto report = grad_check(
      [&](Tape<double>& t) {
        const auto col = t.reshape(x, {6, 1});
        return t.sum(t.mul(col, t.matmul(a, col)));
      },
      params, {.h = 1e-5, .tol = 1e-4});
  EXPECT_TRUE(report.pass);
  EXPECT_LT(report.max_rel_err, 1e-8);
  EXPECT_EQ(report.checked, 6u);
}

TEST(GradCheck, CorruptedGradientFails) {
  auto x = random_tensor({5}, 6);
  ParameterList<double> params = {{"x", x}};
  auto loss = [&] {
    double s = 0;
    for (double v : x.values()) s += v * v * v;
    return s;
  };
  auto doubled = [&] {
    std::vector<double> g;
    for (double v : x.values()) g.push_back(2.0 * 3.0 * v * v);
    return std::vector<std::vector<double>>{g};
  };
  const auto report = grad_check(loss, doubled, params);
  EXPECT_FALSE(report.pass);
  EXPECT_NEAR(report.max_rel_err, 0.5, 1e-4);
}

TEST(GradCheck, RestoresParametersExactly) {
  auto x = random_tensor({4}, 7);
  const std::vector<double> before(x.values().begin(), x.values().end());
  ParameterList<double> params = {{"x", x}};
  grad_check([&](Tape<double>& t) { return t.sum(t.mul(x, x)); }, params);
  EXPECT_EQ(std::vector<double>(x.values().begin(), x.values().end()), before);
}

// Random five-op graphs over the op set, checked against central differences.
class RandomGraph : public ::testing::TestWithParam<int> {};

TEST_P(RandomGraph, ReverseModeMatchesFiniteDifferences) {
  const int seed = GetParam();
  std::mt19937_64 rng(seed);
  auto a = random_tensor({3, 4}, rng());
  auto b = random_tensor({4, 4}, rng());
  auto gain = random_tensor({4}, rng());
  auto bias = random_tensor({4}, rng());
  auto table = random_tensor({6, 4}, rng());
  const std::vector<TokenId> ids = {1, 5, 1};
  const std::vector<TokenId> targets = {0, 3, 2};
  const std::vector<double> weights = {1.0, 0.5, 2.0};
  std::vector<int> ops(5);
  for (auto& op : ops) op = static_cast<int>(rng() % 9);
  auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::vector<std::uint8_t>{0, 1, 0, 0});
  ParameterList<double> params = {{"a", a}, {"b", b}, {"gain", gain}, {"bias", bias}, {"table", table}};
  const auto report = grad_check(
      [&](Tape<double>& t) {
        Tensor<double> x = t.add(a, t.embedding(table, ids, {3}));
        for (int op : ops) {
          switch (op) {
            case 0: x = t.matmul(x, b); break;
            case 1: x = t.layer_norm(x, gain, bias); break;
            case 2: x = t.softmax(x); break;
            case 3: x = t.mul(x, t.add(x, bias)); break;
            case 4: x = t.concat(std::vector<Tensor<double>>{t.slice(x, 2, 2), t.slice(x, 0, 2)}); break;
            case 5: x = t.masked_fill(x, mask, -3.0); break;
            case 6: x = t.matmul(t.matmul(x, t.transpose(x)), t.scale(x, 0.3)); break;
            case 7: x = t.scale(t.relu(t.add(x, bias)), 1.5); break;
            default: x = t.log_softmax(x); break;
          }
        }
        return t.pick_sum(t.log_softmax(x), targets, weights);
      },
      // Central differences of an O(10) loss carry ~1e-10 roundoff; the floor
      // keeps near-zero gradients from being judged on that noise.
      params, {.h = 1e-5, .tol = 1e-4, .floor = 1e-5});
  EXPECT_TRUE(report.pass) << "worst " << report.worst << " rel " << report.max_rel_err;
}

INSTANTIATE_TEST_SUITE_P(Seeds, RandomGraph, ::testing::Range(1, 21));

TEST(Dropout, ZeroRateIsIdentityAndRateScalesSurvivors) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({1000}, 8, false);
  Tape<double> tape(false);
  const auto same = tape.dropout(x, 0.0, rng);
  EXPECT_TRUE(same.shares_storage_with(x) ||
              std::equal(same.values().begin(), same.values().end(), x.values().begin()));
  const auto dropped = tape.dropout(x, 0.5, rng);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (dropped.values()[i] == 0.0) {
      ++zeros;
    } else {
      EXPECT_DOUBLE_EQ(dropped.values()[i], 2.0 * x.values()[i]);
    }
  }
  EXPECT_GT(zeros, 400u);
  EXPECT_LT(zeros, 600u);
}

TEST(GatherRows, PicksRowsAndScattersGradient) {
  auto x = T::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<std::size_t> rows = {2, 0, 2};
  Tape<double> tape;
  const auto g = tape.gather_rows(x, rows);
  EXPECT_EQ(g.shape(), (Shape{3, 2}));
  EXPECT_EQ(g.values()[0], 5.0);
  EXPECT_EQ(g.values()[2], 1.0);
  tape.backward(tape.sum(g));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()),
            (std::vector<double>{1, 1, 0, 0, 2, 2}));
}

}  // namespace
}  // namespace twopass
