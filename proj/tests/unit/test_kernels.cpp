#include <gtest/gtest.h>
#include <omp.h>

#include <cmath>
#include <random>
#include <vector>

#include "twopass/kernels.hpp"

namespace twopass::kernels {
namespace {

template <typename T>
std::vector<T> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<T> out(n);
  for (auto& x : out) x = static_cast<T>(d(rng));
  return out;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

struct GemmCase {
  GemmOp op;
  std::size_t batch, m, n, k;
  bool broadcast_b;
};

class GemmSerialParallel : public ::testing::TestWithParam<GemmCase> {};

TEST_P(GemmSerialParallel, AgreeInDouble) {
  const auto c = GetParam();
  const auto a = random_values<double>(c.batch * c.m * c.k, 1);
  const auto b = random_values<double>((c.broadcast_b ? 1 : c.batch) * c.k * c.n, 2);
  for (bool accumulate : {false, true}) {
    auto s = random_values<double>(c.batch * c.m * c.n, 3);
    auto p = s;
    gemm<double>(Backend::serial, c.op, c.batch, c.m, c.n, c.k, a, b, s, accumulate);
    gemm<double>(Backend::parallel, c.op, c.batch, c.m, c.n, c.k, a, b, p, accumulate);
    EXPECT_LT(max_abs_diff(s, p), 1e-12);
  }
}

TEST_P(GemmSerialParallel, AgreeInFloat) {
  const auto c = GetParam();
  const auto a = random_values<float>(c.batch * c.m * c.k, 4);
  const auto b = random_values<float>((c.broadcast_b ? 1 : c.batch) * c.k * c.n, 5);
  std::vector<float> s(c.batch * c.m * c.n), p(s.size());
  gemm<float>(Backend::serial, c.op, c.batch, c.m, c.n, c.k, a, b, s, false);
  gemm<float>(Backend::parallel, c.op, c.batch, c.m, c.n, c.k, a, b, p, false);
  EXPECT_LT(max_abs_diff(s, p), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(
    Shapes, GemmSerialParallel,
    ::testing::Values(GemmCase{GemmOp::nn, 1, 2, 4, 3, false}, GemmCase{GemmOp::nn, 1, 37, 70, 19, false},
                      GemmCase{GemmOp::nt, 1, 37, 70, 19, false}, GemmCase{GemmOp::tn, 1, 37, 70, 19, false},
                      GemmCase{GemmOp::nn, 3, 5, 33, 8, false}, GemmCase{GemmOp::nt, 4, 9, 9, 16, false},
                      GemmCase{GemmOp::tn, 2, 64, 65, 7, false}, GemmCase{GemmOp::nn, 3, 6, 40, 5, true},
                      GemmCase{GemmOp::nt, 3, 6, 40, 5, true}, GemmCase{GemmOp::nn, 1, 130, 256, 64, false}));

TEST(Gemm, SmallProductByHand) {
  const std::vector<double> a = {1, 2, 3, 4, 5, 6};  // 2x3
  const std::vector<double> b = {1, 0, 0, 1, 1, 1};  // 3x2
  std::vector<double> c(4);
  for (Backend be : {Backend::serial, Backend::parallel}) {
    gemm<double>(be, GemmOp::nn, 1, 2, 2, 3, a, b, c, false);
    EXPECT_EQ(c, (std::vector<double>{4, 5, 10, 11}));
  }
}

TEST(Gemm, ParallelResultIndependentOfThreadCount) {
  const std::size_t m = 96, n = 200, k = 48;
  const auto a = random_values<float>(m * k, 6);
  const auto b = random_values<float>(n * k, 7);
  std::vector<float> one(m * n), four(m * n);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  gemm<float>(Backend::parallel, GemmOp::nt, 1, m, n, k, a, b, one, false);
  omp_set_num_threads(4);
  gemm<float>(Backend::parallel, GemmOp::nt, 1, m, n, k, a, b, four, false);
  omp_set_num_threads(saved);
  EXPECT_EQ(one, four);
}

TEST(Gemm, ShapeMismatchThrows) {
  std::vector<double> a(6), b(5), c(4);
  EXPECT_ANY_THROW(gemm<double>(Backend::serial, GemmOp::nn, 1, 2, 2, 3, a, b, c, false));
}

TEST(Softmax, RowsSumToOneAndMatchSerial) {
  const std::size_t rows = 17, cols = 300;
  const auto x = random_values<double>(rows * cols, 8);
  std::vector<double> s(x.size()), p(x.size()), ls(x.size());
  softmax_rows<double>(Backend::serial, rows, cols, x, s);
  softmax_rows<double>(Backend::parallel, rows, cols, x, p);
  log_softmax_rows<double>(Backend::parallel, rows, cols, x, ls);
  EXPECT_LT(max_abs_diff(s, p), 1e-15);
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      sum += p[r * cols + j];
      EXPECT_NEAR(ls[r * cols + j], std::log(p[r * cols + j]), 1e-6);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Softmax, UniformInput) {
  const std::vector<double> x(4, 0.0);
  std::vector<double> y(4);
  softmax_rows<double>(Backend::serial, 1, 4, x, y);
  for (double v : y) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, FullyMaskedRowIsZeroNotNan) {
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<double> x = {-inf, -inf, -inf};
  std::vector<double> y(3, 1.0);
  softmax_rows<double>(Backend::parallel, 1, 3, x, y);
  for (double v : y) EXPECT_EQ(v, 0.0);
}

TEST(SoftmaxBackward, SerialMatchesParallel) {
  const std::size_t rows = 9, cols = 50;
  const auto x = random_values<double>(rows * cols, 9);
  const auto gy = random_values<double>(rows * cols, 10);
  std::vector<double> y(x.size()), ly(x.size());
  softmax_rows<double>(Backend::serial, rows, cols, x, y);
  log_softmax_rows<double>(Backend::serial, rows, cols, x, ly);
  std::vector<double> s(x.size()), p(x.size()), ls(x.size()), lp(x.size());
  softmax_rows_backward<double>(Backend::serial, rows, cols, y, gy, s);
  softmax_rows_backward<double>(Backend::parallel, rows, cols, y, gy, p);
  log_softmax_rows_backward<double>(Backend::serial, rows, cols, ly, gy, ls);
  log_softmax_rows_backward<double>(Backend::parallel, rows, cols, ly, gy, lp);
  EXPECT_LT(max_abs_diff(s, p), 1e-13);
  EXPECT_LT(max_abs_diff(ls, lp), 1e-13);
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  const std::vector<double> x(8, 3.5), gain(8, 1.0), bias(8, 0.0);
  std::vector<double> y(8), mean(1), rstd(1);
  layer_norm_rows<double>(Backend::serial, 1, 8, x, gain, bias, 1e-6, y, mean, rstd);
  for (double v : y) EXPECT_EQ(v, 0.0);
  EXPECT_DOUBLE_EQ(mean[0], 3.5);
}

TEST(LayerNorm, SerialMatchesParallelForwardAndBackward) {
  const std::size_t rows = 33, cols = 64;
  const auto x = random_values<double>(rows * cols, 11);
  const auto gain = random_values<double>(cols, 12);
  const auto bias = random_values<double>(cols, 13);
  const auto gy = random_values<double>(rows * cols, 14);
  std::vector<double> ys(x.size()), yp(x.size()), ms(rows), mp(rows), rs(rows), rp(rows);
  layer_norm_rows<double>(Backend::serial, rows, cols, x, gain, bias, 1e-6, ys, ms, rs);
  layer_norm_rows<double>(Backend::parallel, rows, cols, x, gain, bias, 1e-6, yp, mp, rp);
  EXPECT_LT(max_abs_diff(ys, yp), 1e-13);
  std::vector<double> gxs(x.size()), gxp(x.size()), ggs(cols), ggp(cols), gbs(cols), gbp(cols);
  layer_norm_rows_backward<double>(Backend::serial, rows, cols, x, gain, ms, rs, gy, gxs, ggs, gbs);
  layer_norm_rows_backward<double>(Backend::parallel, rows, cols, x, gain, mp, rp, gy, gxp, ggp,
                                   gbp);
  EXPECT_LT(max_abs_diff(gxs, gxp), 1e-12);
  EXPECT_LT(max_abs_diff(ggs, ggp), 1e-12);
  EXPECT_LT(max_abs_diff(gbs, gbp), 1e-12);
}

}  // namespace
}  // namespace twopass::kernels
