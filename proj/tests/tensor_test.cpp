#include <gtest/gtest.h>

#include <cmath>

#include "membank/tensor.hpp"
#include "test_util.hpp"

using namespace membank;
using membank::testing::max_abs_diff;
using membank::testing::random_tensor;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor id = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(matmul(id, a), a);
}

TEST(Matmul, RowTimesColumn) {
  // 1*3 + 2*4
  const Tensor out = matmul(Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(2, 1, {3, 4}));
  ASSERT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_EQ(out[0], 11.0);
}

TEST(Matmul, ZeroMatrix) {
  const Tensor out = matmul(Tensor({2, 2}), random_tensor({2, 2}, 3));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] x [2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, Associative) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor a = random_tensor({3, 4}, seed), b = random_tensor({4, 5}, seed + 100),
                 c = random_tensor({5, 2}, seed + 200);
    EXPECT_LT(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-9);
  }
}

TEST(RowSoftmax, UniformRow) {
  const Tensor out = row_softmax(Tensor::matrix(1, 3, {0, 0, 0}));
  for (double v : out.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(RowSoftmax, LogTwoRow) {
  // exp(0) : exp(ln 2) = 1 : 2
  const Tensor out = row_softmax(Tensor::matrix(1, 2, {0, std::log(2.0)}));
  EXPECT_NEAR(out[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(out[1], 2.0 / 3.0, 1e-15);
}

TEST(RowSoftmax, SingleElementIsOne) {
  for (double x : {-700.0, -1.0, 0.0, 3.5, 700.0}) {
    EXPECT_EQ(row_softmax(Tensor::matrix(1, 1, {x}))[0], 1.0);
  }
}

TEST(RowSoftmax, RowsSumToOneAndShiftInvariant) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor a = random_tensor({4, 7}, seed, 20.0);
    const Tensor p = row_softmax(a);
    Tensor shifted = a;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 7; ++j) shifted.at(i, j) += 3.0 * static_cast<double>(i) - 11.0;
    const Tensor q = row_softmax(shifted);
    for (std::size_t i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(p.at(i, j), 0.0);
        sum += p.at(i, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    EXPECT_LT(max_abs_diff(p, q), 1e-9);
  }
}

TEST(RowSoftmax, MaskedColumnsAndRows) {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor out = masked_row_softmax(a, {true, false, true}, {true, false});
  EXPECT_EQ(out.at(0, 1), 0.0);
  EXPECT_NEAR(out.at(0, 0), 1.0 / (1.0 + std::exp(2.0)), 1e-15);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out.at(1, j), 0.0);
  EXPECT_THROW(masked_row_softmax(a, {false, false, false}, {}), ArgumentError);
}

TEST(Cosine, Basics) {
  const Tensor x = Tensor::vector({1, 0}), y = Tensor::vector({0, 1});
  EXPECT_EQ(cosine(x.data(), x.data()).value, 1.0);
  EXPECT_EQ(cosine(x.data(), y.data()).value, 0.0);
  // dot = 8, norms 3 and 3
  const Tensor a = Tensor::vector({1, 2, 2}), b = Tensor::vector({2, 1, 2});
  EXPECT_NEAR(cosine(a.data(), b.data()).value, 8.0 / 9.0, 1e-15);
}

TEST(Cosine, ZeroNormIsDegenerate) {
  const Tensor z = Tensor::vector({0, 0, 0}), a = Tensor::vector({1, 2, 3});
  const auto c = cosine(z.data(), a.data());
  EXPECT_EQ(c.value, 0.0);
  EXPECT_TRUE(c.degenerate);
  EXPECT_FALSE(cosine(a.data(), a.data()).degenerate);
}

TEST(Cosine, LengthMismatchThrows) {
  const Tensor a = Tensor::vector({1, 2}), b = Tensor::vector({1, 2, 3});
  EXPECT_THROW(cosine(a.data(), b.data()), ShapeError);
}

TEST(Cosine, SymmetricBoundedAndScaleInvariant) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor a = random_tensor({9}, seed), b = random_tensor({9}, seed + 1000);
    const double ab = cosine(a.data(), b.data()).value;
    EXPECT_EQ(ab, cosine(b.data(), a.data()).value);
    EXPECT_LE(std::abs(ab), 1.0 + 1e-12);
    Tensor ka = a;
    for (auto& v : ka.values()) v *= 0.37 + static_cast<double>(seed);
    EXPECT_NEAR(cosine(ka.data(), b.data()).value, ab, 1e-9);
  }
}

TEST(SpatialMean, Arithmetic) {
  const Tensor v({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(spatial_mean(v)[0], 2.5);
}

TEST(SpatialMean, ConstantAndSinglePosition) {
  const Tensor m = spatial_mean(Tensor({3, 2, 5}, 1.25));
  for (double v : m.values()) EXPECT_EQ(v, 1.25);
  const Tensor single = random_tensor({4, 1, 1}, 9);
  EXPECT_EQ(spatial_mean(single).values(), single.values());
}

namespace {
Tensor iota_4x4() {
  Tensor x({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i + 1);
  return x;
}

// Independent window reduction used to freeze expected values.
double window(const Tensor& x, std::size_t oy, std::size_t ox, bool take_max) {
  double acc = take_max ? x.at(0, 2 * oy, 2 * ox) : 0.0;
  for (std::size_t dy = 0; dy < 2; ++dy)
    for (std::size_t dx = 0; dx < 2; ++dx) {
      const double v = x.at(0, 2 * oy + dy, 2 * ox + dx);
      acc = take_max ? std::max(acc, v) : acc + v / 4.0;
    }
  return acc;
}
}  // namespace

TEST(Pool2d, AverageConstant) {
  const Tensor out = pool2d(Tensor({1, 4, 4}, 1.0), PoolKind::average, 2, 2);
  ASSERT_EQ(out.shape(), (Shape{1, 2, 2}));
  for (double v : out.values()) EXPECT_EQ(v, 1.0);
}

TEST(Pool2d, AverageAndMaxOnIota) {
  const Tensor x = iota_4x4();
  const Tensor avg = pool2d(x, PoolKind::average, 2, 2);
  const Tensor mx = pool2d(x, PoolKind::max, 2, 2);
  const double want_avg[4] = {3.5, 5.5, 11.5, 13.5};
  const double want_max[4] = {6, 8, 14, 16};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(window(x, i / 2, i % 2, false), want_avg[i]);
    EXPECT_EQ(window(x, i / 2, i % 2, true), want_max[i]);
    EXPECT_EQ(avg[i], want_avg[i]);
    EXPECT_EQ(mx[i], want_max[i]);
  }
}

TEST(Pool2d, FloorOutputSizeAndKernelTooLarge) {
  const Tensor out = pool2d(Tensor({2, 5, 7}), PoolKind::max, 3, 2);
  EXPECT_EQ(out.shape(), (Shape{2, 2, 3}));
  EXPECT_THROW(pool2d(Tensor({1, 2, 2}), PoolKind::average, 3, 1), ShapeError);
}

TEST(Pool2d, AveragePreservesMeanWhenTiling) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Tensor x = random_tensor({3, 8, 12}, seed, 5.0);
    EXPECT_NEAR(mean(pool2d(x, PoolKind::average, 2, 2)), mean(x), 1e-12);
    EXPECT_NEAR(mean(pool2d(x, PoolKind::average, 4, 4)), mean(x), 1e-12);
  }
}

TEST(FlattenWords, RowMajor) {
  const Tensor w = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const Tensor f = flatten_concat_words(w);
  EXPECT_EQ(f.values(), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(f.reshaped({2, 2}), w);
  const Tensor one = Tensor::matrix(1, 3, {5, 6, 7});
  EXPECT_EQ(flatten_concat_words(one).values(), one.values());
  const Tensor zeros = flatten_concat_words(Tensor({3, 2}));
  for (double v : zeros.values()) EXPECT_EQ(v, 0.0);
}

TEST(TensorConstruction, RejectsNonFiniteExternalData) {
  EXPECT_THROW(Tensor::from_external({2}, {1.0, std::nan("")}), ShapeError);
  EXPECT_THROW(Tensor::from_external({1}, {INFINITY}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}
