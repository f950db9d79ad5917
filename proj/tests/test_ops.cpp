#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "edgert/ops.hpp"
#include "support/fixtures.hpp"

using namespace edgert;

namespace {

std::vector<float> uniform(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Lcg64 rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = rng.next_float(lo, hi);
  return v;
}

}  // namespace

TEST(RmsNorm, MatchesDoubleOracle) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto x = uniform(48, seed, -3, 3), w = uniform(48, seed + 100);
    const auto y = ops::rmsnorm(x, w, 1e-6f);
    double ss = 0;
    for (float v : x) ss += double(v) * v;
    const double r = 1.0 / std::sqrt(ss / 48 + 1e-6);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(y[i], x[i] * r * w[i], 1e-5);
  }
}

TEST(RmsNorm, RejectsBadInput) {
  std::vector<float> x(4, 1.0f), w(3, 1.0f), w4(4, 1.0f);
  EXPECT_THROW(ops::rmsnorm(x, w, 1e-6f), ShapeError);
  EXPECT_THROW(ops::rmsnorm(x, w4, 0.0f), ShapeError);
}

TEST(Rope, FusedAndDecomposedAgree) {
  const std::int64_t heads = 3, hd = 16;
  std::vector<std::int64_t> pos(37);
  std::iota(pos.begin(), pos.end(), 0);
  pos.back() = 4000;
  const auto x = uniform(pos.size() * heads * hd, 5, -4, 4);
  const auto a = ops::apply_rope(x, pos, heads, hd, 10000.0, ops::RopeVariant::fused);
  const auto b = ops::apply_rope(x, pos, heads, hd, 10000.0, ops::RopeVariant::decomposed);
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double(std::fabs(a[i] - b[i])));
  EXPECT_LE(worst, 1e-6);
}

TEST(Rope, MatchesRotationOracleAndPreservesNorms) {
  const std::int64_t hd = 8;
  std::vector<std::int64_t> pos = {0, 1, 7, 100};
  const auto x = uniform(pos.size() * hd, 9);
  const auto y = ops::apply_rope(x, pos, 1, hd, 500.0, ops::RopeVariant::fused);
  for (std::size_t t = 0; t < pos.size(); ++t) {
    double n0 = 0, n1 = 0;
    for (std::int64_t i = 0; i < hd / 2; ++i) {
      const double ang = double(pos[t]) * std::pow(500.0, -2.0 * double(i) / double(hd));
      const double lo = x[t * hd + i], hi = x[t * hd + i + hd / 2];
      EXPECT_NEAR(y[t * hd + i], lo * std::cos(ang) - hi * std::sin(ang), 1e-6);
      EXPECT_NEAR(y[t * hd + i + hd / 2], hi * std::cos(ang) + lo * std::sin(ang), 1e-6);
    }
    for (std::int64_t i = 0; i < hd; ++i) {
      n0 += double(x[t * hd + i]) * x[t * hd + i];
      n1 += double(y[t * hd + i]) * y[t * hd + i];
    }
    EXPECT_NEAR(n0, n1, 1e-5);
  }
  for (std::int64_t i = 0; i < hd; ++i) EXPECT_EQ(y[i], x[i]) << "position 0 is the identity";
}

TEST(Rope, RejectsOddHeadDim) {
  std::vector<float> x(3);
  std::vector<std::int64_t> pos = {0};
  EXPECT_THROW(ops::apply_rope(x, pos, 1, 3, 1e4, ops::RopeVariant::fused), ShapeError);
}

TEST(Gelu, ErfVariantMatchesDoubleOracle) {
  for (int i = -500; i <= 500; ++i) {
    const float x = float(i) / 100.0f;
    const double ref = 0.5 * double(x) * (1.0 + std::erf(double(x) / std::sqrt(2.0)));
    ASSERT_NEAR(ops::gelu_erf(x), ref, 1e-6);
  }
}

TEST(Gelu, TanhApproximationStaysClose) {
  double worst = 0;
  for (int i = -5000; i <= 5000; ++i) {
    const float x = float(i) / 1000.0f;
    worst = std::max(worst, double(std::fabs(ops::gelu_erf(x) - ops::gelu_tanh(x))));
  }
  EXPECT_LE(worst, 0.02);
  EXPECT_GT(worst, 0.0);
}

TEST(MaskedSoftmax, MaskedMassAndRowSums) {
  const std::int64_t rows = 50, cols = 33;
  const auto scores = uniform(rows * cols, 11, -30, 30);
  std::vector<char> m(rows * cols);
  Lcg64 rng(12);
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) m[r * cols + c] = c <= r % cols ? 1 : rng.next_below(2);
  std::unique_ptr<bool[]> mask(new bool[m.size()]);
  for (std::size_t i = 0; i < m.size(); ++i) mask[i] = m[i];
  const auto p = ops::masked_softmax(scores, std::span<const bool>(mask.get(), m.size()), cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    double sum = 0, masked = 0;
    for (std::int64_t c = 0; c < cols; ++c) {
      sum += p[r * cols + c];
      if (!m[r * cols + c]) masked += p[r * cols + c];
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_LE(masked, 1e-8);
  }
}

TEST(MaskedSoftmax, FullyMaskedRowIsDegenerate) {
  std::vector<float> s = {1, 2, 3, 4};
  bool mask[4] = {true, true, false, false};
  EXPECT_THROW(ops::masked_softmax(s, std::span<const bool>(mask, 4), 2), DegenerateRow);
  bool shorter[3] = {true, true, true};
  EXPECT_THROW(ops::masked_softmax(s, std::span<const bool>(shorter, 3), 2), ShapeError);
}

TEST(Argmax, TiesGoToLowestIndex) {
  std::vector<float> v = {0.5f, 2.0f, -1.0f, 2.0f, 2.0f};
  EXPECT_EQ(ops::argmax(v), 1);
  std::vector<float> flat(9, 0.0f);
  EXPECT_EQ(ops::argmax(flat), 0);
}
