#include "duet/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace duet {
namespace {

// Frozen outputs of an independent python implementation of splitmix64
// (Steele/Lea/Flood reference constants) with the same seeding.
TEST(Rng, MatchesSplitmix64Reference) {
  Rng r(42);
  EXPECT_EQ(r.next_u64(), 0xbdd732262feb6e95ULL);
  EXPECT_EQ(r.next_u64(), 0x28efe333b266f103ULL);
  EXPECT_EQ(r.next_u64(), 0x47526757130f9f52ULL);
  EXPECT_EQ(r.next_u64(), 0x581ce1ff0e4ae394ULL);
}

TEST(Rng, Uniform01MatchesReference) {
  Rng r(42);
  EXPECT_DOUBLE_EQ(r.uniform01(), 0.7415648787718233);
  EXPECT_DOUBLE_EQ(r.uniform01(), 0.1599103928769201);
  EXPECT_DOUBLE_EQ(r.uniform01(), 0.27860113025513866);
  EXPECT_DOUBLE_EQ(r.uniform01(), 0.34419071652363753);
}

// Box-Muller cosine branch, two uniforms per draw, u1 = 1 - uniform01.
TEST(Rng, NormalMatchesReference) {
  Rng r(123);
  EXPECT_DOUBLE_EQ(r.normal(), 1.548891043049561);
  EXPECT_DOUBLE_EQ(r.normal(), -0.7664544901707104);
  EXPECT_DOUBLE_EQ(r.normal(), -0.7576146712326128);
}

TEST(Rng, UniformIntMatchesReferenceAndStaysInRange) {
  Rng r(5);
  const int64_t expected[8] = {8, 4, 3, 9, 1, 6, 9, 5};
  for (int64_t e : expected) EXPECT_EQ(r.uniform_int(0, 9), e);
  Rng r2(99);
  for (int i = 0; i < 1000; ++i) {
    int64_t v = r2.uniform_int(-3, 3);
    EXPECT_GE(v, -3);
    EXPECT_LE(v, 3);
  }
}

TEST(Rng, NormalMomentsAreSane) {
  Rng r(2024);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double z = r.normal();
    s += z;
    s2 += z * z;
  }
  double mean = s / n;
  double var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Rng, DeriveSeedMatchesReference) {
  EXPECT_EQ(derive_seed(7, "weights"), 0x0bdddb04f9e598b5ULL);
  EXPECT_EQ(derive_seed(7, uint64_t{3}), 0x953aeb70673e29cbULL);
}

TEST(Rng, StreamsAreDistinctAndStable) {
  EXPECT_NE(derive_seed(7, "weights"), derive_seed(7, "noise"));
  EXPECT_NE(derive_seed(7, "weights"), derive_seed(8, "weights"));
  EXPECT_EQ(derive_seed(7, "weights", 2), derive_seed(7, "weights", 2));
  EXPECT_NE(derive_seed(7, "weights", 2), derive_seed(7, "weights", 3));
}

TEST(Rng, TensorHelpersFillEveryElement) {
  Rng r(1);
  Tensor t = r.uniform_tensor({4, 5}, 2.0, 3.0);
  for (int64_t i = 0; i < t.numel(); ++i) {
    EXPECT_GE(t[i], 2.0);
    EXPECT_LT(t[i], 3.0);
  }
  Tensor z = r.normal_tensor({100});
  EXPECT_TRUE(z.all_finite());
}

}  // namespace
}  // namespace duet
