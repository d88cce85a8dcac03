#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "carbq/random.hpp"

using carbq::Rng;

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto va = a.next();
        EXPECT_EQ(va, b.next());
        differs |= va != c.next();
    }
    EXPECT_TRUE(differs);
}

TEST(Rng, BelowStaysInRange) {
    Rng r(1);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const auto v = r.below(7);
        ASSERT_LT(v, 7u);
        ++hits[v];
    }
    for (int h : hits) {
        EXPECT_GT(h, 800);
        EXPECT_LT(h, 1200);
    }
}

TEST(Rng, UniformAndNormalMoments) {
    Rng r(2);
    const int n = 200000;
    double su = 0, sn = 0, sn2 = 0;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        const double z = r.normal();
        sn += z;
        sn2 += z * z;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsPermutationAndSeeded) {
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    auto a = v, b = v;
    Rng(9).shuffle(a);
    Rng(9).shuffle(b);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, v);
    std::sort(a.begin(), a.end());
    EXPECT_EQ(a, v);
}

TEST(Rng, DerivedStreamsDiffer) {
    EXPECT_NE(Rng::derive(5, 1), Rng::derive(5, 2));
    EXPECT_NE(Rng::derive(5, 1), Rng::derive(6, 1));
    EXPECT_EQ(Rng::derive(5, 1), Rng::derive(5, 1));
}
