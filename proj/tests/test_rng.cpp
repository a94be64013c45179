#include "doctest.h"
#include "tcae/rng.hpp"

#include <cmath>
#include <vector>

using namespace tcae;

TEST_CASE("identical seeds give identical streams") {
    auto a = RngStream::from_seed(42);
    auto b = RngStream::from_seed(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("different seeds diverge") {
    auto a = RngStream::from_seed(1);
    auto b = RngStream::from_seed(2);
    int same = 0;
    for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64();
    CHECK(same == 0);
}

TEST_CASE("split streams are independent of parent draws") {
    auto root = RngStream::from_seed(7);
    auto child1 = root.split("aug");
    root.next_u64();
    root.next_u64();
    auto child2 = RngStream::from_seed(7).split("aug");
    for (int i = 0; i < 16; ++i) CHECK(child1.next_u64() == child2.next_u64());
}

TEST_CASE("splits by different labels differ") {
    auto root = RngStream::from_seed(7);
    CHECK(root.split("a").next_u64() != root.split("b").next_u64());
    CHECK(root.split(std::uint64_t(0)).next_u64() != root.split(std::uint64_t(1)).next_u64());
}

TEST_CASE("uniform stays in [0,1) and covers the range") {
    auto r = RngStream::from_seed(3);
    double mn = 1.0, mx = 0.0, sum = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        mn = std::min(mn, u);
        mx = std::max(mx, u);
        sum += u;
    }
    CHECK(mn < 0.01);
    CHECK(mx > 0.99);
    CHECK(sum / n == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("normal has roughly standard moments") {
    auto r = RngStream::from_seed(11);
    const int n = 50000;
    double s1 = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        double x = r.normal();
        s1 += x;
        s2 += x * x;
    }
    CHECK(s1 / n == doctest::Approx(0.0).epsilon(0.05));
    CHECK(s2 / n == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("next_below is in range and roughly uniform") {
    auto r = RngStream::from_seed(5);
    std::vector<int> counts(10, 0);
    for (int i = 0; i < 10000; ++i) {
        auto v = r.next_below(10);
        REQUIRE(v < 10);
        counts[v]++;
    }
    for (int c : counts) CHECK(c > 800);
}
