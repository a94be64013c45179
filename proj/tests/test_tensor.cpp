#include "doctest.h"
#include "tcae/tensor.hpp"

#include <vector>

using namespace tcae;

TEST_CASE("backward of sum of squares") {
    // f(x) = sum x^2, x = [1,2] -> grad [2,4]
    auto x = Tensor::leaf({2}, {1.0f, 2.0f}, true);
    auto loss = sum_all(square(x));
    backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
    CHECK(x.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("backward requires scalar loss") {
    auto x = Tensor::leaf({2}, {1.0f, 2.0f}, true);
    auto y = square(x);
    CHECK_THROWS_AS(backward(y), ConfigError);
}

TEST_CASE("backward twice on the same graph is an error") {
    auto x = Tensor::leaf({2}, {1.0f, 2.0f}, true);
    auto loss = sum_all(square(x));
    backward(loss);
    CHECK_THROWS_AS(backward(loss), ConfigError);
}

TEST_CASE("parameter detached from the loss keeps zero grad") {
    auto x = Tensor::leaf({2}, {1.0f, 2.0f}, true);
    auto y = Tensor::leaf({2}, {3.0f, 4.0f}, true);
    auto loss = sum_all(square(x));
    backward(loss);
    CHECK(y.grad().empty());  // never touched
}

TEST_CASE("detach blocks gradient flow") {
    auto x = Tensor::leaf({3}, {1.0f, 2.0f, 3.0f}, true);
    auto y = square(x).detach();
    CHECK(!y.requires_grad());
    auto z = sum_all(mul(y, y));
    CHECK(!z.requires_grad());
}

TEST_CASE("matmul against identity") {
    auto I = Tensor::leaf({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto rng = RngStream::from_seed(1);
    auto B = Tensor::randn({3, 4}, rng);
    auto C = matmul(I, B);
    for (std::size_t i = 0; i < B.values().size(); ++i) CHECK(C.values()[i] == B.values()[i]);
}

TEST_CASE("matmul matches triple-loop oracle") {
    auto rng = RngStream::from_seed(2);
    auto A = Tensor::randn({5, 7}, rng);
    auto B = Tensor::randn({7, 3}, rng);
    auto C = matmul(A, B);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 3; ++j) {
            float acc = 0;
            for (int k = 0; k < 7; ++k) acc += A.at({i, k}) * B.at({k, j});
            CHECK(C.at({i, j}) == doctest::Approx(acc).epsilon(1e-6));
        }
}

TEST_CASE("matmul with empty contraction gives zeros") {
    auto A = Tensor::zeros({2, 0});
    auto B = Tensor::zeros({0, 2});
    auto C = matmul(A, B);
    REQUIRE(C.shape() == Shape{2, 2});
    for (float v : C.values()) CHECK(v == 0.0f);
}

TEST_CASE("matmul rejects dimension mismatch") {
    auto A = Tensor::zeros({2, 3});
    auto B = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(matmul(A, B), ConfigError);
}

TEST_CASE("softmax of uniform logits") {
    auto x = Tensor::leaf({4}, {1.5f, 1.5f, 1.5f, 1.5f});
    auto y = softmax(x, -1);
    for (float v : y.values()) CHECK(v == doctest::Approx(0.25f));
}

TEST_CASE("softmax is stabilized against overflow") {
    auto x = Tensor::leaf({2}, {1000.0f, 0.0f});
    auto y = softmax(x, -1);
    CHECK(y.values()[0] == doctest::Approx(1.0f));
    CHECK(y.values()[1] == doctest::Approx(0.0f));
}

TEST_CASE("softmax rows form a simplex on random input") {
    auto rng = RngStream::from_seed(3);
    auto x = Tensor::randn({6, 9}, rng, 3.0f);
    auto y = softmax(x, -1);
    for (int r = 0; r < 6; ++r) {
        float s = 0;
        for (int c = 0; c < 9; ++c) {
            float v = y.at({r, c});
            CHECK(v >= 0.0f);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0f).epsilon(1e-6));
    }
}

TEST_CASE("conv2d with 1x1 identity kernel is the identity") {
    auto rng = RngStream::from_seed(4);
    auto x = Tensor::randn({1, 1, 5, 5}, rng);
    auto w = Tensor::leaf({1, 1, 1, 1}, {1.0f});
    auto y = conv2d(x, w, Tensor(), 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.values().size(); ++i)
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]));
}

TEST_CASE("conv2d matches the direct six-loop oracle") {
    auto rng = RngStream::from_seed(5);
    auto x = Tensor::randn({1, 2, 6, 6}, rng);
    auto w = Tensor::randn({3, 2, 3, 3}, rng);
    const std::int64_t stride = 1, pad = 1;
    auto y = conv2d(x, w, Tensor(), stride, pad);
    REQUIRE(y.shape() == Shape{1, 3, 6, 6});
    for (int o = 0; o < 3; ++o)
        for (int oy = 0; oy < 6; ++oy)
            for (int ox = 0; ox < 6; ++ox) {
                double acc = 0;
                for (int c = 0; c < 2; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            int iy = oy * stride + ky - pad;
                            int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6) continue;
                            acc += double(x.at({0, c, iy, ix})) * double(w.at({o, c, ky, kx}));
                        }
                CHECK(y.at({0, o, oy, ox}) == doctest::Approx(acc).epsilon(1e-5));
            }
}

TEST_CASE("conv2d shape arithmetic: stride 2, k=3, p=1 on 8x8 gives 4x4") {
    auto x = Tensor::zeros({1, 1, 8, 8});
    auto w = Tensor::zeros({1, 1, 3, 3});
    auto y = conv2d(x, w, Tensor(), 2, 1);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
}

TEST_CASE("conv2d rejects kernel larger than padded input") {
    auto x = Tensor::zeros({1, 1, 2, 2});
    auto w = Tensor::zeros({1, 1, 5, 5});
    CHECK_THROWS_AS(conv2d(x, w, Tensor(), 1, 1), ConfigError);
}

TEST_CASE("non-finite forward output fails fast naming the op") {
    auto x = Tensor::leaf({1}, {1000.0f});
    try {
        auto y = exp(x);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("exp") != std::string::npos);
    }
}

TEST_CASE("layer_norm output has zero mean and unit variance before affine") {
    auto rng = RngStream::from_seed(6);
    auto x = Tensor::randn({8, 32}, rng, 2.5f);
    auto y = layer_norm(x, Tensor(), Tensor());
    for (int r = 0; r < 8; ++r) {
        double mean = 0, var = 0;
        for (int c = 0; c < 32; ++c) mean += y.at({r, c});
        mean /= 32;
        for (int c = 0; c < 32; ++c) {
            double d = y.at({r, c}) - mean;
            var += d * d;
        }
        var /= 32;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("reshape is metadata-only and shares the buffer") {
    auto x = Tensor::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    auto y = reshape(x, {3, 2});
    CHECK(y.values().data() == x.values().data());
    CHECK(y.at({2, 1}) == 6.0f);
}

TEST_CASE("grid_merge then grid_split is the exact identity") {
    auto rng = RngStream::from_seed(7);
    auto x = Tensor::randn({2, 16, 5}, rng);
    auto y = grid_split(grid_merge(x, 2), 2);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.values().size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("grid_merge gathers 2x2 blocks in row-major block order") {
    // 4x4 grid of tokens with d=1, values = grid index
    std::vector<float> vals(16);
    for (int i = 0; i < 16; ++i) vals[std::size_t(i)] = float(i);
    auto x = Tensor::leaf({1, 16, 1}, std::move(vals));
    auto y = grid_merge(x, 2);
    REQUIRE(y.shape() == Shape{1, 4, 4});
    // first merged token covers grid positions (0,0),(0,1),(1,0),(1,1)
    CHECK(y.at({0, 0, 0}) == 0.0f);
    CHECK(y.at({0, 0, 1}) == 1.0f);
    CHECK(y.at({0, 0, 2}) == 4.0f);
    CHECK(y.at({0, 0, 3}) == 5.0f);
    // second merged token starts at grid column 2
    CHECK(y.at({0, 1, 0}) == 2.0f);
}

TEST_CASE("broadcast add reduces gradients over expanded dims") {
    auto x = Tensor::leaf({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto b = Tensor::leaf({3}, {10, 20, 30}, true);
    auto loss = sum_all(add(x, b));
    backward(loss);
    for (float g : x.grad()) CHECK(g == 1.0f);
    for (float g : b.grad()) CHECK(g == 2.0f);  // summed over rows
}

TEST_CASE("slice and concat round-trip") {
    auto rng = RngStream::from_seed(8);
    auto x = Tensor::randn({2, 5, 3}, rng);
    auto a = slice(x, 1, 0, 2);
    auto b = slice(x, 1, 2, 5);
    auto y = concat<float>({a, b}, 1);
    REQUIRE(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.values().size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("sum_axis keepdim") {
    auto x = Tensor::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    auto s = sum_axis(x, 1, true);
    REQUIRE(s.shape() == Shape{2, 1});
    CHECK(s.at({0, 0}) == 6.0f);
    CHECK(s.at({1, 0}) == 15.0f);
}

TEST_CASE("gather_rows picks and scatter-adds") {
    auto x = Tensor::leaf({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    auto y = gather_rows(x, {2, 0, 2});
    REQUIRE(y.shape() == Shape{3, 2});
    CHECK(y.at({0, 0}) == 5.0f);
    CHECK(y.at({1, 1}) == 2.0f);
    auto loss = sum_all(y);
    backward(loss);
    CHECK(x.grad()[0] == 1.0f);  // row 0 used once
    CHECK(x.grad()[4] == 2.0f);  // row 2 used twice
    CHECK(x.grad()[2] == 0.0f);  // row 1 unused
}

TEST_CASE("NoGradGuard suppresses graph recording") {
    auto x = Tensor::leaf({2}, {1.0f, 2.0f}, true);
    NoGradGuard ng;
    auto y = sum_all(square(x));
    CHECK(!y.requires_grad());
}
