#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fmnet/tensor.hpp"

using namespace fmnet;

TEST_CASE("zeros fill") {
    Tensor t = zeros(Shape{1, 1, 2, 2});
    REQUIRE(t.size() == 4);
    for (double v : t.data) CHECK(v == 0.0);
}

TEST_CASE("constant fill") {
    Tensor t = constant(Shape{2, 3}, 1.5);
    REQUIRE(t.size() == 6);
    for (double v : t.data) CHECK(v == 1.5);
}

TEST_CASE("seeded inits are bitwise deterministic") {
    Tensor a = uniform(Shape{4}, 0.0, 1.0, 7);
    Tensor b = uniform(Shape{4}, 0.0, 1.0, 7);
    CHECK(a.data == b.data);
    for (double v : a.data) {
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }

    Tensor g1 = gaussian(Shape{64}, 0.0, 1.0, 11);
    Tensor g2 = gaussian(Shape{64}, 0.0, 1.0, 11);
    CHECK(g1.data == g2.data);
    CHECK(gaussian(Shape{64}, 0.0, 1.0, 12).data != g1.data);
    CHECK(g1.all_finite());
}

TEST_CASE("invalid shapes rejected") {
    CHECK_THROWS_AS(zeros(Shape{0, 3}), ShapeError);
    CHECK_THROWS_AS(zeros(Shape{2, -1}), ShapeError);
    CHECK_THROWS_AS(zeros(Shape{1, 1, 1, 1, 1}), ShapeError);
    CHECK_THROWS_AS(zeros(Shape{}), ShapeError);
}

TEST_CASE("row-major flat index round trip") {
    const int N = 2, C = 3, H = 4, W = 5;
    Tensor t = zeros(Shape{N, C, H, W});
    long flat = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    CHECK(&t.at(n, c, h, w) == &t.data[(size_t)flat]);
                    CHECK(flat == ((((long)n * C + c) * H + h) * W + w));
                    ++flat;
                }
}

TEST_CASE("concat_channels basic") {
    Tensor a = uniform(Shape{1, 2, 4, 4}, -1, 1, 3);
    Tensor b = uniform(Shape{1, 3, 4, 4}, -1, 1, 4);
    Tensor c = concat_channels(a, b);
    CHECK(c.shape == Shape{1, 5, 4, 4});
    // leading block equals a, trailing equals b
    for (int ch = 0; ch < 2; ++ch)
        for (int h = 0; h < 4; ++h)
            for (int w = 0; w < 4; ++w)
                CHECK(c.at(0, ch, h, w) == a.at(0, ch, h, w));
    for (int ch = 0; ch < 3; ++ch)
        for (int h = 0; h < 4; ++h)
            for (int w = 0; w < 4; ++w)
                CHECK(c.at(0, 2 + ch, h, w) == b.at(0, ch, h, w));
}

TEST_CASE("concat_channels with zero-channel operand is identity") {
    Tensor x = uniform(Shape{2, 4, 4}, -1, 1, 9);
    Tensor empty(Shape{0, 4, 4}, {});
    Tensor c = concat_channels(x, empty);
    CHECK(c.shape == x.shape);
    CHECK(c.data == x.data);
}

TEST_CASE("concat_channels rejects mismatched spatial dims") {
    Tensor a = zeros(Shape{1, 2, 4, 4});
    Tensor b = zeros(Shape{1, 2, 4, 5});
    CHECK_THROWS_AS(concat_channels(a, b), ShapeError);
    Tensor c = zeros(Shape{2, 2, 4, 4});
    CHECK_THROWS_AS(concat_channels(a, c), ShapeError);
}

TEST_CASE("concat_channels random leading-block property") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const int ca = 1 + (int)rng.next_below(4);
        const int cb = 1 + (int)rng.next_below(4);
        const int h = 1 + (int)rng.next_below(5);
        const int w = 1 + (int)rng.next_below(5);
        Tensor a = uniform(Shape{ca, h, w}, -2, 2, rng.next_u64());
        Tensor b = uniform(Shape{cb, h, w}, -2, 2, rng.next_u64());
        Tensor c = concat_channels(a, b);
        REQUIRE(c.dim(0) == ca + cb);
        for (int ch = 0; ch < ca; ++ch)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    CHECK(c.at(ch, i, j) == a.at(ch, i, j));
    }
}
