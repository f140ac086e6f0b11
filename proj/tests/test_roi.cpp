#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fmnet/layers.hpp"
#include "fmnet/roi.hpp"
#include "testutil.hpp"

using namespace fmnet;

TEST_CASE("roi_max_pool quadrants of a 4x4 ramp") {
    Tensor feat = zeros(Shape{1, 4, 4});
    for (int i = 0; i < 16; ++i) feat.data[(size_t)i] = i + 1;
    RoiSpec spec{2, 2, 1.0};
    Tensor out = roi_max_pool(feat, Box{0, 0, 4, 4}, spec);
    CHECK(out.at(0, 0, 0) == 6.0);
    CHECK(out.at(0, 0, 1) == 8.0);
    CHECK(out.at(0, 1, 0) == 14.0);
    CHECK(out.at(0, 1, 1) == 16.0);
}

TEST_CASE("roi_max_pool single cell") {
    Tensor feat = uniform(Shape{2, 4, 4}, -1, 1, 3);
    RoiSpec spec{1, 1, 1.0};
    Tensor out = roi_max_pool(feat, Box{2, 1, 3, 2}, spec);
    CHECK(out.at(0, 0, 0) == feat.at(0, 1, 2));
    CHECK(out.at(1, 0, 0) == feat.at(1, 1, 2));
}

TEST_CASE("roi_max_pool full-map identity when cell aligned") {
    Tensor feat = uniform(Shape{3, 5, 7}, -1, 1, 5);
    RoiSpec spec{5, 7, 1.0};
    Tensor out = roi_max_pool(feat, Box{0, 0, 7, 5}, spec);
    REQUIRE(out.shape == feat.shape);
    CHECK(out.data == feat.data);
}

TEST_CASE("roi_max_pool rejects boxes off the map") {
    Tensor feat = zeros(Shape{1, 4, 4});
    RoiSpec spec{2, 2, 1.0};
    CHECK_THROWS_AS(roi_max_pool(feat, Box{10, 10, 12, 12}, spec), DegenerateInputError);
}

TEST_CASE("roi_max_pool agrees with the brute-force oracle on 100 random cases") {
    Rng rng(31);
    for (int t = 0; t < 100; ++t) {
        const int C = 1 + (int)rng.next_below(3);
        const int H = 4 + (int)rng.next_below(10);
        const int W = 4 + (int)rng.next_below(10);
        Tensor feat = uniform(Shape{C, H, W}, -2, 2, rng.next_u64());
        const double scale = (t % 3 == 0) ? 1.0 : (t % 3 == 1 ? 0.5 : 0.25);
        const double iw = W / scale, ih = H / scale;
        Box box{rng.uniform(0, iw * 0.8), rng.uniform(0, ih * 0.8), 0, 0};
        box.x2 = box.x1 + rng.uniform(1.0, iw - box.x1);
        box.y2 = box.y1 + rng.uniform(1.0, ih - box.y1);
        RoiSpec spec{1 + (int)rng.next_below(7), 1 + (int)rng.next_below(7), scale};
        Tensor got = roi_max_pool(feat, box, spec);
        Tensor want = oracle::roi_pool(feat, box, spec);
        REQUIRE(got.shape == want.shape);
        CHECK(got.data == want.data); // exact
    }
}

TEST_CASE("roi_max_pool backward conserves gradient mass") {
    Rng rng(37);
    for (int t = 0; t < 20; ++t) {
        Tensor feat = uniform(Shape{2, 8, 8}, -1, 1, rng.next_u64());
        Box box{1.0, 2.0, 7.5, 7.0};
        RoiSpec spec{3, 3, 1.0};
        Tensor g = uniform(Shape{2, 3, 3}, -1, 1, rng.next_u64());
        Tensor dx = roi_max_pool_backward(feat, box, spec, g);
        double sg = 0, sd = 0;
        for (double v : g.data) sg += v;
        for (double v : dx.data) sd += v;
        CHECK(sd == doctest::Approx(sg).epsilon(1e-12));
    }
}

TEST_CASE("roi_max_pool gradient check") {
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Tensor feat = uniform(Shape{2, 6, 6}, -1, 1, hash_key(seed, "roi-x"));
        for (size_t i = 0; i < feat.data.size(); ++i) feat.data[i] += 1e-3 * (double)i;
        Box box{0.7, 1.1, 5.3, 5.9};
        RoiSpec spec{3, 3, 1.0};
        auto fwd = [&](const Tensor& v) { return roi_max_pool(v, box, spec); };
        auto bwd = [&](const Tensor& v, const Tensor& g) {
            return roi_max_pool_backward(v, box, spec, g);
        };
        CHECK(gradient_check(fwd, bwd, feat, seed) <= 1e-4);
    }
}

TEST_CASE("expand_context_box") {
    Box b{10, 10, 20, 20};
    Box same = expand_context_box(b, 1.0, 100, 100);
    CHECK(same.x1 == 10.0);
    CHECK(same.y2 == 20.0);

    Box e = expand_context_box(b, 2.0, 100, 100);
    CHECK(e.x1 == doctest::Approx(5.0));
    CHECK(e.y1 == doctest::Approx(5.0));
    CHECK(e.x2 == doctest::Approx(25.0));
    CHECK(e.y2 == doctest::Approx(25.0));

    Box corner = expand_context_box(Box{0, 0, 20, 20}, 2.0, 30, 30);
    CHECK(corner.x1 == doctest::Approx(0.0));
    CHECK(corner.y1 == doctest::Approx(0.0));
    CHECK(corner.x2 == doctest::Approx(30.0));
    CHECK(corner.y2 == doctest::Approx(30.0));

    CHECK_THROWS_AS(expand_context_box(b, 0.5, 100, 100), ParamError);
}

TEST_CASE("expand_context_box preserves center when unclipped") {
    Rng rng(41);
    for (int t = 0; t < 30; ++t) {
        Box b{rng.uniform(30, 50), rng.uniform(30, 50), 0, 0};
        b.x2 = b.x1 + rng.uniform(2, 10);
        b.y2 = b.y1 + rng.uniform(2, 10);
        Box e = expand_context_box(b, rng.uniform(1.0, 2.0), 200, 200);
        CHECK(e.cx() == doctest::Approx(b.cx()));
        CHECK(e.cy() == doctest::Approx(b.cy()));
    }
}

TEST_CASE("normalize_roi_block") {
    Rng rng(43);
    Tensor block = uniform(Shape{3, 4, 4}, -1, 1, 43);
    Tensor n = normalize_roi_block(block);
    double sq = 0;
    for (double v : n.data) sq += v * v;
    CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-12);

    // scale invariance
    for (double alpha : {0.5, 2.0, 37.0}) {
        Tensor scaled = block;
        for (auto& v : scaled.data) v *= alpha;
        Tensor ns = normalize_roi_block(scaled);
        for (size_t i = 0; i < n.data.size(); ++i)
            CHECK(ns.data[i] == doctest::Approx(n.data[i]).epsilon(1e-12));
    }

    CHECK_THROWS_AS(normalize_roi_block(zeros(Shape{2, 3, 3})), DegenerateInputError);

    for (uint64_t seed = 1; seed <= 10; ++seed) {
        Tensor x = uniform(Shape{2, 3, 3}, 0.3, 1.3, hash_key(seed, "nrb"));
        auto fwd = [&](const Tensor& v) { return normalize_roi_block(v); };
        auto bwd = [&](const Tensor& v, const Tensor& g) {
            return normalize_roi_block_backward(v, g);
        };
        CHECK(gradient_check(fwd, bwd, x, seed) <= 1e-6);
    }
}
