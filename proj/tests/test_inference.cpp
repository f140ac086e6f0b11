#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fmnet/inference.hpp"
#include "testutil.hpp"

using namespace fmnet;

TEST_CASE("nms examples") {
    Detection a{Box{0, 0, 10, 10}, 0.9, 1};
    CHECK(nms({a}, 0.3).size() == 1);

    Detection b{Box{0, 0, 10, 10}, 0.8, 1};
    auto kept = nms({b, a}, 0.3);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);

    Detection c{Box{50, 50, 60, 60}, 0.1, 1};
    CHECK(nms({a, b, c}, 0.3).size() == 2);
    CHECK(nms({}, 0.3).empty());
    CHECK_THROWS_AS(nms({a}, 1.5), ParamError);
}

TEST_CASE("nms matches the quadratic reference on 1000 random boxes") {
    Rng rng(61);
    std::vector<Detection> dets;
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 1000; ++i) {
        Box b{rng.uniform(0, 90), rng.uniform(0, 90), 0, 0};
        b.x2 = b.x1 + rng.uniform(2, 30);
        b.y2 = b.y1 + rng.uniform(2, 30);
        const double s = rng.uniform(0, 1);
        dets.push_back(Detection{b, s, 1});
        boxes.push_back(b);
        scores.push_back(s);
    }
    for (double thresh : {0.3, 0.5, 0.7}) {
        auto got = nms_indices(boxes, scores, thresh);
        auto want = oracle::nms(boxes, scores, thresh);
        CHECK(got == want);
    }
}

static Model tiny_model(Variant v, uint64_t seed) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.branch_scales = {geometric_scales(6, 24, 3)};
    if (v == Variant::facemagnet) cfg.use_context = false;
    return build_model(cfg, seed);
}

TEST_CASE("propose_topk structure on an untrained model") {
    Model m = tiny_model(Variant::base, 71);
    Tensor image = uniform(Shape{3, 64, 64}, 0, 1, 72);

    auto p50 = propose_topk(m, image, 50);
    CHECK(p50.size() <= 50);
    for (const auto& p : p50) {
        CHECK(p.box.x1 >= 0);
        CHECK(p.box.y1 >= 0);
        CHECK(p.box.x2 <= 64);
        CHECK(p.box.y2 <= 64);
        CHECK(p.box.w() > 0);
        CHECK(p.box.h() > 0);
    }
    // scores descending
    for (size_t i = 1; i < p50.size(); ++i) CHECK(p50[i - 1].objectness >= p50[i].objectness);

    auto p1 = propose_topk(m, image, 1);
    REQUIRE(p1.size() == 1);
    CHECK(p1[0].objectness == p50[0].objectness);

    // larger k extends the list without reordering the prefix
    auto p20 = propose_topk(m, image, 20);
    REQUIRE(p20.size() == 20);
    for (size_t i = 0; i < p20.size(); ++i) {
        CHECK(p20[i].box.x1 == p50[i].box.x1);
        CHECK(p20[i].objectness == p50[i].objectness);
    }
}

TEST_CASE("detect_single_scale output contract") {
    Model m = tiny_model(Variant::facemagnet, 81);
    Tensor image = uniform(Shape{3, 64, 64}, 0, 1, 82);

    DetectOptions opt;
    opt.score_thresh = 0.0; // untrained scores hover near 0.5
    opt.proposals = 40;
    auto dets = detect_single_scale(m, image, opt);
    for (size_t i = 1; i < dets.size(); ++i) CHECK(dets[i - 1].score >= dets[i].score);
    for (const auto& d : dets) {
        CHECK(d.box.x1 >= 0);
        CHECK(d.box.x2 <= 64);
    }

    DetectOptions strict = opt;
    strict.score_thresh = 1.0;
    CHECK(detect_single_scale(m, image, strict).empty());
}

TEST_CASE("pyramid with a singleton scale equals single-scale detection") {
    Model m = tiny_model(Variant::base, 91);
    Tensor image = uniform(Shape{3, 64, 64}, 0, 1, 92);
    DetectOptions opt;
    opt.score_thresh = 0.0;
    opt.proposals = 30;

    auto single = detect_single_scale(m, image, opt);
    auto pyr = detect_pyramid(m, image, PyramidSpec{{1.0}}, opt);
    REQUIRE(single.size() == pyr.size());
    for (size_t i = 0; i < single.size(); ++i) {
        CHECK(single[i].score == pyr[i].score);
        CHECK(single[i].box.x1 == pyr[i].box.x1);
        CHECK(pyr[i].source_scale == 1.0);
    }
}

TEST_CASE("pyramid maps boxes back by the resampling ratio") {
    Model m = tiny_model(Variant::base, 101);
    Tensor image = uniform(Shape{3, 64, 64}, 0, 1, 102);
    DetectOptions opt;
    opt.score_thresh = 0.0;
    opt.proposals = 30;

    // scale 2 resamples 64 -> 128 exactly, so mapped boxes are halved
    Tensor up = resample_nearest(image, 128, 128);
    auto at_scale = detect_single_scale(m, up, opt);
    auto pyr = detect_pyramid(m, image, PyramidSpec{{2.0}}, opt);
    REQUIRE(pyr.size() == at_scale.size());
    for (size_t i = 0; i < pyr.size(); ++i) {
        CHECK(pyr[i].box.x1 == doctest::Approx(at_scale[i].box.x1 / 2));
        CHECK(pyr[i].box.y2 == doctest::Approx(at_scale[i].box.y2 / 2));
        CHECK(pyr[i].source_scale == 2.0);
    }
}

TEST_CASE("joint pyramid suppression leaves no overlapping pairs") {
    Model m = tiny_model(Variant::base, 111);
    Tensor image = uniform(Shape{3, 64, 64}, 0, 1, 112);
    DetectOptions opt;
    opt.score_thresh = 0.0;
    opt.proposals = 30;
    auto dets = detect_pyramid(m, image, PyramidSpec{{1.0, 2.0}}, opt);
    for (size_t i = 0; i < dets.size(); ++i)
        for (size_t j = i + 1; j < dets.size(); ++j)
            CHECK(box_iou(dets[i].box, dets[j].box) <= 0.3);
}

TEST_CASE("default pyramid scales") {
    PyramidSpec spec;
    REQUIRE(spec.scales.size() == 3);
    CHECK(spec.scales[0] == 1.0);
    CHECK(spec.scales[1] == 1.5);
    CHECK(spec.scales[2] == 2.0);
}

TEST_CASE("pyramid sizing rounds to multiples of 16") {
    auto [h1, w1] = pyramid_size(128, 128, 1.5);
    CHECK(h1 == 192);
    CHECK(w1 == 192);
    auto [h2, w2] = pyramid_size(100, 60, 1.0);
    CHECK(h2 % 16 == 0);
    CHECK(w2 % 16 == 0);
    auto [h3, w3] = pyramid_size(16, 16, 0.1);
    CHECK(h3 == 16); // never collapses below one backbone cell
    CHECK(w3 == 16);
}

TEST_CASE("min/max side preprocessing") {
    Tensor image = uniform(Shape{3, 64, 128}, 0, 1, 121);
    Tensor out = preprocess_min_max_side(image, 128, 0);
    CHECK(out.dim(1) == 128);
    CHECK(out.dim(2) == 256);

    Tensor capped = preprocess_min_max_side(image, 128, 160);
    CHECK(capped.dim(2) <= 160);

    Tensor same = preprocess_min_max_side(image, 0, 0);
    CHECK(same.dim(1) == 64);
}
