#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fmnet/model.hpp"
#include "fmnet/trainer.hpp"

using namespace fmnet;

static ModelConfig small_cfg(Variant v) {
    ModelConfig c;
    c.variant = v;
    c.branch_scales = {geometric_scales(6, 40, 5)};
    if (v == Variant::facemagnet) c.use_context = true;
    return c;
}

TEST_CASE("config validation names the violated constraint") {
    ModelConfig c = small_cfg(Variant::base);
    c.channels = {8, 16, 32};
    CHECK_THROWS_AS(c.validate(), ValidationError);

    ModelConfig c2 = small_cfg(Variant::context);
    c2.use_context = false;
    CHECK_THROWS_AS(c2.validate(), ValidationError);

    ModelConfig c3 = small_cfg(Variant::base);
    c3.branch_scales = {{}};
    CHECK_THROWS_AS(c3.validate(), ValidationError);

    ModelConfig c4 = small_cfg(Variant::sizesplit);
    c4.branch_scales = {{8.0}, {16.0}, {32.0}};
    CHECK_THROWS_AS(c4.validate(), ValidationError);

    ModelConfig c5 = small_cfg(Variant::base);
    c5.loss_weights = LossWeights{0, 0, 0};
    CHECK_THROWS_AS(c5.validate(), ValidationError);
}

TEST_CASE("magnification geometry on a 256x256 input") {
    Tensor image = uniform(Shape{3, 256, 256}, 0, 1, 7);

    Model fm = build_model(small_cfg(Variant::facemagnet), 1);
    ForwardState st = forward_network(fm, image);
    CHECK(st.blocks[4].out.dim(1) == 16); // stride-16 backbone map
    CHECK(st.blocks[4].out.dim(2) == 16);
    CHECK(st.mag_rpn_out.dim(1) == 64); // stride-4 magnified map
    CHECK(st.mag_rpn_out.dim(2) == 64);

    auto rpns = rpn_outputs(fm, st);
    REQUIRE(rpns.size() == 1);
    CHECK(rpns[0].feature_stride == 4);
    CHECK(rpns[0].objectness.shape == Shape{10, 64, 64});
    CHECK(rpns[0].reg.shape == Shape{20, 64, 64});

    Model base = build_model(small_cfg(Variant::base), 1);
    auto rb = forward_rpn(base, image);
    REQUIRE(rb.size() == 1);
    CHECK(rb[0].feature_stride == 16);
    CHECK(rb[0].objectness.shape == Shape{10, 16, 16});
    CHECK(rb[0].reg.shape == Shape{20, 16, 16});

    // anchor site count ratio is exactly 16
    CHECK(rpns[0].grid_h * rpns[0].grid_w == 16 * rb[0].grid_h * rb[0].grid_w);
}

TEST_CASE("stride bookkeeping for every variant") {
    Tensor image = uniform(Shape{3, 64, 64}, 0, 1, 3);
    for (Variant v : {Variant::base, Variant::context, Variant::skipface, Variant::sizesplit,
                      Variant::facemagnet}) {
        Model m = build_model(small_cfg(v), 2);
        auto rpns = forward_rpn(m, image);
        const auto info = branch_info(m.config);
        REQUIRE(rpns.size() == info.size());
        for (size_t b = 0; b < rpns.size(); ++b) {
            CHECK(64 / rpns[b].grid_h == rpns[b].feature_stride);
            CHECK(64 / rpns[b].grid_w == rpns[b].feature_stride);
            CHECK(rpns[b].feature_stride == info[b].stride);
            CHECK(rpns[b].objectness.dim(0) == 2 * (int)rpns[b].scales.size());
            CHECK(rpns[b].reg.dim(0) == 4 * (int)rpns[b].scales.size());
        }
    }
}

TEST_CASE("sizesplit runs two RPN branches at strides 8 and 16") {
    Model m = build_model(small_cfg(Variant::sizesplit), 5);
    auto rpns = forward_rpn(m, uniform(Shape{3, 64, 64}, 0, 1, 9));
    REQUIRE(rpns.size() == 2);
    CHECK(rpns[0].feature_stride == 8);
    CHECK(rpns[1].feature_stride == 16);
}

TEST_CASE("parameter count ordering across variants") {
    const long base = build_model(small_cfg(Variant::base), 1).parameter_count();
    const long context = build_model(small_cfg(Variant::context), 1).parameter_count();
    const long facemagnet = build_model(small_cfg(Variant::facemagnet), 1).parameter_count();
    const long sizesplit = build_model(small_cfg(Variant::sizesplit), 1).parameter_count();
    CHECK(context > base);
    CHECK(sizesplit > facemagnet);
}

TEST_CASE("deterministic build") {
    Model a = build_model(small_cfg(Variant::facemagnet), 42);
    Model b = build_model(small_cfg(Variant::facemagnet), 42);
    REQUIRE(a.params.size() == b.params.size());
    for (const auto& [name, p] : a.params) {
        CHECK(p.weights.data == b.params.at(name).weights.data);
        if (p.has_bias) CHECK(p.bias.data == b.params.at(name).bias.data);
    }
    Model c = build_model(small_cfg(Variant::facemagnet), 43);
    CHECK(c.params.at("backbone.b1.conv0").weights.data !=
          a.params.at("backbone.b1.conv0").weights.data);
}

TEST_CASE("head outputs are pure and shaped per proposal") {
    Model m = build_model(small_cfg(Variant::context), 11);
    Tensor image = uniform(Shape{3, 64, 64}, 0, 1, 12);
    ForwardState st = forward_network(m, image);

    std::vector<Box> one = {Box{10, 10, 30, 30}};
    HeadOutput o1 = forward_heads(m, st, one);
    REQUIRE(o1.kept.size() == 1);
    CHECK(o1.joint.prob_pos.size() == 1);
    CHECK(o1.joint.reg.size() == 1);
    CHECK(o1.joint.prob_pos[0] > 0.0);
    CHECK(o1.joint.prob_pos[0] < 1.0);

    std::vector<Box> dup = {Box{10, 10, 30, 30}, Box{10, 10, 30, 30}};
    HeadOutput o2 = forward_heads(m, st, dup);
    REQUIRE(o2.kept.size() == 2);
    CHECK(o2.joint.prob_pos[0] == o2.joint.prob_pos[1]);
    CHECK(o2.joint.reg[0] == o2.joint.reg[1]);
    CHECK(o2.joint.prob_pos[0] == o1.joint.prob_pos[0]);

    // proposals fully outside the image are dropped with a count
    std::vector<Box> off = {Box{10, 10, 30, 30}, Box{-50, -50, -10, -10}};
    HeadOutput o3 = forward_heads(m, st, off);
    CHECK(o3.kept.size() == 1);
    CHECK(o3.dropped == 1);
}

TEST_CASE("facemagnet pools RoIs from the magnified stride-4 map") {
    ModelConfig cfg = small_cfg(Variant::facemagnet);
    const auto info = branch_info(cfg);
    CHECK(info[0].roi_spatial_scale == doctest::Approx(0.25));
    // an 8 px box covers 2x2 cells there, sub-cell at stride 16
    CHECK(std::ceil(8.0 * info[0].roi_spatial_scale) == 2.0);
    CHECK(8.0 / 16.0 < 1.0);
}

// End-to-end gradient: with the iteration plan frozen, the analytic gradient
// of the total loss w.r.t. sampled weights must match central differences.
TEST_CASE("end-to-end gradient vs finite differences per variant") {
    Tensor image = uniform(Shape{3, 32, 32}, 0.0, 1.0, 21);
    // one bright blob so matching produces positives
    for (int c = 0; c < 3; ++c)
        for (int y = 10; y < 20; ++y)
            for (int x = 12; x < 22; ++x) image.at(c, y, x) = 0.95;
    std::vector<Box> gts = {Box{12, 10, 22, 20}};

    TrainConfig tc;
    tc.rpn_batch = 16;
    tc.head_batch = 8;
    tc.train_proposals = 20;

    for (int which = 0; which < 6; ++which) {
        const Variant v = which < 5 ? static_cast<Variant>(which) : Variant::context;
        CAPTURE(which);
        ModelConfig cfg = small_cfg(v);
        cfg.branch_scales = {geometric_scales(6, 24, 3)};
        if (which == 5) cfg.context_merge_1x1 = true; // shared-stack merge path
        Model m = build_model(cfg, 33);

        ForwardState st = forward_network(m, image);
        ImagePlan plan = plan_iteration(m, st, gts, tc, hash_key(7, "fd-plan", (uint64_t)v));
        StepResult sr = execute_plan(m, st, plan);
        REQUIRE(std::isfinite(sr.report.total));

        std::vector<std::string> probes = {"backbone.b1.conv0", "backbone.b2.conv1"};
        if (v == Variant::sizesplit) probes = {"backbone.b1.conv0", "small.b3.conv0", "big.b4.conv0"};
        if (v == Variant::facemagnet) probes.push_back("mag.roi");
        if (v == Variant::skipface) probes.push_back("skip.head.reduce4");
        if (which == 5) probes.push_back("head.merge");

        Rng rng(55);
        const double h = 1e-5;
        for (const std::string& name : probes) {
            REQUIRE(sr.grads.count(name) == 1);
            const Tensor& gw = sr.grads.at(name).weights;
            for (int probe = 0; probe < 3; ++probe) {
                const size_t ci = rng.next_below(gw.data.size());
                Model mp = m;
                mp.params.at(name).weights.data[ci] += h;
                const double lp = plan_loss(mp, gts, image, plan).total;
                mp.params.at(name).weights.data[ci] -= 2 * h;
                const double lm = plan_loss(mp, gts, image, plan).total;
                const double fd = (lp - lm) / (2 * h);
                const double a = gw.data[ci];
                const double err = std::abs(a - fd) / std::max(1e-8, std::abs(a) + std::abs(fd));
                CAPTURE(name);
                CAPTURE(ci);
                CHECK(err <= 1e-3);
            }
        }
    }
}
