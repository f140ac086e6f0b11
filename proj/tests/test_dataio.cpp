#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "fmnet/dataio.hpp"

using namespace fmnet;
namespace fs = std::filesystem;

static std::string temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("fmnet_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

static std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

TEST_CASE("ppm round trip") {
    const std::string dir = temp_dir("ppm");

    SUBCASE("single white pixel") {
        Tensor t = constant(Shape{3, 1, 1}, 1.0);
        write_image(t, dir + "/white.ppm");
        Tensor back = read_image(dir + "/white.ppm");
        REQUIRE(back.shape == Shape{3, 1, 1});
        for (double v : back.data) CHECK(v == 1.0);
    }
    SUBCASE("byte-quantized data is lossless") {
        Rng rng(3);
        Tensor t = zeros(Shape{3, 6, 9});
        for (auto& v : t.data) v = (double)(rng.next_below(256)) / 255.0;
        write_image(t, dir + "/q.ppm");
        Tensor back = read_image(dir + "/q.ppm");
        CHECK(back.shape == t.shape);
        CHECK(back.data == t.data);
    }
    SUBCASE("header dims match tensor dims") {
        Tensor t = constant(Shape{3, 4, 7}, 0.5);
        write_image(t, dir + "/d.ppm");
        Tensor back = read_image(dir + "/d.ppm");
        CHECK(back.dim(1) == 4);
        CHECK(back.dim(2) == 7);
    }
    SUBCASE("format errors") {
        std::ofstream f(dir + "/bad.ppm", std::ios::binary);
        f << "P5\n1 1\n255\nx";
        f.close();
        CHECK_THROWS_AS(read_image(dir + "/bad.ppm"), FormatError);

        std::ofstream g(dir + "/bad16.ppm", std::ios::binary);
        g << "P6\n1 1\n65535\nxxxxxx";
        g.close();
        CHECK_THROWS_AS(read_image(dir + "/bad16.ppm"), FormatError);

        std::ofstream h(dir + "/trunc.ppm", std::ios::binary);
        h << "P6\n2 2\n255\nxxx";
        h.close();
        CHECK_THROWS_AS(read_image(dir + "/trunc.ppm"), FormatError);
    }
}

TEST_CASE("annotation parsing") {
    SUBCASE("w/h conversion") {
        AnnotationSet a = parse_wider_annotations_text("a.ppm\n1\n10 20 30 40\n", "t");
        REQUIRE(a.records.size() == 1);
        REQUIRE(a.records[0].boxes.size() == 1);
        const Box& b = a.records[0].boxes[0];
        CHECK(b.x1 == 10);
        CHECK(b.y1 == 20);
        CHECK(b.x2 == 40);
        CHECK(b.y2 == 60);
    }
    SUBCASE("zero count") {
        AnnotationSet a = parse_wider_annotations_text("a.ppm\n0\n", "t");
        REQUIRE(a.records.size() == 1);
        CHECK(a.records[0].boxes.empty());
    }
    SUBCASE("placeholder line after zero count is tolerated") {
        AnnotationSet a =
            parse_wider_annotations_text("a.ppm\n0\n0 0 0 0 0 0 0 0 0 0 0\nb.ppm\n0\n", "t");
        REQUIRE(a.records.size() == 2);
        CHECK(a.records[0].boxes.empty());
        CHECK(a.records[1].path == "b.ppm");
    }
    SUBCASE("trailing attribute fields are ignored") {
        AnnotationSet a = parse_wider_annotations_text("a.ppm\n1\n10 20 30 40 0 0 0 0 0 0\n", "t");
        REQUIRE(a.records[0].boxes.size() == 1);
        CHECK(a.records[0].boxes[0].x2 == 40);
    }
    SUBCASE("degenerate boxes dropped with a count") {
        AnnotationSet a = parse_wider_annotations_text("a.ppm\n2\n10 20 0 40\n1 2 3 4\n", "t");
        CHECK(a.records[0].boxes.size() == 1);
        CHECK(a.dropped_boxes == 1);
    }
    SUBCASE("errors carry line numbers") {
        try {
            parse_wider_annotations_text("a.ppm\nxyz\n", "t");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("t:2") != std::string::npos);
        }
        try {
            parse_wider_annotations_text("a.ppm\n1\nnot a box\n", "t");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("t:3") != std::string::npos);
        }
        CHECK_THROWS_AS(parse_wider_annotations_text("a.ppm\n1\n1 2 3 4\na.ppm\n0\n", "t"),
                        ParseError);
        CHECK_THROWS_AS(parse_wider_annotations("/nonexistent/file.txt"), ParseError);
    }
}

TEST_CASE("synthetic dataset generation") {
    SynthConfig cfg;
    cfg.image_count = 3;
    cfg.image_size = 64;
    cfg.objects_min = 1;
    cfg.objects_max = 3;
    cfg.min_side = 6;
    cfg.max_side = 20;
    cfg.seed = 77;

    SUBCASE("deterministic output tree") {
        const std::string d1 = temp_dir("gen1"), d2 = temp_dir("gen2");
        AnnotationSet a1 = generate_synthetic_dataset(cfg, d1);
        AnnotationSet a2 = generate_synthetic_dataset(cfg, d2);
        REQUIRE(a1.records.size() == 3);
        for (const auto& rec : a1.records)
            CHECK(slurp(d1 + "/" + rec.path) == slurp(d2 + "/" + rec.path));
        CHECK(slurp(d1 + "/annotations.txt") == slurp(d2 + "/annotations.txt"));

        SynthConfig other = cfg;
        other.seed = 78;
        const std::string d3 = temp_dir("gen3");
        generate_synthetic_dataset(other, d3);
        CHECK(slurp(d1 + "/img_00000.ppm") != slurp(d3 + "/img_00000.ppm"));
    }
    SUBCASE("box sides respect the configured range") {
        const std::string d = temp_dir("gen4");
        AnnotationSet a = generate_synthetic_dataset(cfg, d);
        int boxes = 0;
        for (const auto& rec : a.records)
            for (const Box& b : rec.boxes) {
                ++boxes;
                CHECK(b.w() >= cfg.min_side - 1e-9);
                CHECK(b.w() <= cfg.max_side + 1e-9);
                CHECK(b.h() >= cfg.min_side - 1e-9);
                CHECK(b.h() <= cfg.max_side + 1e-9);
                CHECK(b.x1 >= 0);
                CHECK(b.x2 <= cfg.image_size);
            }
        CHECK(boxes >= 3);
        // parses back to the same boxes
        AnnotationSet back = parse_wider_annotations(d + "/annotations.txt");
        REQUIRE(back.records.size() == a.records.size());
        for (size_t i = 0; i < back.records.size(); ++i) {
            REQUIRE(back.records[i].boxes.size() == a.records[i].boxes.size());
            for (size_t j = 0; j < back.records[i].boxes.size(); ++j)
                CHECK(std::abs(back.records[i].boxes[j].x2 - a.records[i].boxes[j].x2) <= 1e-3);
        }
    }
    SUBCASE("zero objects allowed") {
        SynthConfig empty = cfg;
        empty.image_count = 1;
        empty.objects_min = 0;
        empty.objects_max = 0;
        const std::string d = temp_dir("gen5");
        AnnotationSet a = generate_synthetic_dataset(empty, d);
        REQUIRE(a.records.size() == 1);
        CHECK(a.records[0].boxes.empty());
    }
    SUBCASE("config validation") {
        SynthConfig bad = cfg;
        bad.image_size = 100; // not a multiple of 16
        CHECK_THROWS_AS(bad.validate(), ValidationError);
        bad = cfg;
        bad.max_side = 70; // >= image_size
        CHECK_THROWS_AS(generate_synthetic_dataset(bad, temp_dir("gen6")), ValidationError);
    }
}

TEST_CASE("dataset loading resolves relative paths and clips boxes") {
    SynthConfig cfg;
    cfg.image_count = 2;
    cfg.image_size = 64;
    cfg.max_side = 20;
    const std::string d = temp_dir("load");
    generate_synthetic_dataset(cfg, d);
    AnnotationSet ann = parse_wider_annotations(d + "/annotations.txt");
    Dataset data = load_dataset(ann, annotation_dir(d + "/annotations.txt"));
    REQUIRE(data.size() == 2);
    CHECK(data[0].image.shape == Shape{3, 64, 64});
}

static Model make_model() {
    ModelConfig cfg;
    cfg.variant = Variant::facemagnet;
    cfg.branch_scales = {geometric_scales(6, 24, 3)};
    return build_model(cfg, 5);
}

TEST_CASE("checkpoint round trip") {
    const std::string dir = temp_dir("ckpt");
    Model m = make_model();

    SUBCASE("f64 path is bitwise exact") {
        save_checkpoint(m, dir + "/m.fmnt");
        Checkpoint ck = load_checkpoint(dir + "/m.fmnt");
        CHECK(ck.model.config.variant == Variant::facemagnet);
        REQUIRE(ck.model.params.size() == m.params.size());
        for (const auto& [name, p] : m.params) {
            CHECK(ck.model.params.at(name).weights.data == p.weights.data);
            if (p.has_bias) CHECK(ck.model.params.at(name).bias.data == p.bias.data);
        }
    }
    SUBCASE("saving twice yields identical bytes") {
        save_checkpoint(m, dir + "/a.fmnt");
        save_checkpoint(m, dir + "/b.fmnt");
        CHECK(slurp(dir + "/a.fmnt") == slurp(dir + "/b.fmnt"));
    }
    SUBCASE("extras and config blob round trip") {
        std::map<std::string, Tensor> extras = {{"opt.v.x", constant(Shape{3}, 2.25)}};
        std::map<std::string, std::string> kv = {{"trained_iters", "123"}};
        save_checkpoint(m, dir + "/e.fmnt", extras, kv);
        Checkpoint ck = load_checkpoint(dir + "/e.fmnt");
        CHECK(ck.extra_config.at("trained_iters") == "123");
        CHECK(ck.extras.at("opt.v.x").data == extras.at("opt.v.x").data);
    }
    SUBCASE("f32 storage loads with reduced precision") {
        save_checkpoint(m, dir + "/f.fmnt", {}, {}, true);
        Checkpoint ck = load_checkpoint(dir + "/f.fmnt");
        const auto& a = m.params.at("backbone.b1.conv0").weights.data;
        const auto& b = ck.model.params.at("backbone.b1.conv0").weights.data;
        for (size_t i = 0; i < a.size(); ++i)
            CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-6));
    }
    SUBCASE("truncated file fails cleanly") {
        save_checkpoint(m, dir + "/t.fmnt");
        std::string bytes = slurp(dir + "/t.fmnt");
        std::ofstream f(dir + "/t2.fmnt", std::ios::binary);
        f.write(bytes.data(), (long)bytes.size() / 2);
        f.close();
        CHECK_THROWS_AS(load_checkpoint(dir + "/t2.fmnt"), FormatError);
    }
    SUBCASE("bad magic fails cleanly") {
        std::ofstream f(dir + "/junk.fmnt", std::ios::binary);
        f << "NOPE12345678";
        f.close();
        CHECK_THROWS_AS(load_checkpoint(dir + "/junk.fmnt"), FormatError);
    }
    SUBCASE("missing parameter is a validation error") {
        save_checkpoint(m, dir + "/v.fmnt");
        std::string bytes = slurp(dir + "/v.fmnt");
        // decrement the tensor count so the reader sees one record fewer
        {
            uint32_t blob_len = 0;
            for (int i = 0; i < 4; ++i)
                blob_len |= (uint32_t)(uint8_t)bytes[8 + i] << (8 * i);
            const size_t count_at = 12 + blob_len;
            uint32_t count = 0;
            for (int i = 0; i < 4; ++i)
                count |= (uint32_t)(uint8_t)bytes[count_at + i] << (8 * i);
            count -= 1;
            for (int i = 0; i < 4; ++i)
                bytes[count_at + i] = (char)((count >> (8 * i)) & 0xff);
        }
        std::ofstream f(dir + "/v2.fmnt", std::ios::binary);
        f.write(bytes.data(), (long)bytes.size());
        f.close();
        CHECK_THROWS_AS(load_checkpoint(dir + "/v2.fmnt"), ValidationError);
    }
}
