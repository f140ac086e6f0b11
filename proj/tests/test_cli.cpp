#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "fmnet/dataio.hpp"

using namespace fmnet;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code;
    std::string out;
};

std::string binary() {
    const char* b = std::getenv("FMNET_BIN");
    REQUIRE(b != nullptr);
    return b;
}

RunResult run(const std::string& args) {
    const std::string cmd = binary() + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    std::string out;
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof(buf), p)) > 0) out.append(buf, n);
    const int status = pclose(p);
    return {WEXITSTATUS(status), out};
}

std::string work_dir() {
    static std::string dir = [] {
        fs::path p = fs::temp_directory_path() / "fmnet_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p.string();
    }();
    return dir;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

const std::string kTinyOverrides =
    " --set variant=base --set anchor_scales=6,12,20 --set rpn_batch=32"
    " --set head_batch=16 --set train_proposals=30 --set synth_images=4"
    " --set synth_size=64 --set synth_max_side=20 --set iters=4 --set lr_drop_iter=3";

} // namespace

TEST_CASE("missing config file names the path") {
    RunResult r = run("train --config /no/such/config.cfg --data x --out y");
    CHECK(r.exit_code == 1);
    CHECK(r.out.find("/no/such/config.cfg") != std::string::npos);
}

TEST_CASE("unknown config key is rejected") {
    const std::string dir = work_dir();
    std::ofstream f(dir + "/bad.cfg");
    f << "not_a_key=3\n";
    f.close();
    RunResult r = run("gen --config " + dir + "/bad.cfg --out " + dir + "/x");
    CHECK(r.exit_code == 1);
    CHECK(r.out.find("not_a_key") != std::string::npos);
}

TEST_CASE("gen, train, detect, propose, eval round trip") {
    const std::string dir = work_dir();

    RunResult g = run("gen --out " + dir + "/data" + kTinyOverrides);
    REQUIRE(g.exit_code == 0);
    REQUIRE(fs::exists(dir + "/data/annotations.txt"));

    const std::string ann = dir + "/data/annotations.txt";

    SUBCASE("zero iterations keeps the seeded initialization") {
        RunResult t = run("train --data " + ann + " --out " + dir + "/init.fmnt" + kTinyOverrides +
                          " --set iters=0 --set lr_drop_iter=0");
        REQUIRE(t.exit_code == 0);
        Checkpoint ck = load_checkpoint(dir + "/init.fmnt");
        Model ref = build_model(ck.model.config, 1); // seed default 1
        for (const auto& [name, p] : ref.params)
            CHECK(p.weights.data == ck.model.params.at(name).weights.data);
    }

    SUBCASE("training is deterministic and the checkpoint reloads") {
        RunResult t1 = run("train --data " + ann + " --out " + dir + "/a.fmnt" + kTinyOverrides);
        REQUIRE(t1.exit_code == 0);
        RunResult t2 = run("train --data " + ann + " --out " + dir + "/b.fmnt" + kTinyOverrides);
        REQUIRE(t2.exit_code == 0);
        CHECK(slurp(dir + "/a.fmnt") == slurp(dir + "/b.fmnt"));
        CHECK(slurp(dir + "/a.fmnt.trace.csv") == slurp(dir + "/b.fmnt.trace.csv"));

        Checkpoint ck = load_checkpoint(dir + "/a.fmnt");
        CHECK(ck.extra_config.at("trained_iters") == "4");
        CHECK(!ck.extras.empty()); // optimizer velocity travels along

        SUBCASE("resume continues to the same bytes as a longer run") {
            RunResult full = run("train --data " + ann + " --out " + dir + "/full.fmnt" +
                                 kTinyOverrides + " --set iters=8");
            REQUIRE(full.exit_code == 0);
            RunResult res = run("train --data " + ann + " --resume " + dir + "/a.fmnt --out " +
                                dir + "/res.fmnt" + kTinyOverrides + " --set iters=8");
            REQUIRE(res.exit_code == 0);
            Checkpoint cf = load_checkpoint(dir + "/full.fmnt");
            Checkpoint cr = load_checkpoint(dir + "/res.fmnt");
            for (const auto& [name, p] : cf.model.params)
                CHECK(p.weights.data == cr.model.params.at(name).weights.data);
        }

        SUBCASE("detect output is deterministic and well-formed") {
            const std::string img = dir + "/data/img_00000.ppm";
            RunResult d1 = run("detect --model " + dir + "/a.fmnt --image " + img +
                               " --scales 1 --set score_thresh=0.0");
            RunResult d2 = run("detect --model " + dir + "/a.fmnt --image " + img +
                               " --scales 1 --set score_thresh=0.0");
            REQUIRE(d1.exit_code == 0);
            CHECK(d1.out == d2.out);
            if (!d1.out.empty()) {
                std::istringstream is(d1.out);
                std::string id;
                double x1, y1, x2, y2, score, scale;
                REQUIRE((is >> id >> x1 >> y1 >> x2 >> y2 >> score >> scale));
                CHECK(id == img);
            }
        }

        SUBCASE("propose dumps at most k boxes per image") {
            RunResult p = run("propose --model " + dir + "/a.fmnt --data " + ann + " --topk 20");
            REQUIRE(p.exit_code == 0);
            std::istringstream is(p.out);
            std::string line;
            std::map<std::string, int> counts;
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                counts[line.substr(0, line.find(' '))] += 1;
            }
            CHECK(counts.size() == 4);
            for (const auto& [id, n] : counts) CHECK(n <= 20);
        }

        SUBCASE("bad checkpoint path fails with exit 1") {
            RunResult d = run("detect --model /no/such.fmnt --image " + dir +
                              "/data/img_00000.ppm");
            CHECK(d.exit_code == 1);
        }
    }

    SUBCASE("eval on predictions equal to ground truth prints AP 1") {
        // craft a perfect prediction dump from the annotations
        AnnotationSet a = parse_wider_annotations(ann);
        std::ofstream f(dir + "/perfect.txt");
        for (const auto& rec : a.records)
            for (const Box& b : rec.boxes) {
                char line[256];
                std::snprintf(line, sizeof(line), "%s %.6f %.6f %.6f %.6f %.6f %.6f\n",
                              rec.path.c_str(), b.x1, b.y1, b.x2, b.y2, 1.0, 1.0);
                f << line;
            }
        f.close();
        RunResult e = run("eval --pred " + dir + "/perfect.txt --ann " + ann + " --mode ap --out " +
                          dir + "/ev");
        REQUIRE(e.exit_code == 0);
        CHECK(e.out.find("1.000000") != std::string::npos);
        CHECK(fs::exists(dir + "/ev_pr.csv"));
        CHECK(fs::exists(dir + "/ev_pr.svg"));

        RunResult rec = run("eval --pred " + dir + "/perfect.txt --ann " + ann +
                            " --mode recall --topk 1000 --out " + dir + "/ev");
        REQUIRE(rec.exit_code == 0);
        // dump rounding costs the exact-overlap grid point; everything below is full
        CHECK(std::strtod(rec.out.c_str(), nullptr) >= 10.0 / 11.0);
        CHECK(fs::exists(dir + "/ev_recall.csv"));
        CHECK(slurp(dir + "/ev_recall.csv").find("0.500000,1.000000") != std::string::npos);

        RunResult sz = run("eval --pred " + dir + "/perfect.txt --ann " + ann +
                           " --mode sizes --out " + dir + "/ev");
        REQUIRE(sz.exit_code == 0);
        CHECK(fs::exists(dir + "/ev_sizes.csv"));
        CHECK(fs::exists(dir + "/ev_sizes.svg"));
    }

    SUBCASE("eval with an empty prediction file prints AP 0") {
        std::ofstream f(dir + "/empty.txt");
        f.close();
        RunResult e = run("eval --pred " + dir + "/empty.txt --ann " + ann + " --mode ap --out " +
                          dir + "/ev0");
        REQUIRE(e.exit_code == 0);
        CHECK(e.out.find("0.000000") != std::string::npos);
    }

    SUBCASE("eval with zero ground truths exits 1") {
        std::ofstream f(dir + "/nogt.txt");
        f << "a.ppm\n0\n";
        f.close();
        std::ofstream p(dir + "/somepred.txt");
        p << "a.ppm 0 0 1 1 0.5 1\n";
        p.close();
        RunResult e = run("eval --pred " + dir + "/somepred.txt --ann " + dir +
                          "/nogt.txt --mode ap");
        CHECK(e.exit_code == 1);
        CHECK(e.out.find("zero") != std::string::npos);
    }
}

TEST_CASE("gradcheck command") {
    RunResult ok = run("gradcheck");
    CHECK(ok.exit_code == 0);
    // exactly one row per differentiable op
    for (const char* op : {"conv2d", "convtranspose2d", "maxpool2", "upsample", "fully_connected",
                           "relu", "softmax2", "l2_normalize_global", "roi_max_pool",
                           "binary_class_loss", "smooth_l1", "rpn_loss", "head_loss"}) {
        size_t first = ok.out.find(std::string(op) + " ");
        REQUIRE(first != std::string::npos);
        CHECK(ok.out.find(std::string(op) + " ", first + 1) == std::string::npos);
    }

    RunResult bad = run("gradcheck --inject-fault softmax2");
    CHECK(bad.exit_code == 3);
    CHECK(bad.out.find("FAIL") != std::string::npos);
}

TEST_CASE("config command prints every documented default") {
    RunResult r = run("config");
    REQUIRE(r.exit_code == 0);
    for (const char* key : {"variant=", "channels=", "iters=", "scales=", "synth_images="})
        CHECK(r.out.find(key) != std::string::npos);
}
