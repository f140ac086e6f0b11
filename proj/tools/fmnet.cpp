#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fmnet/dataio.hpp"
#include "fmnet/evaluation.hpp"
#include "fmnet/inference.hpp"
#include "fmnet/layers.hpp"
#include "fmnet/model.hpp"
#include "fmnet/runconfig.hpp"
#include "fmnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace fmnet;

namespace {

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_file(config_path);
    for (const std::string& kv : overrides) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw ParamError("override must be key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

// Anchor coverage rule: geometric ladder from the smallest to the largest
// ground-truth side in the training data.
void fill_auto_scales(ModelConfig& mc, const Dataset& data, int n_scales) {
    if (!mc.branch_scales.empty()) return;
    double lo = 1e30, hi = 0;
    for (const auto& s : data)
        for (const Box& b : s.boxes) {
            lo = std::min(lo, b.min_side());
            hi = std::max(hi, b.max_side());
        }
    if (!(hi > 0)) {
        lo = 6;
        hi = 40;
    }
    mc.branch_scales = {geometric_scales(lo, hi, n_scales)};
}

void dump_detections(std::ostream& os, const std::string& image_id,
                     const std::vector<Detection>& dets) {
    char line[256];
    for (const auto& d : dets) {
        std::snprintf(line, sizeof(line), "%s %.6f %.6f %.6f %.6f %.6f %.6f\n", image_id.c_str(),
                      d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.score, d.source_scale);
        os << line;
    }
}

struct DumpRecord {
    std::string id;
    Box box;
    double score;
};

std::vector<DumpRecord> parse_dump(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open prediction file " + path);
    std::vector<DumpRecord> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream is(line);
        DumpRecord r;
        double scale;
        if (!(is >> r.id >> r.box.x1 >> r.box.y1 >> r.box.x2 >> r.box.y2 >> r.score >> scale))
            throw ParseError(path + ":" + std::to_string(line_no) + ": malformed detection line");
        out.push_back(r);
    }
    return out;
}

int cmd_gen(const std::string& config_path, const std::vector<std::string>& overrides,
            const std::string& out_dir) {
    RunConfig cfg = load_config(config_path, overrides);
    SynthConfig sc = cfg.synth_config();
    AnnotationSet ann = generate_synthetic_dataset(sc, out_dir);
    long boxes = 0;
    for (const auto& r : ann.records) boxes += static_cast<long>(r.boxes.size());
    std::cout << "wrote " << ann.records.size() << " images, " << boxes << " boxes ("
              << ann.skipped_objects << " placements skipped) to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& data_path, const std::string& out_path,
              const std::string& resume_path, const std::string& trace_path) {
    RunConfig cfg = load_config(config_path, overrides);
    AnnotationSet ann = parse_wider_annotations(data_path);
    Dataset data = load_dataset(ann, annotation_dir(data_path));
    TrainConfig tc = cfg.train_config();

    Model model;
    OptimizerState opt;
    int start_iter = 0;
    if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        model = std::move(ck.model);
        opt = make_optimizer_state(model);
        for (auto& [name, v] : opt.velocity) {
            auto wi = ck.extras.find("opt.v." + name + ".weight");
            if (wi != ck.extras.end()) v.weights = wi->second;
            auto bi = ck.extras.find("opt.v." + name + ".bias");
            if (v.has_bias && bi != ck.extras.end()) v.bias = bi->second;
        }
        auto it = ck.extra_config.find("trained_iters");
        if (it != ck.extra_config.end()) start_iter = std::stoi(it->second);
    } else {
        ModelConfig mc = cfg.model_config();
        fill_auto_scales(mc, data, cfg.get_int("anchor_scale_count"));
        model = build_model(mc, tc.seed);
        opt = make_optimizer_state(model);
    }

    TrainStats stats;
    try {
        stats = train(model, data, tc, &opt, start_iter);
    } catch (const NumericAbortError& e) {
        std::cerr << "training aborted: " << e.what() << " (rpn_cls=" << e.report.rpn_cls
                  << " rpn_reg=" << e.report.rpn_reg << " head_cls=" << e.report.head_cls
                  << " head_reg=" << e.report.head_reg << ")\n";
        return 2;
    }

    std::map<std::string, Tensor> extras;
    for (const auto& [name, v] : opt.velocity) {
        extras["opt.v." + name + ".weight"] = v.weights;
        if (v.has_bias) extras["opt.v." + name + ".bias"] = v.bias;
    }
    std::map<std::string, std::string> extra_cfg;
    extra_cfg["trained_iters"] = std::to_string(tc.total_iters);
    save_checkpoint(model, out_path, extras, extra_cfg);

    const std::string tpath = trace_path.empty() ? out_path + ".trace.csv" : trace_path;
    std::ofstream tf(tpath, std::ios::binary);
    if (!tf) throw FormatError("cannot write trace file " + tpath);
    tf << trace_csv(stats);

    std::cout << "trained " << (tc.total_iters - start_iter) << " iterations, checkpoint "
              << out_path << ", trace " << tpath << "\n";
    return 0;
}

int cmd_detect(const std::string& model_path, const std::string& image_path,
               const std::string& config_path, const std::vector<std::string>& overrides,
               const std::vector<double>& scales_flag, double min_side_flag,
               double max_side_flag) {
    RunConfig cfg = load_config(config_path, overrides);
    Checkpoint ck = load_checkpoint(model_path);
    Tensor image = read_image(image_path);

    PyramidSpec spec = cfg.pyramid_spec();
    if (!scales_flag.empty()) spec.scales = scales_flag;
    DetectOptions opt = cfg.detect_options();
    const double min_side = min_side_flag >= 0 ? min_side_flag : cfg.get_double("min_side");
    const double max_side = max_side_flag >= 0 ? max_side_flag : cfg.get_double("max_side");

    Tensor input = image;
    double fx = 1.0, fy = 1.0;
    if (min_side > 0) {
        input = preprocess_min_max_side(image, min_side, max_side);
        fx = static_cast<double>(input.dim(2)) / image.dim(2);
        fy = static_cast<double>(input.dim(1)) / image.dim(1);
    }

    std::vector<Detection> dets = detect_pyramid(ck.model, input, spec, opt);
    for (auto& d : dets)
        d.box = Box{d.box.x1 / fx, d.box.y1 / fy, d.box.x2 / fx, d.box.y2 / fy};
    dump_detections(std::cout, image_path, dets);
    return 0;
}

int cmd_propose(const std::string& model_path, const std::string& image_path,
                const std::string& data_path, const std::string& config_path,
                const std::vector<std::string>& overrides, int topk_flag) {
    RunConfig cfg = load_config(config_path, overrides);
    Checkpoint ck = load_checkpoint(model_path);
    const int k = topk_flag > 0 ? topk_flag : cfg.get_int("topk");

    auto emit = [&](const std::string& id, const Tensor& image) {
        auto props = propose_topk(ck.model, image, k);
        char line[256];
        for (const auto& p : props) {
            std::snprintf(line, sizeof(line), "%s %.6f %.6f %.6f %.6f %.6f %.6f\n", id.c_str(),
                          p.box.x1, p.box.y1, p.box.x2, p.box.y2, p.objectness, 1.0);
            std::cout << line;
        }
    };

    if (!image_path.empty()) {
        emit(image_path, read_image(image_path));
    } else if (!data_path.empty()) {
        AnnotationSet ann = parse_wider_annotations(data_path);
        const std::string base = annotation_dir(data_path);
        for (const auto& rec : ann.records) {
            fs::path p(rec.path);
            if (p.is_relative() && !base.empty()) p = fs::path(base) / p;
            emit(rec.path, read_image(p.string()));
        }
    } else {
        throw ParamError("propose: provide --image or --data");
    }
    return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& ann_path, const std::string& mode,
             double iou_thresh, int topk, const std::string& out_prefix) {
    AnnotationSet ann = parse_wider_annotations(ann_path);
    long n_gt = 0;
    for (const auto& r : ann.records) n_gt += static_cast<long>(r.boxes.size());
    if (n_gt == 0) {
        std::cerr << "eval: annotation set has zero ground-truth boxes; metrics undefined\n";
        return 1;
    }

    std::map<std::string, int> id_to_img;
    std::map<std::string, int> base_to_img;
    std::vector<std::vector<Box>> gts(ann.records.size());
    for (size_t i = 0; i < ann.records.size(); ++i) {
        id_to_img[ann.records[i].path] = static_cast<int>(i);
        base_to_img[fs::path(ann.records[i].path).filename().string()] = static_cast<int>(i);
        gts[i] = ann.records[i].boxes;
    }

    std::vector<DumpRecord> preds = parse_dump(pred_path);
    auto image_of = [&](const std::string& id) {
        auto it = id_to_img.find(id);
        if (it != id_to_img.end()) return it->second;
        auto bt = base_to_img.find(fs::path(id).filename().string());
        return bt == base_to_img.end() ? -1 : bt->second;
    };

    if (mode == "recall") {
        std::vector<std::vector<std::pair<double, Box>>> scored(gts.size());
        for (const auto& p : preds) {
            const int img = image_of(p.id);
            if (img >= 0) scored[static_cast<size_t>(img)].push_back({p.score, p.box});
        }
        std::vector<std::vector<Box>> proposals(gts.size());
        for (size_t i = 0; i < scored.size(); ++i) {
            std::stable_sort(scored[i].begin(), scored[i].end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            const size_t n = std::min<size_t>(scored[i].size(), static_cast<size_t>(topk));
            for (size_t j = 0; j < n; ++j) proposals[i].push_back(scored[i][j].second);
        }
        RecallCurve c = iou_recall_curve(proposals, gts);
        std::ofstream cf(out_prefix + "_recall.csv", std::ios::binary);
        cf << recall_curve_csv(c);
        write_line_plot_svg(out_prefix + "_recall.svg", c.thresholds, c.recall, "IoU threshold",
                            "recall", "IoU-to-Recall (top-" + std::to_string(topk) + ")");
        std::printf("%.6f\n", c.auc);
        return 0;
    }
    if (mode == "ap") {
        std::vector<EvalDet> dets;
        for (const auto& p : preds) {
            const int img = image_of(p.id);
            if (img >= 0) dets.push_back(EvalDet{img, p.box, p.score});
        }
        PrCurve c = average_precision(dets, gts, iou_thresh);
        std::ofstream cf(out_prefix + "_pr.csv", std::ios::binary);
        cf << pr_curve_csv(c);
        if (!c.points.empty()) {
            std::vector<double> xs, ys;
            for (const auto& p : c.points) {
                xs.push_back(p.recall);
                ys.push_back(p.precision);
            }
            write_line_plot_svg(out_prefix + "_pr.svg", xs, ys, "recall", "precision",
                                "Precision-Recall");
        }
        std::printf("%.6f\n", c.ap);
        return 0;
    }
    if (mode == "sizes") {
        std::vector<EvalDet> dets;
        for (const auto& p : preds) {
            const int img = image_of(p.id);
            if (img >= 0) dets.push_back(EvalDet{img, p.box, p.score});
        }
        SizeBucketReport r = size_bucket_report(dets, gts, 10, 50, iou_thresh);
        std::ofstream cf(out_prefix + "_sizes.csv", std::ios::binary);
        cf << size_report_csv(r);
        std::vector<std::string> labels;
        std::vector<double> hits, misses;
        for (size_t i = 0; i < r.hits.size(); ++i) {
            const bool overflow = i + 1 == r.hits.size();
            labels.push_back(overflow ? ">=50" : std::to_string(10 * i) + "-" + std::to_string(10 * (i + 1)));
            hits.push_back(static_cast<double>(r.hits[i]));
            misses.push_back(static_cast<double>(r.misses[i]));
        }
        write_bar_plot_svg(out_prefix + "_sizes.svg", labels, hits, misses, "hits", "misses",
                           "Hit/miss by object size");
        long hit = 0;
        for (long h : r.hits) hit += h;
        std::printf("%.6f\n", static_cast<double>(hit) / static_cast<double>(n_gt));
        return 0;
    }
    std::cerr << "eval: unknown mode '" << mode << "' (use ap, recall or sizes)\n";
    return 1;
}

int cmd_gradcheck(const std::string& fault_op) {
    const auto table = run_gradient_suite(fault_op);
    bool ok = true;
    std::printf("%-22s %14s  status\n", "op", "max_rel_err");
    for (const auto& row : table) {
        const bool pass = row.max_rel_err <= 1e-4;
        ok = ok && pass;
        std::printf("%-22s %14.3e  %s\n", row.name.c_str(), row.max_rel_err,
                    pass ? "OK" : "FAIL");
    }
    if (!ok) {
        std::cerr << "gradient verification failed\n";
        return 3;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"fmnet: a small two-stage detector lab for tiny-object experiments"};
    app.require_subcommand(1);

    std::string config_path, out_path, data_path, model_path, image_path, resume_path;
    std::string trace_path, pred_path, ann_path, mode = "ap", out_prefix = "eval", fault_op;
    std::vector<std::string> overrides;
    std::vector<double> scales_flag;
    double min_side_flag = -1, max_side_flag = -1, iou_thresh = 0.5;
    int topk = 1000, topk_propose = -1;

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    gen->add_option("--config", config_path, "key=value config file");
    gen->add_option("--set", overrides, "override config values (key=value)");
    gen->add_option("--out", out_path, "output directory")->required();

    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", config_path, "key=value config file");
    tr->add_option("--set", overrides, "override config values (key=value)");
    tr->add_option("--data", data_path, "annotation file")->required();
    tr->add_option("--out", out_path, "output checkpoint")->required();
    tr->add_option("--resume", resume_path, "checkpoint to continue from");
    tr->add_option("--trace", trace_path, "loss trace csv path");
    tr->add_option("--iters", [&overrides](const std::vector<std::string>& v) {
        overrides.push_back("iters=" + v[0]);
        return true;
    }, "total iterations (overrides config)");
    tr->add_option("--seed", [&overrides](const std::vector<std::string>& v) {
        overrides.push_back("seed=" + v[0]);
        return true;
    }, "training seed (overrides config)");
    tr->add_option("--variant", [&overrides](const std::vector<std::string>& v) {
        overrides.push_back("variant=" + v[0]);
        return true;
    }, "architecture variant (overrides config)");

    auto* det = app.add_subcommand("detect", "detect objects in one image");
    det->add_option("--model", model_path, "checkpoint")->required();
    det->add_option("--image", image_path, "input image (binary PPM)")->required();
    det->add_option("--config", config_path, "key=value config file");
    det->add_option("--set", overrides, "override config values (key=value)");
    det->add_option("--scales", scales_flag, "pyramid scales")->delimiter(',');
    det->add_option("--min-side", min_side_flag, "resize so the short side reaches this");
    det->add_option("--max-side", max_side_flag, "cap on the long side when resizing");

    auto* pro = app.add_subcommand("propose", "dump top-k proposals");
    pro->add_option("--model", model_path, "checkpoint")->required();
    pro->add_option("--image", image_path, "single input image");
    pro->add_option("--data", data_path, "annotation file (all images)");
    pro->add_option("--config", config_path, "key=value config file");
    pro->add_option("--set", overrides, "override config values (key=value)");
    pro->add_option("--topk", topk_propose, "proposals per image");

    auto* ev = app.add_subcommand("eval", "evaluate a prediction dump");
    ev->add_option("--pred", pred_path, "prediction dump file")->required();
    ev->add_option("--ann", ann_path, "annotation file")->required();
    ev->add_option("--mode", mode, "ap | recall | sizes");
    ev->add_option("--iou", iou_thresh, "matching IoU threshold");
    ev->add_option("--topk", topk, "proposal truncation for recall mode");
    ev->add_option("--out", out_prefix, "output file prefix");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference verification of every op");
    gc->add_option("--inject-fault", fault_op, "perturb one op's backward (test hook)")
        ->group("");

    auto* cfg_cmd = app.add_subcommand("config", "print all configuration keys and defaults");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen(config_path, overrides, out_path);
        if (tr->parsed())
            return cmd_train(config_path, overrides, data_path, out_path, resume_path, trace_path);
        if (det->parsed())
            return cmd_detect(model_path, image_path, config_path, overrides, scales_flag,
                              min_side_flag, max_side_flag);
        if (pro->parsed())
            return cmd_propose(model_path, image_path, data_path, config_path, overrides,
                               topk_propose);
        if (ev->parsed()) return cmd_eval(pred_path, ann_path, mode, iou_thresh, topk, out_prefix);
        if (gc->parsed()) return cmd_gradcheck(fault_op);
        if (cfg_cmd->parsed()) {
            std::cout << RunConfig().dump();
            return 0;
        }
    } catch (const NumericAbortError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
