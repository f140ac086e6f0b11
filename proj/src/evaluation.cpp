#include "fmnet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace fmnet {

std::vector<double> default_iou_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 10; ++i) g.push_back(0.5 + 0.05 * i);
    return g;
}

std::vector<double> per_gt_best_iou(const std::vector<std::vector<Box>>& proposals_per_image,
                                    const std::vector<std::vector<Box>>& gts_per_image) {
    if (proposals_per_image.size() != gts_per_image.size())
        throw ShapeError("per_gt_best_iou: image count mismatch");
    std::vector<double> best;
    for (size_t img = 0; img < gts_per_image.size(); ++img) {
        for (const Box& g : gts_per_image[img]) {
            double b = 0.0;
            for (const Box& p : proposals_per_image[img]) b = std::max(b, box_iou(p, g));
            best.push_back(b);
        }
    }
    return best;
}

RecallCurve iou_recall_curve(const std::vector<std::vector<Box>>& proposals_per_image,
                             const std::vector<std::vector<Box>>& gts_per_image,
                             const std::vector<double>& grid) {
    if (grid.empty()) throw ParamError("iou_recall_curve: empty threshold grid");
    const std::vector<double> best = per_gt_best_iou(proposals_per_image, gts_per_image);
    if (best.empty())
        throw DegenerateInputError("iou_recall_curve: no ground truths (recall undefined)");

    RecallCurve c;
    c.thresholds = grid;
    for (double t : grid) {
        long hit = 0;
        for (double b : best) hit += (b >= t);
        c.recall.push_back(static_cast<double>(hit) / static_cast<double>(best.size()));
    }
    double s = 0;
    for (double r : c.recall) s += r;
    c.auc = s / static_cast<double>(c.recall.size());
    return c;
}

PrCurve average_precision(const std::vector<EvalDet>& dets,
                          const std::vector<std::vector<Box>>& gts_per_image, double iou_thresh) {
    long n_gt = 0;
    for (const auto& g : gts_per_image) n_gt += static_cast<long>(g.size());
    if (n_gt == 0) throw DegenerateInputError("average_precision: no ground truths");

    std::vector<int> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return dets[static_cast<size_t>(a)].score > dets[static_cast<size_t>(b)].score;
    });

    std::vector<std::vector<bool>> used(gts_per_image.size());
    for (size_t i = 0; i < used.size(); ++i) used[i].assign(gts_per_image[i].size(), false);

    PrCurve c;
    std::vector<bool> is_tp;
    long tp = 0, fp = 0;
    for (int oi : order) {
        const EvalDet& d = dets[static_cast<size_t>(oi)];
        bool matched = false;
        if (d.image >= 0 && d.image < static_cast<int>(gts_per_image.size())) {
            const auto& gts = gts_per_image[static_cast<size_t>(d.image)];
            double best = 0.0;
            int bg = -1;
            for (size_t gi = 0; gi < gts.size(); ++gi) {
                if (used[static_cast<size_t>(d.image)][gi]) continue;
                const double iou = box_iou(d.box, gts[gi]);
                if (iou >= iou_thresh && iou > best) {
                    best = iou;
                    bg = static_cast<int>(gi);
                }
            }
            if (bg >= 0) {
                used[static_cast<size_t>(d.image)][static_cast<size_t>(bg)] = true;
                matched = true;
            }
        }
        if (matched) ++tp; else ++fp;
        is_tp.push_back(matched);
        c.points.push_back(PrPoint{static_cast<double>(tp) / static_cast<double>(n_gt),
                                   static_cast<double>(tp) / static_cast<double>(tp + fp)});
    }

    // all-point interpolation: each true positive contributes the best
    // precision at or after its rank, weighted by one recall step
    const size_t n = c.points.size();
    std::vector<double> suffix_best(n + 1, 0.0);
    for (size_t i = n; i-- > 0;)
        suffix_best[i] = std::max(suffix_best[i + 1], c.points[i].precision);
    double ap = 0.0;
    for (size_t i = 0; i < n; ++i)
        if (is_tp[i]) ap += suffix_best[i] / static_cast<double>(n_gt);
    c.ap = ap;
    return c;
}

SizeBucketReport size_bucket_report(const std::vector<EvalDet>& dets,
                                    const std::vector<std::vector<Box>>& gts_per_image,
                                    double bucket_width, double max_size, double iou_thresh) {
    if (!(bucket_width > 0) || !(max_size > 0))
        throw ParamError("size_bucket_report: invalid bucket geometry");
    const int n_reg = static_cast<int>(std::ceil(max_size / bucket_width));
    SizeBucketReport r;
    r.bucket_width = bucket_width;
    r.max_size = max_size;
    r.hits.assign(static_cast<size_t>(n_reg) + 1, 0);
    r.misses.assign(static_cast<size_t>(n_reg) + 1, 0);

    for (size_t img = 0; img < gts_per_image.size(); ++img) {
        for (const Box& g : gts_per_image[img]) {
            int bucket = static_cast<int>(g.max_side() / bucket_width);
            if (g.max_side() >= max_size) bucket = n_reg; // overflow
            bool hit = false;
            for (const EvalDet& d : dets) {
                if (d.image != static_cast<int>(img)) continue;
                if (box_iou(d.box, g) >= iou_thresh) {
                    hit = true;
                    break;
                }
            }
            (hit ? r.hits : r.misses)[static_cast<size_t>(bucket)] += 1;
        }
    }
    return r;
}

std::string recall_curve_csv(const RecallCurve& c) {
    std::string out = "threshold,recall\n";
    char line[64];
    for (size_t i = 0; i < c.thresholds.size(); ++i) {
        std::snprintf(line, sizeof(line), "%.6f,%.6f\n", c.thresholds[i], c.recall[i]);
        out += line;
    }
    return out;
}

std::string pr_curve_csv(const PrCurve& c) {
    std::string out = "recall,precision\n";
    char line[64];
    for (const auto& p : c.points) {
        std::snprintf(line, sizeof(line), "%.6f,%.6f\n", p.recall, p.precision);
        out += line;
    }
    return out;
}

std::string size_report_csv(const SizeBucketReport& r) {
    std::string out = "bucket_lo,bucket_hi,hits,misses\n";
    char line[96];
    for (size_t i = 0; i < r.hits.size(); ++i) {
        const bool overflow = i + 1 == r.hits.size();
        const double lo = overflow ? r.max_size : r.bucket_width * static_cast<double>(i);
        if (overflow)
            std::snprintf(line, sizeof(line), "%.1f,inf,%ld,%ld\n", lo, r.hits[i], r.misses[i]);
        else
            std::snprintf(line, sizeof(line), "%.1f,%.1f,%ld,%ld\n", lo,
                          lo + r.bucket_width, r.hits[i], r.misses[i]);
        out += line;
    }
    return out;
}

// ---- svg ----

namespace {

constexpr int kW = 480, kH = 360, kMargin = 50;

double map_x(double v, double lo, double hi) {
    return kMargin + (v - lo) / (hi - lo) * (kW - 2 * kMargin);
}
double map_y(double v, double lo, double hi) {
    return kH - kMargin - (v - lo) / (hi - lo) * (kH - 2 * kMargin);
}

void svg_header(std::string& s, const std::string& title) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\">\n"
                  "<rect width=\"%d\" height=\"%d\" fill=\"white\"/>\n"
                  "<text x=\"%d\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">%s</text>\n",
                  kW, kH, kW, kH, kW / 2, title.c_str());
    s += buf;
}

void svg_axes(std::string& s, const std::string& xl, const std::string& yl) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n"
                  "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n"
                  "<text x=\"%d\" y=\"%d\" font-size=\"12\" text-anchor=\"middle\">%s</text>\n"
                  "<text x=\"14\" y=\"%d\" font-size=\"12\" text-anchor=\"middle\" "
                  "transform=\"rotate(-90 14 %d)\">%s</text>\n",
                  kMargin, kH - kMargin, kW - kMargin, kH - kMargin, kMargin, kMargin, kMargin,
                  kH - kMargin, kW / 2, kH - 12, xl.c_str(), kH / 2, kH / 2, yl.c_str());
    s += buf;
}

} // namespace

void write_line_plot_svg(const std::string& path, const std::vector<double>& xs,
                         const std::vector<double>& ys, const std::string& x_label,
                         const std::string& y_label, const std::string& title) {
    if (xs.size() != ys.size() || xs.empty()) throw ParamError("line plot: bad series");
    double xlo = xs[0], xhi = xs[0], ylo = 0.0, yhi = 1.0;
    for (double v : xs) {
        xlo = std::min(xlo, v);
        xhi = std::max(xhi, v);
    }
    for (double v : ys) yhi = std::max(yhi, v);
    if (xhi == xlo) xhi = xlo + 1;

    std::string s;
    svg_header(s, title);
    svg_axes(s, x_label, y_label);
    s += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    char pt[64];
    for (size_t i = 0; i < xs.size(); ++i) {
        std::snprintf(pt, sizeof(pt), "%.1f,%.1f ", map_x(xs[i], xlo, xhi), map_y(ys[i], ylo, yhi));
        s += pt;
    }
    s += "\"/>\n";
    char buf[192];
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-size=\"10\">%.3g</text>"
                  "<text x=\"%d\" y=\"%d\" font-size=\"10\">%.3g</text>\n",
                  kMargin, kH - kMargin + 14, xlo, kW - kMargin - 10, kH - kMargin + 14, xhi);
    s += buf;
    s += "</svg>\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write " + path);
    f << s;
}

void write_bar_plot_svg(const std::string& path, const std::vector<std::string>& labels,
                        const std::vector<double>& a, const std::vector<double>& b,
                        const std::string& series_a, const std::string& series_b,
                        const std::string& title) {
    if (labels.size() != a.size() || a.size() != b.size() || a.empty())
        throw ParamError("bar plot: bad series");
    double hi = 1.0;
    for (size_t i = 0; i < a.size(); ++i) hi = std::max({hi, a[i], b[i]});

    std::string s;
    svg_header(s, title);
    const double span = static_cast<double>(kW - 2 * kMargin) / static_cast<double>(labels.size());
    char buf[320];
    for (size_t i = 0; i < labels.size(); ++i) {
        const double x0 = kMargin + span * static_cast<double>(i);
        const double ha = (a[i] / hi) * (kH - 2 * kMargin);
        const double hb = (b[i] / hi) * (kH - 2 * kMargin);
        std::snprintf(buf, sizeof(buf),
                      "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"seagreen\"/>\n"
                      "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"indianred\"/>\n"
                      "<text x=\"%.1f\" y=\"%d\" font-size=\"10\" text-anchor=\"middle\">%s</text>\n",
                      x0 + span * 0.1, kH - kMargin - ha, span * 0.35, ha,
                      x0 + span * 0.55, kH - kMargin - hb, span * 0.35, hb,
                      x0 + span * 0.5, kH - kMargin + 14, labels[i].c_str());
        s += buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%d\" y=\"30\" width=\"10\" height=\"10\" fill=\"seagreen\"/>"
                  "<text x=\"%d\" y=\"39\" font-size=\"10\">%s</text>"
                  "<rect x=\"%d\" y=\"44\" width=\"10\" height=\"10\" fill=\"indianred\"/>"
                  "<text x=\"%d\" y=\"53\" font-size=\"10\">%s</text>\n",
                  kW - 140, kW - 126, series_a.c_str(), kW - 140, kW - 126, series_b.c_str());
    s += buf;
    s += "</svg>\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot write " + path);
    f << s;
}

} // namespace fmnet
