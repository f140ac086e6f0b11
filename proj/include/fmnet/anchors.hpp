#ifndef FMNET_ANCHORS_HPP
#define FMNET_ANCHORS_HPP

#include <optional>
#include <vector>

#include "fmnet/common.hpp"

namespace fmnet {

// Axis-aligned rectangle, corners inclusive-exclusive, pixel coordinates.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double w() const { return x2 - x1; }
    double h() const { return y2 - y1; }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
    double area() const { return w() * h(); }
    double min_side() const { return w() < h() ? w() : h(); }
    double max_side() const { return w() > h() ? w() : h(); }

    bool valid() const {
        return x1 < x2 && y1 < y2 && std::isfinite(x1) && std::isfinite(y1) &&
               std::isfinite(x2) && std::isfinite(y2);
    }
};

double box_iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double img_w, double img_h);

// Square anchors of each scale centered at ((col+0.5)*stride, (row+0.5)*stride).
// Anchor index = (row*grid_w + col)*|scales| + scale_idx.
struct AnchorGrid {
    int grid_h = 0, grid_w = 0;
    int feature_stride = 1;
    std::vector<double> scales;
    std::vector<Box> anchors;

    int count() const { return static_cast<int>(anchors.size()); }
    int scale_of(int anchor_idx) const {
        return anchor_idx % static_cast<int>(scales.size());
    }
};

AnchorGrid generate_anchor_grid(int grid_h, int grid_w, int feature_stride,
                                const std::vector<double>& scales);

// (tx,ty) center offsets normalized by anchor size, (tw,th) log size ratios.
struct RegressionTarget {
    double tx = 0, ty = 0, tw = 0, th = 0;
};

RegressionTarget encode_box_targets(const Box& anchor, const Box& gt);
// Log-ratio components are clamped to |t| <= 4 before exponentiation; the
// result is clipped to the image when a size is supplied.
Box decode_box_targets(const Box& anchor, const RegressionTarget& t,
                       std::optional<std::pair<double, double>> image_wh = std::nullopt);

enum class AnchorLabel : int8_t { negative = 0, positive = 1, ignore = -1 };

struct MatchResult {
    std::vector<AnchorLabel> labels;       // per anchor
    std::vector<int> matched_gt;           // per anchor, -1 unless positive
    std::vector<RegressionTarget> targets; // per anchor, meaningful on positives

    int count(AnchorLabel l) const {
        int n = 0;
        for (auto v : labels) n += (v == l);
        return n;
    }
};

// Max-IoU thresholding (strictly above hi positive, strictly below lo
// negative, in between ignore) plus a forced positive for each ground truth's
// best-overlapping anchor. Ties break toward the lowest index.
MatchResult match_anchors(const AnchorGrid& grid, const std::vector<Box>& gts,
                          double lo = 0.3, double hi = 0.7);

} // namespace fmnet

#endif
