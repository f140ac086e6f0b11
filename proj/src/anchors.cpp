#include "fmnet/anchors.hpp"

#include <algorithm>
#include <cmath>

namespace fmnet {

double box_iou(const Box& a, const Box& b) {
    const double ix1 = std::max(a.x1, b.x1);
    const double iy1 = std::max(a.y1, b.y1);
    const double ix2 = std::min(a.x2, b.x2);
    const double iy2 = std::min(a.y2, b.y2);
    const double iw = ix2 - ix1, ih = iy2 - iy1;
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

Box clip_box(const Box& b, double img_w, double img_h) {
    Box c;
    c.x1 = std::min(std::max(b.x1, 0.0), img_w);
    c.y1 = std::min(std::max(b.y1, 0.0), img_h);
    c.x2 = std::min(std::max(b.x2, 0.0), img_w);
    c.y2 = std::min(std::max(b.y2, 0.0), img_h);
    return c;
}

AnchorGrid generate_anchor_grid(int grid_h, int grid_w, int feature_stride,
                                const std::vector<double>& scales) {
    if (grid_h < 1 || grid_w < 1) throw ParamError("anchor grid extents must be >= 1");
    if (feature_stride < 1) throw ParamError("feature stride must be >= 1");
    if (scales.empty()) throw ParamError("anchor scale list must be nonempty");
    for (double s : scales)
        if (!(s > 0.0)) throw ParamError("anchor scales must be > 0");

    AnchorGrid g;
    g.grid_h = grid_h;
    g.grid_w = grid_w;
    g.feature_stride = feature_stride;
    g.scales = scales;
    g.anchors.reserve(static_cast<size_t>(grid_h) * grid_w * scales.size());
    for (int row = 0; row < grid_h; ++row) {
        for (int col = 0; col < grid_w; ++col) {
            const double cx = (col + 0.5) * feature_stride;
            const double cy = (row + 0.5) * feature_stride;
            for (double s : scales)
                g.anchors.push_back(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
        }
    }
    return g;
}

RegressionTarget encode_box_targets(const Box& anchor, const Box& gt) {
    RegressionTarget t;
    t.tx = (gt.cx() - anchor.cx()) / anchor.w();
    t.ty = (gt.cy() - anchor.cy()) / anchor.h();
    t.tw = std::log(gt.w() / anchor.w());
    t.th = std::log(gt.h() / anchor.h());
    return t;
}

Box decode_box_targets(const Box& anchor, const RegressionTarget& t,
                       std::optional<std::pair<double, double>> image_wh) {
    const double tw = std::clamp(t.tw, -4.0, 4.0);
    const double th = std::clamp(t.th, -4.0, 4.0);
    const double cx = anchor.cx() + t.tx * anchor.w();
    const double cy = anchor.cy() + t.ty * anchor.h();
    const double w = anchor.w() * std::exp(tw);
    const double h = anchor.h() * std::exp(th);
    Box b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    if (image_wh) b = clip_box(b, image_wh->first, image_wh->second);
    return b;
}

MatchResult match_anchors(const AnchorGrid& grid, const std::vector<Box>& gts,
                          double lo, double hi) {
    if (!(0.0 <= lo && lo < hi && hi <= 1.0))
        throw ParamError("match thresholds must satisfy 0 <= lo < hi <= 1");

    const int n = grid.count();
    MatchResult m;
    m.labels.assign(static_cast<size_t>(n), AnchorLabel::negative);
    m.matched_gt.assign(static_cast<size_t>(n), -1);
    m.targets.assign(static_cast<size_t>(n), RegressionTarget{});
    if (gts.empty()) return m;

    std::vector<double> best_iou(static_cast<size_t>(n), 0.0);
    std::vector<int> best_gt(static_cast<size_t>(n), -1);
    std::vector<double> gt_best_iou(gts.size(), 0.0);
    std::vector<int> gt_best_anchor(gts.size(), -1);

    for (int a = 0; a < n; ++a) {
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            const double iou = box_iou(grid.anchors[static_cast<size_t>(a)], gts[gi]);
            if (iou > best_iou[static_cast<size_t>(a)]) {
                best_iou[static_cast<size_t>(a)] = iou;
                best_gt[static_cast<size_t>(a)] = static_cast<int>(gi);
            }
            if (iou > gt_best_iou[gi]) {
                gt_best_iou[gi] = iou;
                gt_best_anchor[gi] = a;
            }
        }
    }

    for (int a = 0; a < n; ++a) {
        const double iou = best_iou[static_cast<size_t>(a)];
        if (iou > hi)
            m.labels[static_cast<size_t>(a)] = AnchorLabel::positive;
        else if (iou < lo)
            m.labels[static_cast<size_t>(a)] = AnchorLabel::negative;
        else
            m.labels[static_cast<size_t>(a)] = AnchorLabel::ignore;
    }

    // Each ground truth forces its best-overlapping anchor positive so small
    // boxes cannot end up unmatched.
    for (size_t gi = 0; gi < gts.size(); ++gi) {
        const int a = gt_best_anchor[gi];
        if (a < 0 || gt_best_iou[gi] <= 0.0) continue;
        m.labels[static_cast<size_t>(a)] = AnchorLabel::positive;
        if (best_gt[static_cast<size_t>(a)] < 0)
            best_gt[static_cast<size_t>(a)] = static_cast<int>(gi);
    }

    for (int a = 0; a < n; ++a) {
        if (m.labels[static_cast<size_t>(a)] != AnchorLabel::positive) continue;
        const int gi = best_gt[static_cast<size_t>(a)];
        m.matched_gt[static_cast<size_t>(a)] = gi;
        m.targets[static_cast<size_t>(a)] =
            encode_box_targets(grid.anchors[static_cast<size_t>(a)], gts[static_cast<size_t>(gi)]);
    }
    return m;
}

} // namespace fmnet
