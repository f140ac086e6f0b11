#include "fmnet/inference.hpp"

#include <algorithm>
#include <cmath>

namespace fmnet {

namespace {

bool det_order(const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
    if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
    return a.box.y2 < b.box.y2;
}

} // namespace

std::vector<int> nms_indices(const std::vector<Box>& boxes, const std::vector<double>& scores,
                             double iou_thresh, int max_keep) {
    if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
        throw ParamError("nms threshold must be in (0,1)");
    std::vector<int> order(boxes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    });
    std::vector<int> kept;
    for (int i : order) {
        bool keep = true;
        for (int j : kept) {
            if (box_iou(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(j)]) > iou_thresh) {
                keep = false;
                break;
            }
        }
        if (keep) {
            kept.push_back(i);
            if (max_keep >= 0 && static_cast<int>(kept.size()) >= max_keep) break;
        }
    }
    return kept;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    boxes.reserve(dets.size());
    for (const auto& d : dets) {
        boxes.push_back(d.box);
        scores.push_back(d.score);
    }
    std::vector<Detection> out;
    for (int i : nms_indices(boxes, scores, iou_thresh)) out.push_back(dets[static_cast<size_t>(i)]);
    return out;
}

std::vector<Proposal> decode_rpn_boxes(const RpnBranchOutput& rpn, const AnchorGrid& grid,
                                       double img_w, double img_h) {
    const int S = static_cast<int>(rpn.scales.size());
    const int gh = rpn.grid_h, gw = rpn.grid_w;
    std::vector<Proposal> out;
    out.reserve(static_cast<size_t>(grid.count()));
    for (int row = 0; row < gh; ++row)
        for (int col = 0; col < gw; ++col)
            for (int s = 0; s < S; ++s) {
                const int idx = (row * gw + col) * S + s;
                RegressionTarget t;
                t.tx = rpn.reg.at(4 * s + 0, row, col);
                t.ty = rpn.reg.at(4 * s + 1, row, col);
                t.tw = rpn.reg.at(4 * s + 2, row, col);
                t.th = rpn.reg.at(4 * s + 3, row, col);
                Proposal p;
                p.box = decode_box_targets(grid.anchors[static_cast<size_t>(idx)], t,
                                           std::make_pair(img_w, img_h));
                p.objectness = rpn.objectness.at(2 * s + 1, row, col);
                out.push_back(p);
            }
    return out;
}

std::vector<Proposal> propose_topk_state(const Model& m, const ForwardState& st, int k,
                                         double nms_thresh) {
    const auto rpns = rpn_outputs(m, st);
    std::vector<Proposal> all;
    for (const auto& r : rpns) {
        AnchorGrid grid = generate_anchor_grid(r.grid_h, r.grid_w, r.feature_stride, r.scales);
        auto part = decode_rpn_boxes(r, grid, st.img_w, st.img_h);
        all.insert(all.end(), part.begin(), part.end());
    }
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (const auto& p : all) {
        // degenerate clipped boxes cannot be pooled or matched
        if (!(p.box.w() > 0 && p.box.h() > 0 && std::isfinite(p.objectness))) {
            boxes.push_back(Box{0, 0, 1e-9, 1e-9});
            scores.push_back(-1.0);
            continue;
        }
        boxes.push_back(p.box);
        scores.push_back(p.objectness);
    }
    std::vector<Proposal> out;
    for (int i : nms_indices(boxes, scores, nms_thresh, k)) {
        if (scores[static_cast<size_t>(i)] < 0.0) continue;
        out.push_back(all[static_cast<size_t>(i)]);
    }
    return out;
}

std::vector<Proposal> propose_topk(const Model& m, const Tensor& image, int k) {
    ForwardState st = forward_network(m, image);
    return propose_topk_state(m, st, k);
}

std::vector<Detection> detect_single_scale(const Model& m, const Tensor& image,
                                           const DetectOptions& opt) {
    ForwardState st = forward_network(m, image);
    const auto rpns = rpn_outputs(m, st);
    const int branches = static_cast<int>(rpns.size());

    std::vector<Detection> dets;
    for (int b = 0; b < branches; ++b) {
        AnchorGrid grid = generate_anchor_grid(rpns[static_cast<size_t>(b)].grid_h,
                                               rpns[static_cast<size_t>(b)].grid_w,
                                               rpns[static_cast<size_t>(b)].feature_stride,
                                               rpns[static_cast<size_t>(b)].scales);
        auto all = decode_rpn_boxes(rpns[static_cast<size_t>(b)], grid, st.img_w, st.img_h);
        std::vector<Box> boxes;
        std::vector<double> scores;
        for (const auto& p : all) {
            boxes.push_back(p.box);
            scores.push_back((p.box.w() > 0 && p.box.h() > 0 && std::isfinite(p.objectness))
                             ? p.objectness
                             : -1.0);
        }
        std::vector<Box> proposals;
        for (int i : nms_indices(boxes, scores, opt.rpn_nms_thresh, opt.proposals)) {
            if (scores[static_cast<size_t>(i)] < 0.0) continue;
            proposals.push_back(all[static_cast<size_t>(i)].box);
        }
        if (proposals.empty()) continue;

        HeadForward hf = forward_heads_full(m, st, proposals, b);
        const auto& kept = hf.out.kept;
        for (size_t j = 0; j < kept.size(); ++j) {
            const double score = hf.out.joint.prob_pos[j];
            if (score < opt.score_thresh) continue;
            RegressionTarget t{hf.out.joint.reg[j][0], hf.out.joint.reg[j][1],
                               hf.out.joint.reg[j][2], hf.out.joint.reg[j][3]};
            Detection d;
            d.box = decode_box_targets(hf.boxes[j], t,
                                       std::make_pair(double(st.img_w), double(st.img_h)));
            if (!(d.box.w() > 0 && d.box.h() > 0)) continue;
            d.score = score;
            dets.push_back(d);
        }
    }

    std::vector<Detection> out = nms(dets, opt.nms_thresh);
    std::sort(out.begin(), out.end(), det_order);
    return out;
}

std::pair<int, int> pyramid_size(int h, int w, double scale) {
    auto round16 = [](double v) {
        long r = std::lround(v / 16.0) * 16;
        return static_cast<int>(std::max(16L, r));
    };
    return {round16(h * scale), round16(w * scale)};
}

Tensor resample_nearest(const Tensor& image, int out_h, int out_w) {
    if (image.shape.rank() != 3) throw ShapeError("resample expects rank-3 image");
    if (out_h < 1 || out_w < 1) throw ParamError("resample target must be positive");
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Tensor out = zeros(Shape{C, out_h, out_w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < out_h; ++y) {
            const int sy = std::min(H - 1, static_cast<int>(static_cast<double>(y) * H / out_h));
            for (int x = 0; x < out_w; ++x) {
                const int sx = std::min(W - 1, static_cast<int>(static_cast<double>(x) * W / out_w));
                out.at(c, y, x) = image.at(c, sy, sx);
            }
        }
    return out;
}

Tensor preprocess_min_max_side(const Tensor& image, double min_side, double max_side) {
    const int H = image.dim(1), W = image.dim(2);
    if (!(min_side > 0)) return image;
    double scale = min_side / std::min(H, W);
    if (max_side > 0) scale = std::min(scale, max_side / std::max(H, W));
    const auto [oh, ow] = pyramid_size(H, W, scale);
    if (oh == H && ow == W) return image;
    return resample_nearest(image, oh, ow);
}

std::vector<Detection> detect_pyramid(const Model& m, const Tensor& image,
                                      const PyramidSpec& spec, const DetectOptions& opt) {
    if (spec.scales.empty()) throw ParamError("pyramid scale set must be nonempty");
    for (double s : spec.scales)
        if (!(s > 0)) throw ParamError("pyramid scales must be > 0");

    const int H = image.dim(1), W = image.dim(2);
    const int n = static_cast<int>(spec.scales.size());
    std::vector<std::vector<Detection>> per_scale(static_cast<size_t>(n));
    parallel_for(n, [&](int i) {
        const double s = spec.scales[static_cast<size_t>(i)];
        const auto [oh, ow] = pyramid_size(H, W, s);
        Tensor resampled = (oh == H && ow == W) ? image : resample_nearest(image, oh, ow);
        auto dets = detect_single_scale(m, resampled, opt);
        const double fx = static_cast<double>(ow) / W;
        const double fy = static_cast<double>(oh) / H;
        for (auto& d : dets) {
            d.box = Box{d.box.x1 / fx, d.box.y1 / fy, d.box.x2 / fx, d.box.y2 / fy};
            d.source_scale = s;
        }
        per_scale[static_cast<size_t>(i)] = std::move(dets);
    });

    std::vector<Detection> all;
    for (auto& v : per_scale) all.insert(all.end(), v.begin(), v.end());
    std::vector<Detection> out = nms(all, opt.nms_thresh);
    std::sort(out.begin(), out.end(), det_order);
    return out;
}

} // namespace fmnet
