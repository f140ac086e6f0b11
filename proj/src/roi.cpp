#include "fmnet/roi.hpp"

#include <algorithm>
#include <cmath>

#include "fmnet/layers.hpp"

namespace fmnet {

namespace {

struct RoiCells {
    int x1, y1, x2, y2; // feature-cell range, half-open
    int w() const { return x2 - x1; }
    int h() const { return y2 - y1; }
};

RoiCells scaled_cells(const Tensor& features, const Box& box, const RoiSpec& spec) {
    if (features.shape.rank() != 3)
        throw ShapeError("roi_max_pool expects a rank-3 feature map [C,H,W]");
    if (spec.out_h < 1 || spec.out_w < 1 || !(spec.spatial_scale > 0.0))
        throw ParamError("invalid RoiSpec");
    const int H = features.dim(1), W = features.dim(2);
    RoiCells c;
    c.x1 = static_cast<int>(std::floor(box.x1 * spec.spatial_scale));
    c.y1 = static_cast<int>(std::floor(box.y1 * spec.spatial_scale));
    c.x2 = static_cast<int>(std::ceil(box.x2 * spec.spatial_scale));
    c.y2 = static_cast<int>(std::ceil(box.y2 * spec.spatial_scale));
    c.x1 = std::clamp(c.x1, 0, W);
    c.y1 = std::clamp(c.y1, 0, H);
    c.x2 = std::clamp(c.x2, 0, W);
    c.y2 = std::clamp(c.y2, 0, H);
    if (c.w() <= 0 || c.h() <= 0)
        throw DegenerateInputError("roi_max_pool: box does not intersect the feature map");
    return c;
}

} // namespace

Tensor roi_max_pool(const Tensor& features, const Box& box, const RoiSpec& spec) {
    const RoiCells rc = scaled_cells(features, box, spec);
    const int C = features.dim(0);
    Tensor out = zeros(Shape{C, spec.out_h, spec.out_w});
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < spec.out_h; ++i) {
            const int hs = rc.y1 + (i * rc.h()) / spec.out_h;
            const int he = rc.y1 + (((i + 1) * rc.h()) + spec.out_h - 1) / spec.out_h;
            for (int j = 0; j < spec.out_w; ++j) {
                const int ws = rc.x1 + (j * rc.w()) / spec.out_w;
                const int we = rc.x1 + (((j + 1) * rc.w()) + spec.out_w - 1) / spec.out_w;
                double best = 0.0;
                bool any = false;
                for (int h = hs; h < he; ++h)
                    for (int w = ws; w < we; ++w) {
                        const double v = features.at(c, h, w);
                        if (!any || v > best) {
                            best = v;
                            any = true;
                        }
                    }
                out.at(c, i, j) = any ? best : 0.0;
            }
        }
    }
    return out;
}

Tensor roi_max_pool_backward(const Tensor& features, const Box& box, const RoiSpec& spec,
                             const Tensor& out_grad) {
    const RoiCells rc = scaled_cells(features, box, spec);
    const int C = features.dim(0);
    Tensor dx = zeros(features.shape);
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < spec.out_h; ++i) {
            const int hs = rc.y1 + (i * rc.h()) / spec.out_h;
            const int he = rc.y1 + (((i + 1) * rc.h()) + spec.out_h - 1) / spec.out_h;
            for (int j = 0; j < spec.out_w; ++j) {
                const int ws = rc.x1 + (j * rc.w()) / spec.out_w;
                const int we = rc.x1 + (((j + 1) * rc.w()) + spec.out_w - 1) / spec.out_w;
                int bh = -1, bw = -1;
                double best = 0.0;
                for (int h = hs; h < he; ++h)
                    for (int w = ws; w < we; ++w) {
                        const double v = features.at(c, h, w);
                        if (bh < 0 || v > best) {
                            best = v;
                            bh = h;
                            bw = w;
                        }
                    }
                if (bh >= 0) dx.at(c, bh, bw) += out_grad.at(c, i, j);
            }
        }
    }
    return dx;
}

Box expand_context_box(const Box& box, double factor, double img_w, double img_h) {
    if (factor < 1.0) throw ParamError("context expansion factor must be >= 1");
    const double w = box.w() * factor, h = box.h() * factor;
    Box e{box.cx() - w / 2, box.cy() - h / 2, box.cx() + w / 2, box.cy() + h / 2};
    return clip_box(e, img_w, img_h);
}

Tensor normalize_roi_block(const Tensor& pooled) {
    return l2_normalize_global(pooled);
}

Tensor normalize_roi_block_backward(const Tensor& pooled, const Tensor& out_grad) {
    return l2_normalize_global_backward(pooled, out_grad);
}

} // namespace fmnet
