#ifndef FMNET_ROI_HPP
#define FMNET_ROI_HPP

#include "fmnet/anchors.hpp"
#include "fmnet/tensor.hpp"

namespace fmnet {

struct RoiSpec {
    int out_h = 7;
    int out_w = 7;
    double spatial_scale = 1.0; // 1 / feature_stride
};

// Max-pools the feature sub-region under `box` (image coordinates, scaled by
// spatial_scale and rounded outward) onto an out_h x out_w grid. Sub-window
// bounds are start = floor(i*h/out), end = ceil((i+1)*h/out); empty windows
// emit 0.
Tensor roi_max_pool(const Tensor& features, const Box& box, const RoiSpec& spec);

// Gradient routed to the argmax of each non-empty sub-window (first scan hit
// on ties); empty windows contribute nothing.
Tensor roi_max_pool_backward(const Tensor& features, const Box& box, const RoiSpec& spec,
                             const Tensor& out_grad);

// Same center, sides multiplied by factor, clipped to the image.
Box expand_context_box(const Box& box, double factor, double img_w, double img_h);

// One global L2 norm over the whole pooled C x h x w block.
Tensor normalize_roi_block(const Tensor& pooled);
Tensor normalize_roi_block_backward(const Tensor& pooled, const Tensor& out_grad);

} // namespace fmnet

#endif
