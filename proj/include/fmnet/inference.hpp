#ifndef FMNET_INFERENCE_HPP
#define FMNET_INFERENCE_HPP

#include <utility>
#include <vector>

#include "fmnet/model.hpp"

namespace fmnet {

struct Detection {
    Box box;
    double score = 0;
    double source_scale = 1.0;
};

struct PyramidSpec {
    std::vector<double> scales = {1.0, 1.5, 2.0};
};

// Greedy suppression by descending score; ties keep input order. Returns kept
// detections in that order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

// Index form; stops once max_keep boxes survive (max_keep < 0 keeps all).
std::vector<int> nms_indices(const std::vector<Box>& boxes, const std::vector<double>& scores,
                             double iou_thresh, int max_keep = -1);

struct Proposal {
    Box box;
    double objectness = 0;
};

// Every anchor of one RPN branch decoded and clipped to the image.
std::vector<Proposal> decode_rpn_boxes(const RpnBranchOutput& rpn, const AnchorGrid& grid,
                                       double img_w, double img_h);

// Decode all branches, suppress at 0.7, return the k highest-objectness boxes.
std::vector<Proposal> propose_topk(const Model& m, const Tensor& image, int k = 1000);
std::vector<Proposal> propose_topk_state(const Model& m, const ForwardState& st, int k,
                                         double nms_thresh = 0.7);

struct DetectOptions {
    double score_thresh = 0.5;
    double nms_thresh = 0.3;
    double rpn_nms_thresh = 0.7;
    int proposals = 300;
};

// propose -> head-score -> decode head regressions -> clip -> score filter ->
// NMS; sorted by descending score then coordinates.
std::vector<Detection> detect_single_scale(const Model& m, const Tensor& image,
                                           const DetectOptions& opt = {});

// Runs each scale on a nearest-neighbor resampled image, maps boxes back and
// merges everything with one joint NMS.
std::vector<Detection> detect_pyramid(const Model& m, const Tensor& image,
                                      const PyramidSpec& spec, const DetectOptions& opt = {});

// Target extent for a resampling ratio, rounded to a multiple of 16.
std::pair<int, int> pyramid_size(int h, int w, double scale);

Tensor resample_nearest(const Tensor& image, int out_h, int out_w);

// Resizes so the short side reaches min_side (capping the long side at
// max_side when positive), preserving aspect up to multiple-of-16 rounding.
Tensor preprocess_min_max_side(const Tensor& image, double min_side, double max_side);

} // namespace fmnet

#endif
