#ifndef FMNET_EVALUATION_HPP
#define FMNET_EVALUATION_HPP

#include <string>
#include <vector>

#include "fmnet/anchors.hpp"

namespace fmnet {

std::vector<double> default_iou_grid(); // 0.50, 0.55, ..., 1.00

// Best-overlap IoU of each ground truth against its image's proposals,
// flattened across images.
std::vector<double> per_gt_best_iou(const std::vector<std::vector<Box>>& proposals_per_image,
                                    const std::vector<std::vector<Box>>& gts_per_image);

struct RecallCurve {
    std::vector<double> thresholds;
    std::vector<double> recall;
    double auc = 0; // mean recall over the grid
};

RecallCurve iou_recall_curve(const std::vector<std::vector<Box>>& proposals_per_image,
                             const std::vector<std::vector<Box>>& gts_per_image,
                             const std::vector<double>& grid = default_iou_grid());

struct EvalDet {
    int image = 0;
    Box box;
    double score = 0;
};

struct PrPoint {
    double recall = 0, precision = 0;
};

struct PrCurve {
    std::vector<PrPoint> points; // one per ranked detection
    double ap = 0;
};

// Greedy score-ranked matching (highest-IoU unmatched ground truth at
// IoU >= thresh is a true positive); AP is the all-point interpolated area.
PrCurve average_precision(const std::vector<EvalDet>& dets,
                          const std::vector<std::vector<Box>>& gts_per_image,
                          double iou_thresh = 0.5);

struct SizeBucketReport {
    double bucket_width = 10;
    double max_size = 50;
    std::vector<long> hits;   // last entry is the overflow bucket
    std::vector<long> misses;
};

// Buckets ground truths by their larger side; a hit is any detection of the
// same image overlapping at IoU >= iou_thresh.
SizeBucketReport size_bucket_report(const std::vector<EvalDet>& dets,
                                    const std::vector<std::vector<Box>>& gts_per_image,
                                    double bucket_width = 10, double max_size = 50,
                                    double iou_thresh = 0.5);

std::string recall_curve_csv(const RecallCurve& c); // "threshold,recall"
std::string pr_curve_csv(const PrCurve& c);         // "recall,precision"
std::string size_report_csv(const SizeBucketReport& r);

// Minimal standalone SVG emitters.
void write_line_plot_svg(const std::string& path, const std::vector<double>& xs,
                         const std::vector<double>& ys, const std::string& x_label,
                         const std::string& y_label, const std::string& title);
void write_bar_plot_svg(const std::string& path, const std::vector<std::string>& labels,
                        const std::vector<double>& a, const std::vector<double>& b,
                        const std::string& series_a, const std::string& series_b,
                        const std::string& title);

} // namespace fmnet

#endif
