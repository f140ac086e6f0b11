#ifndef FMNET_LOSSES_HPP
#define FMNET_LOSSES_HPP

#include <array>
#include <vector>

#include "fmnet/anchors.hpp"

namespace fmnet {

struct LossWeights {
    double alpha = 1.0, beta = 1.0, gamma = 1.0;
};

struct LossReport {
    double rpn_cls = 0, rpn_reg = 0;
    double head_cls = 0, head_reg = 0;
    double face_cls = 0, face_reg = 0;
    double ctx_cls = 0, ctx_reg = 0;
    double joint_cls = 0, joint_reg = 0;
    double total = 0;
    int n_head = 0; // classifier batch size
};

// -label*ln(p) - (1-label)*ln(1-p), p clamped to [1e-12, 1-1e-12].
double binary_class_loss(double prob_pos, int label);
double binary_class_loss_grad(double prob_pos, int label);

// 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
double smooth_l1(double d);
double smooth_l1_grad(double d);

// Per-anchor gradients paired with the anchor index they belong to.
struct RpnLossResult {
    double cls_loss = 0, reg_loss = 0;
    std::vector<std::pair<int, double>> dprob;
    std::vector<std::pair<int, std::array<double, 4>>> dreg;
};

// Classification averaged per anchor scale then over the scales present in
// the sample; regression likewise over sampled positives. Regression sees no
// gradient from negatives.
RpnLossResult rpn_loss(const std::vector<double>& probs_pos,
                       const std::vector<std::array<double, 4>>& reg_preds,
                       const MatchResult& match,
                       const std::vector<int>& sampled_idx,
                       int n_scales);

struct HeadLossResult {
    double cls_loss = 0, reg_loss = 0;
    std::vector<double> dprob;                 // per sampled proposal
    std::vector<std::array<double, 4>> dreg;   // per sampled proposal
};

// (1/N) sum of classification losses plus (1/N) sum of smooth-L1 over
// positive proposals, N = sampled batch size.
HeadLossResult head_loss(const std::vector<double>& cls_probs,
                         const std::vector<std::array<double, 4>>& reg_preds,
                         const std::vector<int>& labels,
                         const std::vector<RegressionTarget>& targets,
                         int n);

// alpha*face + beta*context + gamma*joint over the three branch reports.
double composite_context_loss(const LossReport& face, const LossReport& context,
                              const LossReport& joint, const LossWeights& w);

double total_loss(double rpn, double cl);

} // namespace fmnet

#endif
