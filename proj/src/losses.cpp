#include "fmnet/losses.hpp"

#include <algorithm>
#include <cmath>

namespace fmnet {

namespace {
constexpr double kProbClamp = 1e-12;

inline double clamp_prob(double p) {
    return std::clamp(p, kProbClamp, 1.0 - kProbClamp);
}
} // namespace

double binary_class_loss(double prob_pos, int label) {
    const double p = clamp_prob(prob_pos);
    return label ? -std::log(p) : -std::log(1.0 - p);
}

double binary_class_loss_grad(double prob_pos, int label) {
    const double p = clamp_prob(prob_pos);
    return label ? -1.0 / p : 1.0 / (1.0 - p);
}

double smooth_l1(double d) {
    const double a = std::abs(d);
    return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double smooth_l1_grad(double d) {
    if (d > 1.0) return 1.0;
    if (d < -1.0) return -1.0;
    return d;
}

RpnLossResult rpn_loss(const std::vector<double>& probs_pos,
                       const std::vector<std::array<double, 4>>& reg_preds,
                       const MatchResult& match,
                       const std::vector<int>& sampled_idx,
                       int n_scales) {
    if (sampled_idx.empty())
        throw DegenerateInputError("rpn_loss: empty anchor sample");
    if (n_scales < 1) throw ParamError("rpn_loss: n_scales must be >= 1");

    // per-scale accumulation
    std::vector<double> cls_sum(static_cast<size_t>(n_scales), 0.0);
    std::vector<int> cls_cnt(static_cast<size_t>(n_scales), 0);
    std::vector<double> reg_sum(static_cast<size_t>(n_scales), 0.0);
    std::vector<int> reg_cnt(static_cast<size_t>(n_scales), 0);

    for (int idx : sampled_idx) {
        const int s = idx % n_scales;
        const int label = match.labels[static_cast<size_t>(idx)] == AnchorLabel::positive ? 1 : 0;
        cls_sum[static_cast<size_t>(s)] += binary_class_loss(probs_pos[static_cast<size_t>(idx)], label);
        cls_cnt[static_cast<size_t>(s)] += 1;
        if (label) {
            const auto& t = match.targets[static_cast<size_t>(idx)];
            const double tv[4] = {t.tx, t.ty, t.tw, t.th};
            double acc = 0.0;
            for (int k = 0; k < 4; ++k)
                acc += smooth_l1(reg_preds[static_cast<size_t>(idx)][static_cast<size_t>(k)] - tv[k]);
            reg_sum[static_cast<size_t>(s)] += acc;
            reg_cnt[static_cast<size_t>(s)] += 1;
        }
    }

    int cls_scales = 0, reg_scales = 0;
    RpnLossResult r;
    for (int s = 0; s < n_scales; ++s) {
        if (cls_cnt[static_cast<size_t>(s)] > 0) {
            r.cls_loss += cls_sum[static_cast<size_t>(s)] / cls_cnt[static_cast<size_t>(s)];
            ++cls_scales;
        }
        if (reg_cnt[static_cast<size_t>(s)] > 0) {
            r.reg_loss += reg_sum[static_cast<size_t>(s)] / reg_cnt[static_cast<size_t>(s)];
            ++reg_scales;
        }
    }
    if (cls_scales > 0) r.cls_loss /= cls_scales;
    if (reg_scales > 0) r.reg_loss /= reg_scales;

    for (int idx : sampled_idx) {
        const int s = idx % n_scales;
        const int label = match.labels[static_cast<size_t>(idx)] == AnchorLabel::positive ? 1 : 0;
        const double cw = 1.0 / (cls_cnt[static_cast<size_t>(s)] * cls_scales);
        r.dprob.emplace_back(idx, cw * binary_class_loss_grad(probs_pos[static_cast<size_t>(idx)], label));
        if (label) {
            const auto& t = match.targets[static_cast<size_t>(idx)];
            const double tv[4] = {t.tx, t.ty, t.tw, t.th};
            const double rw = 1.0 / (reg_cnt[static_cast<size_t>(s)] * reg_scales);
            std::array<double, 4> g{};
            for (int k = 0; k < 4; ++k)
                g[static_cast<size_t>(k)] =
                    rw * smooth_l1_grad(reg_preds[static_cast<size_t>(idx)][static_cast<size_t>(k)] - tv[k]);
            r.dreg.emplace_back(idx, g);
        }
    }
    return r;
}

HeadLossResult head_loss(const std::vector<double>& cls_probs,
                         const std::vector<std::array<double, 4>>& reg_preds,
                         const std::vector<int>& labels,
                         const std::vector<RegressionTarget>& targets,
                         int n) {
    if (n <= 0) throw DegenerateInputError("head_loss: classifier batch size is zero");
    if (cls_probs.size() != labels.size() || reg_preds.size() != labels.size() ||
        targets.size() != labels.size())
        throw ShapeError("head_loss: input vectors disagree in length");

    HeadLossResult r;
    r.dprob.assign(labels.size(), 0.0);
    r.dreg.assign(labels.size(), std::array<double, 4>{});
    const double inv_n = 1.0 / n;
    for (size_t i = 0; i < labels.size(); ++i) {
        r.cls_loss += inv_n * binary_class_loss(cls_probs[i], labels[i]);
        r.dprob[i] = inv_n * binary_class_loss_grad(cls_probs[i], labels[i]);
        if (labels[i]) {
            const double tv[4] = {targets[i].tx, targets[i].ty, targets[i].tw, targets[i].th};
            for (int k = 0; k < 4; ++k) {
                const double d = reg_preds[i][static_cast<size_t>(k)] - tv[k];
                r.reg_loss += inv_n * smooth_l1(d);
                r.dreg[i][static_cast<size_t>(k)] = inv_n * smooth_l1_grad(d);
            }
        }
    }
    return r;
}

double composite_context_loss(const LossReport& face, const LossReport& context,
                              const LossReport& joint, const LossWeights& w) {
    if (w.alpha < 0 || w.beta < 0 || w.gamma < 0)
        throw ParamError("loss weights must be >= 0");
    if (w.alpha == 0 && w.beta == 0 && w.gamma == 0)
        throw ParamError("loss weights must not all be zero");
    return w.alpha * face.total + w.beta * context.total + w.gamma * joint.total;
}

double total_loss(double rpn, double cl) {
    return rpn + cl;
}

} // namespace fmnet
