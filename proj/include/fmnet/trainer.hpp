#ifndef FMNET_TRAINER_HPP
#define FMNET_TRAINER_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "fmnet/model.hpp"

namespace fmnet {

struct TrainConfig {
    int total_iters = 3800;
    double lr_initial = 0.001;
    int lr_drop_iter = 3000;
    double lr_after = 0.0001;
    double momentum = 0.9;
    double weight_decay = 0.0;
    int images_per_batch = 1;
    int rpn_batch = 256;
    int head_batch = 64; // the classifier batch size N
    double pos_neg_ratio = 1.0;
    double rpn_nms_thresh = 0.7;
    int train_proposals = 300;
    uint64_t seed = 1;

    void validate() const;
};

struct OptimizerState {
    std::map<std::string, LayerParams> velocity;
};

OptimizerState make_optimizer_state(const Model& m);

// v <- momentum*v - lr*g; w <- w + v (classic momentum). Every parameter
// steps every iteration; missing grads count as zero.
void sgd_momentum_step(Model& m, const GradStore& grads, OptimizerState& st, double lr,
                       double momentum, double weight_decay = 0.0);

double learning_rate_at(int iter, const TrainConfig& cfg);

// labels: 1 positive, 0 negative, -1 ignore. Draws batch*ratio/(1+ratio)
// positives when available, all of them otherwise, and fills the remainder
// with negatives. Deterministic per seed.
std::vector<int> sample_balanced_batch(const std::vector<int8_t>& labels, int batch,
                                       double ratio, uint64_t seed);

struct TrainSample {
    Tensor image;           // [3,H,W]
    std::vector<Box> boxes; // ground truth
};
using Dataset = std::vector<TrainSample>;

struct NumericAbortError : std::runtime_error {
    int iter;
    LossReport report;
    NumericAbortError(int it, const LossReport& r, const std::string& msg)
        : std::runtime_error(msg), iter(it), report(r) {}
};

// Frozen per-iteration decisions (anchor samples, proposal boxes, labels).
// With the plan fixed, the loss is a smooth function of the parameters.
struct BranchPlan {
    AnchorGrid grid;
    MatchResult match;
    std::vector<int> rpn_sample;
    std::vector<Box> proposals; // sampled classifier batch
    std::vector<int> labels;
    std::vector<RegressionTarget> targets;
    int avail_pos = 0; // positives available before sampling
    int avail_neg = 0;
};

struct ImagePlan {
    std::vector<BranchPlan> branches;
};

ImagePlan plan_iteration(const Model& m, const ForwardState& st, const std::vector<Box>& gts,
                         const TrainConfig& cfg, uint64_t iter_key);

struct StepResult {
    LossReport report;
    GradStore grads;
};

// Loss and parameter gradients under a fixed plan.
StepResult execute_plan(const Model& m, ForwardState& st, const ImagePlan& plan);

// Forward-only loss under a fixed plan (finite-difference probes).
LossReport plan_loss(const Model& m, const std::vector<Box>& gts_unused, const Tensor& image,
                     const ImagePlan& plan);

struct TrainStats {
    std::vector<std::pair<int, LossReport>> trace; // (iter, report)
    long head_batches_checked = 0; // 1:1 rule assertions that ran
};

// End-to-end loop: forward, match, sample, losses, backprop, momentum step.
// Fully deterministic for a given (seed, config, dataset). start_iter > 0
// resumes the schedule (velocity supplied via opt).
TrainStats train(Model& m, const Dataset& data, const TrainConfig& cfg,
                 OptimizerState* opt = nullptr, int start_iter = 0);

std::string trace_csv(const TrainStats& stats);

} // namespace fmnet

#endif
