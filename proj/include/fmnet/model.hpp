#ifndef FMNET_MODEL_HPP
#define FMNET_MODEL_HPP

#include <map>
#include <string>
#include <vector>

#include "fmnet/anchors.hpp"
#include "fmnet/layers.hpp"
#include "fmnet/losses.hpp"
#include "fmnet/roi.hpp"
#include "fmnet/tensor.hpp"

namespace fmnet {

enum class Variant { base, context, skipface, sizesplit, facemagnet };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& s);

// n geometrically spaced anchor side lengths covering [lo, hi].
std::vector<double> geometric_scales(double lo, double hi, int n);

struct ModelConfig {
    Variant variant = Variant::base;
    int input_channels = 3;
    std::vector<int> channels = {8, 16, 32, 64, 64}; // per backbone block
    int convs_per_block = 2;
    int rpn_channels = 64;
    int magnifier_channels = 32;   // transposed-conv output channels
    int skip_reduce_channels = 32; // 1x1 reduction width for fused maps
    int fc_dim = 64;
    int roi_out = 7;
    double context_factor = 2.0;
    bool context_merge_1x1 = false; // merge context/face features by 1x1 conv
    bool use_context = true;       // context head toggle where optional
    double size_split_threshold = 50.0; // px, small/big branch routing
    std::vector<std::vector<double>> branch_scales; // anchor sides per branch
    LossWeights loss_weights;

    void validate() const; // throws ValidationError naming the violated constraint

    int branch_count() const { return variant == Variant::sizesplit ? 2 : 1; }
};

// Static facts about one detection branch of a built model.
struct BranchInfo {
    int stride = 16;                // RPN feature stride
    std::vector<double> scales;     // anchor side lengths
    bool context = false;           // context head present
    std::string prefix;             // parameter prefix ("" or "small."/"big.")
    int roi_channels = 0;           // channels of the map(s) RoIs pool from
    double roi_spatial_scale = 0;   // of the (single) RoI source map
};

struct Model {
    ModelConfig config;
    std::map<std::string, LayerParams> params;

    long parameter_count() const {
        long n = 0;
        for (const auto& [k, p] : params) n += p.parameter_count();
        return n;
    }
};

Model build_model(const ModelConfig& cfg, uint64_t seed);

std::vector<BranchInfo> branch_info(const ModelConfig& cfg);

// ---- forward/backward machinery (explicit graphs, no tape) ----

struct ConvBlockCache {
    std::vector<Tensor> inputs; // input of conv i
    std::vector<Tensor> pre;    // conv i output before relu
    Tensor out;                 // block output (post-relu)
};

struct RpnCache {
    Tensor in;
    Tensor conv_pre;
    Tensor feat;
    Tensor cls_logits;
    Tensor cls_probs; // pairwise softmax of cls_logits
    Tensor reg;
};

struct ForwardState {
    Tensor image;
    int img_w = 0, img_h = 0;

    std::vector<ConvBlockCache> blocks;       // b1..b5 (b1,b2 only for sizesplit)
    std::vector<ConvBlockCache> small_blocks; // sizesplit: b3 block + conv4 block
    std::vector<ConvBlockCache> big_blocks;   // sizesplit: b3,b4,b5

    Tensor mag_rpn_pre, mag_rpn_out; // facemagnet RPN magnifier
    Tensor mag_roi_pre, mag_roi_out; // facemagnet RoI magnifier
    Tensor skip_u3, skip_u4, skip_u5; // skipface: normalized (and upsampled) maps

    std::vector<RpnCache> rpn; // per branch

    // gradient accumulators for RoI pooling sources, keyed "b3","b4","b5",
    // "mag_roi","small","big"
    std::map<std::string, Tensor> map_grads;
};

ForwardState forward_network(const Model& m, const Tensor& image);

struct RpnBranchOutput {
    int feature_stride = 0;
    int grid_h = 0, grid_w = 0;
    std::vector<double> scales;
    Tensor objectness; // [2S, gh, gw], pairwise softmaxed
    Tensor reg;        // [4S, gh, gw]
};

std::vector<RpnBranchOutput> rpn_outputs(const Model& m, const ForwardState& st);
std::vector<RpnBranchOutput> forward_rpn(const Model& m, const Tensor& image);

struct HeadBranchOut {
    std::vector<double> prob_pos;              // per kept proposal
    std::vector<std::array<double, 4>> reg;
};

struct HeadOutput {
    std::vector<int> kept;  // indices into the submitted proposal list
    int dropped = 0;        // proposals outside the image after clipping
    HeadBranchOut joint;    // final scoring head (the only one without context)
    HeadBranchOut face;     // empty when the branch has no context head
    HeadBranchOut ctx;
};

struct HeadForward {
    int branch = 0;
    HeadOutput out;
    std::vector<Box> boxes;     // clipped boxes actually pooled
    std::vector<Box> ctx_boxes;

    Tensor face_rows; // fc6 inputs [P, in]
    Tensor ctx_rows;
    std::vector<std::vector<Tensor>> skip_pooled; // skipface: [block][P] raw pooled
    Tensor merge_rows; // merge variant: concat pooled rows pre-1x1

    Tensor fc6_pre, fc6_out, fc7_pre, fc7_out;
    Tensor cfc6_pre, cfc6_out, cfc7_pre, cfc7_out;
    Tensor joint_in;
    Tensor face_cls_logits, ctx_cls_logits, joint_cls_logits; // [P,2]
};

HeadForward forward_heads_full(const Model& m, const ForwardState& st,
                               const std::vector<Box>& proposals, int branch);

// Routes proposals to branches by min side (sizesplit) and returns outputs
// aligned with the kept submitted proposals.
HeadOutput forward_heads(const Model& m, const ForwardState& st,
                         const std::vector<Box>& proposals);

using GradStore = std::map<std::string, LayerParams>;

void accumulate_grads(GradStore& store, const std::string& name, const LayerParams& g);

struct HeadOutGrads {
    std::vector<double> d_joint_prob; // per kept proposal
    std::vector<std::array<double, 4>> d_joint_reg;
    std::vector<double> d_face_prob;
    std::vector<std::array<double, 4>> d_face_reg;
    std::vector<double> d_ctx_prob;
    std::vector<std::array<double, 4>> d_ctx_reg;
};

// Backpropagates head gradients into parameter grads and the RoI source map
// accumulators held in st.map_grads.
void backward_heads(const Model& m, ForwardState& st, const HeadForward& hf,
                    const HeadOutGrads& g, GradStore& store);

struct RpnOutGrads {
    Tensor d_probs; // [2S, gh, gw] gradient w.r.t. softmaxed objectness
    Tensor d_reg;   // [4S, gh, gw]
};

// RPN backward, branch-map backward (magnifier / skip fusion) and backbone
// backward, consuming whatever head gradients were accumulated in map_grads.
void backward_network(const Model& m, ForwardState& st,
                      const std::vector<RpnOutGrads>& rpn_grads, GradStore& store);

} // namespace fmnet

#endif
