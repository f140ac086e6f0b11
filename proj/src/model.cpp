#include "fmnet/model.hpp"

#include <algorithm>
#include <cmath>

namespace fmnet {

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::base: return "base";
        case Variant::context: return "context";
        case Variant::skipface: return "skipface";
        case Variant::sizesplit: return "sizesplit";
        case Variant::facemagnet: return "facemagnet";
    }
    return "?";
}

Variant variant_from_name(const std::string& s) {
    if (s == "base") return Variant::base;
    if (s == "context") return Variant::context;
    if (s == "skipface") return Variant::skipface;
    if (s == "sizesplit") return Variant::sizesplit;
    if (s == "facemagnet") return Variant::facemagnet;
    throw ValidationError("unknown variant '" + s + "'");
}

std::vector<double> geometric_scales(double lo, double hi, int n) {
    if (!(lo > 0) || !(hi >= lo) || n < 1)
        throw ParamError("geometric_scales requires 0 < lo <= hi and n >= 1");
    std::vector<double> s;
    if (n == 1) {
        s.push_back(std::sqrt(lo * hi));
        return s;
    }
    const double r = std::pow(hi / lo, 1.0 / (n - 1));
    double v = lo;
    for (int i = 0; i < n; ++i) {
        s.push_back(v);
        v *= r;
    }
    s.back() = hi;
    return s;
}

namespace {

// Per-branch anchor scales, defaulting to a geometric ladder over 6..40 px.
// A single list given to sizesplit is split at the routing threshold.
std::vector<std::vector<double>> resolve_branch_scales(const ModelConfig& cfg) {
    std::vector<std::vector<double>> bs = cfg.branch_scales;
    if (bs.empty()) bs = {geometric_scales(6.0, 40.0, 5)};
    const int want = cfg.branch_count();
    if (static_cast<int>(bs.size()) == want) return bs;
    if (want == 2 && bs.size() == 1) {
        std::vector<double> small, big;
        for (double s : bs[0])
            (s < cfg.size_split_threshold ? small : big).push_back(s);
        if (small.empty()) small = bs[0];
        if (big.empty()) big = bs[0];
        return {small, big};
    }
    throw ValidationError("branch_scales: expected " + std::to_string(want) +
                          " scale lists, got " + std::to_string(bs.size()));
}

} // namespace

void ModelConfig::validate() const {
    if (channels.size() != 5)
        throw ValidationError("channels must list 5 backbone block widths");
    for (int c : channels)
        if (c < 1) throw ValidationError("channels entries must be >= 1");
    if (input_channels < 1) throw ValidationError("input_channels must be >= 1");
    if (convs_per_block < 1) throw ValidationError("convs_per_block must be >= 1");
    if (rpn_channels < 1) throw ValidationError("rpn_channels must be >= 1");
    if (magnifier_channels < 1) throw ValidationError("magnifier_channels must be >= 1");
    if (skip_reduce_channels < 1) throw ValidationError("skip_reduce_channels must be >= 1");
    if (fc_dim < 1) throw ValidationError("fc_dim must be >= 1");
    if (roi_out < 1) throw ValidationError("roi_out must be >= 1");
    if (!(context_factor >= 1.0)) throw ValidationError("context_factor must be >= 1");
    if (!(size_split_threshold > 0.0))
        throw ValidationError("size_split_threshold must be > 0");
    if (variant == Variant::context && !use_context)
        throw ValidationError("the context variant requires use_context");
    if (context_merge_1x1 && !(variant == Variant::context ||
                               ((variant == Variant::facemagnet || variant == Variant::sizesplit) && use_context)))
        throw ValidationError("context_merge_1x1 needs a variant with a context head");
    if (loss_weights.alpha < 0 || loss_weights.beta < 0 || loss_weights.gamma < 0)
        throw ValidationError("loss weights must be >= 0");
    if (loss_weights.alpha == 0 && loss_weights.beta == 0 && loss_weights.gamma == 0)
        throw ValidationError("loss weights must not all be zero");
    const auto bs = resolve_branch_scales(*this);
    if (static_cast<int>(bs.size()) != branch_count())
        throw ValidationError("sizesplit requires exactly 2 branches");
    for (const auto& list : bs) {
        if (list.empty()) throw ValidationError("anchor scale list must be nonempty");
        for (double s : list)
            if (!(s > 0)) throw ValidationError("anchor scales must be > 0");
    }
}

std::vector<BranchInfo> branch_info(const ModelConfig& cfg) {
    const auto bs = resolve_branch_scales(cfg);
    std::vector<BranchInfo> out;
    switch (cfg.variant) {
        case Variant::base:
        case Variant::context: {
            BranchInfo b;
            b.stride = 16;
            b.scales = bs[0];
            b.context = cfg.variant == Variant::context;
            b.prefix = "";
            b.roi_channels = cfg.channels[4];
            b.roi_spatial_scale = 1.0 / 16;
            out.push_back(b);
            break;
        }
        case Variant::skipface: {
            BranchInfo b;
            b.stride = 4;
            b.scales = bs[0];
            b.context = false;
            b.prefix = "";
            b.roi_channels = 3 * cfg.skip_reduce_channels;
            b.roi_spatial_scale = 0.0; // pools from three maps
            out.push_back(b);
            break;
        }
        case Variant::facemagnet: {
            BranchInfo b;
            b.stride = 4;
            b.scales = bs[0];
            b.context = cfg.use_context;
            b.prefix = "";
            b.roi_channels = cfg.magnifier_channels;
            b.roi_spatial_scale = 1.0 / 4;
            out.push_back(b);
            break;
        }
        case Variant::sizesplit: {
            BranchInfo small;
            small.stride = 8;
            small.scales = bs[0];
            small.context = cfg.use_context;
            small.prefix = "small.";
            small.roi_channels = cfg.channels[3];
            small.roi_spatial_scale = 1.0 / 8;
            out.push_back(small);
            BranchInfo big;
            big.stride = 16;
            big.scales = bs[1];
            big.context = false;
            big.prefix = "big.";
            big.roi_channels = cfg.channels[4];
            big.roi_spatial_scale = 1.0 / 16;
            out.push_back(big);
            break;
        }
    }
    return out;
}

namespace {

void add_conv(Model& m, uint64_t seed, const std::string& name, int co, int ci, int k) {
    m.params[name] = conv_params(co, ci, k, hash_key(seed, name));
}

void add_fc(Model& m, uint64_t seed, const std::string& name, int out_d, int in_d) {
    m.params[name] = fc_params(out_d, in_d, hash_key(seed, name));
}

void add_block(Model& m, uint64_t seed, const std::string& prefix, int in_c, int out_c,
               int n_convs) {
    for (int i = 0; i < n_convs; ++i)
        add_conv(m, seed, prefix + ".conv" + std::to_string(i), out_c, i == 0 ? in_c : out_c, 3);
}

void add_head(Model& m, uint64_t seed, const ModelConfig& cfg, const BranchInfo& bi) {
    const int F = cfg.roi_out * cfg.roi_out * bi.roi_channels;
    const std::string hp = bi.prefix + "head.";
    if (bi.context && cfg.context_merge_1x1)
        add_conv(m, seed, hp + "merge", bi.roi_channels, 2 * bi.roi_channels, 1);
    add_fc(m, seed, hp + "fc6", cfg.fc_dim, F);
    add_fc(m, seed, hp + "fc7", cfg.fc_dim, cfg.fc_dim);
    const bool triple = bi.context && !cfg.context_merge_1x1;
    const int final_in = triple ? 2 * cfg.fc_dim : cfg.fc_dim;
    add_fc(m, seed, hp + "cls", 2, final_in);
    add_fc(m, seed, hp + "reg", 4, final_in);
    if (triple) {
        add_fc(m, seed, hp + "ctx.fc6", cfg.fc_dim, F);
        add_fc(m, seed, hp + "ctx.fc7", cfg.fc_dim, cfg.fc_dim);
        add_fc(m, seed, hp + "face.cls", 2, cfg.fc_dim);
        add_fc(m, seed, hp + "face.reg", 4, cfg.fc_dim);
        add_fc(m, seed, hp + "ctx.cls", 2, cfg.fc_dim);
        add_fc(m, seed, hp + "ctx.reg", 4, cfg.fc_dim);
    }
}

void add_rpn(Model& m, uint64_t seed, const ModelConfig& cfg, const BranchInfo& bi, int in_c) {
    const int S = static_cast<int>(bi.scales.size());
    add_conv(m, seed, bi.prefix + "rpn.conv", cfg.rpn_channels, in_c, 3);
    add_conv(m, seed, bi.prefix + "rpn.cls", 2 * S, cfg.rpn_channels, 1);
    add_conv(m, seed, bi.prefix + "rpn.reg", 4 * S, cfg.rpn_channels, 1);
}

} // namespace

Model build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.config = cfg;
    m.config.branch_scales = resolve_branch_scales(cfg);
    const auto& ch = cfg.channels;
    const auto info = branch_info(m.config);

    if (cfg.variant == Variant::sizesplit) {
        add_block(m, seed, "backbone.b1", cfg.input_channels, ch[0], cfg.convs_per_block);
        add_block(m, seed, "backbone.b2", ch[0], ch[1], cfg.convs_per_block);
        add_block(m, seed, "small.b3", ch[1], ch[2], cfg.convs_per_block);
        add_block(m, seed, "small.b4", ch[2], ch[3], 1);
        add_block(m, seed, "big.b3", ch[1], ch[2], cfg.convs_per_block);
        add_block(m, seed, "big.b4", ch[2], ch[3], cfg.convs_per_block);
        add_block(m, seed, "big.b5", ch[3], ch[4], cfg.convs_per_block);
        add_rpn(m, seed, cfg, info[0], ch[3]);
        add_rpn(m, seed, cfg, info[1], ch[4]);
    } else {
        add_block(m, seed, "backbone.b1", cfg.input_channels, ch[0], cfg.convs_per_block);
        add_block(m, seed, "backbone.b2", ch[0], ch[1], cfg.convs_per_block);
        add_block(m, seed, "backbone.b3", ch[1], ch[2], cfg.convs_per_block);
        add_block(m, seed, "backbone.b4", ch[2], ch[3], cfg.convs_per_block);
        add_block(m, seed, "backbone.b5", ch[3], ch[4], cfg.convs_per_block);
        switch (cfg.variant) {
            case Variant::base:
            case Variant::context:
                add_rpn(m, seed, cfg, info[0], ch[4]);
                break;
            case Variant::facemagnet:
                m.params["mag.rpn"] = convtranspose_params(ch[4], cfg.magnifier_channels, 8, 4);
                m.params["mag.roi"] = convtranspose_params(ch[4], cfg.magnifier_channels, 8, 4);
                add_rpn(m, seed, cfg, info[0], cfg.magnifier_channels);
                break;
            case Variant::skipface:
                add_conv(m, seed, "skip.rpn.reduce3", cfg.skip_reduce_channels, ch[2], 1);
                add_conv(m, seed, "skip.rpn.reduce4", cfg.skip_reduce_channels, ch[3], 1);
                add_conv(m, seed, "skip.rpn.reduce5", cfg.skip_reduce_channels, ch[4], 1);
                add_conv(m, seed, "skip.head.reduce3", cfg.skip_reduce_channels, ch[2], 1);
                add_conv(m, seed, "skip.head.reduce4", cfg.skip_reduce_channels, ch[3], 1);
                add_conv(m, seed, "skip.head.reduce5", cfg.skip_reduce_channels, ch[4], 1);
                add_rpn(m, seed, cfg, info[0], 3 * cfg.skip_reduce_channels);
                break;
            default:
                break;
        }
    }
    for (const auto& bi : info) add_head(m, seed, m.config, bi);
    return m;
}

// ---- forward ----

namespace {

Tensor relu(const Tensor& x) { return pointwise_activation(x, Activation::relu); }
Tensor relu_back(const Tensor& pre, const Tensor& g) {
    return pointwise_activation_backward(pre, Activation::relu, g);
}

void add_into(Tensor& acc, const Tensor& t) {
    if (acc.data.empty()) {
        acc = t;
        return;
    }
    if (acc.shape != t.shape) throw ShapeError("gradient accumulation shape mismatch");
    for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += t.data[i];
}

ConvBlockCache run_block(const Model& m, const std::string& prefix, const Tensor& in) {
    ConvBlockCache c;
    Tensor x = in;
    for (int i = 0;; ++i) {
        const auto it = m.params.find(prefix + ".conv" + std::to_string(i));
        if (it == m.params.end()) break;
        c.inputs.push_back(x);
        Tensor pre = conv2d(x, it->second, 1, 1);
        x = relu(pre);
        c.pre.push_back(std::move(pre));
    }
    if (c.pre.empty()) throw ValidationError("block " + prefix + " has no convolutions");
    c.out = x;
    return c;
}

// Returns the gradient w.r.t. the block input.
Tensor backward_block(const Model& m, const std::string& prefix, const ConvBlockCache& c,
                      Tensor g, GradStore& store) {
    for (int i = static_cast<int>(c.pre.size()) - 1; i >= 0; --i) {
        g = relu_back(c.pre[static_cast<size_t>(i)], g);
        const std::string name = prefix + ".conv" + std::to_string(i);
        GradPair gp = conv2d_backward(c.inputs[static_cast<size_t>(i)], m.params.at(name), 1, 1, g);
        accumulate_grads(store, name, gp.param_grads);
        g = std::move(gp.input_grad);
    }
    return g;
}

RpnCache run_rpn(const Model& m, const std::string& prefix, const Tensor& map) {
    RpnCache rc;
    rc.in = map;
    rc.conv_pre = conv2d(map, m.params.at(prefix + "rpn.conv"), 1, 1);
    rc.feat = relu(rc.conv_pre);
    rc.cls_logits = conv2d(rc.feat, m.params.at(prefix + "rpn.cls"), 1, 0);
    rc.cls_probs = pointwise_activation(rc.cls_logits, Activation::softmax2);
    rc.reg = conv2d(rc.feat, m.params.at(prefix + "rpn.reg"), 1, 0);
    return rc;
}

// Returns gradient w.r.t. the branch feature map.
Tensor backward_rpn(const Model& m, const std::string& prefix, const RpnCache& rc,
                    const RpnOutGrads& g, GradStore& store) {
    Tensor d_logits = pointwise_activation_backward(rc.cls_logits, Activation::softmax2, g.d_probs);
    GradPair gc = conv2d_backward(rc.feat, m.params.at(prefix + "rpn.cls"), 1, 0, d_logits);
    accumulate_grads(store, prefix + "rpn.cls", gc.param_grads);
    GradPair gr = conv2d_backward(rc.feat, m.params.at(prefix + "rpn.reg"), 1, 0, g.d_reg);
    accumulate_grads(store, prefix + "rpn.reg", gr.param_grads);
    Tensor g_feat = std::move(gc.input_grad);
    add_into(g_feat, gr.input_grad);
    Tensor g_pre = relu_back(rc.conv_pre, g_feat);
    GradPair gm = conv2d_backward(rc.in, m.params.at(prefix + "rpn.conv"), 1, 1, g_pre);
    accumulate_grads(store, prefix + "rpn.conv", gm.param_grads);
    return std::move(gm.input_grad);
}

} // namespace

void accumulate_grads(GradStore& store, const std::string& name, const LayerParams& g) {
    auto it = store.find(name);
    if (it == store.end()) {
        store[name] = g;
        return;
    }
    add_into(it->second.weights, g.weights);
    if (g.has_bias) add_into(it->second.bias, g.bias);
}

ForwardState forward_network(const Model& m, const Tensor& image) {
    const ModelConfig& cfg = m.config;
    if (image.shape.rank() != 3)
        throw ShapeError("forward expects a rank-3 [C,H,W] image");
    if (image.dim(0) != cfg.input_channels)
        throw ShapeError("image channel count mismatch");
    if (image.dim(1) % 16 != 0 || image.dim(2) % 16 != 0)
        throw ShapeError("image extents must be multiples of 16, got " + image.shape.str());

    ForwardState st;
    st.image = image;
    st.img_h = image.dim(1);
    st.img_w = image.dim(2);

    if (cfg.variant == Variant::sizesplit) {
        st.blocks.push_back(run_block(m, "backbone.b1", image));
        st.blocks.push_back(run_block(m, "backbone.b2", maxpool2(st.blocks[0].out)));
        const Tensor shared = maxpool2(st.blocks[1].out);
        st.small_blocks.push_back(run_block(m, "small.b3", shared));
        st.small_blocks.push_back(run_block(m, "small.b4", maxpool2(st.small_blocks[0].out)));
        st.big_blocks.push_back(run_block(m, "big.b3", shared));
        st.big_blocks.push_back(run_block(m, "big.b4", maxpool2(st.big_blocks[0].out)));
        st.big_blocks.push_back(run_block(m, "big.b5", maxpool2(st.big_blocks[1].out)));
        st.rpn.push_back(run_rpn(m, "small.", st.small_blocks[1].out));
        st.rpn.push_back(run_rpn(m, "big.", st.big_blocks[2].out));
        return st;
    }

    st.blocks.push_back(run_block(m, "backbone.b1", image));
    for (int b = 2; b <= 5; ++b)
        st.blocks.push_back(
            run_block(m, "backbone.b" + std::to_string(b), maxpool2(st.blocks.back().out)));
    const Tensor& b5 = st.blocks[4].out;

    switch (cfg.variant) {
        case Variant::base:
        case Variant::context:
            st.rpn.push_back(run_rpn(m, "", b5));
            break;
        case Variant::facemagnet: {
            st.mag_rpn_pre = convtranspose2d(b5, m.params.at("mag.rpn"), 4, 2);
            st.mag_rpn_out = relu(st.mag_rpn_pre);
            st.mag_roi_pre = convtranspose2d(b5, m.params.at("mag.roi"), 4, 2);
            st.mag_roi_out = relu(st.mag_roi_pre);
            st.rpn.push_back(run_rpn(m, "", st.mag_rpn_out));
            break;
        }
        case Variant::skipface: {
            st.skip_u3 = l2_normalize_global(st.blocks[2].out);
            st.skip_u4 = upsample_nearest(l2_normalize_global(st.blocks[3].out), 2);
            st.skip_u5 = upsample_nearest(l2_normalize_global(st.blocks[4].out), 4);
            Tensor r3 = conv2d(st.skip_u3, m.params.at("skip.rpn.reduce3"), 1, 0);
            Tensor r4 = conv2d(st.skip_u4, m.params.at("skip.rpn.reduce4"), 1, 0);
            Tensor r5 = conv2d(st.skip_u5, m.params.at("skip.rpn.reduce5"), 1, 0);
            Tensor fused = concat_channels(concat_channels(r3, r4), r5);
            st.rpn.push_back(run_rpn(m, "", fused));
            break;
        }
        default:
            break;
    }
    return st;
}

std::vector<RpnBranchOutput> rpn_outputs(const Model& m, const ForwardState& st) {
    const auto info = branch_info(m.config);
    std::vector<RpnBranchOutput> out;
    for (size_t b = 0; b < st.rpn.size(); ++b) {
        RpnBranchOutput o;
        o.feature_stride = info[b].stride;
        o.scales = info[b].scales;
        o.grid_h = st.rpn[b].cls_probs.dim(1);
        o.grid_w = st.rpn[b].cls_probs.dim(2);
        o.objectness = st.rpn[b].cls_probs;
        o.reg = st.rpn[b].reg;
        out.push_back(std::move(o));
    }
    return out;
}

std::vector<RpnBranchOutput> forward_rpn(const Model& m, const Tensor& image) {
    ForwardState st = forward_network(m, image);
    return rpn_outputs(m, st);
}

// ---- heads ----

namespace {

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    const int P = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    Tensor out = zeros(Shape{P, ca + cb});
    for (int r = 0; r < P; ++r) {
        std::copy(a.data.begin() + static_cast<long>(r) * ca,
                  a.data.begin() + static_cast<long>(r + 1) * ca,
                  out.data.begin() + static_cast<long>(r) * (ca + cb));
        std::copy(b.data.begin() + static_cast<long>(r) * cb,
                  b.data.begin() + static_cast<long>(r + 1) * cb,
                  out.data.begin() + static_cast<long>(r) * (ca + cb) + ca);
    }
    return out;
}

void split_cols(const Tensor& g, int ca, Tensor& ga, Tensor& gb) {
    const int P = g.dim(0), c = g.dim(1);
    ga = zeros(Shape{P, ca});
    gb = zeros(Shape{P, c - ca});
    for (int r = 0; r < P; ++r) {
        std::copy(g.data.begin() + static_cast<long>(r) * c,
                  g.data.begin() + static_cast<long>(r) * c + ca,
                  ga.data.begin() + static_cast<long>(r) * ca);
        std::copy(g.data.begin() + static_cast<long>(r) * c + ca,
                  g.data.begin() + static_cast<long>(r + 1) * c,
                  gb.data.begin() + static_cast<long>(r) * (c - ca));
    }
}

void copy_row(Tensor& rows, int r, const Tensor& block) {
    std::copy(block.data.begin(), block.data.end(),
              rows.data.begin() + static_cast<long>(r) * rows.dim(1));
}

} // namespace

HeadForward forward_heads_full(const Model& m, const ForwardState& st,
                               const std::vector<Box>& proposals, int branch) {
    const ModelConfig& cfg = m.config;
    const auto info = branch_info(cfg);
    const BranchInfo& bi = info[static_cast<size_t>(branch)];
    const std::string hp = bi.prefix + "head.";
    const int r = cfg.roi_out;

    HeadForward hf;
    hf.branch = branch;
    for (size_t i = 0; i < proposals.size(); ++i) {
        Box fb = clip_box(proposals[i], st.img_w, st.img_h);
        if (!(fb.w() > 0.0 && fb.h() > 0.0)) {
            hf.out.dropped += 1;
            continue;
        }
        hf.out.kept.push_back(static_cast<int>(i));
        hf.boxes.push_back(fb);
        if (bi.context)
            hf.ctx_boxes.push_back(expand_context_box(fb, cfg.context_factor, st.img_w, st.img_h));
    }
    const int P = static_cast<int>(hf.boxes.size());
    if (P == 0) return hf;

    const bool triple = bi.context && !cfg.context_merge_1x1;
    const bool merge = bi.context && cfg.context_merge_1x1;
    const int F = r * r * bi.roi_channels;

    // pooled feature rows
    if (cfg.variant == Variant::skipface) {
        const Tensor* maps[3] = {&st.blocks[2].out, &st.blocks[3].out, &st.blocks[4].out};
        const double scales[3] = {1.0 / 4, 1.0 / 8, 1.0 / 16};
        const char* reduce_names[3] = {"skip.head.reduce3", "skip.head.reduce4",
                                       "skip.head.reduce5"};
        hf.skip_pooled.assign(3, {});
        hf.face_rows = zeros(Shape{P, F});
        for (int p = 0; p < P; ++p) {
            Tensor parts;
            for (int blk = 0; blk < 3; ++blk) {
                RoiSpec spec{r, r, scales[blk]};
                Tensor pooled = roi_max_pool(*maps[blk], hf.boxes[static_cast<size_t>(p)], spec);
                hf.skip_pooled[static_cast<size_t>(blk)].push_back(pooled);
                Tensor red = conv2d(normalize_roi_block(pooled),
                                    m.params.at(reduce_names[blk]), 1, 0);
                parts = blk == 0 ? std::move(red) : concat_channels(parts, red);
            }
            copy_row(hf.face_rows, p, parts);
        }
    } else {
        const Tensor& map = cfg.variant == Variant::facemagnet ? st.mag_roi_out
                            : cfg.variant == Variant::sizesplit
                                ? (branch == 0 ? st.small_blocks[1].out : st.big_blocks[2].out)
                                : st.blocks[4].out;
        RoiSpec spec{r, r, bi.roi_spatial_scale};
        if (merge) {
            const int C = bi.roi_channels;
            hf.merge_rows = zeros(Shape{P, 2 * C * r * r});
            hf.face_rows = zeros(Shape{P, F});
            for (int p = 0; p < P; ++p) {
                Tensor pf = roi_max_pool(map, hf.boxes[static_cast<size_t>(p)], spec);
                Tensor pc = roi_max_pool(map, hf.ctx_boxes[static_cast<size_t>(p)], spec);
                Tensor cat = concat_channels(pf, pc);
                copy_row(hf.merge_rows, p, cat);
                copy_row(hf.face_rows, p, conv2d(cat, m.params.at(hp + "merge"), 1, 0));
            }
        } else {
            hf.face_rows = zeros(Shape{P, F});
            for (int p = 0; p < P; ++p)
                copy_row(hf.face_rows, p,
                         roi_max_pool(map, hf.boxes[static_cast<size_t>(p)], spec));
            if (triple) {
                hf.ctx_rows = zeros(Shape{P, F});
                for (int p = 0; p < P; ++p)
                    copy_row(hf.ctx_rows, p,
                             roi_max_pool(map, hf.ctx_boxes[static_cast<size_t>(p)], spec));
            }
        }
    }

    // fc stacks
    hf.fc6_pre = fully_connected(hf.face_rows, m.params.at(hp + "fc6"));
    hf.fc6_out = relu(hf.fc6_pre);
    hf.fc7_pre = fully_connected(hf.fc6_out, m.params.at(hp + "fc7"));
    hf.fc7_out = relu(hf.fc7_pre);

    auto probs_of = [](const Tensor& logits) {
        Tensor sm = pointwise_activation(logits, Activation::softmax2);
        std::vector<double> p(static_cast<size_t>(sm.dim(0)));
        for (int i = 0; i < sm.dim(0); ++i) p[static_cast<size_t>(i)] = sm.at(i, 1);
        return p;
    };
    auto regs_of = [](const Tensor& t) {
        std::vector<std::array<double, 4>> v(static_cast<size_t>(t.dim(0)));
        for (int i = 0; i < t.dim(0); ++i)
            for (int k = 0; k < 4; ++k) v[static_cast<size_t>(i)][static_cast<size_t>(k)] = t.at(i, k);
        return v;
    };

    if (triple) {
        hf.cfc6_pre = fully_connected(hf.ctx_rows, m.params.at(hp + "ctx.fc6"));
        hf.cfc6_out = relu(hf.cfc6_pre);
        hf.cfc7_pre = fully_connected(hf.cfc6_out, m.params.at(hp + "ctx.fc7"));
        hf.cfc7_out = relu(hf.cfc7_pre);

        hf.face_cls_logits = fully_connected(hf.fc7_out, m.params.at(hp + "face.cls"));
        hf.out.face.prob_pos = probs_of(hf.face_cls_logits);
        hf.out.face.reg = regs_of(fully_connected(hf.fc7_out, m.params.at(hp + "face.reg")));

        hf.ctx_cls_logits = fully_connected(hf.cfc7_out, m.params.at(hp + "ctx.cls"));
        hf.out.ctx.prob_pos = probs_of(hf.ctx_cls_logits);
        hf.out.ctx.reg = regs_of(fully_connected(hf.cfc7_out, m.params.at(hp + "ctx.reg")));

        hf.joint_in = concat_cols(hf.fc7_out, hf.cfc7_out);
        hf.joint_cls_logits = fully_connected(hf.joint_in, m.params.at(hp + "cls"));
        hf.out.joint.prob_pos = probs_of(hf.joint_cls_logits);
        hf.out.joint.reg = regs_of(fully_connected(hf.joint_in, m.params.at(hp + "reg")));
    } else {
        hf.joint_cls_logits = fully_connected(hf.fc7_out, m.params.at(hp + "cls"));
        hf.out.joint.prob_pos = probs_of(hf.joint_cls_logits);
        hf.out.joint.reg = regs_of(fully_connected(hf.fc7_out, m.params.at(hp + "reg")));
    }
    return hf;
}

HeadOutput forward_heads(const Model& m, const ForwardState& st,
                         const std::vector<Box>& proposals) {
    if (proposals.empty()) throw ParamError("forward_heads: empty proposal list");
    if (m.config.variant != Variant::sizesplit)
        return forward_heads_full(m, st, proposals, 0).out;

    // route by predicted box size
    std::vector<Box> small_p, big_p;
    std::vector<int> small_idx, big_idx;
    for (size_t i = 0; i < proposals.size(); ++i) {
        if (proposals[i].min_side() < m.config.size_split_threshold) {
            small_p.push_back(proposals[i]);
            small_idx.push_back(static_cast<int>(i));
        } else {
            big_p.push_back(proposals[i]);
            big_idx.push_back(static_cast<int>(i));
        }
    }
    HeadOutput out;
    auto splice = [&](const HeadOutput& part, const std::vector<int>& idx) {
        for (size_t j = 0; j < part.kept.size(); ++j) {
            out.kept.push_back(idx[static_cast<size_t>(part.kept[j])]);
            out.joint.prob_pos.push_back(part.joint.prob_pos[j]);
            out.joint.reg.push_back(part.joint.reg[j]);
        }
        out.dropped += part.dropped;
    };
    if (!small_p.empty()) splice(forward_heads_full(m, st, small_p, 0).out, small_idx);
    if (!big_p.empty()) splice(forward_heads_full(m, st, big_p, 1).out, big_idx);
    return out;
}

// ---- backward ----

namespace {

Tensor& map_grad_slot(ForwardState& st, const std::string& key, const Shape& shape) {
    auto it = st.map_grads.find(key);
    if (it == st.map_grads.end()) it = st.map_grads.emplace(key, zeros(shape)).first;
    return it->second;
}

Tensor row_to_block(const Tensor& rows, int r, int C, int h, int w) {
    Tensor b = zeros(Shape{C, h, w});
    std::copy(rows.data.begin() + static_cast<long>(r) * rows.dim(1),
              rows.data.begin() + static_cast<long>(r + 1) * rows.dim(1), b.data.begin());
    return b;
}

Tensor logits_grad(const Tensor& logits, const std::vector<double>& dprob) {
    Tensor dp = zeros(logits.shape);
    for (int i = 0; i < logits.dim(0); ++i) dp.at(i, 1) = dprob[static_cast<size_t>(i)];
    return pointwise_activation_backward(logits, Activation::softmax2, dp);
}

Tensor reg_grad_tensor(const std::vector<std::array<double, 4>>& dreg) {
    Tensor t = zeros(Shape{static_cast<int>(dreg.size()), 4});
    for (size_t i = 0; i < dreg.size(); ++i)
        for (int k = 0; k < 4; ++k) t.at(static_cast<int>(i), k) = dreg[i][static_cast<size_t>(k)];
    return t;
}

} // namespace

void backward_heads(const Model& m, ForwardState& st, const HeadForward& hf,
                    const HeadOutGrads& g, GradStore& store) {
    const int P = static_cast<int>(hf.boxes.size());
    if (P == 0) return;
    const ModelConfig& cfg = m.config;
    const auto info = branch_info(cfg);
    const BranchInfo& bi = info[static_cast<size_t>(hf.branch)];
    const std::string hp = bi.prefix + "head.";
    const int r = cfg.roi_out;
    const bool triple = bi.context && !cfg.context_merge_1x1;
    const bool merge = bi.context && cfg.context_merge_1x1;

    Tensor g_fc7 = zeros(hf.fc7_out.shape);
    Tensor g_cfc7;

    {
        // final head
        Tensor d_jl = logits_grad(hf.joint_cls_logits, g.d_joint_prob);
        const Tensor& final_in = triple ? hf.joint_in : hf.fc7_out;
        GradPair gc = fully_connected_backward(final_in, m.params.at(hp + "cls"), d_jl);
        accumulate_grads(store, hp + "cls", gc.param_grads);
        GradPair gr = fully_connected_backward(final_in, m.params.at(hp + "reg"),
                                               reg_grad_tensor(g.d_joint_reg));
        accumulate_grads(store, hp + "reg", gr.param_grads);
        Tensor g_final = std::move(gc.input_grad);
        add_into(g_final, gr.input_grad);
        if (triple) {
            Tensor ga, gb;
            split_cols(g_final, cfg.fc_dim, ga, gb);
            add_into(g_fc7, ga);
            g_cfc7 = std::move(gb);
        } else {
            add_into(g_fc7, g_final);
        }
    }

    if (triple) {
        Tensor d_fl = logits_grad(hf.face_cls_logits, g.d_face_prob);
        GradPair gc = fully_connected_backward(hf.fc7_out, m.params.at(hp + "face.cls"), d_fl);
        accumulate_grads(store, hp + "face.cls", gc.param_grads);
        add_into(g_fc7, gc.input_grad);
        GradPair gr = fully_connected_backward(hf.fc7_out, m.params.at(hp + "face.reg"),
                                               reg_grad_tensor(g.d_face_reg));
        accumulate_grads(store, hp + "face.reg", gr.param_grads);
        add_into(g_fc7, gr.input_grad);

        Tensor d_cl = logits_grad(hf.ctx_cls_logits, g.d_ctx_prob);
        GradPair cc = fully_connected_backward(hf.cfc7_out, m.params.at(hp + "ctx.cls"), d_cl);
        accumulate_grads(store, hp + "ctx.cls", cc.param_grads);
        add_into(g_cfc7, cc.input_grad);
        GradPair cr = fully_connected_backward(hf.cfc7_out, m.params.at(hp + "ctx.reg"),
                                               reg_grad_tensor(g.d_ctx_reg));
        accumulate_grads(store, hp + "ctx.reg", cr.param_grads);
        add_into(g_cfc7, cr.input_grad);
    }

    // main stack backward
    Tensor g_rows;
    {
        Tensor g7 = relu_back(hf.fc7_pre, g_fc7);
        GradPair gp7 = fully_connected_backward(hf.fc6_out, m.params.at(hp + "fc7"), g7);
        accumulate_grads(store, hp + "fc7", gp7.param_grads);
        Tensor g6 = relu_back(hf.fc6_pre, gp7.input_grad);
        GradPair gp6 = fully_connected_backward(hf.face_rows, m.params.at(hp + "fc6"), g6);
        accumulate_grads(store, hp + "fc6", gp6.param_grads);
        g_rows = std::move(gp6.input_grad);
    }

    Tensor g_ctx_rows;
    if (triple) {
        Tensor g7 = relu_back(hf.cfc7_pre, g_cfc7);
        GradPair gp7 = fully_connected_backward(hf.cfc6_out, m.params.at(hp + "ctx.fc7"), g7);
        accumulate_grads(store, hp + "ctx.fc7", gp7.param_grads);
        Tensor g6 = relu_back(hf.cfc6_pre, gp7.input_grad);
        GradPair gp6 = fully_connected_backward(hf.ctx_rows, m.params.at(hp + "ctx.fc6"), g6);
        accumulate_grads(store, hp + "ctx.fc6", gp6.param_grads);
        g_ctx_rows = std::move(gp6.input_grad);
    }

    // rows back to the RoI source maps
    if (cfg.variant == Variant::skipface) {
        const Tensor* maps[3] = {&st.blocks[2].out, &st.blocks[3].out, &st.blocks[4].out};
        const double scales[3] = {1.0 / 4, 1.0 / 8, 1.0 / 16};
        const char* reduce_names[3] = {"skip.head.reduce3", "skip.head.reduce4",
                                       "skip.head.reduce5"};
        const char* keys[3] = {"b3", "b4", "b5"};
        const int rc = cfg.skip_reduce_channels;
        for (int p = 0; p < P; ++p) {
            Tensor rowg = row_to_block(g_rows, p, 3 * rc, r, r);
            for (int blk = 0; blk < 3; ++blk) {
                // slice this block's channels out of the concatenated grad
                Tensor gred = zeros(Shape{rc, r, r});
                std::copy(rowg.data.begin() + static_cast<long>(blk) * rc * r * r,
                          rowg.data.begin() + static_cast<long>(blk + 1) * rc * r * r,
                          gred.data.begin());
                const Tensor& pooled = hf.skip_pooled[static_cast<size_t>(blk)][static_cast<size_t>(p)];
                Tensor norm = normalize_roi_block(pooled);
                GradPair gp = conv2d_backward(norm, m.params.at(reduce_names[blk]), 1, 0, gred);
                accumulate_grads(store, reduce_names[blk], gp.param_grads);
                Tensor g_pooled = normalize_roi_block_backward(pooled, gp.input_grad);
                RoiSpec spec{r, r, scales[blk]};
                Tensor g_map = roi_max_pool_backward(*maps[blk], hf.boxes[static_cast<size_t>(p)],
                                                     spec, g_pooled);
                add_into(map_grad_slot(st, keys[blk], maps[blk]->shape), g_map);
            }
        }
        return;
    }

    const Tensor& map = cfg.variant == Variant::facemagnet ? st.mag_roi_out
                        : cfg.variant == Variant::sizesplit
                            ? (hf.branch == 0 ? st.small_blocks[1].out : st.big_blocks[2].out)
                            : st.blocks[4].out;
    const std::string key = cfg.variant == Variant::facemagnet ? "mag_roi"
                            : cfg.variant == Variant::sizesplit
                                ? (hf.branch == 0 ? "small" : "big")
                                : "b5";
    RoiSpec spec{r, r, bi.roi_spatial_scale};
    Tensor& slot = map_grad_slot(st, key, map.shape);
    const int C = bi.roi_channels;

    for (int p = 0; p < P; ++p) {
        if (merge) {
            Tensor gred = row_to_block(g_rows, p, C, r, r);
            Tensor cat = row_to_block(hf.merge_rows, p, 2 * C, r, r);
            GradPair gp = conv2d_backward(cat, m.params.at(hp + "merge"), 1, 0, gred);
            accumulate_grads(store, hp + "merge", gp.param_grads);
            Tensor gf = zeros(Shape{C, r, r}), gc = zeros(Shape{C, r, r});
            std::copy(gp.input_grad.data.begin(), gp.input_grad.data.begin() + C * r * r,
                      gf.data.begin());
            std::copy(gp.input_grad.data.begin() + C * r * r, gp.input_grad.data.end(),
                      gc.data.begin());
            add_into(slot, roi_max_pool_backward(map, hf.boxes[static_cast<size_t>(p)], spec, gf));
            add_into(slot,
                     roi_max_pool_backward(map, hf.ctx_boxes[static_cast<size_t>(p)], spec, gc));
        } else {
            Tensor gf = row_to_block(g_rows, p, C, r, r);
            add_into(slot, roi_max_pool_backward(map, hf.boxes[static_cast<size_t>(p)], spec, gf));
            if (triple) {
                Tensor gc = row_to_block(g_ctx_rows, p, C, r, r);
                add_into(slot, roi_max_pool_backward(map, hf.ctx_boxes[static_cast<size_t>(p)],
                                                     spec, gc));
            }
        }
    }
}

void backward_network(const Model& m, ForwardState& st,
                      const std::vector<RpnOutGrads>& rpn_grads, GradStore& store) {
    const ModelConfig& cfg = m.config;

    if (cfg.variant == Variant::sizesplit) {
        Tensor g_small = backward_rpn(m, "small.", st.rpn[0], rpn_grads[0], store);
        Tensor g_big = backward_rpn(m, "big.", st.rpn[1], rpn_grads[1], store);
        if (auto it = st.map_grads.find("small"); it != st.map_grads.end())
            add_into(g_small, it->second);
        if (auto it = st.map_grads.find("big"); it != st.map_grads.end())
            add_into(g_big, it->second);

        Tensor gs = backward_block(m, "small.b4", st.small_blocks[1], std::move(g_small), store);
        gs = maxpool2_backward(st.small_blocks[0].out, gs);
        gs = backward_block(m, "small.b3", st.small_blocks[0], std::move(gs), store);

        Tensor gb = backward_block(m, "big.b5", st.big_blocks[2], std::move(g_big), store);
        gb = maxpool2_backward(st.big_blocks[1].out, gb);
        gb = backward_block(m, "big.b4", st.big_blocks[1], std::move(gb), store);
        gb = maxpool2_backward(st.big_blocks[0].out, gb);
        gb = backward_block(m, "big.b3", st.big_blocks[0], std::move(gb), store);

        add_into(gs, gb); // gradient at the shared pool output
        Tensor g = maxpool2_backward(st.blocks[1].out, gs);
        g = backward_block(m, "backbone.b2", st.blocks[1], std::move(g), store);
        g = maxpool2_backward(st.blocks[0].out, g);
        backward_block(m, "backbone.b1", st.blocks[0], std::move(g), store);
        return;
    }

    // per-block external gradients (b1..b5)
    std::vector<Tensor> ext(5);
    Tensor g_map = backward_rpn(m, "", st.rpn[0], rpn_grads[0], store);

    switch (cfg.variant) {
        case Variant::base:
        case Variant::context: {
            add_into(ext[4], g_map);
            if (auto it = st.map_grads.find("b5"); it != st.map_grads.end())
                add_into(ext[4], it->second);
            break;
        }
        case Variant::facemagnet: {
            Tensor g_pre = relu_back(st.mag_rpn_pre, g_map);
            GradPair gp = convtranspose2d_backward(st.blocks[4].out, m.params.at("mag.rpn"), 4, 2,
                                                   g_pre);
            accumulate_grads(store, "mag.rpn", gp.param_grads);
            add_into(ext[4], gp.input_grad);
            if (auto it = st.map_grads.find("mag_roi"); it != st.map_grads.end()) {
                Tensor g_roi_pre = relu_back(st.mag_roi_pre, it->second);
                GradPair gq = convtranspose2d_backward(st.blocks[4].out, m.params.at("mag.roi"),
                                                       4, 2, g_roi_pre);
                accumulate_grads(store, "mag.roi", gq.param_grads);
                add_into(ext[4], gq.input_grad);
            }
            break;
        }
        case Variant::skipface: {
            const int rc = cfg.skip_reduce_channels;
            const int h = g_map.dim(1), w = g_map.dim(2);
            const char* reduce_names[3] = {"skip.rpn.reduce3", "skip.rpn.reduce4",
                                           "skip.rpn.reduce5"};
            const Tensor* ins[3] = {&st.skip_u3, &st.skip_u4, &st.skip_u5};
            const int ups[3] = {1, 2, 4};
            for (int blk = 0; blk < 3; ++blk) {
                Tensor gslice = zeros(Shape{rc, h, w});
                std::copy(g_map.data.begin() + static_cast<long>(blk) * rc * h * w,
                          g_map.data.begin() + static_cast<long>(blk + 1) * rc * h * w,
                          gslice.data.begin());
                GradPair gp = conv2d_backward(*ins[blk], m.params.at(reduce_names[blk]), 1, 0,
                                              gslice);
                accumulate_grads(store, reduce_names[blk], gp.param_grads);
                Tensor gn = ups[blk] == 1 ? std::move(gp.input_grad)
                                          : upsample_nearest_backward(gp.input_grad, ups[blk]);
                add_into(ext[2 + blk],
                         l2_normalize_global_backward(st.blocks[static_cast<size_t>(2 + blk)].out, gn));
            }
            for (int blk = 0; blk < 3; ++blk) {
                const char* keys[3] = {"b3", "b4", "b5"};
                if (auto it = st.map_grads.find(keys[blk]); it != st.map_grads.end())
                    add_into(ext[2 + blk], it->second);
            }
            break;
        }
        default:
            break;
    }

    Tensor g = std::move(ext[4]);
    for (int b = 4; b >= 0; --b) {
        g = backward_block(m, "backbone.b" + std::to_string(b + 1), st.blocks[static_cast<size_t>(b)],
                           std::move(g), store);
        if (b > 0) {
            g = maxpool2_backward(st.blocks[static_cast<size_t>(b - 1)].out, g);
            if (!ext[static_cast<size_t>(b - 1)].data.empty())
                add_into(g, ext[static_cast<size_t>(b - 1)]);
        }
    }
}

} // namespace fmnet
