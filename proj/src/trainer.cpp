#include "fmnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "fmnet/inference.hpp"

namespace fmnet {

void TrainConfig::validate() const {
    if (total_iters < 0) throw ValidationError("total_iters must be >= 0");
    if (!(lr_initial > 0) || !(lr_after > 0) || lr_after > lr_initial)
        throw ValidationError("learning rates must satisfy 0 < lr_after <= lr_initial");
    if (total_iters > 0 && lr_drop_iter >= total_iters)
        throw ValidationError("lr_drop_iter must be < total_iters");
    if (!(momentum >= 0 && momentum < 1)) throw ValidationError("momentum must be in [0,1)");
    if (weight_decay < 0) throw ValidationError("weight_decay must be >= 0");
    if (images_per_batch < 1) throw ValidationError("images_per_batch must be >= 1");
    if (rpn_batch < 2) throw ValidationError("rpn_batch must be >= 2");
    if (head_batch < 2) throw ValidationError("head_batch must be >= 2");
    if (!(pos_neg_ratio > 0)) throw ValidationError("pos_neg_ratio must be > 0");
    if (!(rpn_nms_thresh > 0 && rpn_nms_thresh < 1))
        throw ValidationError("rpn_nms_thresh must be in (0,1)");
    if (train_proposals < 1) throw ValidationError("train_proposals must be >= 1");
}

OptimizerState make_optimizer_state(const Model& m) {
    OptimizerState st;
    for (const auto& [name, p] : m.params) {
        LayerParams v;
        v.weights = zeros(p.weights.shape);
        v.has_bias = p.has_bias;
        if (p.has_bias) v.bias = zeros(p.bias.shape);
        st.velocity[name] = std::move(v);
    }
    return st;
}

namespace {

void momentum_update(Tensor& w, const Tensor* g, Tensor& v, double lr, double mu, double wd) {
    for (size_t i = 0; i < w.data.size(); ++i) {
        double grad = g ? g->data[i] : 0.0;
        if (wd > 0) grad += wd * w.data[i];
        v.data[i] = mu * v.data[i] - lr * grad;
        w.data[i] += v.data[i];
    }
}

} // namespace

void sgd_momentum_step(Model& m, const GradStore& grads, OptimizerState& st, double lr,
                       double momentum, double weight_decay) {
    for (auto& [name, p] : m.params) {
        auto vi = st.velocity.find(name);
        if (vi == st.velocity.end())
            throw ShapeError("optimizer state missing parameter " + name);
        const auto gi = grads.find(name);
        const LayerParams* g = gi == grads.end() ? nullptr : &gi->second;
        if (g && g->weights.shape != p.weights.shape)
            throw ShapeError("gradient shape mismatch for " + name);
        momentum_update(p.weights, g ? &g->weights : nullptr, vi->second.weights, lr, momentum,
                        weight_decay);
        if (p.has_bias)
            momentum_update(p.bias, (g && g->has_bias) ? &g->bias : nullptr, vi->second.bias, lr,
                            momentum, weight_decay);
    }
}

double learning_rate_at(int iter, const TrainConfig& cfg) {
    if (iter < 0 || iter >= cfg.total_iters)
        throw ParamError("learning_rate_at: iteration out of range");
    return iter < cfg.lr_drop_iter ? cfg.lr_initial : cfg.lr_after;
}

std::vector<int> sample_balanced_batch(const std::vector<int8_t>& labels, int batch,
                                       double ratio, uint64_t seed) {
    if (batch < 2) throw ParamError("sample batch must be >= 2");
    if (!(ratio > 0)) throw ParamError("sample ratio must be > 0");
    std::vector<int> pos, neg;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) pos.push_back(static_cast<int>(i));
        else if (labels[i] == 0) neg.push_back(static_cast<int>(i));
    }
    if (pos.empty() && neg.empty())
        throw DegenerateInputError("sample_balanced_batch: no non-ignore candidates");

    const int target_pos = static_cast<int>(std::llround(batch * ratio / (1.0 + ratio)));
    int n_pos = std::min<int>(target_pos, static_cast<int>(pos.size()));
    int n_neg = std::min<int>(batch - n_pos, static_cast<int>(neg.size()));
    // negatives scarce: refill with remaining positives
    n_pos = std::min<int>(static_cast<int>(pos.size()), n_pos + (batch - n_pos - n_neg));

    Rng rng(seed);
    auto draw = [&rng](std::vector<int>& src, int n) {
        for (int i = static_cast<int>(src.size()) - 1; i > 0; --i) {
            int j = static_cast<int>(rng.next_below(static_cast<uint64_t>(i) + 1));
            std::swap(src[static_cast<size_t>(i)], src[static_cast<size_t>(j)]);
        }
        src.resize(static_cast<size_t>(n));
    };
    draw(pos, n_pos);
    draw(neg, n_neg);
    std::vector<int> out = pos;
    out.insert(out.end(), neg.begin(), neg.end());
    return out;
}

// ---- per-iteration plan ----

ImagePlan plan_iteration(const Model& m, const ForwardState& st, const std::vector<Box>& gts,
                         const TrainConfig& cfg, uint64_t iter_key) {
    const auto rpns = rpn_outputs(m, st);
    const auto info = branch_info(m.config);
    Rng rng(iter_key);

    ImagePlan plan;
    for (size_t b = 0; b < rpns.size(); ++b) {
        BranchPlan bp;
        std::vector<Box> routed;
        if (m.config.variant == Variant::sizesplit) {
            for (const Box& g : gts) {
                const bool small = g.min_side() < m.config.size_split_threshold;
                if ((b == 0) == small) routed.push_back(g);
            }
        } else {
            routed = gts;
        }

        bp.grid = generate_anchor_grid(rpns[b].grid_h, rpns[b].grid_w, rpns[b].feature_stride,
                                       rpns[b].scales);
        bp.match = match_anchors(bp.grid, routed);
        std::vector<int8_t> alabels(bp.match.labels.size());
        for (size_t i = 0; i < alabels.size(); ++i)
            alabels[i] = static_cast<int8_t>(bp.match.labels[i]);
        bp.rpn_sample = sample_balanced_batch(alabels, cfg.rpn_batch, cfg.pos_neg_ratio,
                                              rng.next_u64());

        // head proposals: suppressed top RPN boxes plus ground truth
        auto all = decode_rpn_boxes(rpns[b], bp.grid, st.img_w, st.img_h);
        std::vector<Box> boxes;
        std::vector<double> scores;
        for (const auto& p : all) {
            boxes.push_back(p.box);
            scores.push_back((p.box.w() > 0 && p.box.h() > 0 && std::isfinite(p.objectness))
                             ? p.objectness
                             : -1.0);
        }
        std::vector<Box> props;
        for (int i : nms_indices(boxes, scores, cfg.rpn_nms_thresh, cfg.train_proposals)) {
            if (scores[static_cast<size_t>(i)] < 0.0) continue;
            props.push_back(all[static_cast<size_t>(i)].box);
        }
        for (const Box& g : routed) props.push_back(g);

        std::vector<int8_t> plabels(props.size(), 0);
        std::vector<int> pmatch(props.size(), -1);
        for (size_t i = 0; i < props.size(); ++i) {
            double best = 0.0;
            int bg = -1;
            for (size_t gi = 0; gi < routed.size(); ++gi) {
                const double iou = box_iou(props[i], routed[gi]);
                if (iou > best) {
                    best = iou;
                    bg = static_cast<int>(gi);
                }
            }
            if (best > 0.7) {
                plabels[i] = 1;
                pmatch[i] = bg;
            } else if (best >= 0.3) {
                plabels[i] = -1;
            }
        }
        for (int8_t l : plabels) {
            bp.avail_pos += (l == 1);
            bp.avail_neg += (l == 0);
        }

        std::vector<int> sampled = sample_balanced_batch(plabels, cfg.head_batch,
                                                         cfg.pos_neg_ratio, rng.next_u64());
        for (int i : sampled) {
            bp.proposals.push_back(props[static_cast<size_t>(i)]);
            bp.labels.push_back(plabels[static_cast<size_t>(i)] == 1 ? 1 : 0);
            bp.targets.push_back(plabels[static_cast<size_t>(i)] == 1
                                     ? encode_box_targets(props[static_cast<size_t>(i)],
                                                          routed[static_cast<size_t>(pmatch[static_cast<size_t>(i)])])
                                     : RegressionTarget{});
        }
        plan.branches.push_back(std::move(bp));
    }
    return plan;
}

// ---- plan evaluation ----

namespace {

void rpn_arrays(const RpnBranchOutput& r, std::vector<double>& probs,
                std::vector<std::array<double, 4>>& regs) {
    const int S = static_cast<int>(r.scales.size());
    probs.clear();
    regs.clear();
    for (int row = 0; row < r.grid_h; ++row)
        for (int col = 0; col < r.grid_w; ++col)
            for (int s = 0; s < S; ++s) {
                probs.push_back(r.objectness.at(2 * s + 1, row, col));
                regs.push_back({r.reg.at(4 * s + 0, row, col), r.reg.at(4 * s + 1, row, col),
                                r.reg.at(4 * s + 2, row, col), r.reg.at(4 * s + 3, row, col)});
            }
}

struct BranchEval {
    RpnLossResult rpn;
    HeadForward hf;
    bool has_ctx = false;
    bool has_head = false;
    HeadLossResult face, ctx, joint;
    std::vector<int> labels_k;
    std::vector<RegressionTarget> targets_k;
};

LossReport evaluate_plan(const Model& m, const ForwardState& st, const ImagePlan& plan,
                         std::vector<BranchEval>& evals) {
    const auto rpns = rpn_outputs(m, st);
    const auto info = branch_info(m.config);
    const int B = static_cast<int>(plan.branches.size());
    const LossWeights& w = m.config.loss_weights;

    LossReport rep;
    for (int b = 0; b < B; ++b) {
        const BranchPlan& bp = plan.branches[static_cast<size_t>(b)];
        BranchEval ev;
        std::vector<double> probs;
        std::vector<std::array<double, 4>> regs;
        rpn_arrays(rpns[static_cast<size_t>(b)], probs, regs);
        ev.rpn = rpn_loss(probs, regs, bp.match, bp.rpn_sample,
                          static_cast<int>(rpns[static_cast<size_t>(b)].scales.size()));
        rep.rpn_cls += ev.rpn.cls_loss / B;
        rep.rpn_reg += ev.rpn.reg_loss / B;

        // the 1x1-merge head shares one stack and trains a single loss
        ev.has_ctx = info[static_cast<size_t>(b)].context && !m.config.context_merge_1x1;
        if (!bp.proposals.empty()) {
            ev.hf = forward_heads_full(m, st, bp.proposals, b);
            const auto& kept = ev.hf.out.kept;
            const int n = static_cast<int>(kept.size());
            if (n > 0) {
                ev.has_head = true;
                for (int i : kept) {
                    ev.labels_k.push_back(bp.labels[static_cast<size_t>(i)]);
                    ev.targets_k.push_back(bp.targets[static_cast<size_t>(i)]);
                }
                ev.joint = head_loss(ev.hf.out.joint.prob_pos, ev.hf.out.joint.reg, ev.labels_k,
                                     ev.targets_k, n);
                if (ev.has_ctx) {
                    ev.face = head_loss(ev.hf.out.face.prob_pos, ev.hf.out.face.reg, ev.labels_k,
                                        ev.targets_k, n);
                    ev.ctx = head_loss(ev.hf.out.ctx.prob_pos, ev.hf.out.ctx.reg, ev.labels_k,
                                       ev.targets_k, n);
                    rep.face_cls += ev.face.cls_loss / B;
                    rep.face_reg += ev.face.reg_loss / B;
                    rep.ctx_cls += ev.ctx.cls_loss / B;
                    rep.ctx_reg += ev.ctx.reg_loss / B;
                    rep.joint_cls += ev.joint.cls_loss / B;
                    rep.joint_reg += ev.joint.reg_loss / B;
                    rep.head_cls += (w.alpha * ev.face.cls_loss + w.beta * ev.ctx.cls_loss +
                                     w.gamma * ev.joint.cls_loss) / B;
                    rep.head_reg += (w.alpha * ev.face.reg_loss + w.beta * ev.ctx.reg_loss +
                                     w.gamma * ev.joint.reg_loss) / B;
                } else {
                    rep.joint_cls += ev.joint.cls_loss / B;
                    rep.joint_reg += ev.joint.reg_loss / B;
                    rep.head_cls += ev.joint.cls_loss / B;
                    rep.head_reg += ev.joint.reg_loss / B;
                }
                rep.n_head += n;
            }
        }
        evals.push_back(std::move(ev));
    }
    rep.total = rep.rpn_cls + rep.rpn_reg + rep.head_cls + rep.head_reg;
    return rep;
}

} // namespace

StepResult execute_plan(const Model& m, ForwardState& st, const ImagePlan& plan) {
    std::vector<BranchEval> evals;
    StepResult sr;
    sr.report = evaluate_plan(m, st, plan, evals);

    const auto rpns = rpn_outputs(m, st);
    const int B = static_cast<int>(plan.branches.size());
    const double bw = 1.0 / B;
    const LossWeights& w = m.config.loss_weights;

    std::vector<RpnOutGrads> rpn_grads;
    for (int b = 0; b < B; ++b) {
        const auto& r = rpns[static_cast<size_t>(b)];
        const int S = static_cast<int>(r.scales.size());
        RpnOutGrads g;
        g.d_probs = zeros(r.objectness.shape);
        g.d_reg = zeros(r.reg.shape);
        for (const auto& [idx, dv] : evals[static_cast<size_t>(b)].rpn.dprob) {
            const int s = idx % S, cell = idx / S;
            g.d_probs.at(2 * s + 1, cell / r.grid_w, cell % r.grid_w) += bw * dv;
        }
        for (const auto& [idx, dr] : evals[static_cast<size_t>(b)].rpn.dreg) {
            const int s = idx % S, cell = idx / S;
            for (int k = 0; k < 4; ++k)
                g.d_reg.at(4 * s + k, cell / r.grid_w, cell % r.grid_w) += bw * dr[static_cast<size_t>(k)];
        }
        rpn_grads.push_back(std::move(g));

        BranchEval& ev = evals[static_cast<size_t>(b)];
        if (!ev.has_head) continue;
        const size_t n = ev.labels_k.size();
        HeadOutGrads hg;
        hg.d_joint_prob.resize(n);
        hg.d_joint_reg.resize(n);
        const double jw = ev.has_ctx ? bw * w.gamma : bw;
        for (size_t i = 0; i < n; ++i) {
            hg.d_joint_prob[i] = jw * ev.joint.dprob[i];
            for (int k = 0; k < 4; ++k)
                hg.d_joint_reg[i][static_cast<size_t>(k)] = jw * ev.joint.dreg[i][static_cast<size_t>(k)];
        }
        if (ev.has_ctx) {
            hg.d_face_prob.resize(n);
            hg.d_face_reg.resize(n);
            hg.d_ctx_prob.resize(n);
            hg.d_ctx_reg.resize(n);
            for (size_t i = 0; i < n; ++i) {
                hg.d_face_prob[i] = bw * w.alpha * ev.face.dprob[i];
                hg.d_ctx_prob[i] = bw * w.beta * ev.ctx.dprob[i];
                for (int k = 0; k < 4; ++k) {
                    hg.d_face_reg[i][static_cast<size_t>(k)] =
                        bw * w.alpha * ev.face.dreg[i][static_cast<size_t>(k)];
                    hg.d_ctx_reg[i][static_cast<size_t>(k)] =
                        bw * w.beta * ev.ctx.dreg[i][static_cast<size_t>(k)];
                }
            }
        }
        backward_heads(m, st, ev.hf, hg, sr.grads);
    }
    backward_network(m, st, rpn_grads, sr.grads);
    return sr;
}

LossReport plan_loss(const Model& m, const std::vector<Box>&, const Tensor& image,
                     const ImagePlan& plan) {
    ForwardState st = forward_network(m, image);
    std::vector<BranchEval> evals;
    return evaluate_plan(m, st, plan, evals);
}

// ---- training loop ----

namespace {

void scale_grads(GradStore& g, double f) {
    if (f == 1.0) return;
    for (auto& [k, p] : g) {
        for (auto& v : p.weights.data) v *= f;
        if (p.has_bias)
            for (auto& v : p.bias.data) v *= f;
    }
}

void add_report(LossReport& acc, const LossReport& r, double f) {
    acc.rpn_cls += f * r.rpn_cls;
    acc.rpn_reg += f * r.rpn_reg;
    acc.head_cls += f * r.head_cls;
    acc.head_reg += f * r.head_reg;
    acc.face_cls += f * r.face_cls;
    acc.face_reg += f * r.face_reg;
    acc.ctx_cls += f * r.ctx_cls;
    acc.ctx_reg += f * r.ctx_reg;
    acc.joint_cls += f * r.joint_cls;
    acc.joint_reg += f * r.joint_reg;
    acc.total += f * r.total;
    acc.n_head += r.n_head;
}

} // namespace

TrainStats train(Model& m, const Dataset& data, const TrainConfig& cfg, OptimizerState* opt,
                 int start_iter) {
    cfg.validate();
    m.config.validate();
    if (data.empty()) throw ParamError("train: dataset is empty");
    if (start_iter < 0 || start_iter > cfg.total_iters)
        throw ParamError("train: start_iter out of range");

    OptimizerState local = opt ? *opt : make_optimizer_state(m);
    TrainStats stats;
    const int n = static_cast<int>(data.size());
    const int target_pos =
        static_cast<int>(std::llround(cfg.head_batch * cfg.pos_neg_ratio / (1.0 + cfg.pos_neg_ratio)));

    long cached_epoch = -1;
    std::vector<int> perm;

    for (int iter = start_iter; iter < cfg.total_iters; ++iter) {
        GradStore grads;
        LossReport avg;
        for (int j = 0; j < cfg.images_per_batch; ++j) {
            const long k = static_cast<long>(iter) * cfg.images_per_batch + j;
            const long epoch = k / n;
            if (epoch != cached_epoch) {
                perm = Rng(hash_key(cfg.seed, "epoch", static_cast<uint64_t>(epoch))).permutation(n);
                cached_epoch = epoch;
            }
            const TrainSample& smp = data[static_cast<size_t>(perm[static_cast<size_t>(k % n)])];

            ForwardState st = forward_network(m, smp.image);
            ImagePlan plan = plan_iteration(m, st, smp.boxes, cfg,
                                            hash_key(cfg.seed, "iter", static_cast<uint64_t>(k)));

            // 1:1 sampling rule, checked on every head batch
            for (const BranchPlan& bp : plan.branches) {
                if (bp.proposals.empty()) continue;
                stats.head_batches_checked += 1;
                int got_pos = 0;
                for (int l : bp.labels) got_pos += l;
                if (bp.avail_pos >= target_pos && bp.avail_neg >= cfg.head_batch - target_pos &&
                    got_pos != target_pos)
                    throw ValidationError("head batch violated the positive ratio rule at iteration " +
                                          std::to_string(iter));
            }

            StepResult sr = execute_plan(m, st, plan);
            scale_grads(sr.grads, 1.0 / cfg.images_per_batch);
            for (const auto& [name, g] : sr.grads) accumulate_grads(grads, name, g);
            add_report(avg, sr.report, 1.0 / cfg.images_per_batch);
        }

        if (!std::isfinite(avg.total))
            throw NumericAbortError(iter, avg,
                                    "non-finite loss at iteration " + std::to_string(iter));

        sgd_momentum_step(m, grads, local, learning_rate_at(iter, cfg), cfg.momentum,
                          cfg.weight_decay);
        stats.trace.emplace_back(iter, avg);
    }
    if (opt) *opt = local;
    return stats;
}

std::string trace_csv(const TrainStats& stats) {
    std::string out = "iter,rpn_cls,rpn_reg,head_cls,head_reg,total\n";
    char line[256];
    for (const auto& [iter, r] : stats.trace) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", iter, r.rpn_cls,
                      r.rpn_reg, r.head_cls, r.head_reg, r.total);
        out += line;
    }
    return out;
}

} // namespace fmnet
