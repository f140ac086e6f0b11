#include <cmath>

#include "fmnet/layers.hpp"
#include "fmnet/losses.hpp"
#include "fmnet/roi.hpp"

namespace fmnet {

namespace {

// Deliberate perturbation hook so the failure path of the verification
// command can be exercised from tests.
Tensor maybe_corrupt(Tensor g, bool corrupt) {
    if (corrupt && !g.data.empty()) g.data[0] += 1e-2;
    return g;
}

MatchResult toy_match(int n_anchors, uint64_t seed) {
    Rng rng(seed);
    MatchResult m;
    m.labels.assign(static_cast<size_t>(n_anchors), AnchorLabel::negative);
    m.matched_gt.assign(static_cast<size_t>(n_anchors), -1);
    m.targets.assign(static_cast<size_t>(n_anchors), RegressionTarget{});
    for (int i = 0; i < n_anchors; ++i) {
        if (rng.uniform() < 0.3) {
            m.labels[static_cast<size_t>(i)] = AnchorLabel::positive;
            m.targets[static_cast<size_t>(i)] =
                RegressionTarget{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                                 rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
        }
    }
    m.labels[0] = AnchorLabel::positive; // at least one positive
    return m;
}

} // namespace

std::vector<GradCheckCase> run_gradient_suite(const std::string& fault_op) {
    std::vector<GradCheckCase> table;
    auto record = [&table](const std::string& name, double err) {
        for (auto& row : table)
            if (row.name == name) {
                row.max_rel_err = std::max(row.max_rel_err, err);
                return;
            }
        table.push_back({name, err});
    };

    for (uint64_t seed = 1; seed <= 10; ++seed) {
        {
            const bool fault = fault_op == "conv2d";
            Tensor x = uniform(Shape{2, 6, 6}, -1, 1, hash_key(seed, "s-conv-x"));
            LayerParams p = conv_params(3, 2, 3, hash_key(seed, "s-conv-p"));
            auto fwd = [&](const Tensor& v) { return conv2d(v, p, 1, 1); };
            auto bwd = [&](const Tensor& v, const Tensor& g) {
                return maybe_corrupt(conv2d_backward(v, p, 1, 1, g).input_grad, fault);
            };
            record("conv2d", gradient_check(fwd, bwd, x, seed));
            auto fwdw = [&](const Tensor& w) {
                LayerParams q = p;
                q.weights = w;
                return conv2d(x, q, 1, 1);
            };
            auto bwdw = [&](const Tensor&, const Tensor& g) {
                return conv2d_backward(x, p, 1, 1, g).param_grads.weights;
            };
            record("conv2d", gradient_check(fwdw, bwdw, p.weights, seed));
            auto fwdb = [&](const Tensor& b) {
                LayerParams q = p;
                q.bias = b;
                return conv2d(x, q, 1, 1);
            };
            auto bwdb = [&](const Tensor&, const Tensor& g) {
                return conv2d_backward(x, p, 1, 1, g).param_grads.bias;
            };
            record("conv2d", gradient_check(fwdb, bwdb, p.bias, seed));
        }
        {
            const bool fault = fault_op == "convtranspose2d";
            Tensor x = uniform(Shape{2, 4, 4}, -1, 1, hash_key(seed, "s-ct-x"));
            LayerParams p = convtranspose_params(2, 3, 8, 4);
            p.weights = uniform(p.weights.shape, -0.3, 0.3, hash_key(seed, "s-ct-w"));
            auto fwd = [&](const Tensor& v) { return convtranspose2d(v, p, 4, 2); };
            auto bwd = [&](const Tensor& v, const Tensor& g) {
                return maybe_corrupt(convtranspose2d_backward(v, p, 4, 2, g).input_grad, fault);
            };
            record("convtranspose2d", gradient_check(fwd, bwd, x, seed));
            auto fwdw = [&](const Tensor& w) {
                LayerParams q = p;
                q.weights = w;
                return convtranspose2d(x, q, 4, 2);
            };
            auto bwdw = [&](const Tensor&, const Tensor& g) {
                return convtranspose2d_backward(x, p, 4, 2, g).param_grads.weights;
            };
            record("convtranspose2d", gradient_check(fwdw, bwdw, p.weights, seed));
        }
        {
            const bool fault = fault_op == "maxpool2";
            Tensor x = uniform(Shape{2, 6, 6}, -1, 1, hash_key(seed, "s-pool-x"));
            for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += 1e-3 * static_cast<double>(i);
            auto fwd = [&](const Tensor& v) { return maxpool2(v); };
            auto bwd = [&](const Tensor& v, const Tensor& g) {
                return maybe_corrupt(maxpool2_backward(v, g), fault);
            };
            record("maxpool2", gradient_check(fwd, bwd, x, seed));
        }
        {
            const bool fault = fault_op == "upsample";
            Tensor x = uniform(Shape{3, 4, 4}, -1, 1, hash_key(seed, "s-up-x"));
            auto fwd = [&](const Tensor& v) { return upsample_nearest(v, 2); };
            auto bwd = [&](const Tensor&, const Tensor& g) {
                return maybe_corrupt(upsample_nearest_backward(g, 2), fault);
            };
            record("upsample", gradient_check(fwd, bwd, x, seed));
        }
        {
            const bool fault = fault_op == "fully_connected";
            Tensor x = uniform(Shape{10}, -1, 1, hash_key(seed, "s-fc-x"));
            LayerParams p = fc_params(5, 10, hash_key(seed, "s-fc-p"));
            auto fwd = [&](const Tensor& v) { return fully_connected(v, p); };
            auto bwd = [&](const Tensor& v, const Tensor& g) {
                return maybe_corrupt(fully_connected_backward(v, p, g).input_grad, fault);
            };
            record("fully_connected", gradient_check(fwd, bwd, x, seed));
            auto fwdw = [&](const Tensor& w) {
                LayerParams q = p;
                q.weights = w;
                return fully_connected(x, q);
            };
            auto bwdw = [&](const Tensor&, const Tensor& g) {
                return fully_connected_backward(x, p, g).param_grads.weights;
            };
            record("fully_connected", gradient_check(fwdw, bwdw, p.weights, seed));
        }
        {
            const bool fault = fault_op == "relu";
            Tensor x = uniform(Shape{12}, 0.2, 1.2, hash_key(seed, "s-relu-x"));
            for (size_t i = 0; i < x.data.size(); ++i)
                if (i % 2) x.data[i] = -x.data[i];
            auto fwd = [&](const Tensor& v) { return pointwise_activation(v, Activation::relu); };
            auto bwd = [&](const Tensor& v, const Tensor& g) {
                return maybe_corrupt(pointwise_activation_backward(v, Activation::relu, g), fault);
            };
            record("relu", gradient_check(fwd, bwd, x, seed));
        }
        {
            const bool fault = fault_op == "softmax2";
            Tensor x = uniform(Shape{4, 3, 3}, -2, 2, hash_key(seed, "s-sm-x"));
            auto fwd = [&](const Tensor& v) {
                return pointwise_activation(v, Activation::softmax2);
            };
            auto bwd = [&](const Tensor& v, const Tensor& g) {
                return maybe_corrupt(pointwise_activation_backward(v, Activation::softmax2, g),
                                     fault);
            };
            record("softmax2", gradient_check(fwd, bwd, x, seed));
        }
        {
            const bool fault = fault_op == "l2_normalize_global";
            Tensor x = uniform(Shape{3, 4, 4}, 0.4, 1.4, hash_key(seed, "s-l2-x"));
            auto fwd = [&](const Tensor& v) { return l2_normalize_global(v); };
            auto bwd = [&](const Tensor& v, const Tensor& g) {
                return maybe_corrupt(l2_normalize_global_backward(v, g), fault);
            };
            record("l2_normalize_global", gradient_check(fwd, bwd, x, seed));
        }
        {
            const bool fault = fault_op == "roi_max_pool";
            Tensor x = uniform(Shape{2, 6, 6}, -1, 1, hash_key(seed, "s-roi-x"));
            for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += 1e-3 * static_cast<double>(i);
            Box box{0.6, 1.2, 5.4, 5.8};
            RoiSpec spec{3, 3, 1.0};
            auto fwd = [&](const Tensor& v) { return roi_max_pool(v, box, spec); };
            auto bwd = [&](const Tensor& v, const Tensor& g) {
                return maybe_corrupt(roi_max_pool_backward(v, box, spec, g), fault);
            };
            record("roi_max_pool", gradient_check(fwd, bwd, x, seed));
        }
        {
            const bool fault = fault_op == "binary_class_loss";
            Rng rng(hash_key(seed, "s-bce"));
            const int label = static_cast<int>(rng.next_below(2));
            Tensor p(Shape{1}, {rng.uniform(0.1, 0.9)});
            auto fwd = [&](const Tensor& v) {
                return Tensor(Shape{1}, {binary_class_loss(v.data[0], label)});
            };
            auto bwd = [&](const Tensor& v, const Tensor& g) {
                Tensor out(Shape{1}, {g.data[0] * binary_class_loss_grad(v.data[0], label)});
                return maybe_corrupt(out, fault);
            };
            record("binary_class_loss", gradient_check(fwd, bwd, p, seed));
        }
        {
            const bool fault = fault_op == "smooth_l1";
            Rng rng(hash_key(seed, "s-sl1"));
            double d = rng.uniform(-0.85, 0.85);
            if (rng.next_below(2)) d = (d > 0 ? 1.2 : -1.2) + d; // far branch, away from kink
            Tensor v(Shape{1}, {d});
            auto fwd = [&](const Tensor& t) { return Tensor(Shape{1}, {smooth_l1(t.data[0])}); };
            auto bwd = [&](const Tensor& t, const Tensor& g) {
                Tensor out(Shape{1}, {g.data[0] * smooth_l1_grad(t.data[0])});
                return maybe_corrupt(out, fault);
            };
            record("smooth_l1", gradient_check(fwd, bwd, v, seed));
        }
        {
            const bool fault = fault_op == "rpn_loss";
            const int n = 12, S = 2;
            MatchResult match = toy_match(n, hash_key(seed, "s-rpn-m"));
            std::vector<int> sampled;
            for (int i = 0; i < n; ++i) sampled.push_back(i);
            Tensor probs = uniform(Shape{n}, 0.15, 0.85, hash_key(seed, "s-rpn-p"));
            Tensor regs = uniform(Shape{n, 4}, -0.6, 0.6, hash_key(seed, "s-rpn-r"));
            auto unpack_regs = [&](const Tensor& rt) {
                std::vector<std::array<double, 4>> rv(static_cast<size_t>(n));
                for (int i = 0; i < n; ++i)
                    for (int k = 0; k < 4; ++k)
                        rv[static_cast<size_t>(i)][static_cast<size_t>(k)] = rt.at(i, k);
                return rv;
            };
            auto fwd_p = [&](const Tensor& pv) {
                std::vector<double> p(pv.data.begin(), pv.data.end());
                auto r = rpn_loss(p, unpack_regs(regs), match, sampled, S);
                return Tensor(Shape{1}, {r.cls_loss + r.reg_loss});
            };
            auto bwd_p = [&](const Tensor& pv, const Tensor& g) {
                std::vector<double> p(pv.data.begin(), pv.data.end());
                auto r = rpn_loss(p, unpack_regs(regs), match, sampled, S);
                Tensor out = zeros(pv.shape);
                for (const auto& [idx, dv] : r.dprob) out.data[static_cast<size_t>(idx)] += g.data[0] * dv;
                return maybe_corrupt(out, fault);
            };
            record("rpn_loss", gradient_check(fwd_p, bwd_p, probs, seed));

            std::vector<double> pfix(probs.data.begin(), probs.data.end());
            auto fwd_r = [&](const Tensor& rv) {
                auto r = rpn_loss(pfix, unpack_regs(rv), match, sampled, S);
                return Tensor(Shape{1}, {r.cls_loss + r.reg_loss});
            };
            auto bwd_r = [&](const Tensor& rv, const Tensor& g) {
                auto r = rpn_loss(pfix, unpack_regs(rv), match, sampled, S);
                Tensor out = zeros(rv.shape);
                for (const auto& [idx, dr] : r.dreg)
                    for (int k = 0; k < 4; ++k)
                        out.at(idx, k) += g.data[0] * dr[static_cast<size_t>(k)];
                return out;
            };
            record("rpn_loss", gradient_check(fwd_r, bwd_r, regs, seed));
        }
        {
            const bool fault = fault_op == "head_loss";
            Rng rng(hash_key(seed, "s-head"));
            const int n = 8;
            std::vector<int> labels;
            std::vector<RegressionTarget> targets;
            for (int i = 0; i < n; ++i) {
                labels.push_back(static_cast<int>(rng.next_below(2)));
                targets.push_back(RegressionTarget{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4),
                                                   rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)});
            }
            Tensor probs = uniform(Shape{n}, 0.15, 0.85, hash_key(seed, "s-head-p"));
            Tensor regs = uniform(Shape{n, 4}, -0.6, 0.6, hash_key(seed, "s-head-r"));
            auto unpack_regs = [&](const Tensor& rt) {
                std::vector<std::array<double, 4>> rv(static_cast<size_t>(n));
                for (int i = 0; i < n; ++i)
                    for (int k = 0; k < 4; ++k)
                        rv[static_cast<size_t>(i)][static_cast<size_t>(k)] = rt.at(i, k);
                return rv;
            };
            auto fwd_p = [&](const Tensor& pv) {
                std::vector<double> p(pv.data.begin(), pv.data.end());
                auto r = head_loss(p, unpack_regs(regs), labels, targets, n);
                return Tensor(Shape{1}, {r.cls_loss + r.reg_loss});
            };
            auto bwd_p = [&](const Tensor& pv, const Tensor& g) {
                std::vector<double> p(pv.data.begin(), pv.data.end());
                auto r = head_loss(p, unpack_regs(regs), labels, targets, n);
                Tensor out = zeros(pv.shape);
                for (size_t i = 0; i < r.dprob.size(); ++i) out.data[i] = g.data[0] * r.dprob[i];
                return maybe_corrupt(out, fault);
            };
            record("head_loss", gradient_check(fwd_p, bwd_p, probs, seed));

            std::vector<double> pfix(probs.data.begin(), probs.data.end());
            auto fwd_r = [&](const Tensor& rv) {
                auto r = head_loss(pfix, unpack_regs(rv), labels, targets, n);
                return Tensor(Shape{1}, {r.cls_loss + r.reg_loss});
            };
            auto bwd_r = [&](const Tensor& rv, const Tensor& g) {
                auto r = head_loss(pfix, unpack_regs(rv), labels, targets, n);
                Tensor out = zeros(rv.shape);
                for (size_t i = 0; i < r.dreg.size(); ++i)
                    for (int k = 0; k < 4; ++k)
                        out.at(static_cast<int>(i), k) = g.data[0] * r.dreg[i][static_cast<size_t>(k)];
                return out;
            };
            record("head_loss", gradient_check(fwd_r, bwd_r, regs, seed));
        }
    }
    return table;
}

} // namespace fmnet
