#include "fmnet/layers.hpp"

#include <algorithm>
#include <cmath>

namespace fmnet {

namespace {

struct Dims4 {
    int N, C, H, W;
};

Dims4 view4(const Tensor& t, const char* what) {
    if (t.shape.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
    if (t.shape.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
    throw ShapeError(std::string(what) + " expects a rank-3 or rank-4 tensor, got " +
                     t.shape.str());
}

Shape shape_like(const Tensor& ref, int C, int H, int W) {
    if (ref.shape.rank() == 3) return Shape{C, H, W};
    return Shape{ref.dim(0), C, H, W};
}

inline int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

void check_conv_args(int k, int stride, int pad, const char* what) {
    if (stride < 1) throw ParamError(std::string(what) + ": stride must be >= 1");
    if (pad < 0) throw ParamError(std::string(what) + ": pad must be >= 0");
    if (k < 1) throw ShapeError(std::string(what) + ": kernel must be >= 1");
}

// out[n,co,:,:] += cross-correlation of x[n,ci,:,:] with w[co,ci,:,:].
// Weight layout [Co,Ci,k,k]; bias optional.
void conv2d_core(const double* x, Dims4 xd, const double* w, int Co, int k,
                 int stride, int pad, const double* bias, double* out, int Ho, int Wo) {
    const int Ci = xd.C, H = xd.H, W = xd.W;
    for (int n = 0; n < xd.N; ++n) {
        const double* xn = x + static_cast<long>(n) * Ci * H * W;
        double* on = out + static_cast<long>(n) * Co * Ho * Wo;
        for (int co = 0; co < Co; ++co) {
            double* oplane = on + static_cast<long>(co) * Ho * Wo;
            const double b = bias ? bias[co] : 0.0;
            std::fill(oplane, oplane + static_cast<long>(Ho) * Wo, b);
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xplane = xn + static_cast<long>(ci) * H * W;
                const double* wk = w + (static_cast<long>(co) * Ci + ci) * k * k;
                for (int kh = 0; kh < k; ++kh) {
                    const int oh_lo = std::max(0, ceil_div(pad - kh, stride));
                    const int oh_hi = std::min(Ho, floor_div(H - 1 + pad - kh, stride) + 1);
                    for (int kw = 0; kw < k; ++kw) {
                        const double wv = wk[kh * k + kw];
                        const int ow_lo = std::max(0, ceil_div(pad - kw, stride));
                        const int ow_hi = std::min(Wo, floor_div(W - 1 + pad - kw, stride) + 1);
                        for (int oh = oh_lo; oh < oh_hi; ++oh) {
                            const int ih = oh * stride - pad + kh;
                            const double* __restrict__ xrow = xplane + static_cast<long>(ih) * W;
                            double* __restrict__ orow = oplane + static_cast<long>(oh) * Wo;
                            if (stride == 1) {
                                const int base = kw - pad;
                                for (int ow = ow_lo; ow < ow_hi; ++ow)
                                    orow[ow] += wv * xrow[ow + base];
                            } else {
                                for (int ow = ow_lo; ow < ow_hi; ++ow)
                                    orow[ow] += wv * xrow[ow * stride - pad + kw];
                            }
                        }
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const LayerParams& p, int stride, int pad) {
    check_conv_args(p.weights.dim(2), stride, pad, "conv2d");
    const Dims4 xd = view4(x, "conv2d");
    if (p.weights.shape.rank() != 4)
        throw ShapeError("conv2d weights must be rank 4 [Co,Ci,k,k]");
    const int Co = p.weights.dim(0), Ci = p.weights.dim(1), k = p.weights.dim(2);
    if (p.weights.dim(3) != k) throw ShapeError("conv2d kernels must be square");
    if (Ci != xd.C)
        throw ShapeError("conv2d channel mismatch: input " + x.shape.str() +
                         " vs weights " + p.weights.shape.str());
    if (p.has_bias && p.bias.size() != Co)
        throw ShapeError("conv2d bias length must equal output channels");
    const int Ho = (xd.H + 2 * pad - k) / stride + 1;
    const int Wo = (xd.W + 2 * pad - k) / stride + 1;
    if (xd.H + 2 * pad < k || xd.W + 2 * pad < k || Ho < 1 || Wo < 1)
        throw ShapeError("conv2d kernel does not fit padded input");

    Tensor out = zeros(shape_like(x, Co, Ho, Wo));
    conv2d_core(x.data.data(), xd, p.weights.data.data(), Co, k, stride, pad,
                p.has_bias ? p.bias.data.data() : nullptr, out.data.data(), Ho, Wo);
    return out;
}

GradPair conv2d_backward(const Tensor& x, const LayerParams& p, int stride, int pad,
                         const Tensor& out_grad) {
    const Dims4 xd = view4(x, "conv2d_backward");
    const Dims4 gd = view4(out_grad, "conv2d_backward");
    const int Co = p.weights.dim(0), Ci = p.weights.dim(1), k = p.weights.dim(2);
    const int Ho = gd.H, Wo = gd.W;

    GradPair gp;
    gp.input_grad = zeros(x.shape);
    gp.param_grads.weights = zeros(p.weights.shape);
    gp.param_grads.has_bias = p.has_bias;
    if (p.has_bias) gp.param_grads.bias = zeros(p.bias.shape);

    double* dx = gp.input_grad.data.data();
    double* dw = gp.param_grads.weights.data.data();
    const double* w = p.weights.data.data();
    const double* g = out_grad.data.data();
    const double* xp = x.data.data();
    const int H = xd.H, W = xd.W;

    for (int n = 0; n < xd.N; ++n) {
        const double* xn = xp + static_cast<long>(n) * Ci * H * W;
        const double* gn = g + static_cast<long>(n) * Co * Ho * Wo;
        double* dxn = dx + static_cast<long>(n) * Ci * H * W;
        for (int co = 0; co < Co; ++co) {
            const double* gplane = gn + static_cast<long>(co) * Ho * Wo;
            if (p.has_bias) {
                double s = 0.0;
                for (long i = 0; i < static_cast<long>(Ho) * Wo; ++i) s += gplane[i];
                gp.param_grads.bias.data[static_cast<size_t>(co)] += s;
            }
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xplane = xn + static_cast<long>(ci) * H * W;
                double* dxplane = dxn + static_cast<long>(ci) * H * W;
                const double* wk = w + (static_cast<long>(co) * Ci + ci) * k * k;
                double* dwk = dw + (static_cast<long>(co) * Ci + ci) * k * k;
                for (int kh = 0; kh < k; ++kh) {
                    const int oh_lo = std::max(0, ceil_div(pad - kh, stride));
                    const int oh_hi = std::min(Ho, floor_div(H - 1 + pad - kh, stride) + 1);
                    for (int kw = 0; kw < k; ++kw) {
                        const double wv = wk[kh * k + kw];
                        const int ow_lo = std::max(0, ceil_div(pad - kw, stride));
                        const int ow_hi = std::min(Wo, floor_div(W - 1 + pad - kw, stride) + 1);
                        double wacc = 0.0;
                        for (int oh = oh_lo; oh < oh_hi; ++oh) {
                            const int ih = oh * stride - pad + kh;
                            const double* __restrict__ xrow = xplane + static_cast<long>(ih) * W;
                            double* __restrict__ dxrow = dxplane + static_cast<long>(ih) * W;
                            const double* __restrict__ grow = gplane + static_cast<long>(oh) * Wo;
                            if (stride == 1) {
                                const int base = kw - pad;
                                for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                    wacc += grow[ow] * xrow[ow + base];
                                    dxrow[ow + base] += wv * grow[ow];
                                }
                            } else {
                                for (int ow = ow_lo; ow < ow_hi; ++ow) {
                                    const int iw = ow * stride - pad + kw;
                                    wacc += grow[ow] * xrow[iw];
                                    dxrow[iw] += wv * grow[ow];
                                }
                            }
                        }
                        dwk[kh * k + kw] += wacc;
                    }
                }
            }
        }
    }
    return gp;
}

Tensor convtranspose2d(const Tensor& x, const LayerParams& p, int stride, int pad) {
    const Dims4 xd = view4(x, "convtranspose2d");
    if (p.weights.shape.rank() != 4)
        throw ShapeError("convtranspose2d weights must be rank 4 [Cin,Cout,k,k]");
    const int Ci = p.weights.dim(0), Co = p.weights.dim(1), k = p.weights.dim(2);
    check_conv_args(k, stride, pad, "convtranspose2d");
    if (pad >= k) throw ParamError("convtranspose2d: pad must be < kernel");
    if (Ci != xd.C)
        throw ShapeError("convtranspose2d channel mismatch: input " + x.shape.str() +
                         " vs weights " + p.weights.shape.str());
    const int Ho = (xd.H - 1) * stride - 2 * pad + k;
    const int Wo = (xd.W - 1) * stride - 2 * pad + k;
    if (Ho < 1 || Wo < 1)
        throw ShapeError("convtranspose2d configuration yields non-positive output extent");
    if (p.has_bias && p.bias.size() != Co)
        throw ShapeError("convtranspose2d bias length must equal output channels");

    Tensor out = zeros(shape_like(x, Co, Ho, Wo));
    const double* xp = x.data.data();
    const double* w = p.weights.data.data();
    const int H = xd.H, W = xd.W;
    for (int n = 0; n < xd.N; ++n) {
        const double* xn = xp + static_cast<long>(n) * Ci * H * W;
        double* on = out.data.data() + static_cast<long>(n) * Co * Ho * Wo;
        if (p.has_bias) {
            for (int co = 0; co < Co; ++co)
                std::fill(on + static_cast<long>(co) * Ho * Wo,
                          on + static_cast<long>(co + 1) * Ho * Wo,
                          p.bias.data[static_cast<size_t>(co)]);
        }
        for (int ci = 0; ci < Ci; ++ci) {
            const double* xplane = xn + static_cast<long>(ci) * H * W;
            for (int co = 0; co < Co; ++co) {
                double* oplane = on + static_cast<long>(co) * Ho * Wo;
                const double* wk = w + (static_cast<long>(ci) * Co + co) * k * k;
                for (int kh = 0; kh < k; ++kh) {
                    const int ih_lo = std::max(0, ceil_div(pad - kh, stride));
                    const int ih_hi = std::min(H, floor_div(Ho - 1 + pad - kh, stride) + 1);
                    for (int kw = 0; kw < k; ++kw) {
                        const double wv = wk[kh * k + kw];
                        const int iw_lo = std::max(0, ceil_div(pad - kw, stride));
                        const int iw_hi = std::min(W, floor_div(Wo - 1 + pad - kw, stride) + 1);
                        for (int ih = ih_lo; ih < ih_hi; ++ih) {
                            const int oh = ih * stride - pad + kh;
                            const double* __restrict__ xrow = xplane + static_cast<long>(ih) * W;
                            double* __restrict__ orow = oplane + static_cast<long>(oh) * Wo;
                            for (int iw = iw_lo; iw < iw_hi; ++iw)
                                orow[iw * stride - pad + kw] += wv * xrow[iw];
                        }
                    }
                }
            }
        }
    }
    return out;
}

GradPair convtranspose2d_backward(const Tensor& x, const LayerParams& p, int stride, int pad,
                                  const Tensor& out_grad) {
    const Dims4 xd = view4(x, "convtranspose2d_backward");
    const Dims4 gd = view4(out_grad, "convtranspose2d_backward");
    const int Ci = p.weights.dim(0), Co = p.weights.dim(1), k = p.weights.dim(2);
    const int Ho = gd.H, Wo = gd.W;

    GradPair gp;
    gp.input_grad = zeros(x.shape);
    gp.param_grads.weights = zeros(p.weights.shape);
    gp.param_grads.has_bias = p.has_bias;
    if (p.has_bias) gp.param_grads.bias = zeros(p.bias.shape);

    // Input gradient is a plain convolution of out_grad with the same weight
    // tensor read as [Ci(out), Co(in), k, k].
    conv2d_core(out_grad.data.data(), gd, p.weights.data.data(), Ci, k, stride, pad,
                nullptr, gp.input_grad.data.data(), xd.H, xd.W);

    const double* xp = x.data.data();
    const double* g = out_grad.data.data();
    double* dw = gp.param_grads.weights.data.data();
    const int H = xd.H, W = xd.W;
    for (int n = 0; n < xd.N; ++n) {
        const double* xn = xp + static_cast<long>(n) * Ci * H * W;
        const double* gn = g + static_cast<long>(n) * Co * Ho * Wo;
        for (int co = 0; co < Co; ++co) {
            const double* gplane = gn + static_cast<long>(co) * Ho * Wo;
            if (p.has_bias) {
                double s = 0.0;
                for (long i = 0; i < static_cast<long>(Ho) * Wo; ++i) s += gplane[i];
                gp.param_grads.bias.data[static_cast<size_t>(co)] += s;
            }
            for (int ci = 0; ci < Ci; ++ci) {
                const double* xplane = xn + static_cast<long>(ci) * H * W;
                double* dwk = dw + (static_cast<long>(ci) * Co + co) * k * k;
                for (int kh = 0; kh < k; ++kh) {
                    const int ih_lo = std::max(0, ceil_div(pad - kh, stride));
                    const int ih_hi = std::min(H, floor_div(Ho - 1 + pad - kh, stride) + 1);
                    for (int kw = 0; kw < k; ++kw) {
                        const int iw_lo = std::max(0, ceil_div(pad - kw, stride));
                        const int iw_hi = std::min(W, floor_div(Wo - 1 + pad - kw, stride) + 1);
                        double acc = 0.0;
                        for (int ih = ih_lo; ih < ih_hi; ++ih) {
                            const int oh = ih * stride - pad + kh;
                            const double* __restrict__ xrow = xplane + static_cast<long>(ih) * W;
                            const double* __restrict__ grow = gplane + static_cast<long>(oh) * Wo;
                            for (int iw = iw_lo; iw < iw_hi; ++iw)
                                acc += xrow[iw] * grow[iw * stride - pad + kw];
                        }
                        dwk[kh * k + kw] += acc;
                    }
                }
            }
        }
    }
    return gp;
}

Tensor maxpool2(const Tensor& x) {
    const Dims4 xd = view4(x, "maxpool2");
    if (xd.H % 2 != 0 || xd.W % 2 != 0)
        throw ShapeError("maxpool2 requires even extents, got " + x.shape.str());
    const int Ho = xd.H / 2, Wo = xd.W / 2;
    Tensor out = zeros(shape_like(x, xd.C, Ho, Wo));
    const double* xp = x.data.data();
    double* op = out.data.data();
    for (long plane = 0; plane < static_cast<long>(xd.N) * xd.C; ++plane) {
        const double* xpl = xp + plane * xd.H * xd.W;
        double* opl = op + plane * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
            const double* r0 = xpl + static_cast<long>(2 * oh) * xd.W;
            const double* r1 = r0 + xd.W;
            for (int ow = 0; ow < Wo; ++ow) {
                const int c = 2 * ow;
                opl[static_cast<long>(oh) * Wo + ow] =
                    std::max(std::max(r0[c], r0[c + 1]), std::max(r1[c], r1[c + 1]));
            }
        }
    }
    return out;
}

Tensor maxpool2_backward(const Tensor& x, const Tensor& out_grad) {
    const Dims4 xd = view4(x, "maxpool2_backward");
    const int Ho = xd.H / 2, Wo = xd.W / 2;
    Tensor dx = zeros(x.shape);
    const double* xp = x.data.data();
    const double* gp = out_grad.data.data();
    double* dp = dx.data.data();
    for (long plane = 0; plane < static_cast<long>(xd.N) * xd.C; ++plane) {
        const double* xpl = xp + plane * xd.H * xd.W;
        const double* gpl = gp + plane * Ho * Wo;
        double* dpl = dp + plane * xd.H * xd.W;
        for (int oh = 0; oh < Ho; ++oh) {
            for (int ow = 0; ow < Wo; ++ow) {
                // first scan hit wins on ties, row-major inside the cell
                long best = (static_cast<long>(2 * oh) * xd.W) + 2 * ow;
                double bv = xpl[best];
                const long idx[3] = {best + 1, best + xd.W, best + xd.W + 1};
                for (long i : idx)
                    if (xpl[i] > bv) { bv = xpl[i]; best = i; }
                dpl[best] += gpl[static_cast<long>(oh) * Wo + ow];
            }
        }
    }
    return dx;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
    if (factor < 1) throw ParamError("upsample factor must be >= 1");
    const Dims4 xd = view4(x, "upsample_nearest");
    const int Ho = xd.H * factor, Wo = xd.W * factor;
    Tensor out = zeros(shape_like(x, xd.C, Ho, Wo));
    const double* xp = x.data.data();
    double* op = out.data.data();
    for (long plane = 0; plane < static_cast<long>(xd.N) * xd.C; ++plane) {
        const double* xpl = xp + plane * xd.H * xd.W;
        double* opl = op + plane * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
            const double* xrow = xpl + static_cast<long>(oh / factor) * xd.W;
            double* orow = opl + static_cast<long>(oh) * Wo;
            for (int ow = 0; ow < Wo; ++ow) orow[ow] = xrow[ow / factor];
        }
    }
    return out;
}

Tensor upsample_nearest_backward(const Tensor& out_grad, int factor) {
    if (factor < 1) throw ParamError("upsample factor must be >= 1");
    const Dims4 gd = view4(out_grad, "upsample_nearest_backward");
    if (gd.H % factor != 0 || gd.W % factor != 0)
        throw ShapeError("upsample_nearest_backward: extents not divisible by factor");
    const int H = gd.H / factor, W = gd.W / factor;
    Tensor dx = zeros(shape_like(out_grad, gd.C, H, W));
    const double* gp = out_grad.data.data();
    double* dp = dx.data.data();
    for (long plane = 0; plane < static_cast<long>(gd.N) * gd.C; ++plane) {
        const double* gpl = gp + plane * gd.H * gd.W;
        double* dpl = dp + plane * H * W;
        for (int oh = 0; oh < gd.H; ++oh) {
            const double* grow = gpl + static_cast<long>(oh) * gd.W;
            double* drow = dpl + static_cast<long>(oh / factor) * W;
            for (int ow = 0; ow < gd.W; ++ow) drow[ow / factor] += grow[ow];
        }
    }
    return dx;
}

namespace {

void fc_dims(const Tensor& x, const LayerParams& p, int& rows, int& in_dim) {
    if (x.shape.rank() == 1) {
        rows = 1;
        in_dim = x.dim(0);
    } else if (x.shape.rank() == 2) {
        rows = x.dim(0);
        in_dim = x.dim(1);
    } else {
        throw ShapeError("fully_connected expects rank-1 or rank-2 input");
    }
    if (p.weights.shape.rank() != 2)
        throw ShapeError("fully_connected weights must be rank 2 [out,in]");
    if (p.weights.dim(1) != in_dim)
        throw ShapeError("fully_connected dimension mismatch: input " + x.shape.str() +
                         " vs weights " + p.weights.shape.str());
    if (p.has_bias && p.bias.size() != p.weights.dim(0))
        throw ShapeError("fully_connected bias length must equal output units");
}

} // namespace

Tensor fully_connected(const Tensor& x, const LayerParams& p) {
    int rows, in_dim;
    fc_dims(x, p, rows, in_dim);
    const int out_dim = p.weights.dim(0);
    Shape os = x.shape.rank() == 1 ? Shape{out_dim} : Shape{rows, out_dim};
    Tensor y = zeros(os);
    const double* w = p.weights.data.data();
    for (int r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + static_cast<long>(r) * in_dim;
        double* yr = y.data.data() + static_cast<long>(r) * out_dim;
        for (int o = 0; o < out_dim; ++o) {
            const double* wr = w + static_cast<long>(o) * in_dim;
            double acc = p.has_bias ? p.bias.data[static_cast<size_t>(o)] : 0.0;
            for (int i = 0; i < in_dim; ++i) acc += wr[i] * xr[i];
            yr[o] = acc;
        }
    }
    return y;
}

GradPair fully_connected_backward(const Tensor& x, const LayerParams& p, const Tensor& out_grad) {
    int rows, in_dim;
    fc_dims(x, p, rows, in_dim);
    const int out_dim = p.weights.dim(0);

    GradPair gp;
    gp.input_grad = zeros(x.shape);
    gp.param_grads.weights = zeros(p.weights.shape);
    gp.param_grads.has_bias = p.has_bias;
    if (p.has_bias) gp.param_grads.bias = zeros(p.bias.shape);

    const double* w = p.weights.data.data();
    double* dw = gp.param_grads.weights.data.data();
    for (int r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + static_cast<long>(r) * in_dim;
        const double* gr = out_grad.data.data() + static_cast<long>(r) * out_dim;
        double* dxr = gp.input_grad.data.data() + static_cast<long>(r) * in_dim;
        for (int o = 0; o < out_dim; ++o) {
            const double g = gr[o];
            if (p.has_bias) gp.param_grads.bias.data[static_cast<size_t>(o)] += g;
            const double* wr = w + static_cast<long>(o) * in_dim;
            double* dwr = dw + static_cast<long>(o) * in_dim;
            for (int i = 0; i < in_dim; ++i) {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    return gp;
}

namespace {

// Enumerates softmax pair sites: channel pairs for rank-3/4, consecutive
// last-dim pairs for rank-1/2. Calls fn(index_a, index_b).
template <typename F>
void for_each_pair(const Tensor& x, F fn) {
    const int r = x.shape.rank();
    if (r <= 2) {
        const long last = x.dim(r - 1);
        if (last % 2 != 0)
            throw ShapeError("softmax2 requires an even score count, got " + x.shape.str());
        const long rows = x.size() / last;
        for (long row = 0; row < rows; ++row)
            for (long i = 0; i < last; i += 2) {
                const long a = row * last + i;
                fn(a, a + 1);
            }
        return;
    }
    const Dims4 d = view4(x, "softmax2");
    if (d.C % 2 != 0)
        throw ShapeError("softmax2 requires an even channel count, got " + x.shape.str());
    const long plane = static_cast<long>(d.H) * d.W;
    for (int n = 0; n < d.N; ++n)
        for (int c = 0; c < d.C; c += 2) {
            const long a0 = (static_cast<long>(n) * d.C + c) * plane;
            for (long i = 0; i < plane; ++i) fn(a0 + i, a0 + plane + i);
        }
}

inline void softmax_pair(double a, double b, double& pa, double& pb) {
    const double m = std::max(a, b);
    const double ea = std::exp(a - m), eb = std::exp(b - m);
    const double s = ea + eb;
    pa = ea / s;
    pb = eb / s;
}

} // namespace

Tensor pointwise_activation(const Tensor& x, Activation kind) {
    Tensor y = x;
    if (kind == Activation::relu) {
        for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
        return y;
    }
    for_each_pair(x, [&](long a, long b) {
        softmax_pair(x.data[static_cast<size_t>(a)], x.data[static_cast<size_t>(b)],
                     y.data[static_cast<size_t>(a)], y.data[static_cast<size_t>(b)]);
    });
    return y;
}

Tensor pointwise_activation_backward(const Tensor& x, Activation kind, const Tensor& out_grad) {
    if (x.shape != out_grad.shape)
        throw ShapeError("activation backward shape mismatch");
    Tensor dx = zeros(x.shape);
    if (kind == Activation::relu) {
        for (size_t i = 0; i < dx.data.size(); ++i)
            dx.data[i] = x.data[i] > 0.0 ? out_grad.data[i] : 0.0;
        return dx;
    }
    for_each_pair(x, [&](long a, long b) {
        double pa, pb;
        softmax_pair(x.data[static_cast<size_t>(a)], x.data[static_cast<size_t>(b)], pa, pb);
        const double t = (out_grad.data[static_cast<size_t>(a)] -
                          out_grad.data[static_cast<size_t>(b)]) * pa * pb;
        dx.data[static_cast<size_t>(a)] = t;
        dx.data[static_cast<size_t>(b)] = -t;
    });
    return dx;
}

Tensor l2_normalize_global(const Tensor& x) {
    double sq = 0.0;
    for (double v : x.data) sq += v * v;
    const double r = std::sqrt(sq);
    if (r <= kNormFloor)
        throw DegenerateInputError("l2_normalize_global: block norm below floor");
    Tensor y = x;
    for (auto& v : y.data) v /= r;
    return y;
}

Tensor l2_normalize_global_backward(const Tensor& x, const Tensor& out_grad) {
    if (x.shape != out_grad.shape)
        throw ShapeError("l2_normalize_global backward shape mismatch");
    double sq = 0.0, dot = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        sq += x.data[i] * x.data[i];
        dot += x.data[i] * out_grad.data[i];
    }
    const double r = std::sqrt(sq);
    if (r <= kNormFloor)
        throw DegenerateInputError("l2_normalize_global: block norm below floor");
    const double r3 = r * r * r;
    Tensor dx = zeros(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i)
        dx.data[i] = out_grad.data[i] / r - x.data[i] * dot / r3;
    return dx;
}

LayerParams conv_params(int out_c, int in_c, int k, uint64_t seed, bool bias) {
    LayerParams p;
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));
    p.weights = gaussian(Shape{out_c, in_c, k, k}, 0.0, stddev, seed);
    p.has_bias = bias;
    if (bias) p.bias = zeros(Shape{out_c});
    return p;
}

LayerParams convtranspose_params(int in_c, int out_c, int k, int stride, bool bias) {
    (void)stride;
    LayerParams p;
    p.weights = zeros(Shape{in_c, out_c, k, k});
    const double f = (k % 2 == 0) ? k / 2.0 : (k + 1) / 2.0;
    const double center = (k % 2 == 1) ? f - 1.0 : f - 0.5;
    for (int ci = 0; ci < in_c; ++ci)
        for (int co = 0; co < out_c; ++co)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                    const double wh = 1.0 - std::abs(kh - center) / f;
                    const double ww = 1.0 - std::abs(kw - center) / f;
                    p.weights.at(ci, co, kh, kw) = wh * ww / in_c;
                }
    p.has_bias = bias;
    if (bias) p.bias = zeros(Shape{out_c});
    return p;
}

LayerParams fc_params(int out_dim, int in_dim, uint64_t seed, bool bias) {
    LayerParams p;
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_dim));
    p.weights = gaussian(Shape{out_dim, in_dim}, 0.0, stddev, seed);
    p.has_bias = bias;
    if (bias) p.bias = zeros(Shape{out_dim});
    return p;
}

double gradient_check(const std::function<Tensor(const Tensor&)>& forward,
                      const std::function<Tensor(const Tensor&, const Tensor&)>& backward,
                      const Tensor& v, uint64_t seed, int max_coords) {
    const Tensor y0 = forward(v);
    const Tensor g = uniform(y0.shape, -1.0, 1.0, hash_key(seed, "gradcheck-cotangent"));
    const Tensor analytic = backward(v, g);

    auto scalar = [&](const Tensor& t) {
        const Tensor y = forward(t);
        double s = 0.0;
        for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * g.data[i];
        return s;
    };

    std::vector<long> coords;
    const long n = v.size();
    if (n <= max_coords) {
        for (long i = 0; i < n; ++i) coords.push_back(i);
    } else {
        Rng rng(hash_key(seed, "gradcheck-coords"));
        std::vector<bool> seen(static_cast<size_t>(n), false);
        while (static_cast<int>(coords.size()) < max_coords) {
            long c = static_cast<long>(rng.next_below(static_cast<uint64_t>(n)));
            if (!seen[static_cast<size_t>(c)]) {
                seen[static_cast<size_t>(c)] = true;
                coords.push_back(c);
            }
        }
    }

    const double h = 1e-5;
    double max_err = 0.0;
    Tensor probe = v;
    for (long c : coords) {
        const double orig = probe.data[static_cast<size_t>(c)];
        probe.data[static_cast<size_t>(c)] = orig + h;
        const double fp = scalar(probe);
        probe.data[static_cast<size_t>(c)] = orig - h;
        const double fm = scalar(probe);
        probe.data[static_cast<size_t>(c)] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double a = analytic.data[static_cast<size_t>(c)];
        const double err = std::abs(a - fd) / std::max(1e-8, std::abs(a) + std::abs(fd));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace fmnet
