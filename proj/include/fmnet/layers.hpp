#ifndef FMNET_LAYERS_HPP
#define FMNET_LAYERS_HPP

#include <functional>
#include <string>
#include <vector>

#include "fmnet/tensor.hpp"

namespace fmnet {

// Learned parameters of one op. Weight layouts:
//   conv2d          [Cout, Cin, k, k]
//   convtranspose2d [Cin, Cout, k, k]
//   fully_connected [out, in]
// bias is per output channel / unit.
struct LayerParams {
    Tensor weights;
    Tensor bias;
    bool has_bias = false;

    long parameter_count() const {
        return weights.size() + (has_bias ? bias.size() : 0);
    }
};

struct GradPair {
    Tensor input_grad;
    LayerParams param_grads;
};

Tensor conv2d(const Tensor& x, const LayerParams& p, int stride, int pad);
GradPair conv2d_backward(const Tensor& x, const LayerParams& p, int stride, int pad,
                         const Tensor& out_grad);

// Forward equals the input-gradient operator of conv2d run with the same
// weight tensor, so out_H = (H-1)*stride - 2*pad + k.
Tensor convtranspose2d(const Tensor& x, const LayerParams& p, int stride, int pad);
GradPair convtranspose2d_backward(const Tensor& x, const LayerParams& p, int stride, int pad,
                                  const Tensor& out_grad);

// 2x2 max pooling, stride 2. Even extents required.
Tensor maxpool2(const Tensor& x);
// Routes each output gradient to the argmax of its cell (first scan hit on ties).
Tensor maxpool2_backward(const Tensor& x, const Tensor& out_grad);

Tensor upsample_nearest(const Tensor& x, int factor);
Tensor upsample_nearest_backward(const Tensor& out_grad, int factor);

Tensor fully_connected(const Tensor& x, const LayerParams& p);
GradPair fully_connected_backward(const Tensor& x, const LayerParams& p, const Tensor& out_grad);

enum class Activation { relu, softmax2 };

// relu: elementwise max(0,.). softmax2: two-way normalized scores per
// classification site; sites are channel pairs (2i, 2i+1) for rank-3/4
// tensors and consecutive pairs of the last dim for rank-1/2.
Tensor pointwise_activation(const Tensor& x, Activation kind);
Tensor pointwise_activation_backward(const Tensor& x, Activation kind, const Tensor& out_grad);

// y = x / ||x||_2 with the norm taken over every entry of the block.
// Backward applies dY/dX = I/||x|| - x x^T/||x||^3 as a matrix-free product.
Tensor l2_normalize_global(const Tensor& x);
Tensor l2_normalize_global_backward(const Tensor& x, const Tensor& out_grad);

constexpr double kNormFloor = 1e-12;

// Initializers. Conv/fc weights are seeded gaussians with std sqrt(2/fan_in);
// transposed convolutions start as a bilinear interpolation kernel averaged
// over input channels, which upsamples constants exactly.
LayerParams conv_params(int out_c, int in_c, int k, uint64_t seed, bool bias = true);
LayerParams convtranspose_params(int in_c, int out_c, int k, int stride, bool bias = true);
LayerParams fc_params(int out_dim, int in_dim, uint64_t seed, bool bias = true);

// ---- finite-difference verification harness ----

// Max over sampled coordinates of |analytic - fd| / max(1e-8, |analytic|+|fd|)
// where fd is a central difference of <forward(v), g> with step 1e-5 and g a
// fixed random cotangent. Checks the gradient with respect to v.
double gradient_check(const std::function<Tensor(const Tensor&)>& forward,
                      const std::function<Tensor(const Tensor&, const Tensor&)>& backward,
                      const Tensor& v, uint64_t seed, int max_coords = 64);

struct GradCheckCase {
    std::string name;
    double max_rel_err;
};

// Full per-op verification table (10 seeded instances per op). fault_op, when
// set to an op name from the table, perturbs that op's backward so failure
// reporting can be exercised.
std::vector<GradCheckCase> run_gradient_suite(const std::string& fault_op = "");

} // namespace fmnet

#endif
