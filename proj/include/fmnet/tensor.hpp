#ifndef FMNET_TENSOR_HPP
#define FMNET_TENSOR_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "fmnet/common.hpp"

namespace fmnet {

// Dense shape, rank 1..4, laid out (batch, channels, height, width) for the
// ranks that carry spatial dims. Stored row-major.
struct Shape {
    std::vector<int> dims;

    Shape() = default;
    Shape(std::initializer_list<int> d) : dims(d) {}
    explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

    int rank() const { return static_cast<int>(dims.size()); }

    long element_count() const {
        long n = 1;
        for (int d : dims) n *= d;
        return n;
    }

    bool operator==(const Shape& o) const { return dims == o.dims; }
    bool operator!=(const Shape& o) const { return dims != o.dims; }

    std::string str() const;

    // Throws ShapeError unless rank is 1..4 and every extent >= 1.
    void validate() const;
};

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

    long size() const { return static_cast<long>(data.size()); }
    int dim(int i) const { return shape.dims[static_cast<size_t>(i)]; }

    // rank-4 accessors; flat index ((n*C + c)*H + h)*W + w
    double& at(int n, int c, int h, int w) {
        const int C = dim(1), H = dim(2), W = dim(3);
        return data[static_cast<size_t>(((n * C + c) * H + h) * W + w)];
    }
    double at(int n, int c, int h, int w) const {
        const int C = dim(1), H = dim(2), W = dim(3);
        return data[static_cast<size_t>(((n * C + c) * H + h) * W + w)];
    }
    // rank-3 accessors (C,H,W)
    double& at(int c, int h, int w) {
        const int H = dim(1), W = dim(2);
        return data[static_cast<size_t>((c * H + h) * W + w)];
    }
    double at(int c, int h, int w) const {
        const int H = dim(1), W = dim(2);
        return data[static_cast<size_t>((c * H + h) * W + w)];
    }
    double& at(int r, int c) {
        return data[static_cast<size_t>(r * dim(1) + c)];
    }
    double at(int r, int c) const {
        return data[static_cast<size_t>(r * dim(1) + c)];
    }

    bool all_finite() const;
};

Tensor zeros(const Shape& s);
Tensor constant(const Shape& s, double value);
Tensor uniform(const Shape& s, double lo, double hi, uint64_t seed);
Tensor gaussian(const Shape& s, double mean, double stddev, uint64_t seed);

// Channel concatenation of two (C,H,W) or (N,C,H,W) tensors that agree on
// batch and spatial extents; a fills the leading channel block. A zero-channel
// operand is accepted and acts as identity.
Tensor concat_channels(const Tensor& a, const Tensor& b);

} // namespace fmnet

#endif
