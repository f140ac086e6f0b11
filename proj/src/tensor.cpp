#include "fmnet/tensor.hpp"

#include <cmath>
#include <sstream>

namespace fmnet {

std::string Shape::str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims.size(); ++i) {
        if (i) os << ",";
        os << dims[i];
    }
    os << "]";
    return os.str();
}

void Shape::validate() const {
    if (rank() < 1 || rank() > 4)
        throw ShapeError("shape rank must be 1..4, got " + std::to_string(rank()));
    for (int d : dims)
        if (d < 1)
            throw ShapeError("shape extent must be >= 1, got " + str());
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor zeros(const Shape& s) {
    s.validate();
    return Tensor(s, std::vector<double>(static_cast<size_t>(s.element_count()), 0.0));
}

Tensor constant(const Shape& s, double value) {
    s.validate();
    if (!std::isfinite(value)) throw ParamError("constant fill value must be finite");
    return Tensor(s, std::vector<double>(static_cast<size_t>(s.element_count()), value));
}

Tensor uniform(const Shape& s, double lo, double hi, uint64_t seed) {
    s.validate();
    if (!(lo <= hi)) throw ParamError("uniform bounds must satisfy lo <= hi");
    Rng rng(seed);
    Tensor t = zeros(s);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

Tensor gaussian(const Shape& s, double mean, double stddev, uint64_t seed) {
    s.validate();
    if (!(stddev >= 0.0)) throw ParamError("gaussian stddev must be >= 0");
    Rng rng(seed);
    Tensor t = zeros(s);
    for (auto& v : t.data) v = rng.gaussian(mean, stddev);
    return t;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const int ra = a.shape.rank(), rb = b.shape.rank();
    if ((ra != 3 && ra != 4) || ra != rb)
        throw ShapeError("concat_channels expects two rank-3 or two rank-4 tensors");
    const int off = ra - 3; // batch axis present?
    const int N = off ? a.dim(0) : 1;
    const int Ca = a.dim(off + 0), Ha = a.dim(off + 1), Wa = a.dim(off + 2);
    const int Cb = b.dim(off + 0), Hb = b.dim(off + 1), Wb = b.dim(off + 2);
    if ((off && a.dim(0) != b.dim(0)) || Ha != Hb || Wa != Wb)
        throw ShapeError("concat_channels batch/spatial mismatch: " + a.shape.str() +
                         " vs " + b.shape.str());

    std::vector<int> od = a.shape.dims;
    od[static_cast<size_t>(off)] = Ca + Cb;
    Tensor out(Shape(od), std::vector<double>(static_cast<size_t>(N) * (Ca + Cb) * Ha * Wa));
    const long plane = static_cast<long>(Ha) * Wa;
    for (int n = 0; n < N; ++n) {
        double* dst = out.data.data() + static_cast<long>(n) * (Ca + Cb) * plane;
        const double* pa = a.data.data() + static_cast<long>(n) * Ca * plane;
        const double* pb = b.data.data() + static_cast<long>(n) * Cb * plane;
        std::copy(pa, pa + Ca * plane, dst);
        std::copy(pb, pb + Cb * plane, dst + Ca * plane);
    }
    return out;
}

} // namespace fmnet
