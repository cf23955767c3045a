#include "flowssc/triplane.hpp"

#include "flowssc/error.hpp"
#include "flowssc/ops.hpp"

namespace flowssc {

std::array<std::size_t, 2> TriplaneDims::extent(Plane p) const {
    switch (p) {
        case Plane::xy: return {h, w};
        case Plane::xz: return {h, d};
        case Plane::yz: return {w, d};
    }
    return {0, 0};
}

std::size_t TriplaneDims::row_offset(Plane p) const {
    switch (p) {
        case Plane::xy: return 0;
        case Plane::xz: return h * w;
        case Plane::yz: return h * w + h * d;
    }
    return 0;
}

Triplane::Triplane(TriplaneDims dims, Tensor data) : dims_(dims), data_(std::move(data)) {
    if (data_.shape() != Shape{dims_.rows(), dims_.c}) {
        throw ShapeError("triplane data " + shape_string(data_.shape()) + " does not match [" +
                         std::to_string(dims_.rows()) + ", " + std::to_string(dims_.c) + "]");
    }
}

Triplane Triplane::zeros(TriplaneDims dims, DType dtype) {
    return Triplane(dims, Tensor::zeros({dims.rows(), dims.c}, dtype));
}

Triplane Triplane::from_planes(const Tensor& xy, const Tensor& xz, const Tensor& yz) {
    if (xy.rank() != 3 || xz.rank() != 3 || yz.rank() != 3 || xy.dim(2) != xz.dim(2) || xy.dim(2) != yz.dim(2) ||
        xz.dim(0) != xy.dim(0) || yz.dim(0) != xy.dim(1) || xz.dim(1) != yz.dim(1)) {
        throw ShapeError("inconsistent triplane planes " + shape_string(xy.shape()) + ", " + shape_string(xz.shape()) +
                         ", " + shape_string(yz.shape()));
    }
    TriplaneDims dims{xy.dim(0), xy.dim(1), xz.dim(1), xy.dim(2)};
    const std::size_t c = dims.c;
    Tensor data = ops::concat({ops::reshape(xy, {dims.h * dims.w, c}), ops::reshape(xz, {dims.h * dims.d, c}),
                               ops::reshape(yz, {dims.w * dims.d, c})},
                              0);
    return Triplane(dims, data);
}

Tensor Triplane::plane(Plane p) const {
    const auto ext = dims_.extent(p);
    Tensor rows = ops::narrow(data_, 0, dims_.row_offset(p), ext[0] * ext[1]);
    return ops::reshape(rows, {ext[0], ext[1], dims_.c});
}

}  // namespace flowssc
