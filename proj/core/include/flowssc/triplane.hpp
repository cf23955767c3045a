#pragma once

#include <array>
#include <cstddef>

#include "flowssc/tensor.hpp"

namespace flowssc {

enum class Plane : int { xy = 0, xz = 1, yz = 2 };

struct TriplaneDims {
    std::size_t h = 16;  // along x
    std::size_t w = 16;  // along y
    std::size_t d = 4;   // along z
    std::size_t c = 16;

    std::size_t rows() const { return h * w + h * d + w * d; }
    std::size_t numel() const { return rows() * c; }
    // Spatial extent (first, second axis) of a plane.
    std::array<std::size_t, 2> extent(Plane p) const;
    std::size_t row_offset(Plane p) const;
    bool operator==(const TriplaneDims&) const = default;
};

// Three axis-aligned feature planes stored as one [rows x C] tensor: the xy
// cells (row-major over x, y), then xz, then yz.
class Triplane {
public:
    Triplane() = default;
    Triplane(TriplaneDims dims, Tensor data);

    static Triplane zeros(TriplaneDims dims, DType dtype = default_dtype());
    static Triplane from_planes(const Tensor& xy, const Tensor& xz, const Tensor& yz);

    const TriplaneDims& dims() const { return dims_; }
    const Tensor& data() const { return data_; }
    // [extent0 x extent1 x C] view, differentiable.
    Tensor plane(Plane p) const;

private:
    TriplaneDims dims_{};
    Tensor data_;
};

}  // namespace flowssc
