#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "flowssc/tensor.hpp"

// Differentiable primitives. Every op checks its inputs' shapes (ShapeError),
// rejects non-finite outputs (NumericalError), and records a backward node on
// the active autograd::Graph when any input requires gradients.
namespace flowssc::ops {

// Elementwise binary ops broadcast with NumPy semantics (right-aligned dims,
// size-1 dims stretch).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double value);
Tensor mul_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);
// value - x
Tensor rsub_scalar(double value, const Tensor& x);

Tensor exp(const Tensor& x);
// Natural log of max(x, floor); the floor keeps BCE-style terms finite.
Tensor log(const Tensor& x, double floor = 0.0);
Tensor square(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);

// a[m x k] . b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);
// Normalizes over the last dimension (size >= 2); no affine terms.
Tensor layer_norm(const Tensor& x, double eps = 1e-5);

Tensor reshape(const Tensor& x, Shape shape);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// Row lookup: out[i, :] = table[indices[i], :].
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> indices);
// out.flat[i] = x.flat[indices[i]]; backward scatters. Used for patch layouts.
Tensor index_select_flat(const Tensor& x, std::span<const std::size_t> indices, Shape out_shape);

// Samples plane[H x W x C] at normalized uv[N x 2] (u along H, v along W).
// Cell i covers [i/H, (i+1)/H); a query at a cell center returns that cell.
// Coordinates are clamped to the border. Differentiable w.r.t. plane only.
Tensor bilinear_sample_2d(const Tensor& plane, const Tensor& uv);

// Channels-last 3-D convolution: x[X x Y x Z x Cin], weight[k x k x k x Cin x Cout],
// bias[Cout]; zero padding.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding);

// Mean negative log-likelihood over entries whose label differs from
// ignore_label. With class_weights the mean is weight-normalized.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels,
                     const std::optional<Tensor>& class_weights = std::nullopt,
                     std::optional<std::int32_t> ignore_label = std::nullopt);

}  // namespace flowssc::ops
