#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowssc/rng.hpp"
#include "flowssc/tensor.hpp"

namespace flowssc::nn {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

// N(0, gain / fan_in) initialization. Weight init is not prescribed by the
// method; every trainable module uses this unless noted otherwise.
Tensor variance_scaled(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0);

struct Linear {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]

    static Linear create(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
    static Linear zeros(std::size_t in, std::size_t out);

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    // x[N x in] -> [N x out]
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// LayerNorm over the last dimension with learned scale and shift.
struct LayerNorm {
    Tensor gamma;  // [dim], ones at init
    Tensor beta;   // [dim], zeros at init
    double eps = 1e-5;

    static LayerNorm create(std::size_t dim);
    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Scaled dot-product attention with the last dims of q/k and of v split
// evenly into `heads` groups. q[Nq x A], k[Nk x A], v[Nk x B] -> [Nq x B].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

// Sinusoidal features of one scalar per row, [N x dims]: sin then cos at
// angular frequencies log-spaced from 1 to 1000 (inputs are times in [0, 1]).
Tensor sinusoidal_features(std::span<const double> values, std::size_t dims, DType dtype = default_dtype());

void set_trainable(const ParamList& params, bool trainable = true);
void zero_grad(const ParamList& params);
std::size_t count_elements(const ParamList& params);
// Order-sensitive FNV-1a digest of every parameter's raw bytes.
std::uint64_t checksum(const ParamList& params);

}  // namespace flowssc::nn
