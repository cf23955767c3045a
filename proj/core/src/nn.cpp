#include "flowssc/nn.hpp"

#include <cmath>
#include <cstring>

#include "flowssc/error.hpp"
#include "flowssc/ops.hpp"

namespace flowssc::nn {

Tensor variance_scaled(Shape shape, std::size_t fan_in, Rng& rng, double gain) {
    return Tensor::randn(std::move(shape), rng, std::sqrt(gain / static_cast<double>(fan_in)));
}

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, double gain) {
    return Linear{variance_scaled({in, out}, in, rng, gain), Tensor::zeros({out})};
}

Linear Linear::zeros(std::size_t in, std::size_t out) { return Linear{Tensor::zeros({in, out}), Tensor::zeros({out})}; }

Tensor Linear::operator()(const Tensor& x) const { return ops::add(ops::matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

LayerNorm LayerNorm::create(std::size_t dim) { return LayerNorm{Tensor::full({dim}, 1.0), Tensor::zeros({dim})}; }

Tensor LayerNorm::operator()(const Tensor& x) const {
    return ops::add(ops::mul(ops::layer_norm(x, eps), gamma), beta);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw ShapeError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) + ", v " +
                         shape_string(v.shape()));
    }
    if (heads == 0 || q.dim(1) % heads != 0 || v.dim(1) % heads != 0) {
        throw ShapeError("attention: head count must divide the feature dims");
    }
    const std::size_t dq = q.dim(1) / heads, dv = v.dim(1) / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dq));
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = heads == 1 ? q : ops::narrow(q, 1, h * dq, dq);
        Tensor kh = heads == 1 ? k : ops::narrow(k, 1, h * dq, dq);
        Tensor vh = heads == 1 ? v : ops::narrow(v, 1, h * dv, dv);
        Tensor scores = ops::mul_scalar(ops::matmul(qh, ops::transpose(kh)), scale);
        outs.push_back(ops::matmul(ops::softmax_lastdim(scores), vh));
    }
    return heads == 1 ? outs.front() : ops::concat(outs, 1);
}

Tensor sinusoidal_features(std::span<const double> values, std::size_t dims, DType dtype) {
    if (dims < 2 || dims % 2 != 0) {
        throw ShapeError("sinusoidal feature dims must be even");
    }
    const std::size_t half = dims / 2;
    std::vector<double> f(values.size() * dims);
    for (std::size_t k = 0; k < half; ++k) {
        const double freq =
            half == 1 ? 1.0 : std::exp(std::log(1000.0) * static_cast<double>(k) / static_cast<double>(half - 1));
        for (std::size_t i = 0; i < values.size(); ++i) {
            f[i * dims + k] = std::sin(freq * values[i]);
            f[i * dims + half + k] = std::cos(freq * values[i]);
        }
    }
    return Tensor::from_values({values.size(), dims}, f, dtype);
}

void set_trainable(const ParamList& params, bool trainable) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.set_requires_grad(trainable);
    }
}

void zero_grad(const ParamList& params) {
    for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
    }
}

std::size_t count_elements(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params) {
        n += p.tensor.numel();
    }
    return n;
}

std::uint64_t checksum(const ParamList& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* bytes, std::size_t len) {
        const auto* b = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : params) {
        mix(p.name.data(), p.name.size());
        detail::dispatch(p.tensor.dtype(), [&]<class T>() {
            auto d = p.tensor.data<T>();
            mix(d.data(), d.size_bytes());
        });
    }
    return h;
}

}  // namespace flowssc::nn
