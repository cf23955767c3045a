#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "flowssc/flow.hpp"
#include "flowssc/nn.hpp"

namespace flowssc::flow {

// MLP velocity field on small vector states: [x, feat(t), feat(d)] -> hidden
// SiLU layers -> F.
struct MlpVelocity {
    std::vector<nn::Linear> layers;
    std::size_t time_dims = 16;

    static MlpVelocity create(std::size_t features, std::size_t hidden, std::size_t depth, std::uint64_t seed,
                              std::size_t time_dims = 16);
    Tensor operator()(const Tensor& x, std::span<const double> t, std::span<const double> d) const;
    VelocityFn fn() const;
    nn::ParamList parameters() const;
};

// v(x, t) = sum_k P_k(2t - 1) (x W_k + b_k) with Legendre polynomials P_k:
// linear in x with polynomial-in-t coefficients, ignores d.
struct LegendreVelocity {
    nn::Linear map;  // [degree * (F + 1)] -> F
    std::size_t degree = 6;

    static LegendreVelocity create(std::size_t features, std::size_t degree);
    Tensor operator()(const Tensor& x, std::span<const double> t, std::span<const double> d) const;
    VelocityFn fn() const;
    nn::ParamList parameters() const;
};

struct VectorFlowConfig {
    std::size_t iterations = 2000;
    std::size_t batch = 256;
    double lr = 1e-3;
    double min_lr = 1e-5;
    std::size_t warmup = 50;
    double fraction = 0.25;
    StepSchedule schedule{};
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
};

struct VectorFlowLogRow {
    std::size_t iteration = 0;
    double total = 0.0;
    double fm = 0.0;
    double sc = 0.0;
};

using DataSampler = std::function<Tensor(Rng& rng, std::size_t n)>;

// Shortcut training of a vector velocity field against samples from `data`.
void train_vector_flow(const VelocityFn& net, const nn::ParamList& params, const DataSampler& data,
                       const VectorFlowConfig& cfg, const std::function<void(const VectorFlowLogRow&)>& log = {});

// Marginal velocity of the linear path between N(0, I) and N(mu, sigma^2 I)
// with independent endpoints: E[x1 - x0 | x_t = x]
//   = mu + (t sigma^2 - (1 - t)) / ((1 - t)^2 + t^2 sigma^2) * (x - t mu).
Tensor gaussian_velocity(const Tensor& x, std::span<const double> t, std::span<const double> mu, double sigma);

struct GaussianOracleConfig {
    std::vector<double> mu{2.0, 0.0};
    double sigma = 1.0;
    std::size_t degree = 6;
    std::size_t iterations = 3000;
    std::size_t batch = 256;
    double lr = 2e-2;
    std::size_t eval_samples = 20000;
    std::uint64_t seed = 0;
};

struct GaussianOracleReport {
    // sqrt(E|v - u|^2) / sqrt(E|u|^2) over (t, x_t) drawn from the path.
    double rms_relative = 0.0;
    double max_deviation = 0.0;
    // |v(x, 1/2)| at the evaluation states; the field vanishes there when mu = 0, sigma = 1.
    double midpoint_rms = 0.0;
};

// Trains a LegendreVelocity on the flow-matching objective for Gaussian
// endpoints and compares it with gaussian_velocity.
GaussianOracleReport gaussian_oracle_check(const GaussianOracleConfig& cfg);

// Two-component anisotropic Gaussian mixture in 2-D.
Tensor sample_toy_mixture(Rng& rng, std::size_t n, DType dtype = default_dtype());

struct MomentComparison {
    double mean_rel = 0.0;  // |m_a - m_b| / |m_b|
    double cov_rel = 0.0;   // |C_a - C_b|_F / |C_b|_F
};

MomentComparison compare_moments(const Tensor& a, const Tensor& b);

}  // namespace flowssc::flow
