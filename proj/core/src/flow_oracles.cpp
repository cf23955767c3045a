#include "flowssc/flow_oracles.hpp"

#include <algorithm>
#include <cmath>

#include "flowssc/autograd.hpp"
#include "flowssc/error.hpp"
#include "flowssc/ops.hpp"
#include "flowssc/optim.hpp"

namespace flowssc::flow {

// ------------------------------------------------------------ MLP field

MlpVelocity MlpVelocity::create(std::size_t features, std::size_t hidden, std::size_t depth, std::uint64_t seed,
                                std::size_t time_dims) {
    if (depth < 1 || hidden == 0 || time_dims < 2 || time_dims % 2 != 0) {
        throw ConfigError("invalid MLP velocity sizes");
    }
    Rng rng = make_stream(seed, "flow.mlp.init");
    MlpVelocity m;
    m.time_dims = time_dims;
    std::size_t in = features + 2 * time_dims;
    for (std::size_t i = 0; i < depth; ++i) {
        m.layers.push_back(nn::Linear::create(in, hidden, rng, 2.0));
        in = hidden;
    }
    m.layers.push_back(nn::Linear::create(in, features, rng, 0.1));
    return m;
}

Tensor MlpVelocity::operator()(const Tensor& x, std::span<const double> t, std::span<const double> d) const {
    Tensor h = ops::concat({x, nn::sinusoidal_features(t, time_dims, x.dtype()),
                               nn::sinusoidal_features(d, time_dims, x.dtype())}, 1);
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
        h = ops::silu(layers[i](h));
    }
    return layers.back()(h);
}

VelocityFn MlpVelocity::fn() const {
    return [this](const Tensor& x, std::span<const double> t, std::span<const double> d) { return (*this)(x, t, d); };
}

nn::ParamList MlpVelocity::parameters() const {
    nn::ParamList out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        layers[i].collect("mlp" + std::to_string(i), out);
    }
    return out;
}

// ------------------------------------------------------- Legendre field

LegendreVelocity LegendreVelocity::create(std::size_t features, std::size_t degree) {
    if (degree == 0) {
        throw ConfigError("Legendre basis needs at least one term");
    }
    return LegendreVelocity{nn::Linear::zeros(degree * (features + 1), features), degree};
}

Tensor LegendreVelocity::operator()(const Tensor& x, std::span<const double> t, std::span<const double>) const {
    const std::size_t n = x.dim(0);
    std::vector<std::vector<double>> basis(degree, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const double s = 2.0 * t[i] - 1.0;
        double prev = 1.0, cur = s;
        basis[0][i] = 1.0;
        if (degree > 1) {
            basis[1][i] = s;
        }
        for (std::size_t k = 1; k + 1 < degree; ++k) {
            const double next =
                ((2.0 * static_cast<double>(k) + 1.0) * s * cur - static_cast<double>(k) * prev) /
                (static_cast<double>(k) + 1.0);
            prev = cur;
            cur = next;
            basis[k + 1][i] = next;
        }
    }
    std::vector<Tensor> parts;
    for (std::size_t k = 0; k < degree; ++k) {
        const Tensor p = Tensor::from_values({n, 1}, basis[k], x.dtype());
        parts.push_back(ops::mul(x, p));
        parts.push_back(p);
    }
    return map(ops::concat(parts, 1));
}

VelocityFn LegendreVelocity::fn() const {
    return [this](const Tensor& x, std::span<const double> t, std::span<const double> d) { return (*this)(x, t, d); };
}

nn::ParamList LegendreVelocity::parameters() const {
    nn::ParamList out;
    map.collect("legendre", out);
    return out;
}

// ------------------------------------------------------------ training

void train_vector_flow(const VelocityFn& net, const nn::ParamList& params, const DataSampler& data,
                       const VectorFlowConfig& cfg, const std::function<void(const VectorFlowLogRow&)>& log) {
    cfg.schedule.validate();
    if (cfg.batch == 0) {
        throw ConfigError("flow batch size must be positive");
    }
    nn::set_trainable(params);
    optim::AdamW opt(params, optim::AdamWConfig{});
    const optim::WarmupCosine schedule{cfg.lr, cfg.min_lr, cfg.warmup, std::max<std::size_t>(cfg.iterations, 1)};
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        Rng rng = make_stream(cfg.seed, "flow.batch", it);
        FlowBatch batch;
        batch.gt = data(rng, cfg.batch);
        batch.noise = Tensor::randn(batch.gt.shape(), rng, 1.0, batch.gt.dtype());
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            batch.steps.push_back(sample_t_d(cfg.schedule, cfg.fraction, rng));
        }
        opt.zero_grad();
        ShortcutLoss loss;
        {
            autograd::Graph graph;
            loss = shortcut_loss(net, batch, std::nullopt, cfg.schedule);
            autograd::backward(loss.total);
        }
        const double total = loss.total.item();
        if (!std::isfinite(total)) {
            throw NumericalError("flow loss diverged at iteration " + std::to_string(it));
        }
        if (cfg.grad_clip > 0.0) {
            optim::clip_grad_norm(params, cfg.grad_clip);
        }
        opt.step(schedule.at(it));
        if (log) {
            log({it, total, loss.fm, loss.sc});
        }
    }
}

// ------------------------------------------------------ Gaussian oracle

Tensor gaussian_velocity(const Tensor& x, std::span<const double> t, std::span<const double> mu, double sigma) {
    const std::size_t n = x.dim(0), f = x.dim(1);
    if (mu.size() != f || t.size() != n) {
        throw ShapeError("gaussian_velocity: mean or time count does not match the states");
    }
    const std::vector<double> xv = x.values();
    std::vector<double> out(n * f);
    const double s2 = sigma * sigma;
    for (std::size_t i = 0; i < n; ++i) {
        const double ti = t[i];
        const double gain = (ti * s2 - (1.0 - ti)) / ((1.0 - ti) * (1.0 - ti) + ti * ti * s2);
        for (std::size_t j = 0; j < f; ++j) {
            out[i * f + j] = mu[j] + gain * (xv[i * f + j] - ti * mu[j]);
        }
    }
    return Tensor::from_values({n, f}, out, x.dtype());
}

GaussianOracleReport gaussian_oracle_check(const GaussianOracleConfig& cfg) {
    const std::size_t f = cfg.mu.size();
    if (f == 0 || !(cfg.sigma > 0.0)) {
        throw ConfigError("Gaussian oracle needs a nonempty mean and positive sigma");
    }
    auto endpoint = [&](Rng& rng, std::size_t n) {
        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<double> v(n * f);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < f; ++j) {
                v[i * f + j] = cfg.mu[j] + cfg.sigma * normal(rng);
            }
        }
        return Tensor::from_values({n, f}, v);
    };
    LegendreVelocity model = LegendreVelocity::create(f, cfg.degree);
    VectorFlowConfig tc;
    tc.iterations = cfg.iterations;
    tc.batch = cfg.batch;
    tc.lr = cfg.lr;
    tc.min_lr = cfg.lr * 1e-3;
    tc.warmup = std::min<std::size_t>(50, cfg.iterations / 10);
    tc.fraction = 0.0;
    tc.seed = cfg.seed;
    train_vector_flow(model.fn(), model.parameters(), endpoint, tc);

    Rng rng = make_stream(cfg.seed, "flow.gaussian.eval");
    const std::size_t n = cfg.eval_samples;
    std::vector<double> t(n), half(n, 0.5);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (double& v : t) {
        v = unit(rng);
    }
    const Tensor x0 = Tensor::randn({n, f}, rng);
    const Tensor x_t = interpolate_rows(x0, endpoint(rng, n), t);
    autograd::NoGradGuard guard;
    const std::vector<double> learned = model(x_t, t, t).values();
    const std::vector<double> exact = gaussian_velocity(x_t, t, cfg.mu, cfg.sigma).values();
    const std::vector<double> mid = model(x_t, half, half).values();
    GaussianOracleReport report;
    double err = 0.0, ref = 0.0, mid_sq = 0.0;
    for (std::size_t i = 0; i < learned.size(); ++i) {
        const double diff = learned[i] - exact[i];
        err += diff * diff;
        ref += exact[i] * exact[i];
        mid_sq += mid[i] * mid[i];
        report.max_deviation = std::max(report.max_deviation, std::abs(diff));
    }
    report.rms_relative = std::sqrt(err / ref);
    report.midpoint_rms = std::sqrt(mid_sq / static_cast<double>(n));
    return report;
}

// --------------------------------------------------------------- 2-D toy

Tensor sample_toy_mixture(Rng& rng, std::size_t n, DType dtype) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> v(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = normal(rng), b = normal(rng);
        if (unit(rng) < 0.6) {
            v[2 * i] = 2.0 + 0.5 * a;
            v[2 * i + 1] = 1.0 + 0.3 * a + 0.4 * b;
        } else {
            v[2 * i] = -1.0 + 0.4 * a;
            v[2 * i + 1] = 2.5 + 0.3 * b;
        }
    }
    return Tensor::from_values({n, 2}, v, dtype);
}

MomentComparison compare_moments(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || a.dim(1) != b.dim(1) || b.rank() != 2) {
        throw ShapeError("compare_moments: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    const std::size_t f = a.dim(1);
    auto moments = [f](const Tensor& s, std::vector<double>& mean, std::vector<double>& cov) {
        const std::vector<double> v = s.values();
        const std::size_t n = s.dim(0);
        mean.assign(f, 0.0);
        cov.assign(f * f, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < f; ++j) {
                mean[j] += v[i * f + j] / static_cast<double>(n);
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < f; ++j) {
                for (std::size_t k = 0; k < f; ++k) {
                    cov[j * f + k] += (v[i * f + j] - mean[j]) * (v[i * f + k] - mean[k]) / static_cast<double>(n - 1);
                }
            }
        }
    };
    std::vector<double> ma, ca, mb, cb;
    moments(a, ma, ca);
    moments(b, mb, cb);
    double dm = 0.0, nm = 0.0, dc = 0.0, nc = 0.0;
    for (std::size_t j = 0; j < f; ++j) {
        dm += (ma[j] - mb[j]) * (ma[j] - mb[j]);
        nm += mb[j] * mb[j];
    }
    for (std::size_t j = 0; j < f * f; ++j) {
        dc += (ca[j] - cb[j]) * (ca[j] - cb[j]);
        nc += cb[j] * cb[j];
    }
    return {std::sqrt(dm / nm), std::sqrt(dc / nc)};
}

}  // namespace flowssc::flow
