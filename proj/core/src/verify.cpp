#include "flowssc/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "flowssc/autograd.hpp"
#include "flowssc/error.hpp"
#include "flowssc/ops.hpp"

namespace flowssc::verify {

namespace {

double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& inputs) {
    autograd::NoGradGuard guard;
    return f(inputs).item();
}

Check make_check(std::string name, double value, double threshold, std::string detail = {}) {
    return Check{std::move(name), value, threshold, value < threshold, std::move(detail)};
}

using V = std::vector<Tensor>;

struct PrimitiveCase {
    const char* name;
    std::function<double(Rng&)> trial;
};

std::size_t rows(Rng& r) { return 1 + uniform_index(r, 4); }
std::size_t cols(Rng& r) { return 2 + uniform_index(r, 4); }

double unary_case(Rng& r, double scale, Tensor (*op)(const Tensor&)) {
    Tensor x = Tensor::randn({rows(r), cols(r)}, r, scale), w = Tensor::randn(x.shape(), r);
    return grad_check([&](const V& p) { return project(op(p[0]), w); }, {x}).max_rel_err;
}

std::vector<PrimitiveCase> primitive_cases() {
    return {
        {"matmul",
         [](Rng& r) {
             const std::size_t m = rows(r), k = cols(r), n = cols(r);
             Tensor a = Tensor::randn({m, k}, r), b = Tensor::randn({k, n}, r), w = Tensor::randn({m, n}, r);
             return grad_check([&](const V& p) { return project(ops::matmul(p[0], p[1]), w); }, {a, b}).max_rel_err;
         }},
        {"softmax_lastdim", [](Rng& r) { return unary_case(r, 2.0, [](const Tensor& x) { return ops::softmax_lastdim(x); }); }},
        {"log_softmax_lastdim",
         [](Rng& r) { return unary_case(r, 2.0, [](const Tensor& x) { return ops::log_softmax_lastdim(x); }); }},
        {"layer_norm",
         [](Rng& r) {
             Tensor x = Tensor::randn({rows(r), cols(r) + 1}, r, 2.0), w = Tensor::randn(x.shape(), r);
             return grad_check([&](const V& p) { return project(ops::layer_norm(p[0]), w); }, {x}).max_rel_err;
         }},
        {"gelu", [](Rng& r) { return unary_case(r, 2.0, [](const Tensor& x) { return ops::gelu(x); }); }},
        {"silu", [](Rng& r) { return unary_case(r, 2.0, [](const Tensor& x) { return ops::silu(x); }); }},
        {"mul_div_broadcast",
         [](Rng& r) {
             const std::size_t m = rows(r), n = cols(r);
             Tensor a = Tensor::randn({m, n}, r), b = Tensor::uniform({n}, r, 0.5, 2.0), w = Tensor::randn({m, n}, r);
             return grad_check(
                        [&](const V& p) { return project(ops::div(ops::mul(p[0], p[1]), ops::add(p[1], p[0])), w); },
                        {a, ops::add_scalar(b, 3.0)})
                 .max_rel_err;
         }},
        {"log_exp_tanh_sigmoid",
         [](Rng& r) {
             Tensor x = Tensor::uniform({rows(r), cols(r)}, r, 0.2, 2.0), w = Tensor::randn(x.shape(), r);
             return grad_check(
                        [&](const V& p) {
                            return project(
                                ops::add(ops::log(p[0]), ops::mul(ops::tanh(p[0]), ops::sigmoid(ops::exp(p[0])))), w);
                        },
                        {x})
                 .max_rel_err;
         }},
        {"sum_axis_narrow_concat",
         [](Rng& r) {
             Tensor x = Tensor::randn({3, rows(r) + 1, cols(r)}, r);
             const std::size_t axis = uniform_index(r, 3);
             Tensor w = Tensor::randn(ops::sum_axis(x, axis).shape(), r);
             Tensor w2 = Tensor::randn(x.shape(), r);
             return grad_check(
                        [&](const V& p) {
                            Tensor a = ops::narrow(p[0], axis, 0, 1);
                            Tensor b = ops::narrow(p[0], axis, 1, p[0].dim(axis) - 1);
                            Tensor joined = ops::concat({ops::square(a), b}, axis);
                            return ops::add(project(ops::mean_axis(joined, axis), w), project(joined, w2));
                        },
                        {x})
                 .max_rel_err;
         }},
        {"transpose_reshape_gather",
         [](Rng& r) {
             Tensor table = Tensor::randn({4, cols(r)}, r);
             const std::vector<std::int32_t> idx{0, 3, 3, 1};
             Tensor w = Tensor::randn({table.dim(1), 4}, r);
             return grad_check(
                        [&](const V& p) {
                            Tensor g = ops::gather_rows(p[0], idx);
                            return project(ops::reshape(ops::transpose(g), {table.dim(1), 4}), w);
                        },
                        {table})
                 .max_rel_err;
         }},
        {"index_select_flat",
         [](Rng& r) {
             Tensor x = Tensor::randn({2, 3}, r);
             const std::vector<std::size_t> idx{5, 0, 0, 2, 4};
             Tensor w = Tensor::randn({5}, r);
             return grad_check([&](const V& p) { return project(ops::index_select_flat(p[0], idx, {5}), w); }, {x})
                 .max_rel_err;
         }},
        {"bilinear_sample_2d",
         [](Rng& r) {
             Tensor plane = Tensor::randn({rows(r) + 1, cols(r), 3}, r);
             Tensor uv = Tensor::uniform({6, 2}, r, -0.1, 1.1);
             Tensor w = Tensor::randn({6, 3}, r);
             return grad_check([&](const V& p) { return project(ops::bilinear_sample_2d(p[0], uv), w); }, {plane})
                 .max_rel_err;
         }},
        {"conv3d",
         [](Rng& r) {
             const std::size_t stride = 1 + uniform_index(r, 2);
             Tensor x = Tensor::randn({3, 4, 2, 2}, r);
             Tensor k = Tensor::randn({3, 3, 3, 2, 3}, r, 0.3), b = Tensor::randn({3}, r);
             Tensor w = Tensor::randn(ops::conv3d(x, k, b, stride, 1).shape(), r);
             return grad_check([&](const V& p) { return project(ops::conv3d(p[0], p[1], p[2], stride, 1), w); },
                               {x, k, b})
                 .max_rel_err;
         }},
        {"cross_entropy",
         [](Rng& r) {
             const std::size_t n = rows(r) + 1, k = cols(r);
             std::vector<std::int32_t> labels(n);
             for (auto& l : labels) {
                 l = static_cast<std::int32_t>(uniform_index(r, k));
             }
             labels[0] = -1;
             Tensor logits = Tensor::randn({n, k}, r, 2.0);
             Tensor weights = Tensor::uniform({k}, r, 0.5, 2.0);
             return grad_check([&](const V& p) { return ops::cross_entropy(p[0], labels, weights, -1); }, {logits})
                 .max_rel_err;
         }},
    };
}

dit::DiTConfig micro_dit() {
    dit::DiTConfig cfg;
    cfg.planes = {4, 4, 2, 2};
    cfg.patch = 2;
    cfg.embed = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.freq_dims = 8;
    return cfg;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double h, std::optional<std::size_t> sample,
                           Rng* rng) {
    if (sample && !rng) {
        throw ConfigError("sampled gradient check needs an rng");
    }
    for (auto& t : inputs) {
        t.zero_grad();
        t.set_requires_grad(true);
    }
    {
        autograd::Graph graph;
        autograd::backward(f(inputs));
    }
    GradCheckResult result;
    for (auto& t : inputs) {
        const std::vector<double> analytic = t.has_grad() ? t.grad().values() : std::vector<double>(t.numel(), 0.0);
        std::vector<std::size_t> coords(t.numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (sample && *sample < coords.size()) {
            for (std::size_t i = 0; i < *sample; ++i) {
                std::swap(coords[i], coords[i + uniform_index(*rng, coords.size() - i)]);
            }
            coords.resize(*sample);
        }
        double scale = 0.0, worst = 0.0;
        for (std::size_t i : coords) {
            const double orig = t.at(i);
            t.set_flat(i, orig + h);
            const double up = eval_scalar(f, inputs);
            t.set_flat(i, orig - h);
            const double down = eval_scalar(f, inputs);
            t.set_flat(i, orig);
            const double numeric = (up - down) / (2.0 * h);
            scale = std::max(scale, std::abs(numeric));
            worst = std::max(worst, std::abs(numeric - analytic[i]));
        }
        result.max_abs_err = std::max(result.max_abs_err, worst);
        result.max_rel_err = std::max(result.max_rel_err, scale > 1e-12 ? worst / scale : worst);
        t.zero_grad();
    }
    return result;
}

Tensor project(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

std::string format(const Check& c) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "%s %s %.4g (%s %.4g)", c.pass ? "PASS" : "FAIL", c.name.c_str(), c.value,
                  c.expect_fail ? "negative control, expect >=" : "threshold <", c.threshold);
    return c.detail.empty() ? std::string(buf) : std::string(buf) + " " + c.detail;
}

Check expect_failure(Check c) {
    c.expect_fail = true;
    c.pass = !(c.value < c.threshold);
    return c;
}

bool all_pass(std::span<const Check> checks) {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

std::vector<Check> primitive_gradient_checks(std::size_t trials, std::uint64_t seed, double threshold) {
    DTypeScope f64(DType::f64);
    std::vector<Check> out;
    for (const auto& c : primitive_cases()) {
        double worst = 0.0;
        for (std::size_t trial = 0; trial < trials; ++trial) {
            Rng r = make_stream(seed, std::string("verify.grad.") + c.name, trial);
            worst = std::max(worst, c.trial(r));
        }
        out.push_back(make_check(std::string("grad.") + c.name, worst, threshold,
                                 "(" + std::to_string(trials) + " trials)"));
    }
    return out;
}

Check dit_gradient_check(std::size_t trials, std::uint64_t seed, double threshold, std::size_t coords) {
    DTypeScope f64(DType::f64);
    const dit::DiTConfig cfg = micro_dit();
    const dit::ShortcutDiT net = dit::ShortcutDiT::create(cfg, seed);
    const auto params = net.parameters();
    const Shape plane_shape{cfg.planes.rows(), cfg.planes.c};
    double worst = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Rng rng = make_stream(seed, "verify.grad.dit", trial);
        for (const auto& p : params) {
            Tensor t = p.tensor;
            t.assign(Tensor::randn(t.shape(), rng, 0.3, t.dtype()));
        }
        const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const double d = std::ldexp(1.0, -static_cast<int>(uniform_index(rng, 8)));
        const Tensor w = Tensor::randn(plane_shape, rng);
        std::vector<Tensor> inputs{Tensor::randn(plane_shape, rng), Tensor::randn(plane_shape, rng)};
        for (const auto& p : params) {
            inputs.push_back(p.tensor);
        }
        auto f = [&](const std::vector<Tensor>& in) {
            return project(net.forward(Triplane(cfg.planes, in[0]), Triplane(cfg.planes, in[1]), t, d).data(), w);
        };
        worst = std::max(worst, grad_check(f, inputs, 1e-5, coords, &rng).max_rel_err);
    }
    return make_check("grad.dit_end_to_end", worst, threshold,
                      "(" + std::to_string(trials) + " trials, " + std::to_string(params.size() + 2) + " tensors)");
}

Check gaussian_check(const flow::GaussianOracleConfig& cfg, double threshold) {
    const flow::GaussianOracleReport r = flow::gaussian_oracle_check(cfg);
    char detail[96];
    std::snprintf(detail, sizeof detail, "(max deviation %.3g, %zu iterations)", r.max_deviation, cfg.iterations);
    return make_check("gaussian_velocity_rms", r.rms_relative, threshold, detail);
}

std::vector<Check> toy_one_step_checks(const ToyConfig& cfg) {
    const flow::MlpVelocity net = flow::MlpVelocity::create(2, cfg.hidden, cfg.depth, cfg.seed);
    flow::VectorFlowConfig vc;
    vc.iterations = cfg.iterations;
    vc.lr = cfg.lr;
    vc.seed = cfg.seed;
    flow::train_vector_flow(net.fn(), net.parameters(),
                            [](Rng& r, std::size_t n) { return flow::sample_toy_mixture(r, n); }, vc);
    Rng rng = make_stream(cfg.seed, "verify.toy.noise");
    const Tensor x0 = Tensor::randn({cfg.samples, 2}, rng);
    const Tensor one = flow::integrate(net.fn(), x0, 1, vc.schedule);
    const Tensor euler = flow::euler_oracle(net.fn(), x0, cfg.euler_steps);
    const flow::MomentComparison m = flow::compare_moments(one, euler);
    const std::string detail = "(1 step vs " + std::to_string(cfg.euler_steps) + "-step Euler, " +
                               std::to_string(cfg.samples) + " samples)";
    return {make_check("toy_one_step_mean", m.mean_rel, 0.05, detail),
            make_check("toy_one_step_cov", m.cov_rel, 0.10, detail)};
}

dit::ShortcutDiT random_dit(const dit::DiTConfig& cfg, std::uint64_t seed, double stddev) {
    dit::ShortcutDiT net = dit::ShortcutDiT::create(cfg, seed);
    Rng rng = make_stream(seed, "verify.random_dit");
    for (const auto& p : net.parameters()) {
        Tensor t = p.tensor;
        t.assign(Tensor::randn(t.shape(), rng, stddev, t.dtype()));
    }
    return net;
}

Check consistency_check(const std::string& name, const dit::ShortcutDiT& net,
                        std::span<const refine::LatentPair> pairs, const flow::StepSchedule& schedule,
                        std::size_t samples, std::uint64_t seed, double threshold) {
    const refine::ConsistencyResidual r = refine::consistency_residual(net, pairs, schedule, samples, seed);
    char detail[96];
    std::snprintf(detail, sizeof detail, "(residual %.4g, energy %.4g, %zu samples)", r.residual, r.energy, samples);
    return make_check(name, r.ratio(), threshold, detail);
}

}  // namespace flowssc::verify
