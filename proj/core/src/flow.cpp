#include "flowssc/flow.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "flowssc/autograd.hpp"
#include "flowssc/error.hpp"
#include "flowssc/ops.hpp"

namespace flowssc::flow {

namespace {

Tensor column(std::span<const double> v, DType dtype) { return Tensor::from_values({v.size(), 1}, v, dtype); }

std::size_t valid_features(const Tensor& pred, const std::optional<Tensor>& mask) {
    if (!mask) {
        return pred.dim(1);
    }
    if (mask->rank() != 2 || mask->dim(0) != 1 || mask->dim(1) != pred.dim(1)) {
        throw ShapeError("loss mask " + shape_string(mask->shape()) + " does not match features " +
                         shape_string(pred.shape()));
    }
    std::size_t n = 0;
    for (double v : mask->values()) {
        n += v != 0.0;
    }
    return n;
}

// Sum of (optionally masked) squared errors.
Tensor squared_error_sum(const Tensor& pred, const Tensor& target, const std::optional<Tensor>& mask) {
    Tensor sq = ops::square(ops::sub(pred, target));
    if (mask) {
        sq = ops::mul(sq, *mask);
    }
    return ops::sum(sq);
}

void check_batch(const FlowBatch& batch) {
    if (batch.noise.rank() != 2 || batch.noise.shape() != batch.gt.shape() || batch.noise.dim(0) != batch.size()) {
        throw ShapeError("flow batch: noise " + shape_string(batch.noise.shape()) + ", gt " +
                         shape_string(batch.gt.shape()) + ", " + std::to_string(batch.size()) + " steps");
    }
}

}  // namespace

void StepSchedule::validate() const {
    if (base < 2 || !std::has_single_bit(base)) {
        throw ConfigError("step schedule base must be a power of two >= 2, got " + std::to_string(base));
    }
}

std::size_t StepSchedule::levels() const { return static_cast<std::size_t>(std::countr_zero(base)); }

bool StepSchedule::admits_steps(std::size_t n) const { return n >= 1 && n <= base && std::has_single_bit(n); }

TimeStep sample_t_d(const StepSchedule& schedule, double fraction, Rng& rng) {
    schedule.validate();
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ConfigError("self-consistency fraction must be in [0, 1]");
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    TimeStep s;
    if (unit(rng) < fraction) {
        // d = 2^-k for k in [1, levels]; t = j d for j in [0, 1/d - 2].
        const std::size_t k = 1 + uniform_index(rng, schedule.levels());
        const std::size_t inv = std::size_t{1} << k;
        const std::size_t j = uniform_index(rng, inv - 1);
        s.d = 1.0 / static_cast<double>(inv);
        s.t = static_cast<double>(j) / static_cast<double>(inv);
        s.consistency = true;
    } else {
        s.t = unit(rng);
    }
    return s;
}

Tensor interpolate(const Tensor& noise, const Tensor& gt, double t) {
    if (noise.shape() != gt.shape()) {
        throw ShapeError("interpolate: " + shape_string(noise.shape()) + " vs " + shape_string(gt.shape()));
    }
    if (t == 0.0) {
        return noise;
    }
    if (t == 1.0) {
        return gt;
    }
    return ops::add(ops::mul_scalar(noise, 1.0 - t), ops::mul_scalar(gt, t));
}

Tensor interpolate_rows(const Tensor& noise, const Tensor& gt, std::span<const double> t) {
    if (noise.shape() != gt.shape() || noise.rank() != 2 || noise.dim(0) != t.size()) {
        throw ShapeError("interpolate_rows: " + shape_string(noise.shape()) + " vs " + shape_string(gt.shape()));
    }
    std::vector<double> keep(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        keep[i] = 1.0 - t[i];
    }
    return ops::add(ops::mul(noise, column(keep, noise.dtype())), ops::mul(gt, column(t, gt.dtype())));
}

Tensor masked_mse(const Tensor& pred, const Tensor& target, const std::optional<Tensor>& mask) {
    if (pred.shape() != target.shape() || pred.rank() != 2) {
        throw ShapeError("masked_mse: " + shape_string(pred.shape()) + " vs " + shape_string(target.shape()));
    }
    const std::size_t valid = valid_features(pred, mask);
    if (valid == 0) {
        return Tensor::scalar(0.0, pred.dtype());
    }
    return ops::mul_scalar(squared_error_sum(pred, target, mask),
                           1.0 / static_cast<double>(pred.dim(0) * valid));
}

Tensor flow_matching_loss(const VelocityFn& net, const FlowBatch& batch, const std::optional<Tensor>& mask) {
    check_batch(batch);
    std::vector<double> t(batch.size()), d(batch.size(), 0.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch.steps[i].d != 0.0) {
            throw DataError("flow matching batch has a nonzero step size");
        }
        t[i] = batch.steps[i].t;
    }
    const Tensor x_t = interpolate_rows(batch.noise, batch.gt, t);
    return masked_mse(net(x_t, t, d), ops::sub(batch.gt, batch.noise), mask);
}

Tensor self_consistency_target(const VelocityFn& net, const Tensor& x_t, std::span<const double> t,
                               std::span<const double> d, const StepSchedule& schedule) {
    if (t.size() != d.size() || x_t.rank() != 2 || x_t.dim(0) != t.size()) {
        throw ShapeError("self-consistency target: state " + shape_string(x_t.shape()) + " with " +
                         std::to_string(t.size()) + " times");
    }
    std::vector<double> t_mid(t.size()), d_query(d.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        d_query[i] = schedule.query_d(d[i]);
        if (t[i] + 2.0 * d[i] > 1.0 + 1e-12) {
            throw DataError("self-consistency step leaves [0, 1]: t=" + std::to_string(t[i]) +
                            " d=" + std::to_string(d[i]));
        }
        t_mid[i] = t[i] + d[i];
    }
    autograd::NoGradGuard guard;
    const Tensor x = x_t.detach();
    const Tensor dcol = column(d, x.dtype());
    const Tensor s1 = net(x, t, d_query);
    const Tensor x_mid = ops::add(x, ops::mul(s1, dcol));
    const Tensor s2 = net(x_mid, t_mid, d_query);
    return ops::mul_scalar(ops::add(s1, s2), 0.5).detach();
}

ShortcutLoss shortcut_loss(const VelocityFn& net, const FlowBatch& batch, const std::optional<Tensor>& mask,
                           const StepSchedule& schedule, const VelocityFn& target_net) {
    check_batch(batch);
    std::vector<std::int32_t> fm_rows, sc_rows;
    std::vector<double> fm_t, sc_t, sc_d, sc_2d;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const TimeStep& s = batch.steps[i];
        if (s.consistency) {
            sc_rows.push_back(static_cast<std::int32_t>(i));
            sc_t.push_back(s.t);
            sc_d.push_back(s.d);
            sc_2d.push_back(2.0 * s.d);
        } else {
            fm_rows.push_back(static_cast<std::int32_t>(i));
            fm_t.push_back(s.t);
        }
    }
    const std::size_t valid = valid_features(batch.noise, mask);
    ShortcutLoss out;
    out.fm_rows = fm_rows.size();
    out.sc_rows = sc_rows.size();
    Tensor total = Tensor::scalar(0.0, batch.noise.dtype());
    if (!fm_rows.empty()) {
        const Tensor noise = ops::gather_rows(batch.noise, fm_rows);
        const Tensor gt = ops::gather_rows(batch.gt, fm_rows);
        const std::vector<double> zeros(fm_rows.size(), 0.0);
        const Tensor pred = net(interpolate_rows(noise, gt, fm_t), fm_t, zeros);
        const Tensor err = squared_error_sum(pred, ops::sub(gt, noise), mask);
        out.fm = err.item() / static_cast<double>(fm_rows.size() * std::max<std::size_t>(valid, 1));
        total = ops::add(total, err);
    }
    if (!sc_rows.empty()) {
        const Tensor x_t = interpolate_rows(ops::gather_rows(batch.noise, sc_rows),
                                            ops::gather_rows(batch.gt, sc_rows), sc_t);
        const Tensor target = self_consistency_target(target_net ? target_net : net, x_t, sc_t, sc_d, schedule);
        const Tensor err = squared_error_sum(net(x_t, sc_t, sc_2d), target, mask);
        out.sc = err.item() / static_cast<double>(sc_rows.size() * std::max<std::size_t>(valid, 1));
        total = ops::add(total, err);
    }
    out.total = valid == 0 ? Tensor::scalar(0.0, batch.noise.dtype())
                           : ops::mul_scalar(total, 1.0 / static_cast<double>(batch.size() * valid));
    return out;
}

Tensor integrate(const VelocityFn& net, const Tensor& x0, std::size_t n_steps, const StepSchedule& schedule) {
    schedule.validate();
    if (!schedule.admits_steps(n_steps)) {
        throw ConfigError(std::to_string(n_steps) + " steps are not on the dyadic grid of base " +
                          std::to_string(schedule.base));
    }
    autograd::NoGradGuard guard;
    const double d = 1.0 / static_cast<double>(n_steps);
    const std::vector<double> dv(x0.dim(0), schedule.query_d(d));
    Tensor x = x0.detach();
    for (std::size_t k = 0; k < n_steps; ++k) {
        const std::vector<double> tv(x0.dim(0), step_time(k, n_steps));
        x = ops::add(x, ops::mul_scalar(net(x, tv, dv), d));
    }
    return x;
}

Tensor sample(const VelocityFn& net, const Shape& shape, std::size_t n_steps, const StepSchedule& schedule,
              Rng& rng) {
    return integrate(net, Tensor::randn(shape, rng), n_steps, schedule);
}

Tensor euler_oracle(const VelocityFn& net, const Tensor& x0, std::size_t n_steps) {
    if (n_steps == 0) {
        throw ConfigError("Euler oracle needs at least one step");
    }
    autograd::NoGradGuard guard;
    const double h = 1.0 / static_cast<double>(n_steps);
    const std::vector<double> zeros(x0.dim(0), 0.0);
    Tensor x = x0.detach();
    for (std::size_t k = 0; k < n_steps; ++k) {
        const std::vector<double> tv(x0.dim(0), step_time(k, n_steps));
        x = ops::add(x, ops::mul_scalar(net(x, tv, zeros), h));
    }
    return x;
}

}  // namespace flowssc::flow
